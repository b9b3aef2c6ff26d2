use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Error,
    Warning,
}

/// 1-based line and column (counted in characters), plus a length in
/// characters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceSpan {
    pub file: PathBuf,
    pub line: usize,
    pub column: usize,
    pub length: usize,
}

impl SourceSpan {
    /// Whether the span fits inside `source`. A zero-length span may sit one
    /// column past the end of its line, and line 1 column 1 is always valid.
    pub fn is_within(&self, source: &str) -> bool {
        if self.line == 0 || self.column == 0 {
            return false;
        }
        let lines: Vec<&str> = source.split('\n').collect();
        let Some(text) = lines.get(self.line - 1) else {
            return false;
        };
        let width = text.trim_end_matches('\r').chars().count();
        if self.length == 0 {
            self.column <= width + 1
        } else {
            self.column - 1 + self.length <= width
        }
    }
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.file.display(), self.line, self.column)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseDiagnostic {
    pub severity: Severity,
    pub message: String,
    pub span: SourceSpan,
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}: {sev}: {}", self.span, self.message)
    }
}

/// Accumulates diagnostics for one source file.
#[derive(Debug)]
pub(crate) struct Diags {
    file: PathBuf,
    pub(crate) list: Vec<ParseDiagnostic>,
}

impl Diags {
    pub(crate) fn new(file: &Path) -> Self {
        Self {
            file: file.to_path_buf(),
            list: Vec::new(),
        }
    }

    pub(crate) fn span(&self, line: usize, column: usize, length: usize) -> SourceSpan {
        SourceSpan {
            file: self.file.clone(),
            line,
            column,
            length,
        }
    }

    pub(crate) fn push(&mut self, severity: Severity, at: (usize, usize, usize), message: impl Into<String>) {
        let span = self.span(at.0, at.1, at.2);
        self.list.push(ParseDiagnostic {
            severity,
            message: message.into(),
            span,
        });
    }

    pub(crate) fn error(&mut self, at: (usize, usize, usize), message: impl Into<String>) {
        self.push(Severity::Error, at, message);
    }

    pub(crate) fn warning(&mut self, at: (usize, usize, usize), message: impl Into<String>) {
        self.push(Severity::Warning, at, message);
    }

    pub(crate) fn has_errors(&self) -> bool {
        self.list.iter().any(|d| d.severity == Severity::Error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(line: usize, column: usize, length: usize) -> SourceSpan {
        SourceSpan {
            file: PathBuf::from("<t>"),
            line,
            column,
            length,
        }
    }

    #[test]
    fn bounds() {
        let src = "abc\nde";
        assert!(span(1, 1, 3).is_within(src));
        assert!(span(1, 4, 0).is_within(src));
        assert!(!span(1, 2, 3).is_within(src));
        assert!(span(2, 1, 2).is_within(src));
        assert!(!span(3, 1, 0).is_within(src));
        assert!(span(1, 1, 0).is_within(""));
        assert!(!span(0, 1, 0).is_within(src));
    }
}
