//! Line-oriented block syntax shared by `.dproc` and `.world` files.
//!
//! Every non-blank line is a statement: one or more words, optionally ending
//! with `{` to open a block. A line holding only `}` closes the innermost
//! block. Words are bare runs of characters or double-quoted strings.

use super::diag::Diags;

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Word {
    pub text: String,
    pub quoted: bool,
    pub line: usize,
    pub col: usize,
    /// Source width in characters, quotes included.
    pub len: usize,
}

impl Word {
    pub fn at(&self) -> (usize, usize, usize) {
        (self.line, self.col, self.len)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub words: Vec<Word>,
    pub body: Option<Vec<Node>>,
}

impl Node {
    pub fn keyword(&self) -> &str {
        &self.words[0].text
    }

    pub fn head(&self) -> &Word {
        &self.words[0]
    }

    pub fn args(&self) -> &[Word] {
        &self.words[1..]
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Token {
    Word(Word),
    Open(usize),
    Close(usize),
}

fn lex_line(line_no: usize, text: &str, diags: &mut Diags) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        match c {
            c if c.is_whitespace() => i += 1,
            '#' => break,
            '{' => {
                tokens.push(Token::Open(col));
                i += 1;
            }
            '}' => {
                tokens.push(Token::Close(col));
                i += 1;
            }
            '"' => {
                let start = i;
                i += 1;
                let mut s = String::new();
                let mut closed = false;
                while i < chars.len() {
                    match chars[i] {
                        '"' => {
                            closed = true;
                            i += 1;
                            break;
                        }
                        '\\' if i + 1 < chars.len() => {
                            match chars[i + 1] {
                                '"' => s.push('"'),
                                '\\' => s.push('\\'),
                                'n' => s.push('\n'),
                                't' => s.push('\t'),
                                other => {
                                    diags.error((line_no, i + 1, 2), format!("unknown escape \\{other}"));
                                    s.push(other);
                                }
                            }
                            i += 2;
                        }
                        ch => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                if !closed {
                    diags.error((line_no, start + 1, chars.len() - start), "unterminated string");
                }
                tokens.push(Token::Word(Word {
                    text: s,
                    quoted: true,
                    line: line_no,
                    col: start + 1,
                    len: i - start,
                }));
            }
            _ => {
                let start = i;
                while i < chars.len() && !chars[i].is_whitespace() && !matches!(chars[i], '{' | '}' | '"' | '#') {
                    i += 1;
                }
                tokens.push(Token::Word(Word {
                    text: chars[start..i].iter().collect(),
                    quoted: false,
                    line: line_no,
                    col: start + 1,
                    len: i - start,
                }));
            }
        }
    }
    tokens
}

struct Frame {
    opener: Word,
    words: Vec<Word>,
    nodes: Vec<Node>,
}

/// Parses `source` into a forest of statements. Structural problems are
/// reported into `diags`; the returned tree holds whatever could be
/// recovered.
pub(crate) fn parse_tree(source: &str, diags: &mut Diags) -> Vec<Node> {
    let mut root: Vec<Node> = Vec::new();
    let mut stack: Vec<Frame> = Vec::new();

    for (idx, raw) in source.split('\n').enumerate() {
        let line_no = idx + 1;
        let text = raw.strip_suffix('\r').unwrap_or(raw);
        let tokens = lex_line(line_no, text, diags);
        if tokens.is_empty() {
            continue;
        }
        let mut words = Vec::new();
        let mut opens = false;
        let mut closes = false;
        let n = tokens.len();
        for (k, tok) in tokens.into_iter().enumerate() {
            match tok {
                Token::Word(w) => words.push(w),
                Token::Open(col) => {
                    if k + 1 != n {
                        diags.error((line_no, col, 1), "`{` must end its line");
                    } else if words.is_empty() {
                        diags.error((line_no, col, 1), "block needs a keyword before `{`");
                    } else {
                        opens = true;
                    }
                }
                Token::Close(col) => {
                    if n != 1 {
                        diags.error((line_no, col, 1), "`}` must stand alone on its line");
                    } else {
                        closes = true;
                    }
                }
            }
        }
        if closes {
            match stack.pop() {
                Some(frame) => {
                    let node = Node {
                        words: frame.words,
                        body: Some(frame.nodes),
                    };
                    match stack.last_mut() {
                        Some(parent) => parent.nodes.push(node),
                        None => root.push(node),
                    }
                }
                None => diags.error((line_no, 1, 1), "unmatched `}`"),
            }
            continue;
        }
        if words.is_empty() {
            continue;
        }
        if opens {
            stack.push(Frame {
                opener: words[0].clone(),
                words,
                nodes: Vec::new(),
            });
        } else {
            let node = Node { words, body: None };
            match stack.last_mut() {
                Some(parent) => parent.nodes.push(node),
                None => root.push(node),
            }
        }
    }

    // Unclosed blocks are reported at their opening keyword and kept.
    while let Some(frame) = stack.pop() {
        diags.error(
            frame.opener.at(),
            format!("block `{}` is never closed", frame.opener.text),
        );
        let node = Node {
            words: frame.words,
            body: Some(frame.nodes),
        };
        match stack.last_mut() {
            Some(parent) => parent.nodes.push(node),
            None => root.push(node),
        }
    }
    root
}

/// Whether `s` can be written without quotes and read back unchanged.
pub(crate) fn is_bare(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| !c.is_whitespace() && !matches!(c, '{' | '}' | '"' | '#' | '\\'))
}

pub(crate) fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Bare when possible, quoted otherwise.
pub(crate) fn word(s: &str) -> String {
    if is_bare(s) {
        s.to_owned()
    } else {
        quote(s)
    }
}
