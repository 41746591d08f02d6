//! A small string- and comment-aware scanner for Python source.
//!
//! This is not a tokenizer for the full language. It recognises exactly what
//! the call extractor and the corpus counter need: identifiers, string
//! literals (single, double, triple-quoted, with backslash escapes), `#`
//! comments, newlines, whitespace runs and single punctuation characters.
//!
//! All offsets are character (Unicode scalar) indices into the scanned text.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Ident,
    Str,
    Comment,
    Newline,
    Space,
    Punct(char),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn is_trivia(&self) -> bool {
        matches!(
            self.kind,
            TokenKind::Space | TokenKind::Newline | TokenKind::Comment
        )
    }
}

pub fn is_ident_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

pub fn is_ident_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

/// True if `s` is a nonempty identifier: letters, digits, underscore, not
/// starting with a digit.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if is_ident_start(c) => chars.all(is_ident_continue),
        _ => false,
    }
}

/// Scans `chars` left to right in a single pass. An unterminated triple-quoted
/// string runs to the end of the input; other unterminated strings stop at the
/// end of their line.
pub fn scan(chars: &[char]) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut i = 0;
    let n = chars.len();
    while i < n {
        let c = chars[i];
        let start = i;
        let kind = if c == '\n' {
            i += 1;
            TokenKind::Newline
        } else if c.is_whitespace() {
            while i < n && chars[i].is_whitespace() && chars[i] != '\n' {
                i += 1;
            }
            TokenKind::Space
        } else if c == '#' {
            while i < n && chars[i] != '\n' {
                i += 1;
            }
            TokenKind::Comment
        } else if c == '\'' || c == '"' {
            i = skip_string(chars, i);
            TokenKind::Str
        } else if is_ident_start(c) {
            while i < n && is_ident_continue(chars[i]) {
                i += 1;
            }
            // String prefixes such as r'', b"", f'''...''' glue onto the literal.
            if i < n && (chars[i] == '\'' || chars[i] == '"') && is_string_prefix(&chars[start..i])
            {
                i = skip_string(chars, i);
                TokenKind::Str
            } else {
                TokenKind::Ident
            }
        } else {
            i += 1;
            TokenKind::Punct(c)
        };
        tokens.push(Token {
            kind,
            start,
            end: i,
        });
    }
    tokens
}

fn is_string_prefix(prefix: &[char]) -> bool {
    prefix.len() <= 2
        && prefix
            .iter()
            .all(|c| matches!(c.to_ascii_lowercase(), 'r' | 'b' | 'u' | 'f'))
}

/// Returns the index just past the string literal opening at `i`.
fn skip_string(chars: &[char], i: usize) -> usize {
    let n = chars.len();
    let quote = chars[i];
    let triple = i + 2 < n && chars[i + 1] == quote && chars[i + 2] == quote;
    let mut j = if triple { i + 3 } else { i + 1 };
    while j < n {
        let c = chars[j];
        if c == '\\' {
            j += 2;
            continue;
        }
        if triple {
            if c == quote && j + 2 < n && chars[j + 1] == quote && chars[j + 2] == quote {
                return j + 3;
            }
        } else if c == quote {
            return j + 1;
        } else if c == '\n' {
            // single-quoted strings cannot span lines
            return j;
        }
        j += 1;
    }
    n
}
