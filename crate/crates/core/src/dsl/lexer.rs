//! Tokenizer for extractor sources.

use super::{Span, SyntaxError};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Let,
    Return,
    If,
    Then,
    Else,
    True,
    False,
    Ident(String),
    Number(f64),
    Str(String),
    Plus,
    Minus,
    Star,
    Slash,
    Assign,
    EqEq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    LParen,
    RParen,
    Comma,
    Semi,
    Dot,
    Eof,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::Let => "`let`".into(),
            Tok::Return => "`return`".into(),
            Tok::If => "`if`".into(),
            Tok::Then => "`then`".into(),
            Tok::Else => "`else`".into(),
            Tok::True => "`true`".into(),
            Tok::False => "`false`".into(),
            Tok::Ident(name) => format!("identifier `{name}`"),
            Tok::Number(n) => format!("number `{n}`"),
            Tok::Str(_) => "string literal".into(),
            Tok::Assign => "`=`".into(),
            Tok::EqEq => "`==`".into(),
            Tok::Ne => "`!=`".into(),
            Tok::Lt => "`<`".into(),
            Tok::Le => "`<=`".into(),
            Tok::Gt => "`>`".into(),
            Tok::Ge => "`>=`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Dot => "`.`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub span: Span,
}

pub(crate) fn lex(source: &str) -> Result<Vec<Token>, SyntaxError> {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut line = 1;
    let mut col = 1;

    macro_rules! push {
        ($tok:expr, $span:expr) => {
            tokens.push(Token { tok: $tok, span: $span })
        };
    }

    while i < chars.len() {
        let ch = chars[i];
        let span = Span { line, col };
        match ch {
            '\n' => {
                line += 1;
                col = 1;
                i += 1;
            }
            c if c.is_whitespace() => {
                col += 1;
                i += 1;
            }
            '+' => { push!(Tok::Plus, span); i += 1; col += 1; }
            '-' => { push!(Tok::Minus, span); i += 1; col += 1; }
            '*' => { push!(Tok::Star, span); i += 1; col += 1; }
            '/' => { push!(Tok::Slash, span); i += 1; col += 1; }
            '(' => { push!(Tok::LParen, span); i += 1; col += 1; }
            ')' => { push!(Tok::RParen, span); i += 1; col += 1; }
            ',' => { push!(Tok::Comma, span); i += 1; col += 1; }
            ';' => { push!(Tok::Semi, span); i += 1; col += 1; }
            '.' => { push!(Tok::Dot, span); i += 1; col += 1; }
            '=' => {
                if chars.get(i + 1) == Some(&'=') {
                    push!(Tok::EqEq, span);
                    i += 2;
                    col += 2;
                } else {
                    push!(Tok::Assign, span);
                    i += 1;
                    col += 1;
                }
            }
            '!' => {
                if chars.get(i + 1) == Some(&'=') {
                    push!(Tok::Ne, span);
                    i += 2;
                    col += 2;
                } else {
                    return Err(SyntaxError { span, message: "unexpected `!`".into() });
                }
            }
            '<' => {
                if chars.get(i + 1) == Some(&'=') {
                    push!(Tok::Le, span);
                    i += 2;
                    col += 2;
                } else {
                    push!(Tok::Lt, span);
                    i += 1;
                    col += 1;
                }
            }
            '>' => {
                if chars.get(i + 1) == Some(&'=') {
                    push!(Tok::Ge, span);
                    i += 2;
                    col += 2;
                } else {
                    push!(Tok::Gt, span);
                    i += 1;
                    col += 1;
                }
            }
            '"' => {
                let mut value = String::new();
                let mut j = i + 1;
                let mut consumed = 1;
                loop {
                    match chars.get(j) {
                        None | Some('\n') => {
                            return Err(SyntaxError {
                                span,
                                message: "unterminated string literal".into(),
                            });
                        }
                        Some('"') => {
                            j += 1;
                            consumed += 1;
                            break;
                        }
                        Some('\\') => {
                            let escaped = match chars.get(j + 1) {
                                Some('"') => '"',
                                Some('\\') => '\\',
                                Some('n') => '\n',
                                Some('t') => '\t',
                                other => {
                                    return Err(SyntaxError {
                                        span,
                                        message: format!(
                                            "unknown escape `\\{}`",
                                            other.map(|c| c.to_string()).unwrap_or_default()
                                        ),
                                    });
                                }
                            };
                            value.push(escaped);
                            j += 2;
                            consumed += 2;
                        }
                        Some(c) => {
                            value.push(*c);
                            j += 1;
                            consumed += 1;
                        }
                    }
                }
                push!(Tok::Str(value), span);
                i = j;
                col += consumed;
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if chars.get(i) == Some(&'.')
                    && chars.get(i + 1).map(|c| c.is_ascii_digit()).unwrap_or(false)
                {
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if matches!(chars.get(i), Some('e') | Some('E')) {
                    let mut j = i + 1;
                    if matches!(chars.get(j), Some('+') | Some('-')) {
                        j += 1;
                    }
                    if chars.get(j).map(|c| c.is_ascii_digit()).unwrap_or(false) {
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let value: f64 = text.parse().map_err(|_| SyntaxError {
                    span,
                    message: format!("malformed number `{text}`"),
                })?;
                push!(Tok::Number(value), span);
                col += i - start;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let tok = match word.as_str() {
                    "let" => Tok::Let,
                    "return" => Tok::Return,
                    "if" => Tok::If,
                    "then" => Tok::Then,
                    "else" => Tok::Else,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    _ => Tok::Ident(word),
                };
                push!(tok, span);
                col += i - start;
            }
            other => {
                return Err(SyntaxError {
                    span,
                    message: format!("unexpected character `{other}`"),
                });
            }
        }
    }
    tokens.push(Token { tok: Tok::Eof, span: Span { line, col } });
    Ok(tokens)
}
