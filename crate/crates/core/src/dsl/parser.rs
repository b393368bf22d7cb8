//! Recursive-descent parser for extractor programs.
//!
//! Grammar:
//!
//! ```text
//! program := {binding} "return" expr [";"]
//! binding := "let" IDENT "=" (call | expr) ";"
//! call    := TOOLNAME "(" [arg {"," arg}] ")"        TOOLNAME is dotted
//! arg     := literal | IDENT
//! expr    := "if" expr "then" expr "else" expr | comparison
//! comparison := additive [("=="|"!="|"<"|"<="|">"|">=") additive]
//! additive := multiplicative {("+"|"-") multiplicative}
//! multiplicative := unary {("*"|"/") unary}
//! unary   := "-" unary | primary
//! primary := NUMBER | STRING | "true" | "false" | "(" expr ")"
//!          | AGG "(" path ")" | "contains" "(" path "," STRING ")" | path
//! path    := IDENT {"." IDENT}
//! ```

use super::lexer::{lex, Tok, Token};
use super::{
    AggFn, BinOp, Binding, BindingRhs, CallArg, Expr, ExtractorProgram, PathExpr, Span,
    SyntaxError,
};

/// Parses a source string into a program, or reports syntax errors.
pub fn parse(source: &str) -> Result<ExtractorProgram, Vec<SyntaxError>> {
    let tokens = lex(source).map_err(|e| vec![e])?;
    let mut parser = Parser { tokens, pos: 0 };
    parser.program(source).map_err(|e| vec![e])
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_at(&self, offset: usize) -> &Tok {
        let idx = (self.pos + offset).min(self.tokens.len() - 1);
        &self.tokens[idx].tok
    }

    fn span(&self) -> Span {
        self.tokens[self.pos].span
    }

    fn advance(&mut self) -> Token {
        let token = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        token
    }

    fn expect(&mut self, want: Tok, context: &str) -> Result<Token, SyntaxError> {
        if *self.peek() == want {
            Ok(self.advance())
        } else {
            Err(self.error(format!(
                "expected {} {context}, found {}",
                want.describe(),
                self.peek().describe()
            )))
        }
    }

    fn error(&self, message: String) -> SyntaxError {
        SyntaxError { span: self.span(), message }
    }

    fn program(&mut self, source: &str) -> Result<ExtractorProgram, SyntaxError> {
        let mut bindings = Vec::new();
        while *self.peek() == Tok::Let {
            bindings.push(self.binding()?);
        }
        if *self.peek() != Tok::Return {
            return Err(self.error(format!(
                "missing return: expected `let` or `return`, found {}",
                self.peek().describe()
            )));
        }
        self.advance();
        let ret = self.expr()?;
        if *self.peek() == Tok::Semi {
            self.advance();
        }
        if *self.peek() != Tok::Eof {
            return Err(self.error(format!(
                "unexpected {} after the return expression",
                self.peek().describe()
            )));
        }
        Ok(ExtractorProgram {
            source: source.to_string(),
            bindings,
            ret,
            declared_output_type: None,
        })
    }

    fn binding(&mut self) -> Result<Binding, SyntaxError> {
        let span = self.span();
        self.expect(Tok::Let, "to start a binding")?;
        let name = self.ident("after `let`")?;
        self.expect(Tok::Assign, "after the binding name")?;
        let rhs = if self.at_call() {
            self.call()?
        } else {
            BindingRhs::Expr(self.expr()?)
        };
        self.expect(Tok::Semi, "to end the binding")?;
        Ok(Binding { name, rhs, span })
    }

    /// A call starts with a dotted name followed by `(`: IDENT (. IDENT)+ (.
    fn at_call(&self) -> bool {
        if !matches!(self.peek(), Tok::Ident(_)) {
            return false;
        }
        let mut offset = 1;
        let mut dotted = false;
        loop {
            match (self.peek_at(offset), self.peek_at(offset + 1)) {
                (Tok::Dot, Tok::Ident(_)) => {
                    dotted = true;
                    offset += 2;
                }
                (Tok::LParen, _) => return dotted,
                _ => return false,
            }
        }
    }

    fn call(&mut self) -> Result<BindingRhs, SyntaxError> {
        let span = self.span();
        let mut tool = self.ident("as a tool name")?;
        while *self.peek() == Tok::Dot {
            self.advance();
            let part = self.ident("in the tool name")?;
            tool.push('.');
            tool.push_str(&part);
        }
        self.expect(Tok::LParen, "after the tool name")?;
        let mut args = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                args.push(self.call_arg()?);
                if *self.peek() == Tok::Comma {
                    self.advance();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen, "to close the argument list")?;
        Ok(BindingRhs::Call { tool, args, span })
    }

    fn call_arg(&mut self) -> Result<CallArg, SyntaxError> {
        let span = self.span();
        match self.peek().clone() {
            Tok::Number(n) => {
                self.advance();
                Ok(CallArg::Num(n))
            }
            Tok::Str(s) => {
                self.advance();
                Ok(CallArg::Str(s))
            }
            Tok::True => {
                self.advance();
                Ok(CallArg::Bool(true))
            }
            Tok::False => {
                self.advance();
                Ok(CallArg::Bool(false))
            }
            Tok::Ident(name) => {
                self.advance();
                Ok(CallArg::Ident { name, span })
            }
            other => Err(self.error(format!(
                "tool arguments must be literals or identifiers, found {}",
                other.describe()
            ))),
        }
    }

    fn ident(&mut self, context: &str) -> Result<String, SyntaxError> {
        match self.peek().clone() {
            Tok::Ident(name) => {
                self.advance();
                Ok(name)
            }
            other => Err(self.error(format!(
                "expected an identifier {context}, found {}",
                other.describe()
            ))),
        }
    }

    fn expr(&mut self) -> Result<Expr, SyntaxError> {
        if *self.peek() == Tok::If {
            let span = self.span();
            self.advance();
            let cond = self.expr()?;
            self.expect(Tok::Then, "after the condition")?;
            let then = self.expr()?;
            self.expect(Tok::Else, "after the then-branch")?;
            let otherwise = self.expr()?;
            return Ok(Expr::If {
                cond: Box::new(cond),
                then: Box::new(then),
                otherwise: Box::new(otherwise),
                span,
            });
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, SyntaxError> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Tok::EqEq => BinOp::Eq,
            Tok::Ne => BinOp::Ne,
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            _ => return Ok(lhs),
        };
        let span = self.span();
        self.advance();
        let rhs = self.additive()?;
        Ok(Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs), span })
    }

    fn additive(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            let span = self.span();
            self.advance();
            let rhs = self.multiplicative()?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs), span };
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            let span = self.span();
            self.advance();
            let rhs = self.unary()?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs), span };
        }
    }

    fn unary(&mut self) -> Result<Expr, SyntaxError> {
        if *self.peek() == Tok::Minus {
            let span = self.span();
            self.advance();
            let operand = self.unary()?;
            return Ok(Expr::Neg { operand: Box::new(operand), span });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, SyntaxError> {
        let span = self.span();
        match self.peek().clone() {
            Tok::Number(n) => {
                self.advance();
                Ok(Expr::Num(n))
            }
            Tok::Str(s) => {
                self.advance();
                Ok(Expr::Str(s))
            }
            Tok::True => {
                self.advance();
                Ok(Expr::Bool(true))
            }
            Tok::False => {
                self.advance();
                Ok(Expr::Bool(false))
            }
            Tok::LParen => {
                self.advance();
                let inner = self.expr()?;
                self.expect(Tok::RParen, "to close the parenthesized expression")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(agg) = AggFn::from_name(&name) {
                    if *self.peek_at(1) == Tok::LParen {
                        self.advance();
                        self.advance();
                        let path = self.path()?;
                        self.expect(Tok::RParen, "to close the aggregate")?;
                        return Ok(Expr::Aggregate { agg, path, span });
                    }
                }
                if name == "contains" && *self.peek_at(1) == Tok::LParen {
                    self.advance();
                    self.advance();
                    let path = self.path()?;
                    self.expect(Tok::Comma, "between the path and the needle")?;
                    let needle = match self.peek().clone() {
                        Tok::Str(s) => {
                            self.advance();
                            s
                        }
                        other => {
                            return Err(self.error(format!(
                                "contains takes a string literal needle, found {}",
                                other.describe()
                            )));
                        }
                    };
                    self.expect(Tok::RParen, "to close contains")?;
                    return Ok(Expr::Contains { path, needle, span });
                }
                let path = self.path()?;
                if *self.peek() == Tok::LParen {
                    return Err(self.error(
                        "tool calls are only allowed as a binding's right-hand side".into(),
                    ));
                }
                Ok(Expr::Path(path))
            }
            other => Err(self.error(format!("expected an expression, found {}", other.describe()))),
        }
    }

    fn path(&mut self) -> Result<PathExpr, SyntaxError> {
        let span = self.span();
        let root = self.ident("to start a path")?;
        let mut fields = Vec::new();
        while *self.peek() == Tok::Dot {
            self.advance();
            fields.push(self.ident("after `.`")?);
        }
        Ok(PathExpr { root, fields, span })
    }
}
