//! Tiny arithmetic expression grammar for config-supplied fields.
//!
//! Variables: `x1`, `x2`, `t`, `y4`.  Functions: `exp`, `log`, `sin`,
//! `cos`, `abs`, `pow`.  Operators `+ - * / ^` with usual precedence,
//! parentheses, numeric literals, and the constant `pi`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num(f64),
    Var(usize),
    Pi,
    Fn(Func),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    Pow,
}

/// Parsed expression over the four chart coordinates.
#[derive(Debug, Clone)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Abs(Box<Expr>),
}

const VARS: [&str; 4] = ["x1", "x2", "t", "y4"];

fn lex(src: &str) -> Result<Vec<Tok>> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                toks.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                toks.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                toks.push(Tok::Star);
                i += 1;
            }
            '/' => {
                toks.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                toks.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            ',' => {
                toks.push(Tok::Comma);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_digit() || d == '.' {
                        i += 1;
                    } else if (d == 'e' || d == 'E')
                        && i + 1 < bytes.len()
                        && ((bytes[i + 1] as char).is_ascii_digit()
                            || bytes[i + 1] == b'+'
                            || bytes[i + 1] == b'-')
                    {
                        i += 2;
                    } else {
                        break;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::Config(format!("bad number literal '{text}' in expression")))?;
                toks.push(Tok::Num(v));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_alphanumeric() || d == '_' {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let ident = &src[start..i];
                if let Some(k) = VARS.iter().position(|v| *v == ident) {
                    toks.push(Tok::Var(k));
                } else {
                    match ident {
                        "pi" => toks.push(Tok::Pi),
                        "exp" => toks.push(Tok::Fn(Func::Exp)),
                        "log" => toks.push(Tok::Fn(Func::Log)),
                        "sin" => toks.push(Tok::Fn(Func::Sin)),
                        "cos" => toks.push(Tok::Fn(Func::Cos)),
                        "abs" => toks.push(Tok::Fn(Func::Abs)),
                        "pow" => toks.push(Tok::Fn(Func::Pow)),
                        _ => {
                            return Err(Error::Config(format!(
                                "unknown identifier '{ident}' in expression (variables: x1 x2 t y4; functions: exp log sin cos abs pow)"
                            )))
                        }
                    }
                }
            }
            _ => return Err(Error::Config(format!("unexpected character '{c}' in expression"))),
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.peek();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(t) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Config(format!("expected {what} in expression")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.factor()?)))
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                self.factor()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek() == Some(Tok::Caret) {
            self.pos += 1;
            // Right-associative; exponent may carry a unary sign.
            let exp = self.factor()?;
            Ok(Expr::Pow(Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::Pi) => Ok(Expr::Num(std::f64::consts::PI)),
            Some(Tok::Var(k)) => Ok(Expr::Var(k)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Some(Tok::Fn(f)) => {
                self.expect(Tok::LParen, "'(' after function name")?;
                let a = self.expr()?;
                let e = if f == Func::Pow {
                    self.expect(Tok::Comma, "',' between pow arguments")?;
                    let b = self.expr()?;
                    Expr::Pow(Box::new(a), Box::new(b))
                } else {
                    match f {
                        Func::Exp => Expr::Exp(Box::new(a)),
                        Func::Log => Expr::Log(Box::new(a)),
                        Func::Sin => Expr::Sin(Box::new(a)),
                        Func::Cos => Expr::Cos(Box::new(a)),
                        Func::Abs => Expr::Abs(Box::new(a)),
                        Func::Pow => unreachable!(),
                    }
                };
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            _ => Err(Error::Config("unexpected end of expression".into())),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let toks = lex(src)?;
        let mut p = Parser { toks: &toks, pos: 0 };
        let e = p.expr()?;
        if p.pos != toks.len() {
            return Err(Error::Config(format!("trailing tokens in expression '{src}'")));
        }
        Ok(e)
    }

    /// Evaluate at chart coordinates `[x1, x2, t, y4]`.
    pub fn eval(&self, v: &[f64; 4]) -> f64 {
        match self {
            Expr::Num(c) => *c,
            Expr::Var(k) => v[*k],
            Expr::Neg(a) => -a.eval(v),
            Expr::Add(a, b) => a.eval(v) + b.eval(v),
            Expr::Sub(a, b) => a.eval(v) - b.eval(v),
            Expr::Mul(a, b) => a.eval(v) * b.eval(v),
            Expr::Div(a, b) => a.eval(v) / b.eval(v),
            Expr::Pow(a, b) => a.eval(v).powf(b.eval(v)),
            Expr::Exp(a) => a.eval(v).exp(),
            Expr::Log(a) => a.eval(v).ln(),
            Expr::Sin(a) => a.eval(v).sin(),
            Expr::Cos(a) => a.eval(v).cos(),
            Expr::Abs(a) => a.eval(v).abs(),
        }
    }
}
