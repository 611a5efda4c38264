//! Tiny integer expression language over one variable `x`, used as the
//! candidate language of the solution environment.
//!
//! Grammar (usual precedence, `^` right-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/' | '%') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := integer | 'x' | '(' expr ')' | func '(' expr (',' expr)* ')'
//! func   := 'abs' | 'min' | 'max'
//! ```

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExprError {
    #[error("parse error at {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("division by zero")]
    DivByZero,
    #[error("arithmetic overflow")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Num(i64),
    Var,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Num(i64),
    Ident(String),
    Sym(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let n = text.parse().map_err(|_| ExprError::Overflow)?;
            out.push((start, Tok::Num(n)));
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            out.push((start, Tok::Ident(chars[start..i].iter().collect())));
        } else if "+-*/%^(),".contains(c) {
            out.push((i, Tok::Sym(c)));
            i += 1;
        } else {
            return Err(ExprError::Parse {
                pos: i,
                msg: format!("unexpected `{c}`"),
            });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, msg: &str) -> Result<T, ExprError> {
        Err(ExprError::Parse {
            pos: self.here(),
            msg: msg.to_string(),
        })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinOp::Add
            } else if self.eat('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                BinOp::Mul
            } else if self.eat('/') {
                BinOp::Div
            } else if self.eat('%') {
                BinOp::Rem
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek().cloned() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(Expr::Num(n))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                let func = match name.as_str() {
                    "x" => return Ok(Expr::Var),
                    "abs" => Func::Abs,
                    "min" => Func::Min,
                    "max" => Func::Max,
                    _ => return self.err(&format!("unknown name `{name}`")),
                };
                if !self.eat('(') {
                    return self.err("expected `(`");
                }
                let mut args = vec![self.expr()?];
                while self.eat(',') {
                    args.push(self.expr()?);
                }
                if !self.eat(')') {
                    return self.err("expected `)`");
                }
                let ok = match func {
                    Func::Abs => args.len() == 1,
                    Func::Min | Func::Max => args.len() >= 2,
                };
                if !ok {
                    return self.err("wrong number of arguments");
                }
                Ok(Expr::Call(func, args))
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return self.err("expected `)`");
                }
                Ok(e)
            }
            _ => self.err("expected a value"),
        }
    }
}

pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let toks = tokenize(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: src.len(),
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return p.err("trailing input");
    }
    Ok(e)
}

impl Expr {
    pub fn eval(&self, x: i64) -> Result<i64, ExprError> {
        Ok(match self {
            Expr::Num(n) => *n,
            Expr::Var => x,
            Expr::Neg(e) => e.eval(x)?.checked_neg().ok_or(ExprError::Overflow)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x)?, b.eval(x)?);
                match op {
                    BinOp::Add => a.checked_add(b).ok_or(ExprError::Overflow)?,
                    BinOp::Sub => a.checked_sub(b).ok_or(ExprError::Overflow)?,
                    BinOp::Mul => a.checked_mul(b).ok_or(ExprError::Overflow)?,
                    BinOp::Div if b == 0 => return Err(ExprError::DivByZero),
                    BinOp::Div => a.checked_div(b).ok_or(ExprError::Overflow)?,
                    BinOp::Rem if b == 0 => return Err(ExprError::DivByZero),
                    BinOp::Rem => a.checked_rem(b).ok_or(ExprError::Overflow)?,
                    BinOp::Pow => {
                        let e = u32::try_from(b).map_err(|_| ExprError::Overflow)?;
                        a.checked_pow(e).ok_or(ExprError::Overflow)?
                    }
                }
            }
            Expr::Call(f, args) => {
                let vals = args.iter().map(|a| a.eval(x)).collect::<Result<Vec<_>, _>>()?;
                match f {
                    Func::Abs => vals[0].checked_abs().ok_or(ExprError::Overflow)?,
                    Func::Min => *vals.iter().min().expect("arity checked"),
                    Func::Max => *vals.iter().max().expect("arity checked"),
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, x: i64) -> Result<i64, ExprError> {
        parse(src)?.eval(x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("x+1", 1), Ok(2));
        assert_eq!(ev("2*x+1", 3), Ok(7));
        assert_eq!(ev("2*(x+1)", 3), Ok(8));
        assert_eq!(ev("2^3^2", 0), Ok(512));
        assert_eq!(ev("-x^2", 3), Ok(-9));
        assert_eq!(ev("10 - 4 - 3", 0), Ok(3));
        assert_eq!(ev("7 / 2 % 2", 0), Ok(1));
        assert_eq!(ev("max(x, 3) + abs(-2) + min(1, 5, -4)", 1), Ok(1));
    }

    #[test]
    fn errors() {
        assert!(matches!(parse("x/"), Err(ExprError::Parse { .. })));
        assert!(matches!(parse("x +* 2"), Err(ExprError::Parse { .. })));
        assert!(matches!(parse("y + 1"), Err(ExprError::Parse { .. })));
        assert!(matches!(parse("abs(1, 2)"), Err(ExprError::Parse { .. })));
        assert!(matches!(parse("(x"), Err(ExprError::Parse { .. })));
        assert!(matches!(parse("x $ 2"), Err(ExprError::Parse { .. })));
        assert_eq!(ev("1 / (x - 1)", 1), Err(ExprError::DivByZero));
        assert_eq!(ev("x ^ 100", 10), Err(ExprError::Overflow));
        assert_eq!(ev("2 ^ -1", 0), Err(ExprError::Overflow));
    }
}
