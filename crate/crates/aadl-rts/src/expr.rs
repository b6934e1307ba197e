//! A small expression language shared by trace properties, the `eval`
//! command, and behavior actions.
//!
//! Grammar, lowest precedence first:
//!
//! ```text
//! expr    := implies
//! implies := or ("implies" implies)?
//! or      := and ("or" and)*
//! and     := cmp ("and" cmp)*
//! cmp     := add (("<"|"<="|">"|">="|"="|"=="|"!=") add)?
//! add     := mul (("+"|"-") mul)*
//! mul     := unary (("*"|"/") unary)*
//! unary   := "-" unary | "not" unary | primary
//! primary := literal | ident ("@" time)? | ident "(" args ")" | "(" expr ")"
//! time    := integer | "(" integer "," integer ")"
//! ```
//!
//! Identifiers may contain `:` and `.` so trace variables can be named
//! directly (`Var:ctrl:x`, `IPS:sensor:cmd_out`). What an identifier or a
//! function call means is decided by the evaluation context: the trace
//! checker resolves trace variables and `nonempty`/`count`/`head`, behaviors
//! resolve local variables and the port services. The `@ time` suffix pins a
//! trace variable to a world instead of the context's default.

use std::fmt;

use thiserror::Error;

use crate::temporal::Time;
use crate::values::{PortQueue, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
    Implies,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(Value),
    Ident {
        name: String,
        at: Option<Time>,
    },
    Call {
        func: String,
        args: Vec<Expr>,
    },
    Unary {
        op: UnOp,
        expr: Box<Expr>,
    },
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
}

#[derive(Debug, Clone, Error)]
#[error("expression error at offset {pos}: {msg}")]
pub struct ExprParseError {
    pub pos: usize,
    pub msg: String,
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Sym(&'static str),
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    toks: Vec<(usize, Tok)>,
}

impl<'a> Lexer<'a> {
    fn run(src: &'a str) -> Result<Vec<(usize, Tok)>, ExprParseError> {
        let mut lx = Lexer {
            src,
            pos: 0,
            toks: Vec::new(),
        };
        lx.lex()?;
        Ok(lx.toks)
    }

    fn err(&self, msg: impl Into<String>) -> ExprParseError {
        ExprParseError {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn lex(&mut self) -> Result<(), ExprParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() {
            let start = self.pos;
            let c = bytes[self.pos] as char;
            match c {
                ' ' | '\t' | '\n' | '\r' => {
                    self.pos += 1;
                }
                '(' | ')' | ',' | '@' | '+' | '-' | '*' | '/' => {
                    self.pos += 1;
                    let sym = match c {
                        '(' => "(",
                        ')' => ")",
                        ',' => ",",
                        '@' => "@",
                        '+' => "+",
                        '-' => "-",
                        '*' => "*",
                        _ => "/",
                    };
                    self.toks.push((start, Tok::Sym(sym)));
                }
                '<' | '>' | '=' | '!' => {
                    let two = self.pos + 1 < bytes.len() && bytes[self.pos + 1] == b'=';
                    let sym = match (c, two) {
                        ('<', true) => "<=",
                        ('<', false) => "<",
                        ('>', true) => ">=",
                        ('>', false) => ">",
                        ('=', true) => "==",
                        ('=', false) => "=",
                        ('!', true) => "!=",
                        _ => return Err(self.err("expected !=")),
                    };
                    self.pos += if two { 2 } else { 1 };
                    self.toks.push((start, Tok::Sym(sym)));
                }
                '"' => {
                    self.pos += 1;
                    let mut s = String::new();
                    loop {
                        if self.pos >= bytes.len() {
                            return Err(self.err("unterminated string literal"));
                        }
                        let ch = bytes[self.pos] as char;
                        self.pos += 1;
                        match ch {
                            '"' => break,
                            '\\' => {
                                if self.pos >= bytes.len() {
                                    return Err(self.err("unterminated escape"));
                                }
                                let esc = bytes[self.pos] as char;
                                self.pos += 1;
                                match esc {
                                    '"' => s.push('"'),
                                    '\\' => s.push('\\'),
                                    'n' => s.push('\n'),
                                    other => {
                                        return Err(self.err(format!("unknown escape \\{other}")))
                                    }
                                }
                            }
                            other => s.push(other),
                        }
                    }
                    self.toks.push((start, Tok::Str(s)));
                }
                d if d.is_ascii_digit() => {
                    let mut end = self.pos;
                    let mut is_float = false;
                    while end < bytes.len() {
                        let ch = bytes[end] as char;
                        if ch.is_ascii_digit() {
                            end += 1;
                        } else if ch == '.'
                            && end + 1 < bytes.len()
                            && (bytes[end + 1] as char).is_ascii_digit()
                        {
                            is_float = true;
                            end += 1;
                        } else if (ch == 'e' || ch == 'E') && end > self.pos {
                            is_float = true;
                            end += 1;
                            if end < bytes.len()
                                && (bytes[end] == b'+' || bytes[end] == b'-')
                            {
                                end += 1;
                            }
                        } else {
                            break;
                        }
                    }
                    let text = &self.src[self.pos..end];
                    let tok = if is_float {
                        Tok::Float(
                            text.parse::<f64>()
                                .map_err(|e| self.err(format!("bad float {text:?}: {e}")))?,
                        )
                    } else {
                        Tok::Int(
                            text.parse::<i64>()
                                .map_err(|e| self.err(format!("bad integer {text:?}: {e}")))?,
                        )
                    };
                    self.pos = end;
                    self.toks.push((start, tok));
                }
                a if a.is_ascii_alphabetic() || a == '_' => {
                    let mut end = self.pos;
                    while end < bytes.len() {
                        let ch = bytes[end] as char;
                        if ch.is_ascii_alphanumeric() || ch == '_' || ch == ':' || ch == '.' {
                            end += 1;
                        } else {
                            break;
                        }
                    }
                    let text = self.src[self.pos..end].to_string();
                    self.pos = end;
                    self.toks.push((start, Tok::Ident(text)));
                }
                other => return Err(self.err(format!("unexpected character {other:?}"))),
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser {
    toks: Vec<(usize, Tok)>,
    idx: usize,
}

impl Parser {
    fn err_here(&self, msg: impl Into<String>) -> ExprParseError {
        let pos = self.toks.get(self.idx).map(|(p, _)| *p).unwrap_or(usize::MAX);
        ExprParseError {
            pos: if pos == usize::MAX { 0 } else { pos },
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|(_, t)| t)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.idx).map(|(_, t)| t.clone());
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(s)) if *s == sym) {
            self.idx += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), ExprParseError> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(self.err_here(format!("expected {sym:?}")))
        }
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == w)
    }

    fn eat_word(&mut self, w: &str) -> bool {
        if self.is_word(w) {
            self.idx += 1;
            true
        } else {
            false
        }
    }

    fn implies(&mut self) -> Result<Expr, ExprParseError> {
        let lhs = self.or()?;
        if self.eat_word("implies") {
            let rhs = self.implies()?;
            return Ok(Expr::Binary {
                op: BinOp::Implies,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            });
        }
        Ok(lhs)
    }

    fn or(&mut self) -> Result<Expr, ExprParseError> {
        let mut lhs = self.and()?;
        while self.eat_word("or") {
            let rhs = self.and()?;
            lhs = Expr::Binary {
                op: BinOp::Or,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ExprParseError> {
        let mut lhs = self.cmp()?;
        while self.eat_word("and") {
            let rhs = self.cmp()?;
            lhs = Expr::Binary {
                op: BinOp::And,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn cmp(&mut self) -> Result<Expr, ExprParseError> {
        let lhs = self.add()?;
        let op = match self.peek() {
            Some(Tok::Sym("<")) => Some(BinOp::Lt),
            Some(Tok::Sym("<=")) => Some(BinOp::Le),
            Some(Tok::Sym(">")) => Some(BinOp::Gt),
            Some(Tok::Sym(">=")) => Some(BinOp::Ge),
            Some(Tok::Sym("=")) | Some(Tok::Sym("==")) => Some(BinOp::Eq),
            Some(Tok::Sym("!=")) => Some(BinOp::Ne),
            _ => None,
        };
        if let Some(op) = op {
            self.idx += 1;
            let rhs = self.add()?;
            return Ok(Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            });
        }
        Ok(lhs)
    }

    fn add(&mut self) -> Result<Expr, ExprParseError> {
        let mut lhs = self.mul()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Sym("+")) => BinOp::Add,
                Some(Tok::Sym("-")) => BinOp::Sub,
                _ => break,
            };
            self.idx += 1;
            let rhs = self.mul()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn mul(&mut self) -> Result<Expr, ExprParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Sym("*")) => BinOp::Mul,
                Some(Tok::Sym("/")) => BinOp::Div,
                _ => break,
            };
            self.idx += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprParseError> {
        if self.eat_sym("-") {
            return Ok(Expr::Unary {
                op: UnOp::Neg,
                expr: Box::new(self.unary()?),
            });
        }
        if self.eat_word("not") {
            return Ok(Expr::Unary {
                op: UnOp::Not,
                expr: Box::new(self.unary()?),
            });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ExprParseError> {
        match self.bump() {
            Some(Tok::Int(i)) => Ok(Expr::Lit(Value::Int(i))),
            Some(Tok::Float(f)) => Ok(Expr::Lit(Value::Float(f))),
            Some(Tok::Str(s)) => Ok(Expr::Lit(Value::str(&s))),
            Some(Tok::Sym("(")) => {
                let inner = self.implies()?;
                self.expect_sym(")")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "true" => Ok(Expr::Lit(Value::Bool(true))),
                "false" => Ok(Expr::Lit(Value::Bool(false))),
                _ => {
                    if self.eat_sym("(") {
                        let mut args = Vec::new();
                        if !self.eat_sym(")") {
                            loop {
                                args.push(self.implies()?);
                                if self.eat_sym(")") {
                                    break;
                                }
                                self.expect_sym(",")?;
                            }
                        }
                        Ok(Expr::Call { func: name, args })
                    } else {
                        let at = if self.eat_sym("@") {
                            Some(self.time_literal()?)
                        } else {
                            None
                        };
                        Ok(Expr::Ident { name, at })
                    }
                }
            },
            Some(other) => Err(ExprParseError {
                pos: self.toks[self.idx - 1].0,
                msg: format!("unexpected token {other:?}"),
            }),
            None => Err(self.err_here("unexpected end of expression")),
        }
    }

    fn time_literal(&mut self) -> Result<Time, ExprParseError> {
        if self.eat_sym("(") {
            let t = self.int_literal()?;
            self.expect_sym(",")?;
            let n = self.int_literal()?;
            self.expect_sym(")")?;
            Ok(Time::new(t, n as u32))
        } else {
            Ok(Time::new(self.int_literal()?, 0))
        }
    }

    fn int_literal(&mut self) -> Result<u64, ExprParseError> {
        match self.bump() {
            Some(Tok::Int(i)) if i >= 0 => Ok(i as u64),
            _ => Err(self.err_here("expected a non-negative integer")),
        }
    }
}

/// Parses one expression; the whole input must be consumed.
pub fn parse_expr(src: &str) -> Result<Expr, ExprParseError> {
    let toks = Lexer::run(src)?;
    let mut p = Parser { toks, idx: 0 };
    let e = p.implies()?;
    if p.idx != p.toks.len() {
        return Err(p.err_here("trailing input after expression"));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// What an expression can evaluate to: a plain value, or a queue snapshot
/// (which only the queue functions and equality accept).
#[derive(Debug, Clone, PartialEq)]
pub enum Val {
    V(Value),
    Q(PortQueue),
}

impl Val {
    pub fn into_value(self) -> Result<Value, String> {
        match self {
            Val::V(v) => Ok(v),
            Val::Q(_) => Err("expected a value, got a queue".into()),
        }
    }

    fn as_bool(&self) -> Result<bool, String> {
        match self {
            Val::V(Value::Bool(b)) => Ok(*b),
            other => Err(format!("expected bool, got {}", other.describe())),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Val::V(v) => v.tag().to_string(),
            Val::Q(_) => "queue".to_string(),
        }
    }
}

/// Supplies meanings for identifiers and function calls. Implementations may
/// recursively evaluate argument expressions with [`eval_expr`].
pub trait EvalContext {
    fn ident(&mut self, name: &str, at: Option<Time>) -> Result<Val, String>;
    fn call(&mut self, func: &str, args: &[Expr]) -> Result<Val, String>;
}

/// Evaluates an expression under a context. Arithmetic is exact: integer
/// overflow, division by zero, and non-finite float results are errors, not
/// silent wraps.
pub fn eval_expr(e: &Expr, ctx: &mut dyn EvalContext) -> Result<Val, String> {
    match e {
        Expr::Lit(v) => Ok(Val::V(v.clone())),
        Expr::Ident { name, at } => ctx.ident(name, *at),
        Expr::Call { func, args } => ctx.call(func, args),
        Expr::Unary { op, expr } => {
            let v = eval_expr(expr, ctx)?;
            match op {
                UnOp::Not => Ok(Val::V(Value::Bool(!v.as_bool()?))),
                UnOp::Neg => match v {
                    Val::V(Value::Int(i)) => i
                        .checked_neg()
                        .map(|r| Val::V(Value::Int(r)))
                        .ok_or_else(|| "integer overflow in negation".into()),
                    Val::V(Value::Float(f)) => Ok(Val::V(Value::Float(-f))),
                    other => Err(format!("cannot negate {}", other.describe())),
                },
            }
        }
        Expr::Binary { op, lhs, rhs } => {
            // Short-circuit logic first.
            match op {
                BinOp::And => {
                    return Ok(Val::V(Value::Bool(
                        eval_expr(lhs, ctx)?.as_bool()? && eval_expr(rhs, ctx)?.as_bool()?,
                    )))
                }
                BinOp::Or => {
                    return Ok(Val::V(Value::Bool(
                        eval_expr(lhs, ctx)?.as_bool()? || eval_expr(rhs, ctx)?.as_bool()?,
                    )))
                }
                BinOp::Implies => {
                    return Ok(Val::V(Value::Bool(
                        !eval_expr(lhs, ctx)?.as_bool()? || eval_expr(rhs, ctx)?.as_bool()?,
                    )))
                }
                _ => {}
            }
            let a = eval_expr(lhs, ctx)?;
            let b = eval_expr(rhs, ctx)?;
            match op {
                BinOp::Eq => Ok(Val::V(Value::Bool(a == b))),
                BinOp::Ne => Ok(Val::V(Value::Bool(a != b))),
                BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                    let ord = match (&a, &b) {
                        (Val::V(Value::Int(x)), Val::V(Value::Int(y))) => x.cmp(y),
                        (Val::V(Value::Float(x)), Val::V(Value::Float(y))) => x
                            .partial_cmp(y)
                            .ok_or("cannot order NaN")?,
                        _ => {
                            return Err(format!(
                                "cannot order {} and {}",
                                a.describe(),
                                b.describe()
                            ))
                        }
                    };
                    let res = match op {
                        BinOp::Lt => ord.is_lt(),
                        BinOp::Le => ord.is_le(),
                        BinOp::Gt => ord.is_gt(),
                        _ => ord.is_ge(),
                    };
                    Ok(Val::V(Value::Bool(res)))
                }
                BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => arith(*op, a, b),
                _ => unreachable!("logic handled above"),
            }
        }
    }
}

fn arith(op: BinOp, a: Val, b: Val) -> Result<Val, String> {
    match (a, b) {
        (Val::V(Value::Int(x)), Val::V(Value::Int(y))) => {
            let r = match op {
                BinOp::Add => x.checked_add(y),
                BinOp::Sub => x.checked_sub(y),
                BinOp::Mul => x.checked_mul(y),
                BinOp::Div => {
                    if y == 0 {
                        return Err("division by zero".into());
                    }
                    x.checked_div(y)
                }
                _ => unreachable!(),
            };
            r.map(|v| Val::V(Value::Int(v)))
                .ok_or_else(|| "integer overflow".into())
        }
        (Val::V(Value::Float(x)), Val::V(Value::Float(y))) => {
            let r = match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == 0.0 {
                        return Err("division by zero".into());
                    }
                    x / y
                }
                _ => unreachable!(),
            };
            if !r.is_finite() {
                return Err("non-finite float result".into());
            }
            Ok(Val::V(Value::Float(r)))
        }
        (a, b) => Err(format!(
            "arithmetic needs two ints or two floats, got {} and {}",
            a.describe(),
            b.describe()
        )),
    }
}

impl fmt::Display for Val {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Val::V(v) => write!(f, "{v}"),
            Val::Q(q) => write!(f, "{q}"),
        }
    }
}
