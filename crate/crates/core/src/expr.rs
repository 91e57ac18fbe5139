//! Scalar coefficient expressions: `max(100 - x, 0)`, `0.2*x_1`, `exp(-t)*x^2`.
//!
//! Grammar, lowest to highest precedence:
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "/") unary)*
//! unary   := "-" unary | power
//! power   := primary ("^" unary)?          // right associative
//! primary := number | ident | ident "(" expr ("," expr)* ")" | "(" expr ")"
//! ```
//!
//! Variables are `t`, `x` (alias for `x_1`) and `x_1 .. x_d`. Unary functions:
//! `exp log sqrt abs`; binary: `max min`.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    Time,
    /// Zero-based state component.
    State(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("unexpected character {ch:?} at byte {offset}")]
    UnexpectedChar { ch: char, offset: usize },
    #[error("unexpected {found} at byte {offset}, expected {expected}")]
    Syntax {
        found: String,
        expected: &'static str,
        offset: usize,
    },
    #[error("unknown identifier {name:?} at byte {offset}")]
    UnknownIdent { name: String, offset: usize },
    #[error("function {name} takes {expected} argument(s), got {got} (byte {offset})")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
        offset: usize,
    },
    #[error("invalid number {text:?} at byte {offset}")]
    Number { text: String, offset: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(x) => write!(f, "number {x}"),
            Tok::Ident(s) => write!(f, "identifier {s:?}"),
            Tok::Op(c) => write!(f, "{c:?}"),
            Tok::LParen => f.write_str("'('"),
            Tok::RParen => f.write_str("')'"),
            Tok::Comma => f.write_str("','"),
            Tok::End => f.write_str("end of input"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let value: f64 = text.parse().map_err(|_| ParseError::Number {
                text: text.to_string(),
                offset: start,
            })?;
            if !value.is_finite() {
                return Err(ParseError::Number {
                    text: text.to_string(),
                    offset: start,
                });
            }
            out.push((Tok::Num(value), start));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
            continue;
        }
        let tok = match c {
            '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ => {
                let ch = src[start..].chars().next().unwrap_or(c);
                return Err(ParseError::UnexpectedChar { ch, offset: start });
            }
        };
        out.push((tok, start));
        i += 1;
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, expected: &'static str) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(ParseError::Syntax {
                found: self.peek().to_string(),
                expected,
                offset: self.offset(),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinaryOp::Add,
                Tok::Op('-') => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinaryOp::Mul,
                Tok::Op('/') => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Op('-') {
            self.bump();
            let inner = self.unary()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Binary(BinaryOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let (tok, offset) = self.bump();
        match tok {
            Tok::Num(x) => Ok(Expr::Const(x)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen, "')' or ','")?;
                    call(&name, args, offset)
                } else {
                    variable(&name, offset)
                }
            }
            other => Err(ParseError::Syntax {
                found: other.to_string(),
                expected: "a number, variable, function call or '('",
                offset,
            }),
        }
    }
}

fn variable(name: &str, offset: usize) -> Result<Expr, ParseError> {
    let unknown = || ParseError::UnknownIdent {
        name: name.to_string(),
        offset,
    };
    match name {
        "t" => Ok(Expr::Var(Var::Time)),
        "x" => Ok(Expr::Var(Var::State(0))),
        _ => {
            let idx = name.strip_prefix("x_").ok_or_else(unknown)?;
            if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) || idx.starts_with('0') {
                return Err(unknown());
            }
            let k: usize = idx.parse().map_err(|_| unknown())?;
            Ok(Expr::Var(Var::State(k - 1)))
        }
    }
}

fn call(name: &str, mut args: Vec<Expr>, offset: usize) -> Result<Expr, ParseError> {
    let (arity, unary, binary) = match name {
        "exp" => (1, Some(UnaryOp::Exp), None),
        "log" => (1, Some(UnaryOp::Log), None),
        "sqrt" => (1, Some(UnaryOp::Sqrt), None),
        "abs" => (1, Some(UnaryOp::Abs), None),
        "max" => (2, None, Some(BinaryOp::Max)),
        "min" => (2, None, Some(BinaryOp::Min)),
        _ => {
            return Err(ParseError::UnknownIdent {
                name: name.to_string(),
                offset,
            })
        }
    };
    if args.len() != arity {
        return Err(ParseError::Arity {
            name: name.to_string(),
            expected: arity,
            got: args.len(),
            offset,
        });
    }
    Ok(match (unary, binary) {
        (Some(op), _) => Expr::Unary(op, Box::new(args.pop().unwrap())),
        (_, Some(op)) => {
            let rhs = args.pop().unwrap();
            let lhs = args.pop().unwrap();
            Expr::Binary(op, Box::new(lhs), Box::new(rhs))
        }
        _ => unreachable!(),
    })
}

/// Parses an expression. Errors carry the byte offset of the offending token.
pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    let toks = lex(src)?;
    if toks.len() == 1 {
        return Err(ParseError::Empty);
    }
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(ParseError::Syntax {
            found: p.peek().to_string(),
            expected: "an operator or end of input",
            offset: p.offset(),
        });
    }
    Ok(e)
}

impl Expr {
    /// Evaluates at `(t, x)`. Out-of-range state indices evaluate to NaN;
    /// callers validate with [`Expr::max_state_index`] when binding.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::Time) => t,
            Expr::Var(Var::State(i)) => x.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Unary(op, a) => {
                let a = a.eval(t, x);
                match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Log => a.ln(),
                    UnaryOp::Sqrt => a.sqrt(),
                    UnaryOp::Abs => a.abs(),
                }
            }
            Expr::Binary(op, a, b) => {
                let (a, b) = (a.eval(t, x), b.eval(t, x));
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => a / b,
                    BinaryOp::Pow => pow(a, b),
                    BinaryOp::Max => a.max(b),
                    BinaryOp::Min => a.min(b),
                }
            }
        }
    }

    /// Largest zero-based state index referenced, if any.
    pub fn max_state_index(&self) -> Option<usize> {
        match self {
            Expr::Const(_) | Expr::Var(Var::Time) => None,
            Expr::Var(Var::State(i)) => Some(*i),
            Expr::Unary(_, a) => a.max_state_index(),
            Expr::Binary(_, a, b) => match (a.max_state_index(), b.max_state_index()) {
                (Some(i), Some(j)) => Some(i.max(j)),
                (i, j) => i.or(j),
            },
        }
    }

    pub fn uses_time(&self) -> bool {
        match self {
            Expr::Var(Var::Time) => true,
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Unary(_, a) => a.uses_time(),
            Expr::Binary(_, a, b) => a.uses_time() || b.uses_time(),
        }
    }
}

// Integer powers by repeated multiplication so that x^2 is exact.
fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
        Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
        Expr::Unary(UnaryOp::Neg, _) => 3,
        Expr::Binary(BinaryOp::Pow, ..) => 4,
        _ => 5,
    }
}

struct Wrap<'a>(&'a Expr, bool);

impl fmt::Display for Wrap<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.1 {
            write!(f, "({})", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Prints with the minimal parentheses needed for `parse_expr` to rebuild
/// the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(Var::Time) => f.write_str("t"),
            Expr::Var(Var::State(i)) => write!(f, "x_{}", i + 1),
            Expr::Unary(UnaryOp::Neg, a) => write!(f, "-{}", Wrap(a, prec(a) < 3)),
            Expr::Unary(op, a) => {
                let name = match op {
                    UnaryOp::Exp => "exp",
                    UnaryOp::Log => "log",
                    UnaryOp::Sqrt => "sqrt",
                    UnaryOp::Abs => "abs",
                    UnaryOp::Neg => unreachable!(),
                };
                write!(f, "{name}({a})")
            }
            Expr::Binary(op @ (BinaryOp::Max | BinaryOp::Min), a, b) => {
                let name = if *op == BinaryOp::Max { "max" } else { "min" };
                write!(f, "{name}({a}, {b})")
            }
            Expr::Binary(op, a, b) => {
                let (p, sym) = match op {
                    BinaryOp::Add => (1, "+"),
                    BinaryOp::Sub => (1, "-"),
                    BinaryOp::Mul => (2, "*"),
                    BinaryOp::Div => (2, "/"),
                    BinaryOp::Pow => (4, "^"),
                    _ => unreachable!(),
                };
                if *op == BinaryOp::Pow {
                    // base binds tighter than unary minus; exponent is a unary
                    write!(f, "{}^{}", Wrap(a, prec(a) <= 4), Wrap(b, prec(b) < 3))
                } else {
                    write!(
                        f,
                        "{} {sym} {}",
                        Wrap(a, prec(a) < p),
                        Wrap(b, prec(b) <= p)
                    )
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(src: &str, x: f64) -> f64 {
        parse_expr(src).unwrap().eval(0.0, &[x])
    }

    #[test]
    fn worked_examples() {
        assert_eq!(ev("x^2", 3.0), 9.0);
        assert_eq!(ev("max(100 - x, 0)", 80.0), 20.0);
        assert_eq!(ev("0.2*x", 5.0), 1.0);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("-x^2", 3.0), -9.0);
        assert_eq!(ev("2^3^2", 0.0), 512.0);
        assert_eq!(ev("8 - 3 - 2", 0.0), 3.0);
        assert_eq!(ev("8 / 4 / 2", 0.0), 1.0);
        assert_eq!(ev("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(ev("2^-1", 0.0), 0.5);
        assert_eq!(ev("-2*-3", 0.0), 6.0);
        assert_eq!(ev("(1 + 2) * 3", 0.0), 9.0);
        assert_eq!(ev("1.5e2 + x_1", 1.0), 151.0);
    }

    #[test]
    fn variables_and_functions() {
        let e = parse_expr("exp(-t) * x_2 + abs(x_1) + sqrt(4) + log(1) + min(t, 3)").unwrap();
        assert_eq!(e.eval(0.0, &[-1.0, 2.0]), 2.0 + 1.0 + 2.0 + 0.0 + 0.0);
        assert_eq!(e.max_state_index(), Some(1));
        assert!(e.uses_time());
        assert!(!parse_expr("x^2").unwrap().uses_time());
    }

    #[test]
    fn error_positions() {
        assert_eq!(
            parse_expr("x + foo"),
            Err(ParseError::UnknownIdent {
                name: "foo".into(),
                offset: 4
            })
        );
        assert!(matches!(
            parse_expr("max(x)"),
            Err(ParseError::Arity {
                expected: 2,
                got: 1,
                ..
            })
        ));
        assert!(matches!(
            parse_expr("1 + "),
            Err(ParseError::Syntax { offset: 4, .. })
        ));
        assert!(matches!(
            parse_expr("(1"),
            Err(ParseError::Syntax { offset: 2, .. })
        ));
        assert!(matches!(
            parse_expr("1 $ 2"),
            Err(ParseError::UnexpectedChar { offset: 2, .. })
        ));
        assert!(matches!(
            parse_expr("x_0"),
            Err(ParseError::UnknownIdent { .. })
        ));
        assert!(matches!(
            parse_expr("1e999"),
            Err(ParseError::Number { .. })
        ));
        assert_eq!(parse_expr("   "), Err(ParseError::Empty));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Expr::Const),
            Just(Expr::Var(Var::Time)),
            (0usize..3).prop_map(|i| Expr::Var(Var::State(i))),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            let un = prop_oneof![
                Just(UnaryOp::Neg),
                Just(UnaryOp::Exp),
                Just(UnaryOp::Log),
                Just(UnaryOp::Sqrt),
                Just(UnaryOp::Abs)
            ];
            let bin = prop_oneof![
                Just(BinaryOp::Add),
                Just(BinaryOp::Sub),
                Just(BinaryOp::Mul),
                Just(BinaryOp::Div),
                Just(BinaryOp::Pow),
                Just(BinaryOp::Max),
                Just(BinaryOp::Min)
            ];
            prop_oneof![
                (un, inner.clone()).prop_map(|(op, a)| Expr::Unary(op, Box::new(a))),
                (bin, inner.clone(), inner).prop_map(|(op, a, b)| Expr::Binary(
                    op,
                    Box::new(a),
                    Box::new(b)
                )),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let back = parse_expr(&printed).unwrap();
            prop_assert_eq!(&back, &e, "printed as {}", printed);
        }
    }
}
