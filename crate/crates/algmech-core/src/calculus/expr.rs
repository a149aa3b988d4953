//! Scalar expression trees: parsing, printing, symbolic differentiation,
//! and slot substitution.
//!
//! Grammar (ASCII only):
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := factor (("*" | "/") factor)*
//! factor := "-" factor | base ("^" integer)?
//! base   := number | identifier | "(" expr ")" | function "(" expr ")"
//! ```
//!
//! Functions: `sin cos tan exp log sqrt`. Exponents are integer literals
//! (possibly negative). Variables are resolved to flat slot indices at parse
//! time; named parameters resolve to numeric literals, so a parsed tree never
//! depends on anything but its slots.
//!
//! Invariant kept by every constructor in this module: numeric literals are
//! non-negative (negation is an explicit `Neg` node). This makes
//! parse-print-parse the identity on trees.

use crate::error::{Error, Result};

/// Supported elementary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }
}

/// Expression tree over flat variable slots.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

/// What a bare identifier means during parsing.
#[derive(Debug, Clone, Copy)]
pub enum Resolution {
    /// A variable occupying the given flat slot.
    Slot(usize),
    /// A named constant, inlined as a literal.
    Literal(f64),
}

/// Name resolution interface used by the parser and printer.
pub trait VarLookup {
    fn resolve(&self, name: &str) -> Option<Resolution>;
    fn slot_name(&self, slot: usize) -> String;
    /// Declared names, for error messages.
    fn declared(&self) -> Vec<String>;
}

// ---------------------------------------------------------------------------
// Smart constructors with light constant folding.
//
// Folding keeps symbolic derivatives compact. It only applies identities that
// are exact in floating point (multiplication by exact 0 or 1, addition of
// exact 0), so folded and unfolded trees evaluate bit-identically.
// ---------------------------------------------------------------------------

pub fn num(v: f64) -> Expr {
    if v < 0.0 {
        Expr::Neg(Box::new(Expr::Num(-v)))
    } else {
        Expr::Num(v)
    }
}

pub fn var(slot: usize) -> Expr {
    Expr::Var(slot)
}

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 0.0)
}

fn is_one(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 1.0)
}

pub fn add(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) {
        return b;
    }
    if is_zero(&b) {
        return a;
    }
    if let (Expr::Num(x), Expr::Num(y)) = (&a, &b) {
        return num(x + y);
    }
    Expr::Add(Box::new(a), Box::new(b))
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    if is_zero(&b) {
        return a;
    }
    if is_zero(&a) {
        return neg(b);
    }
    if let (Expr::Num(x), Expr::Num(y)) = (&a, &b) {
        return num(x - y);
    }
    Expr::Sub(Box::new(a), Box::new(b))
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) || is_zero(&b) {
        return Expr::Num(0.0);
    }
    if is_one(&a) {
        return b;
    }
    if is_one(&b) {
        return a;
    }
    if let (Expr::Num(x), Expr::Num(y)) = (&a, &b) {
        return num(x * y);
    }
    Expr::Mul(Box::new(a), Box::new(b))
}

pub fn div(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) {
        return Expr::Num(0.0);
    }
    if is_one(&b) {
        return a;
    }
    Expr::Div(Box::new(a), Box::new(b))
}

pub fn neg(a: Expr) -> Expr {
    if is_zero(&a) {
        return Expr::Num(0.0);
    }
    if let Expr::Neg(inner) = a {
        return *inner;
    }
    Expr::Neg(Box::new(a))
}

pub fn powi(a: Expr, k: i32) -> Expr {
    match k {
        0 => Expr::Num(1.0),
        1 => a,
        _ => Expr::Pow(Box::new(a), k),
    }
}

pub fn call(f: Func, a: Expr) -> Expr {
    Expr::Call(f, Box::new(a))
}

// ---------------------------------------------------------------------------
// Lexer and parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && (self.src[self.pos] as char).is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Returns (token, byte offset of its first character).
    fn next_tok(&mut self) -> Result<Option<(Tok, usize)>> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos] as char;
        let tok = match c {
            '+' => {
                self.pos += 1;
                Tok::Plus
            }
            '-' => {
                self.pos += 1;
                Tok::Minus
            }
            '*' => {
                self.pos += 1;
                Tok::Star
            }
            '/' => {
                self.pos += 1;
                Tok::Slash
            }
            '^' => {
                self.pos += 1;
                Tok::Caret
            }
            '(' => {
                self.pos += 1;
                Tok::LParen
            }
            ')' => {
                self.pos += 1;
                Tok::RParen
            }
            '0'..='9' | '.' => {
                let mut end = self.pos;
                let mut seen_e = false;
                while end < self.src.len() {
                    let d = self.src[end] as char;
                    let take = d.is_ascii_digit()
                        || d == '.'
                        || d == 'e'
                        || d == 'E'
                        || (seen_e
                            && (d == '+' || d == '-')
                            && matches!(self.src[end - 1] as char, 'e' | 'E'));
                    if d == 'e' || d == 'E' {
                        // Only part of the number if followed by digit or sign.
                        let nxt = self.src.get(end + 1).map(|b| *b as char);
                        match nxt {
                            Some(n) if n.is_ascii_digit() || n == '+' || n == '-' => seen_e = true,
                            _ => break,
                        }
                    }
                    if !take {
                        break;
                    }
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let v: f64 = text.parse().map_err(|_| Error::Parse {
                    msg: format!("bad number literal `{text}`"),
                    offset: start,
                })?;
                self.pos = end;
                Tok::Num(v)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut end = self.pos;
                while end < self.src.len() {
                    let d = self.src[end] as char;
                    if d.is_ascii_alphanumeric() || d == '_' {
                        end += 1;
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap().to_string();
                self.pos = end;
                Tok::Ident(text)
            }
            other => {
                return Err(Error::Parse {
                    msg: format!("unexpected character `{other}`"),
                    offset: start,
                })
            }
        };
        Ok(Some((tok, start)))
    }
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    idx: usize,
    lookup: &'a dyn VarLookup,
    len: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.idx).map(|(_, o)| *o).unwrap_or(self.len)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.idx).map(|(t, _)| t.clone());
        self.idx += 1;
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        let off = self.offset();
        match self.bump() {
            Some(t) if t == want => Ok(()),
            _ => Err(Error::Parse {
                msg: format!("expected {what}"),
                offset: off,
            }),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    let rhs = self.term()?;
                    acc = Expr::Add(Box::new(acc), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    let rhs = self.term()?;
                    acc = Expr::Sub(Box::new(acc), Box::new(rhs));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    let rhs = self.factor()?;
                    acc = Expr::Mul(Box::new(acc), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    let rhs = self.factor()?;
                    acc = Expr::Div(Box::new(acc), Box::new(rhs));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.bump();
            let inner = self.factor()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        let base = self.base()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.bump();
            let off = self.offset();
            let negate = if matches!(self.peek(), Some(Tok::Minus)) {
                self.bump();
                true
            } else {
                false
            };
            match self.bump() {
                Some(Tok::Num(v)) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                    let mut k = v as i32;
                    if negate {
                        k = -k;
                    }
                    Ok(Expr::Pow(Box::new(base), k))
                }
                _ => Err(Error::Parse {
                    msg: "exponent must be an integer literal".into(),
                    offset: off,
                }),
            }
        } else {
            Ok(base)
        }
    }

    fn base(&mut self) -> Result<Expr> {
        let off = self.offset();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                if matches!(self.peek(), Some(Tok::LParen)) {
                    let f = Func::from_name(&name).ok_or_else(|| Error::Parse {
                        msg: format!(
                            "unknown function `{name}` (supported: sin cos tan exp log sqrt)"
                        ),
                        offset: off,
                    })?;
                    self.bump();
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "`)` closing function argument")?;
                    Ok(Expr::Call(f, Box::new(arg)))
                } else {
                    match self.lookup.resolve(&name) {
                        Some(Resolution::Slot(s)) => Ok(Expr::Var(s)),
                        Some(Resolution::Literal(v)) => Ok(num(v)),
                        None => Err(Error::UnknownIdentifier {
                            name,
                            offset: off,
                            declared: self.lookup.declared().join(", "),
                        }),
                    }
                }
            }
            _ => Err(Error::Parse {
                msg: "expected a number, variable, function call, or `(`".into(),
                offset: off,
            }),
        }
    }
}

/// Parses `src` against the given variable lookup.
pub fn parse(src: &str, lookup: &dyn VarLookup) -> Result<Expr> {
    let mut lexer = Lexer::new(src);
    let mut toks = Vec::new();
    while let Some(t) = lexer.next_tok()? {
        toks.push(t);
    }
    let mut p = Parser {
        toks,
        idx: 0,
        lookup,
        len: src.len(),
    };
    let e = p.expr()?;
    if p.idx != p.toks.len() {
        return Err(Error::Parse {
            msg: "trailing input after expression".into(),
            offset: p.offset(),
        });
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Printer
// ---------------------------------------------------------------------------

// Precedence levels: Add/Sub = 1, Mul/Div = 2, Neg = 3, Pow = 4, atoms = 5.
fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) | Expr::Div(..) => 2,
        Expr::Neg(..) => 3,
        Expr::Pow(..) => 4,
        Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => 5,
    }
}

fn print_into(e: &Expr, lookup: &dyn VarLookup, out: &mut String) {
    match e {
        // {:?} prints the shortest decimal that round-trips through f64.
        Expr::Num(v) => out.push_str(&format!("{v:?}")),
        Expr::Var(s) => out.push_str(&lookup.slot_name(*s)),
        Expr::Add(a, b) => {
            print_child(a, lookup, out, 1, false);
            out.push_str(" + ");
            print_child(b, lookup, out, 1, false);
        }
        Expr::Sub(a, b) => {
            print_child(a, lookup, out, 1, false);
            out.push_str(" - ");
            // Right operand of `-` needs parens at equal precedence.
            print_child(b, lookup, out, 1, true);
        }
        Expr::Mul(a, b) => {
            print_child(a, lookup, out, 2, false);
            out.push_str(" * ");
            print_child(b, lookup, out, 2, false);
        }
        Expr::Div(a, b) => {
            print_child(a, lookup, out, 2, false);
            out.push_str(" / ");
            print_child(b, lookup, out, 2, true);
        }
        Expr::Neg(a) => {
            out.push('-');
            print_child(a, lookup, out, 3, true);
        }
        Expr::Pow(a, k) => {
            print_child(a, lookup, out, 4, true);
            out.push('^');
            if *k < 0 {
                out.push_str(&format!("({k})"));
            } else {
                out.push_str(&k.to_string());
            }
        }
        Expr::Call(f, a) => {
            out.push_str(f.name());
            out.push('(');
            print_into(a, lookup, out);
            out.push(')');
        }
    }
}

fn print_child(e: &Expr, lookup: &dyn VarLookup, out: &mut String, parent: u8, strict: bool) {
    let needs = if strict {
        prec(e) <= parent
    } else {
        prec(e) < parent
    };
    // Negative exponents print their own parens; a `-x` child of `^` is
    // already covered by strict comparison.
    if needs {
        out.push('(');
        print_into(e, lookup, out);
        out.push(')');
    } else {
        print_into(e, lookup, out);
    }
}

/// Renders the tree; `parse(print(e)) == e` for trees built by this module.
pub fn print(e: &Expr, lookup: &dyn VarLookup) -> String {
    let mut s = String::new();
    print_into(e, lookup, &mut s);
    s
}

// ---------------------------------------------------------------------------
// Symbolic differentiation and substitution
// ---------------------------------------------------------------------------

/// Partial derivative with respect to the given slot.
pub fn diff(e: &Expr, slot: usize) -> Expr {
    match e {
        Expr::Num(_) => Expr::Num(0.0),
        Expr::Var(s) => Expr::Num(if *s == slot { 1.0 } else { 0.0 }),
        Expr::Add(a, b) => add(diff(a, slot), diff(b, slot)),
        Expr::Sub(a, b) => sub(diff(a, slot), diff(b, slot)),
        Expr::Mul(a, b) => add(
            mul(diff(a, slot), (**b).clone()),
            mul((**a).clone(), diff(b, slot)),
        ),
        Expr::Div(a, b) => {
            let da = diff(a, slot);
            let db = diff(b, slot);
            if is_zero(&db) {
                div(da, (**b).clone())
            } else {
                div(
                    sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                    powi((**b).clone(), 2),
                )
            }
        }
        Expr::Neg(a) => neg(diff(a, slot)),
        Expr::Pow(a, k) => {
            let da = diff(a, slot);
            if is_zero(&da) {
                return Expr::Num(0.0);
            }
            mul(mul(num(*k as f64), powi((**a).clone(), k - 1)), da)
        }
        Expr::Call(f, a) => {
            let da = diff(a, slot);
            if is_zero(&da) {
                return Expr::Num(0.0);
            }
            let outer = match f {
                Func::Sin => call(Func::Cos, (**a).clone()),
                Func::Cos => neg(call(Func::Sin, (**a).clone())),
                Func::Tan => add(num(1.0), powi(call(Func::Tan, (**a).clone()), 2)),
                Func::Exp => call(Func::Exp, (**a).clone()),
                Func::Log => return div(da, (**a).clone()),
                Func::Sqrt => {
                    return div(da, mul(num(2.0), call(Func::Sqrt, (**a).clone())));
                }
            };
            mul(outer, da)
        }
    }
}

/// Replacement for one slot during [`substitute`].
#[derive(Clone)]
pub enum SlotSub {
    /// Rename to another slot (possibly under a different signature layout).
    Slot(usize),
    /// Replace occurrences with a whole subtree (already in target slots).
    Tree(Expr),
}

/// Rewrites every variable according to `map` (indexed by old slot).
///
/// Slots past the end of `map` are an error in the caller's bookkeeping and
/// panic, since silent passthrough would corrupt signatures.
pub fn substitute(e: &Expr, map: &[SlotSub]) -> Expr {
    match e {
        Expr::Num(v) => Expr::Num(*v),
        Expr::Var(s) => match &map[*s] {
            SlotSub::Slot(t) => Expr::Var(*t),
            SlotSub::Tree(tree) => tree.clone(),
        },
        Expr::Add(a, b) => add(substitute(a, map), substitute(b, map)),
        Expr::Sub(a, b) => sub(substitute(a, map), substitute(b, map)),
        Expr::Mul(a, b) => mul(substitute(a, map), substitute(b, map)),
        Expr::Div(a, b) => div(substitute(a, map), substitute(b, map)),
        Expr::Neg(a) => neg(substitute(a, map)),
        Expr::Pow(a, k) => powi(substitute(a, map), *k),
        Expr::Call(f, a) => call(*f, substitute(a, map)),
    }
}

/// Largest slot index used, or `None` for constant expressions.
pub fn max_slot(e: &Expr) -> Option<usize> {
    match e {
        Expr::Num(_) => None,
        Expr::Var(s) => Some(*s),
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            match (max_slot(a), max_slot(b)) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, None) => x,
                (None, y) => y,
            }
        }
        Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => max_slot(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Names(Vec<String>);

    impl VarLookup for Names {
        fn resolve(&self, name: &str) -> Option<Resolution> {
            self.0.iter().position(|n| n == name).map(Resolution::Slot)
        }
        fn slot_name(&self, slot: usize) -> String {
            self.0[slot].clone()
        }
        fn declared(&self) -> Vec<String> {
            self.0.clone()
        }
    }

    fn names() -> Names {
        Names(vec!["x1".into(), "y1".into(), "y2".into()])
    }

    fn eval(e: &Expr, vals: &[f64]) -> f64 {
        match e {
            Expr::Num(v) => *v,
            Expr::Var(s) => vals[*s],
            Expr::Add(a, b) => eval(a, vals) + eval(b, vals),
            Expr::Sub(a, b) => eval(a, vals) - eval(b, vals),
            Expr::Mul(a, b) => eval(a, vals) * eval(b, vals),
            Expr::Div(a, b) => eval(a, vals) / eval(b, vals),
            Expr::Neg(a) => -eval(a, vals),
            Expr::Pow(a, k) => eval(a, vals).powi(*k),
            Expr::Call(f, a) => {
                let u = eval(a, vals);
                match f {
                    Func::Sin => u.sin(),
                    Func::Cos => u.cos(),
                    Func::Tan => u.tan(),
                    Func::Exp => u.exp(),
                    Func::Log => u.ln(),
                    Func::Sqrt => u.sqrt(),
                }
            }
        }
    }

    #[test]
    fn parses_precedence_and_unary_minus() {
        let n = names();
        let e = parse("-x1 + y1 * y2^2 - y1 / (x1 + 1)", &n).unwrap();
        let v = eval(&e, &[2.0, 3.0, 4.0]);
        assert!((v - (-2.0 + 3.0 * 16.0 - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn function_calls_and_nested_parens() {
        let n = names();
        let e = parse("sin(x1)^2 + cos(x1)^2", &n).unwrap();
        assert!((eval(&e, &[0.7, 0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_exponent() {
        let n = names();
        let e = parse("x1^-2", &n).unwrap();
        assert!((eval(&e, &[2.0, 0.0, 0.0]) - 0.25).abs() < 1e-15);
        let e2 = parse("x1^(-2)", &n);
        // A parenthesized exponent is not an integer literal under the
        // grammar; make sure the error is a parse error, not a panic.
        assert!(e2.is_err());
    }

    #[test]
    fn unknown_identifier_reports_declared() {
        let n = names();
        match parse("x1 + q7", &n) {
            Err(Error::UnknownIdentifier { name, declared, .. }) => {
                assert_eq!(name, "q7");
                assert!(declared.contains("y2"));
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
    }

    #[test]
    fn unknown_function_is_rejected() {
        let n = names();
        assert!(matches!(parse("abs(x1)", &n), Err(Error::Parse { .. })));
    }

    #[test]
    fn print_parse_roundtrip_examples() {
        let n = names();
        for src in [
            "x1 - (y1 - y2)",
            "-(x1 + y1)",
            "x1 / (y1 * y2)",
            "(x1 + y1)^3",
            "2.5e-3 * sin(x1 - y1)",
            "x1 - y1 - y2",
            "x1 / y1 / y2",
        ] {
            let e = parse(src, &n).unwrap();
            let printed = print(&e, &n);
            let e2 = parse(&printed, &n).unwrap();
            assert_eq!(e, e2, "src `{src}` printed `{printed}`");
        }
    }

    #[test]
    fn diff_product_and_chain() {
        let n = names();
        let e = parse("x1^2 * sin(y1)", &n).unwrap();
        let dx = diff(&e, 0);
        let dy = diff(&e, 1);
        let at = [1.3, 0.4, 0.0];
        assert!((eval(&dx, &at) - 2.0 * 1.3 * 0.4f64.sin()).abs() < 1e-14);
        assert!((eval(&dy, &at) - 1.3f64.powi(2) * 0.4f64.cos()).abs() < 1e-14);
    }

    #[test]
    fn substitute_tree_for_slot() {
        let n = names();
        let e = parse("y1^2 + x1", &n).unwrap();
        let repl = parse("x1 + 1", &n).unwrap();
        let out = substitute(
            &e,
            &[SlotSub::Slot(0), SlotSub::Tree(repl), SlotSub::Slot(2)],
        );
        assert!((eval(&out, &[2.0, 99.0, 0.0]) - (9.0 + 2.0)).abs() < 1e-14);
    }
}
