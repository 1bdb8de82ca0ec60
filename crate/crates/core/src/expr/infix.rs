//! Infix text <-> prefix expressions.
//!
//! Printing: sums are always parenthesized except directly inside a function
//! call, products chain left-to-right, `-x` prints as `(-x)`, `x^2` is the
//! square token, and `inv`/`neg`/`sq` are also accepted as function names.
//! The printer only emits forms the parser maps back to the same tokens.

use super::{Expression, Names, Node, Op, TokenLibrary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Prec {
    Atom,
    Power,
    Product,
}

struct Printer<'a> {
    nodes: &'a [Node],
    children: Vec<[usize; 2]>,
    names: &'a Names,
}

impl Printer<'_> {
    fn print(&self, i: usize, bare: bool) -> (String, Prec) {
        let ch = self.children[i];
        match self.nodes[i] {
            Node::Var(j) => (self.names.var(j), Prec::Atom),
            Node::Class(j) => (self.names.class(j), Prec::Atom),
            Node::Spe(j) => (self.names.spe(j), Prec::Atom),
            Node::Lit(v) => {
                if v.is_sign_negative() {
                    (format!("({v})"), Prec::Atom)
                } else {
                    (format!("{v}"), Prec::Atom)
                }
            }
            Node::Op(op) => match op {
                Op::Add | Op::Sub => {
                    let a = self.print(ch[0], false).0;
                    let b = self.print(ch[1], false).0;
                    let body = format!("{a} {} {b}", op.symbol());
                    if bare {
                        (body, Prec::Atom)
                    } else {
                        (format!("({body})"), Prec::Atom)
                    }
                }
                Op::Mul | Op::Div => {
                    let a = self.print(ch[0], false).0;
                    let (b, pb) = self.print(ch[1], false);
                    let b = if pb == Prec::Product { format!("({b})") } else { b };
                    (format!("{a}{}{b}", op.symbol()), Prec::Product)
                }
                Op::Square => {
                    let (a, pa) = self.print(ch[0], false);
                    let a = if pa == Prec::Atom { a } else { format!("({a})") };
                    (format!("{a}^2"), Prec::Power)
                }
                Op::Neg => {
                    let (a, pa) = self.print(ch[0], false);
                    let wrap = pa == Prec::Product || matches!(self.nodes[ch[0]], Node::Lit(_));
                    let a = if wrap { format!("({a})") } else { a };
                    if bare {
                        (format!("-{a}"), Prec::Atom)
                    } else {
                        (format!("(-{a})"), Prec::Atom)
                    }
                }
                _ => {
                    let a = self.print(ch[0], true).0;
                    (format!("{}({a})", op.symbol()), Prec::Atom)
                }
            },
        }
    }
}

pub(super) fn to_infix(expr: &Expression, names: &Names) -> String {
    let p = Printer { nodes: expr.nodes(), children: expr.children(), names };
    p.print(0, false).0
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s = &text[start..i];
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Parse { pos: start, msg: format!("bad number {s:?}") })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(text[start..i].to_string())));
        } else if "+-*/^()".contains(c) {
            out.push((i, Tok::Sym(c)));
            i += 1;
        } else {
            return Err(Error::Parse { pos: i, msg: format!("unexpected character {c:?}") });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    library: &'a TokenLibrary,
    out: Vec<Node>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { pos: self.here(), msg: msg.into() })
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {c:?}"))
        }
    }

    // Each production returns its subtree as a prefix vector.
    fn sum(&mut self) -> Result<Vec<Node>> {
        let mut lhs = self.term()?;
        while let Some(Tok::Sym(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == '+' { Op::Add } else { Op::Sub };
            lhs = join(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Vec<Node>> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Sym(c @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == '*' { Op::Mul } else { Op::Div };
            lhs = join(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Vec<Node>> {
        if self.peek() == Some(&Tok::Sym('-')) {
            self.pos += 1;
            let before_power = self.toks.get(self.pos + 1).map(|(_, t)| t) == Some(&Tok::Sym('^'));
            if let (Some(Tok::Num(v)), false) = (self.peek().cloned(), before_power) {
                self.pos += 1;
                return Ok(vec![Node::Lit(-v)]);
            }
            let inner = self.unary()?;
            let mut v = vec![Node::Op(Op::Neg)];
            v.extend(inner);
            return Ok(v);
        }
        let atom = self.atom()?;
        self.power_suffix(atom)
    }

    fn power_suffix(&mut self, mut base: Vec<Node>) -> Result<Vec<Node>> {
        while self.peek() == Some(&Tok::Sym('^')) {
            self.pos += 1;
            match self.peek() {
                Some(Tok::Num(v)) if *v == 2.0 => self.pos += 1,
                _ => return self.err("only ^2 is supported"),
            }
            base.insert(0, Node::Op(Op::Square));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Vec<Node>> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(vec![Node::Lit(v)])
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let inner = self.sum()?;
                self.expect(')')?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                if self.toks.get(self.pos + 1).map(|(_, t)| t) == Some(&Tok::Sym('(')) {
                    let Some(op) = Op::from_symbol(&name).filter(|op| op.arity() == 1) else {
                        return self.err(format!("unknown function {name:?}"));
                    };
                    self.pos += 2;
                    let inner = self.sum()?;
                    self.expect(')')?;
                    let mut v = vec![Node::Op(op)];
                    v.extend(inner);
                    return Ok(v);
                }
                match self.library.id_of(&name) {
                    Some(id) if self.library.token(id).arity() == 0 => {
                        self.pos += 1;
                        Ok(vec![self.library.token(id).node])
                    }
                    _ => self.err(format!("unknown symbol {name:?}")),
                }
            }
            Some(Tok::Sym(c)) => self.err(format!("unexpected {c:?}")),
            None => self.err("unexpected end of input"),
        }
    }
}

fn join(op: Op, lhs: Vec<Node>, rhs: Vec<Node>) -> Vec<Node> {
    let mut v = Vec::with_capacity(1 + lhs.len() + rhs.len());
    v.push(Node::Op(op));
    v.extend(lhs);
    v.extend(rhs);
    v
}

/// Parse infix text whose symbols are declared in `library`.
///
/// Numeric literals become fixed-constant nodes even when the library only
/// offers `1`.
pub fn parse_infix(text: &str, library: &TokenLibrary) -> Result<Expression> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0, end: text.len(), library, out: Vec::new() };
    let nodes = p.sum()?;
    if p.pos != p.toks.len() {
        return p.err("trailing input");
    }
    p.out = nodes;
    Expression::new(std::mem::take(&mut p.out), library.n_class(), library.n_spe())
}
