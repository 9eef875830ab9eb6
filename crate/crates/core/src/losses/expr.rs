//! A small arithmetic grammar over one variable `t`, evaluated with
//! second-order forward-mode derivatives.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 't' | 'e' | 'pi' | func '(' expr (',' expr)* ')' | '(' expr ')'
//! func   := exp | log | ln | sqrt | pow | cosh | sinh
//! ```

use super::LossError;

/// Value with first and second derivative with respect to the free variable.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet2 {
    pub fn constant(value: f64) -> Self {
        Self { value, d1: 0.0, d2: 0.0 }
    }

    pub fn variable(value: f64) -> Self {
        Self { value, d1: 1.0, d2: 0.0 }
    }

    fn is_constant(&self) -> bool {
        self.d1 == 0.0 && self.d2 == 0.0
    }

    /// Chain rule for a scalar function `h` given `h(a), h'(a), h''(a)`.
    fn chain(self, h: f64, dh: f64, ddh: f64) -> Self {
        Self { value: h, d1: dh * self.d1, d2: ddh * self.d1 * self.d1 + dh * self.d2 }
    }

    fn add(self, o: Self) -> Self {
        Self { value: self.value + o.value, d1: self.d1 + o.d1, d2: self.d2 + o.d2 }
    }

    fn sub(self, o: Self) -> Self {
        Self { value: self.value - o.value, d1: self.d1 - o.d1, d2: self.d2 - o.d2 }
    }

    fn neg(self) -> Self {
        Self { value: -self.value, d1: -self.d1, d2: -self.d2 }
    }

    fn mul(self, o: Self) -> Self {
        Self {
            value: self.value * o.value,
            d1: self.d1 * o.value + self.value * o.d1,
            d2: self.d2 * o.value + 2.0 * self.d1 * o.d1 + self.value * o.d2,
        }
    }

    fn recip(self) -> Self {
        let v = self.value;
        self.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v))
    }

    fn div(self, o: Self) -> Self {
        self.mul(o.recip())
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    fn ln(self) -> Self {
        let v = self.value;
        self.chain(v.ln(), 1.0 / v, -1.0 / (v * v))
    }

    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * s * s))
    }

    fn cosh(self) -> Self {
        let v = self.value;
        self.chain(v.cosh(), v.sinh(), v.cosh())
    }

    fn sinh(self) -> Self {
        let v = self.value;
        self.chain(v.sinh(), v.cosh(), v.sinh())
    }

    fn pow(self, o: Self) -> Self {
        if o.is_constant() {
            let c = o.value;
            let v = self.value;
            return self.chain(v.powf(c), c * v.powf(c - 1.0), c * (c - 1.0) * v.powf(c - 2.0));
        }
        o.mul(self.ln()).exp()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Func {
    Exp,
    Log,
    Sqrt,
    Pow,
    Cosh,
    Sinh,
}

impl Func {
    fn lookup(name: &str) -> Option<Self> {
        Some(match name {
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sqrt" => Func::Sqrt,
            "pow" => Func::Pow,
            "cosh" => Func::Cosh,
            "sinh" => Func::Sinh,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Func::Pow => 2,
            _ => 1,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Const(f64),
    Var,
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// A parsed expression in the variable `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self, LossError> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Self { source: source.to_string(), root })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.jet(t).value
    }

    pub fn jet(&self, t: f64) -> Jet2 {
        eval_node(&self.root, Jet2::variable(t))
    }
}

fn eval_node(node: &Node, t: Jet2) -> Jet2 {
    match node {
        Node::Const(c) => Jet2::constant(*c),
        Node::Var => t,
        Node::Neg(a) => eval_node(a, t).neg(),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval_node(a, t), eval_node(b, t));
            match op {
                BinOp::Add => a.add(b),
                BinOp::Sub => a.sub(b),
                BinOp::Mul => a.mul(b),
                BinOp::Div => a.div(b),
                BinOp::Pow => a.pow(b),
            }
        }
        Node::Call(f, args) => {
            let a = eval_node(&args[0], t);
            match f {
                Func::Exp => a.exp(),
                Func::Log => a.ln(),
                Func::Sqrt => a.sqrt(),
                Func::Cosh => a.cosh(),
                Func::Sinh => a.sinh(),
                Func::Pow => a.pow(eval_node(&args[1], t)),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, LossError> {
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '0'..='9' | '.' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                    i += 1;
                }
                // exponent suffix like 1e-3
                if i < chars.len() && (chars[i].1 == 'e' || chars[i].1 == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j].1 == '+' || chars[j].1 == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].1.is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].1.is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text: String = chars[start..i].iter().map(|&(_, c)| c).collect();
                let v =
                    text.parse::<f64>().map_err(|_| LossError::Parse { pos, msg: format!("bad number `{text}`") })?;
                out.push((pos, Tok::Num(v)));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_alphanumeric() || chars[i].1 == '_') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().map(|&(_, c)| c).collect();
                out.push((pos, Tok::Ident(text)));
            }
            '+' | '-' | '*' | '/' | '^' => {
                out.push((pos, Tok::Op(c)));
                i += 1;
            }
            '\u{2212}' => {
                out.push((pos, Tok::Op('-')));
                i += 1;
            }
            '\u{00d7}' | '\u{00b7}' => {
                out.push((pos, Tok::Op('*')));
                i += 1;
            }
            '\u{00f7}' => {
                out.push((pos, Tok::Op('/')));
                i += 1;
            }
            '(' => {
                out.push((pos, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((pos, Tok::RParen));
                i += 1;
            }
            ',' => {
                out.push((pos, Tok::Comma));
                i += 1;
            }
            other => return Err(LossError::Parse { pos, msg: format!("unexpected character `{other}`") }),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn error(&self, msg: &str) -> LossError {
        let pos = self
            .tokens
            .get(self.pos)
            .map(|(p, _)| *p)
            .unwrap_or_else(|| self.tokens.last().map(|(p, _)| p + 1).unwrap_or(0));
        LossError::Parse { pos, msg: msg.to_string() }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, LossError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op('+')) => BinOp::Add,
                Some(Tok::Op('-')) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, LossError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op('*')) => BinOp::Mul,
                Some(Tok::Op('/')) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, LossError> {
        if self.eat(&Tok::Op('-')) {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat(&Tok::Op('+')) {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, LossError> {
        let base = self.atom()?;
        if self.eat(&Tok::Op('^')) {
            let exponent = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, LossError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.error("unexpected end of expression"));
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Node::Const(v))
            }
            Tok::LParen => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(&Tok::RParen) {
                    return Err(self.error("expected `)`"));
                }
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.pos += 1;
                match name.as_str() {
                    "t" => return Ok(Node::Var),
                    "e" => return Ok(Node::Const(std::f64::consts::E)),
                    "pi" => return Ok(Node::Const(std::f64::consts::PI)),
                    _ => {}
                }
                let Some(func) = Func::lookup(&name) else {
                    self.pos -= 1;
                    return Err(self.error(&format!("unknown identifier `{name}`")));
                };
                if !self.eat(&Tok::LParen) {
                    return Err(self.error(&format!("expected `(` after `{name}`")));
                }
                let mut args = vec![self.expr()?];
                while self.eat(&Tok::Comma) {
                    args.push(self.expr()?);
                }
                if !self.eat(&Tok::RParen) {
                    return Err(self.error("expected `)`"));
                }
                if args.len() != func.arity() {
                    return Err(self.error(&format!(
                        "`{name}` takes {} argument(s), got {}",
                        func.arity(),
                        args.len()
                    )));
                }
                Ok(Node::Call(func, args))
            }
            _ => Err(self.error("expected a value")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + b.abs())
    }

    #[test]
    fn evaluates_with_precedence() {
        let e = Expr::parse("1 + 2 * t ^ 2 - -3").unwrap();
        assert!(close(e.eval(2.0), 12.0));
        let e = Expr::parse("2^3^2").unwrap();
        assert!(close(e.eval(0.0), 512.0));
        let e = Expr::parse("-t^2").unwrap();
        assert!(close(e.eval(3.0), -9.0));
    }

    #[test]
    fn derivatives_of_linex() {
        let e = Expr::parse("exp(t) - t - 1").unwrap();
        let j = e.jet(0.7);
        assert!(close(j.value, 0.7f64.exp() - 1.7));
        assert!(close(j.d1, 0.7f64.exp() - 1.0));
        assert!(close(j.d2, 0.7f64.exp()));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let e = Expr::parse("t*log(t) - sqrt(t) / pow(t, 0.3) + cosh(t)/2").unwrap();
        let x = 1.3;
        let h = 1e-5;
        let j = e.jet(x);
        let fd1 = (e.eval(x + h) - e.eval(x - h)) / (2.0 * h);
        let fd2 = (e.jet(x + h).d1 - e.jet(x - h).d1) / (2.0 * h);
        assert!((j.d1 - fd1).abs() < 1e-8);
        assert!((j.d2 - fd2).abs() < 1e-8);
    }

    #[test]
    fn unicode_operators() {
        let e = Expr::parse("4\u{00d7}exp(t/2) \u{2212} 2\u{00b7}t \u{2212} 4").unwrap();
        assert!(close(e.eval(0.0), 0.0));
        let e = Expr::parse("t \u{00f7} 2").unwrap();
        assert!(close(e.eval(3.0), 1.5));
    }

    #[test]
    fn scientific_literals() {
        let e = Expr::parse("1e-3 * t + 2.5E2").unwrap();
        assert!(close(e.eval(1000.0), 251.0));
    }

    #[test]
    fn parse_errors_carry_position() {
        for bad in ["", "t +", "foo(t)", "exp t", "pow(t)", "(t", "t $ 2", "t t"] {
            assert!(matches!(Expr::parse(bad), Err(LossError::Parse { .. })), "{bad}");
        }
        match Expr::parse("t + bar") {
            Err(LossError::Parse { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("{other:?}"),
        }
    }
}
