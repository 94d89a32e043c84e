//! Token library, prefix traversals and their numeric evaluation.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExprError {
    #[error("malformed traversal: expression completes at token {position} of {len}")]
    Malformed { position: usize, len: usize },
    #[error("incomplete traversal: {needed} open slot(s) remain")]
    Incomplete { needed: usize },
    #[error("token id {0} is not in the library")]
    UnknownTokenId(u8),
    #[error("unknown token name `{0}`")]
    UnknownToken(String),
    #[error("variable index {index} out of range for {columns} input column(s)")]
    VariableOutOfRange { index: usize, columns: usize },
    #[error("empty traversal")]
    Empty,
}

/// The operator or terminal a token stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Symbol {
    Add,
    Sub,
    Mul,
    Div,
    Sin,
    Cos,
    Log,
    Exp,
    /// Input column, 0-based.
    Var(usize),
}

impl Symbol {
    pub fn arity(self) -> usize {
        match self {
            Symbol::Add | Symbol::Sub | Symbol::Mul | Symbol::Div => 2,
            Symbol::Sin | Symbol::Cos | Symbol::Log | Symbol::Exp => 1,
            Symbol::Var(_) => 0,
        }
    }

    pub fn kind(self) -> TokenKind {
        match self.arity() {
            2 => TokenKind::Binary,
            1 => TokenKind::Unary,
            _ => TokenKind::Variable,
        }
    }

    pub fn name(self) -> String {
        match self {
            Symbol::Add => "add".into(),
            Symbol::Sub => "sub".into(),
            Symbol::Mul => "mul".into(),
            Symbol::Div => "div".into(),
            Symbol::Sin => "sin".into(),
            Symbol::Cos => "cos".into(),
            Symbol::Log => "log".into(),
            Symbol::Exp => "exp".into(),
            Symbol::Var(i) => format!("x{}", i + 1),
        }
    }

    fn apply_unary(self, a: f64) -> f64 {
        match self {
            Symbol::Sin => a.sin(),
            Symbol::Cos => a.cos(),
            Symbol::Log => a.ln(),
            Symbol::Exp => a.exp(),
            _ => unreachable!("not a unary symbol"),
        }
    }

    fn apply_binary(self, a: f64, b: f64) -> f64 {
        match self {
            Symbol::Add => a + b,
            Symbol::Sub => a - b,
            Symbol::Mul => a * b,
            Symbol::Div => a / b,
            _ => unreachable!("not a binary symbol"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Binary,
    Unary,
    Variable,
}

/// Index of a token inside its [`TokenLibrary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u8);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub symbol: Symbol,
    pub name: String,
}

impl Token {
    pub fn arity(&self) -> usize {
        self.symbol.arity()
    }

    pub fn kind(&self) -> TokenKind {
        self.symbol.kind()
    }

    pub fn variable_index(&self) -> Option<usize> {
        match self.symbol {
            Symbol::Var(i) => Some(i),
            _ => None,
        }
    }
}

/// Ordered token set together with the structural relations used by the
/// action mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLibrary {
    tokens: Vec<Token>,
    arities: Vec<u8>,
    inverse_of: Vec<Option<TokenId>>,
    trig: Vec<bool>,
    variable_tokens: Vec<TokenId>,
}

impl TokenLibrary {
    /// `{add, sub, mul, div, sin, cos, log, exp, x1..xn}` with log/exp as the
    /// only inverse pair and sin/cos as the trig set.
    pub fn standard(n_variables: usize) -> Self {
        let mut symbols = vec![
            Symbol::Add,
            Symbol::Sub,
            Symbol::Mul,
            Symbol::Div,
            Symbol::Sin,
            Symbol::Cos,
            Symbol::Log,
            Symbol::Exp,
        ];
        symbols.extend((0..n_variables).map(Symbol::Var));
        Self::from_symbols(&symbols, &[(Symbol::Log, Symbol::Exp)], &[Symbol::Sin, Symbol::Cos])
    }

    pub fn from_symbols(symbols: &[Symbol], inverse_pairs: &[(Symbol, Symbol)], trig: &[Symbol]) -> Self {
        assert!(symbols.len() <= u8::MAX as usize, "token library too large");
        let tokens: Vec<Token> = symbols
            .iter()
            .enumerate()
            .map(|(i, &symbol)| Token {
                id: TokenId(i as u8),
                symbol,
                name: symbol.name(),
            })
            .collect();
        let find = |s: Symbol| tokens.iter().find(|t| t.symbol == s).map(|t| t.id);
        let mut inverse_of = vec![None; tokens.len()];
        for &(a, b) in inverse_pairs {
            if let (Some(ia), Some(ib)) = (find(a), find(b)) {
                inverse_of[ia.index()] = Some(ib);
                inverse_of[ib.index()] = Some(ia);
            }
        }
        let trig = tokens.iter().map(|t| trig.contains(&t.symbol)).collect();
        let arities = tokens.iter().map(|t| t.arity() as u8).collect();
        let variable_tokens = tokens
            .iter()
            .filter(|t| t.kind() == TokenKind::Variable)
            .map(|t| t.id)
            .collect();
        Self {
            tokens,
            arities,
            inverse_of,
            trig,
            variable_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> &Token {
        &self.tokens[id.index()]
    }

    pub fn arity(&self, id: TokenId) -> usize {
        self.arities[id.index()] as usize
    }

    pub fn inverse_of(&self, id: TokenId) -> Option<TokenId> {
        self.inverse_of[id.index()]
    }

    pub fn is_trig(&self, id: TokenId) -> bool {
        self.trig[id.index()]
    }

    pub fn is_variable(&self, id: TokenId) -> bool {
        self.arities[id.index()] == 0 && self.tokens[id.index()].variable_index().is_some()
    }

    pub fn variable_tokens(&self) -> &[TokenId] {
        &self.variable_tokens
    }

    pub fn n_variables(&self) -> usize {
        self.variable_tokens.len()
    }

    pub fn by_name(&self, name: &str) -> Option<TokenId> {
        self.tokens.iter().find(|t| t.name == name).map(|t| t.id)
    }

    pub fn by_symbol(&self, symbol: Symbol) -> Option<TokenId> {
        self.tokens.iter().find(|t| t.symbol == symbol).map(|t| t.id)
    }

    fn check(&self, id: TokenId) -> Result<(), ExprError> {
        if id.index() < self.tokens.len() {
            Ok(())
        } else {
            Err(ExprError::UnknownTokenId(id.0))
        }
    }
}

/// Pre-order token sequence encoding one expression tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Traversal {
    pub tokens: Vec<TokenId>,
}

impl Traversal {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Parses the whitespace-separated text form, e.g. `add x1 x1`.
    pub fn parse(text: &str, lib: &TokenLibrary) -> Result<Self, ExprError> {
        text.split_whitespace()
            .map(|name| lib.by_name(name).ok_or_else(|| ExprError::UnknownToken(name.to_string())))
            .collect::<Result<Vec<_>, _>>()
            .map(Self::new)
    }

    pub fn to_text(&self, lib: &TokenLibrary) -> String {
        self.tokens
            .iter()
            .map(|&id| lib.token(id).name.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn display<'a>(&'a self, lib: &'a TokenLibrary) -> impl fmt::Display + 'a {
        DisplayInfix { traversal: self, lib }
    }
}

/// Open slots left after the tokens of `traversal`: `1 + Σ(arity − 1)`.
pub fn needed_slots(traversal: &Traversal, lib: &TokenLibrary) -> Result<usize, ExprError> {
    let mut slots: usize = 1;
    for (i, &id) in traversal.tokens.iter().enumerate() {
        lib.check(id)?;
        if slots == 0 {
            return Err(ExprError::Malformed {
                position: i,
                len: traversal.len(),
            });
        }
        slots = slots - 1 + lib.arity(id);
    }
    Ok(slots)
}

fn require_complete(traversal: &Traversal, lib: &TokenLibrary) -> Result<(), ExprError> {
    if traversal.is_empty() {
        return Err(ExprError::Empty);
    }
    match needed_slots(traversal, lib)? {
        0 => Ok(()),
        needed => Err(ExprError::Incomplete { needed }),
    }
}

/// Predictions of a traversal over the rows of an input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub values: Vec<f64>,
    /// False iff any prediction is non-finite.
    pub valid: bool,
}

/// Evaluates a complete traversal on every row of `inputs` (rows × columns).
///
/// Operators are unprotected: division by zero, logs of non-positive values
/// and overflow produce non-finite values and clear `valid`.
pub fn evaluate(
    traversal: &Traversal,
    lib: &TokenLibrary,
    inputs: ArrayView2<f64>,
) -> Result<Evaluation, ExprError> {
    require_complete(traversal, lib)?;
    let columns = inputs.ncols();
    for &id in &traversal.tokens {
        if let Some(index) = lib.token(id).variable_index() {
            if index >= columns {
                return Err(ExprError::VariableOutOfRange { index, columns });
            }
        }
    }
    let rows = inputs.nrows();
    // Reverse pre-order: operands are on the stack by the time their operator
    // is reached, first operand on top.
    let mut stack: Vec<Vec<f64>> = Vec::with_capacity(traversal.len());
    for &id in traversal.tokens.iter().rev() {
        let symbol = lib.token(id).symbol;
        match symbol {
            Symbol::Var(j) => stack.push(inputs.column(j).to_vec()),
            _ if symbol.arity() == 1 => {
                let a = stack.last_mut().expect("complete traversal");
                a.iter_mut().for_each(|v| *v = symbol.apply_unary(*v));
            }
            _ => {
                let mut a = stack.pop().expect("complete traversal");
                let b = stack.pop().expect("complete traversal");
                a.iter_mut()
                    .zip(&b)
                    .for_each(|(x, &y)| *x = symbol.apply_binary(*x, y));
                stack.push(a);
            }
        }
    }
    let values = stack.pop().unwrap_or_else(|| vec![0.0; rows]);
    let valid = values.iter().all(|v| v.is_finite());
    Ok(Evaluation { values, valid })
}

/// Byte key identifying a traversal syntactically (one byte per token id).
pub fn canonical_key(traversal: &Traversal) -> Vec<u8> {
    traversal.tokens.iter().map(|t| t.0).collect()
}

/// Fully parenthesised infix rendering.
pub fn render_infix(traversal: &Traversal, lib: &TokenLibrary) -> Result<String, ExprError> {
    require_complete(traversal, lib)?;
    let mut pos = 0;
    let mut out = String::new();
    render_node(traversal, lib, &mut pos, &mut out);
    Ok(out)
}

fn render_node(traversal: &Traversal, lib: &TokenLibrary, pos: &mut usize, out: &mut String) {
    let token = lib.token(traversal.tokens[*pos]);
    *pos += 1;
    match token.symbol {
        Symbol::Var(_) => out.push_str(&token.name),
        s if s.arity() == 1 => {
            out.push_str(&token.name);
            out.push('(');
            render_node(traversal, lib, pos, out);
            out.push(')');
        }
        s => {
            let op = match s {
                Symbol::Add => " + ",
                Symbol::Sub => " - ",
                Symbol::Mul => " * ",
                _ => " / ",
            };
            out.push('(');
            render_node(traversal, lib, pos, out);
            out.push_str(op);
            render_node(traversal, lib, pos, out);
            out.push(')');
        }
    }
}

struct DisplayInfix<'a> {
    traversal: &'a Traversal,
    lib: &'a TokenLibrary,
}

impl fmt::Display for DisplayInfix<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match render_infix(self.traversal, self.lib) {
            Ok(s) => f.write_str(&s),
            Err(_) => write!(f, "<incomplete: {}>", self.traversal.to_text(self.lib)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn lib1() -> TokenLibrary {
        TokenLibrary::standard(1)
    }

    fn t(text: &str, lib: &TokenLibrary) -> Traversal {
        Traversal::parse(text, lib).unwrap()
    }

    #[test]
    fn standard_library_layout() {
        let lib = TokenLibrary::standard(2);
        assert_eq!(lib.len(), 10);
        assert_eq!(lib.n_variables(), 2);
        let log = lib.by_name("log").unwrap();
        let exp = lib.by_name("exp").unwrap();
        assert_eq!(lib.inverse_of(log), Some(exp));
        assert_eq!(lib.inverse_of(exp), Some(log));
        let trig: Vec<_> = lib.tokens().iter().filter(|t| lib.is_trig(t.id)).map(|t| t.name.clone()).collect();
        assert_eq!(trig, vec!["sin", "cos"]);
        let names: HashSet<_> = lib.tokens().iter().map(|t| t.name.clone()).collect();
        assert_eq!(names.len(), lib.len());
        assert_eq!(lib.token(lib.by_name("x2").unwrap()).variable_index(), Some(1));
    }

    #[test]
    fn needed_slots_examples() {
        let lib = lib1();
        assert_eq!(needed_slots(&t("add x1 x1", &lib), &lib).unwrap(), 0);
        assert_eq!(needed_slots(&t("add x1", &lib), &lib).unwrap(), 1);
        assert_eq!(needed_slots(&t("sin mul x1 x1", &lib), &lib).unwrap(), 0);
        assert_eq!(needed_slots(&Traversal::default(), &lib).unwrap(), 1);
        assert!(matches!(
            needed_slots(&t("x1 x1", &lib), &lib),
            Err(ExprError::Malformed { position: 1, len: 2 })
        ));
    }

    #[test]
    fn evaluate_examples() {
        let lib = lib1();
        let x = array![[2.0]];
        let e = evaluate(&t("add x1 x1", &lib), &lib, x.view()).unwrap();
        assert_eq!(e.values, vec![4.0]);
        assert!(e.valid);

        let zero = array![[0.0]];
        let e = evaluate(&t("log x1", &lib), &lib, zero.view()).unwrap();
        assert!(!e.valid);

        let nguyen5 = t("sub mul sin mul x1 x1 cos x1 div x1 x1", &lib);
        let e = evaluate(&nguyen5, &lib, array![[0.5]].view()).unwrap();
        let expected = (0.25f64).sin() * 0.5f64.cos() - 1.0;
        assert!((e.values[0] - expected).abs() < 1e-15);
        // x1 / x1 leaves the zero point undefined; the limit value uses x1 = 1e-300
        let e = evaluate(&nguyen5, &lib, array![[1e-300]].view()).unwrap();
        assert_eq!(e.values[0], -1.0);

        let e = evaluate(&t("div x1 x1", &lib), &lib, array![[3.7], [-1e-3], [1e10]].view()).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn evaluate_rejects_bad_input() {
        let lib = TokenLibrary::standard(2);
        assert!(matches!(
            evaluate(&t("add x1", &lib), &lib, array![[1.0, 2.0]].view()),
            Err(ExprError::Incomplete { needed: 1 })
        ));
        assert!(matches!(
            evaluate(&t("x2", &lib), &lib, array![[1.0]].view()),
            Err(ExprError::VariableOutOfRange { index: 1, columns: 1 })
        ));
    }

    #[test]
    fn render_examples() {
        let lib = lib1();
        assert_eq!(render_infix(&t("add x1 x1", &lib), &lib).unwrap(), "(x1 + x1)");
        assert_eq!(render_infix(&t("sin mul x1 x1", &lib), &lib).unwrap(), "sin((x1 * x1))");
        assert_eq!(
            render_infix(&t("sub mul sin mul x1 x1 cos x1 div x1 x1", &lib), &lib).unwrap(),
            "((sin((x1 * x1)) * cos(x1)) - (x1 / x1))"
        );
    }

    #[test]
    fn keys_are_syntactic() {
        let lib = TokenLibrary::standard(2);
        let a = t("add x1 x2", &lib);
        let b = t("add x2 x1", &lib);
        assert_eq!(canonical_key(&a), canonical_key(&a.clone()));
        assert_ne!(canonical_key(&a), canonical_key(&b));
    }

    #[test]
    fn text_form_round_trips() {
        let lib = TokenLibrary::standard(3);
        let tr = t("mul x3 exp sub x1 x2", &lib);
        assert_eq!(tr.to_text(&lib), "mul x3 exp sub x1 x2");
        assert!(matches!(Traversal::parse("add foo", &lib), Err(ExprError::UnknownToken(_))));
    }

    // ---- test-only oracles -------------------------------------------------

    #[derive(Debug)]
    enum Tree {
        Leaf(usize),
        Unary(Symbol, Box<Tree>),
        Binary(Symbol, Box<Tree>, Box<Tree>),
    }

    fn build_tree(tokens: &[TokenId], lib: &TokenLibrary, pos: &mut usize) -> Option<Tree> {
        let sym = lib.token(*tokens.get(*pos)?).symbol;
        *pos += 1;
        Some(match sym {
            Symbol::Var(j) => Tree::Leaf(j),
            s if s.arity() == 1 => Tree::Unary(s, Box::new(build_tree(tokens, lib, pos)?)),
            s => {
                let l = build_tree(tokens, lib, pos)?;
                let r = build_tree(tokens, lib, pos)?;
                Tree::Binary(s, Box::new(l), Box::new(r))
            }
        })
    }

    fn eval_tree(tree: &Tree, row: &[f64]) -> f64 {
        match tree {
            Tree::Leaf(j) => row[*j],
            Tree::Unary(s, a) => {
                let a = eval_tree(a, row);
                match s {
                    Symbol::Sin => a.sin(),
                    Symbol::Cos => a.cos(),
                    Symbol::Log => a.ln(),
                    _ => a.exp(),
                }
            }
            Tree::Binary(s, a, b) => {
                let (a, b) = (eval_tree(a, row), eval_tree(b, row));
                match s {
                    Symbol::Add => a + b,
                    Symbol::Sub => a - b,
                    Symbol::Mul => a * b,
                    _ => a / b,
                }
            }
        }
    }

    /// Minimal recursive-descent parser for the infix rendering.
    fn parse_infix(s: &str, lib: &TokenLibrary) -> Vec<TokenId> {
        fn node(s: &[u8], i: &mut usize, lib: &TokenLibrary, out: &mut Vec<TokenId>) {
            if s[*i] == b'(' {
                *i += 1;
                let mark = out.len();
                node(s, i, lib, out);
                let op = match &s[*i..*i + 3] {
                    b" + " => "add",
                    b" - " => "sub",
                    b" * " => "mul",
                    _ => "div",
                };
                *i += 3;
                out.insert(mark, lib.by_name(op).unwrap());
                node(s, i, lib, out);
                assert_eq!(s[*i], b')');
                *i += 1;
            } else {
                let start = *i;
                while *i < s.len() && s[*i].is_ascii_alphanumeric() {
                    *i += 1;
                }
                let name = std::str::from_utf8(&s[start..*i]).unwrap();
                out.push(lib.by_name(name).unwrap());
                if *i < s.len() && s[*i] == b'(' {
                    *i += 1;
                    node(s, i, lib, out);
                    assert_eq!(s[*i], b')');
                    *i += 1;
                }
            }
        }
        let mut out = Vec::new();
        let mut i = 0;
        node(s.as_bytes(), &mut i, lib, &mut out);
        assert_eq!(i, s.len());
        out
    }

    fn arb_traversal(n_vars: usize) -> impl Strategy<Value = Traversal> {
        let lib = TokenLibrary::standard(n_vars);
        let n = lib.len();
        proptest::collection::vec(0..n, 1..40).prop_map(move |choices| {
            // Walk the choices, forcing terminals once the length budget is hit.
            let lib = TokenLibrary::standard(n_vars);
            let mut tokens = Vec::new();
            let mut slots = 1usize;
            for c in choices.iter().cycle().take(200) {
                if slots == 0 {
                    break;
                }
                let mut id = TokenId(*c as u8);
                if tokens.len() + slots + lib.arity(id) > 24 {
                    id = lib.variable_tokens()[*c % n_vars];
                }
                slots = slots - 1 + lib.arity(id);
                tokens.push(id);
            }
            while slots > 0 {
                tokens.push(lib.variable_tokens()[0]);
                slots -= 1;
            }
            Traversal::new(tokens)
        })
    }

    proptest! {
        #[test]
        fn evaluate_matches_tree_interpreter(
            tr in arb_traversal(3),
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..10),
        ) {
            let lib = TokenLibrary::standard(3);
            let x = Array2::from_shape_vec((rows.len(), 3), rows.concat()).unwrap();
            let e = evaluate(&tr, &lib, x.view()).unwrap();
            let mut pos = 0;
            let tree = build_tree(&tr.tokens, &lib, &mut pos).unwrap();
            prop_assert_eq!(pos, tr.len());
            for (i, row) in rows.iter().enumerate() {
                let want = eval_tree(&tree, row);
                let got = e.values[i];
                if want.is_finite() {
                    prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
                } else {
                    prop_assert!(!got.is_finite());
                }
            }
            let again = evaluate(&tr, &lib, x.view()).unwrap();
            prop_assert_eq!(e.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            again.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn complete_iff_single_tree(raw in proptest::collection::vec(0usize..11, 1..20)) {
            let lib = TokenLibrary::standard(3);
            let tr = Traversal::new(raw.iter().map(|&i| TokenId(i as u8)).collect());
            let mut pos = 0;
            let tree = build_tree(&tr.tokens, &lib, &mut pos);
            let parses_exactly = tree.is_some() && pos == tr.len();
            let complete = matches!(needed_slots(&tr, &lib), Ok(0));
            prop_assert_eq!(complete, parses_exactly);
        }

        #[test]
        fn infix_round_trips(tr in arb_traversal(2)) {
            let lib = TokenLibrary::standard(2);
            let s = render_infix(&tr, &lib).unwrap();
            prop_assert_eq!(parse_infix(&s, &lib), tr.tokens);
        }
    }

    #[test]
    fn keys_never_collide() {
        use rand::{Rng, SeedableRng};
        let lib = TokenLibrary::standard(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut traversals = HashSet::new();
        let mut keys = HashSet::new();
        while traversals.len() < 100_000 {
            let mut tokens = Vec::new();
            let mut slots = 1usize;
            while slots > 0 {
                let mut id = TokenId(rng.gen_range(0..lib.len()) as u8);
                if tokens.len() + slots + lib.arity(id) > 16 {
                    id = lib.variable_tokens()[rng.gen_range(0..3)];
                }
                slots = slots - 1 + lib.arity(id);
                tokens.push(id);
            }
            let tr = Traversal::new(tokens);
            if traversals.insert(tr.clone()) {
                keys.insert(canonical_key(&tr));
            }
        }
        assert_eq!(keys.len(), traversals.len());
    }
}
