//! Linear differential-operator algebra and a small text DSL.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! expr  := ["-"] term (("+" | "-") term)*
//! term  := [number "*"] [name "*"] atom
//! atom  := "id" | deriv | deriv deriv
//! deriv := "d" dimname ["^2"]
//! ```
//!
//! `dx^2` is the second derivative along `x`; `dx dy` is the mixed partial.
//! A `name` coefficient refers to a coefficient field resolved against a
//! [`CoeffRegistry`] at the constraint point. Parsing canonicalizes the term
//! list: duplicate multi-indices merge, constants fold, and named
//! coefficients sort alphabetically.

use crate::diff::{BundleOf, Scalar};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Coefficient of one derivative term: a constant, or a named coefficient
/// field scaled by a constant.
#[derive(Debug, Clone, PartialEq)]
pub enum CoeffExpr {
    Const(f64),
    Named { name: String, scale: f64 },
}

/// One coefficient-weighted partial-derivative term (total order <= 2).
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeTerm {
    /// Per-dimension derivative orders; the sum is the term's total order.
    pub multi_index: Vec<u8>,
    pub coeff: CoeffExpr,
}

impl DerivativeTerm {
    pub fn total_order(&self) -> u8 {
        self.multi_index.iter().sum()
    }
}

/// A sum of derivative terms over named input dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    pub terms: Vec<DerivativeTerm>,
    pub dims: Vec<String>,
}

/// Resolves named coefficient fields at evaluation points.
#[derive(Default)]
pub struct CoeffRegistry {
    entries: BTreeMap<String, Box<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
}

impl std::fmt::Debug for CoeffRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoeffRegistry")
            .field("names", &self.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl CoeffRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_const(&mut self, name: &str, value: f64) {
        self.entries.insert(name.to_string(), Box::new(move |_| value));
    }

    pub fn insert_fn(
        &mut self,
        name: &str,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) {
        self.entries.insert(name.to_string(), Box::new(f));
    }

    pub fn resolve(&self, name: &str, at: &[f64]) -> Result<f64> {
        match self.entries.get(name) {
            Some(f) => {
                let v = f(at);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::BadConfig(format!(
                        "coefficient {name:?} evaluated to a non-finite value"
                    )))
                }
            }
            None => Err(Error::BadConfig(format!(
                "unknown coefficient name {name:?}"
            ))),
        }
    }
}

impl LinearOperator {
    /// The identity operator over the given dimensions.
    pub fn identity(dims: &[&str]) -> Self {
        Self {
            terms: vec![DerivativeTerm {
                multi_index: vec![0; dims.len()],
                coeff: CoeffExpr::Const(1.0),
            }],
            dims: dims.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// First derivative along one named dimension.
    pub fn partial(dims: &[&str], dim: &str) -> Result<Self> {
        let k = dims
            .iter()
            .position(|d| *d == dim)
            .ok_or_else(|| Error::BadConfig(format!("unknown dimension {dim:?}")))?;
        let mut idx = vec![0; dims.len()];
        idx[k] = 1;
        Ok(Self {
            terms: vec![DerivativeTerm {
                multi_index: idx,
                coeff: CoeffExpr::Const(1.0),
            }],
            dims: dims.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn input_dims(&self) -> usize {
        self.dims.len()
    }

    /// Max total derivative order over the terms.
    pub fn order(&self) -> u8 {
        self.terms.iter().map(|t| t.total_order()).max().unwrap_or(0)
    }

    /// Numeric coefficients of every term at a point, named references
    /// resolved against the registry.
    pub fn resolve_coeffs(&self, at: &[f64], registry: &CoeffRegistry) -> Result<Vec<f64>> {
        self.terms
            .iter()
            .map(|t| match &t.coeff {
                CoeffExpr::Const(c) => Ok(*c),
                CoeffExpr::Named { name, scale } => {
                    Ok(scale * registry.resolve(name, at)?)
                }
            })
            .collect()
    }

    /// Canonical text form that reparses to the same term list.
    pub fn pretty_print(&self) -> String {
        let mut out = String::new();
        for (i, term) in self.terms.iter().enumerate() {
            let (mag, neg, name): (f64, bool, Option<&str>) = match &term.coeff {
                CoeffExpr::Const(c) => (c.abs(), *c < 0.0, None),
                CoeffExpr::Named { name, scale } => (scale.abs(), *scale < 0.0, Some(name)),
            };
            if i == 0 {
                if neg {
                    out.push_str("- ");
                }
            } else {
                out.push_str(if neg { " - " } else { " + " });
            }
            let mut factors: Vec<String> = Vec::new();
            if mag != 1.0 {
                factors.push(format!("{mag}"));
            }
            if let Some(n) = name {
                factors.push(n.to_string());
            }
            let mut atom = String::new();
            for (k, &o) in term.multi_index.iter().enumerate() {
                match o {
                    0 => {}
                    1 => {
                        if !atom.is_empty() {
                            atom.push(' ');
                        }
                        let _ = write!(atom, "d{}", self.dims[k]);
                    }
                    2 => {
                        if !atom.is_empty() {
                            atom.push(' ');
                        }
                        let _ = write!(atom, "d{}^2", self.dims[k]);
                    }
                    _ => unreachable!("total order capped at 2"),
                }
            }
            if atom.is_empty() {
                atom.push_str("id");
            }
            factors.push(atom);
            out.push_str(&factors.join("*"));
        }
        if out.is_empty() {
            out.push_str("0*id");
        }
        out
    }
}

/// Applies an operator to a derivative bundle: selects the bundle entry for
/// each term's multi-index and sums with the resolved coefficients. Returns
/// one value per bundle output channel.
pub fn apply_operator(
    op: &LinearOperator,
    bundle: &BundleOf<f64>,
    at: &[f64],
    registry: &CoeffRegistry,
) -> Result<Vec<f64>> {
    let coeffs = op.resolve_coeffs(at, registry)?;
    apply_resolved(op, bundle, &coeffs)
}

/// Operator application with pre-resolved coefficients, generic over the
/// scalar carrier so the same selection runs on tape variables.
pub fn apply_resolved<S: Scalar>(
    op: &LinearOperator,
    bundle: &BundleOf<S>,
    coeffs: &[f64],
) -> Result<Vec<S>> {
    if bundle.inputs != op.input_dims() {
        return Err(Error::DimensionMismatch(format!(
            "operator over {} dims applied to bundle with {} inputs",
            op.input_dims(),
            bundle.inputs
        )));
    }
    if op.order() > bundle.order {
        return Err(Error::OrderTooLow {
            needed: op.order(),
            got: bundle.order,
        });
    }
    let zero = bundle.value[0].lit(0.0);
    let mut out = vec![zero; bundle.outputs];
    for (term, &coeff) in op.terms.iter().zip(coeffs) {
        if coeff == 0.0 {
            continue;
        }
        let selector = term_entry_indices(&term.multi_index);
        for f in 0..bundle.outputs {
            let entry = match selector {
                EntrySel::Value => bundle.value[f],
                EntrySel::Jac(k) => bundle.jac_at(f, k),
                EntrySel::Hess(k1, k2) => bundle.hess_at(f, k1, k2),
            };
            out[f] = out[f] + entry * coeff;
        }
    }
    Ok(out)
}

enum EntrySel {
    Value,
    Jac(usize),
    Hess(usize, usize),
}

fn term_entry_indices(multi_index: &[u8]) -> EntrySel {
    let mut dims_hit = multi_index
        .iter()
        .enumerate()
        .filter(|(_, &o)| o > 0)
        .flat_map(|(k, &o)| std::iter::repeat(k).take(o as usize));
    match (dims_hit.next(), dims_hit.next()) {
        (None, _) => EntrySel::Value,
        (Some(k), None) => EntrySel::Jac(k),
        (Some(k1), Some(k2)) => EntrySel::Hess(k1, k2),
    }
}

/// Max total derivative order of an operator.
pub fn operator_order(op: &LinearOperator) -> u8 {
    op.order()
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    End,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len()
            && self.src.as_bytes()[self.pos].is_ascii_whitespace()
        {
            self.pos += 1;
        }
    }

    /// Byte offset of the next token.
    fn peek_offset(&mut self) -> usize {
        self.skip_ws();
        self.pos
    }

    fn peek(&mut self) -> Result<(Tok, usize)> {
        let save = self.pos;
        let t = self.next_token()?;
        let r = (t.0, t.1);
        self.pos = save;
        Ok(r)
    }

    fn next_token(&mut self) -> Result<(Tok, usize)> {
        self.skip_ws();
        let start = self.pos;
        let bytes = self.src.as_bytes();
        if start >= bytes.len() {
            return Ok((Tok::End, start));
        }
        let c = bytes[start];
        match c {
            b'+' => {
                self.pos += 1;
                Ok((Tok::Plus, start))
            }
            b'-' => {
                self.pos += 1;
                Ok((Tok::Minus, start))
            }
            b'*' => {
                self.pos += 1;
                Ok((Tok::Star, start))
            }
            b'^' => {
                self.pos += 1;
                Ok((Tok::Caret, start))
            }
            b'0'..=b'9' | b'.' => {
                let mut end = start;
                while end < bytes.len()
                    && (bytes[end].is_ascii_digit() || bytes[end] == b'.')
                {
                    end += 1;
                }
                // Exponent part.
                if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                    let mut e = end + 1;
                    if e < bytes.len() && (bytes[e] == b'+' || bytes[e] == b'-') {
                        e += 1;
                    }
                    if e < bytes.len() && bytes[e].is_ascii_digit() {
                        while e < bytes.len() && bytes[e].is_ascii_digit() {
                            e += 1;
                        }
                        end = e;
                    }
                }
                let text = &self.src[start..end];
                let v: f64 = text.parse().map_err(|_| Error::ParseError {
                    offset: start,
                    expected: "number".into(),
                    found: text.into(),
                })?;
                self.pos = end;
                Ok((Tok::Num(v), start))
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = start;
                while end < bytes.len()
                    && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_')
                {
                    end += 1;
                }
                let text = self.src[start..end].to_string();
                self.pos = end;
                Ok((Tok::Ident(text), start))
            }
            other => Err(Error::ParseError {
                offset: start,
                expected: "number, identifier, '+', '-', '*', or '^'".into(),
                found: format!("{:?}", other as char),
            }),
        }
    }
}

/// Parses an operator expression over the given ordered dimension names.
pub fn parse_operator(text: &str, dim_names: &[&str]) -> Result<LinearOperator> {
    if text.trim().is_empty() {
        return Err(Error::ParseError {
            offset: 0,
            expected: "operator expression".into(),
            found: "empty string".into(),
        });
    }
    let mut lex = Lexer::new(text);
    let mut terms: Vec<DerivativeTerm> = Vec::new();

    // Optional leading sign.
    let mut sign = 1.0;
    if let (Tok::Minus, _) = lex.peek()? {
        lex.next_token()?;
        sign = -1.0;
    }
    loop {
        let term = parse_term(&mut lex, dim_names, sign)?;
        terms.push(term);
        let (tok, offset) = lex.next_token()?;
        match tok {
            Tok::Plus => sign = 1.0,
            Tok::Minus => sign = -1.0,
            Tok::End => break,
            other => {
                return Err(Error::ParseError {
                    offset,
                    expected: "'+', '-', or end of expression".into(),
                    found: format!("{other:?}"),
                })
            }
        }
    }
    Ok(canonicalize(terms, dim_names))
}

fn parse_term(lex: &mut Lexer<'_>, dim_names: &[&str], sign: f64) -> Result<DerivativeTerm> {
    let mut constant: Option<f64> = None;
    let mut named: Option<String> = None;

    // Leading numeric coefficient.
    if let (Tok::Num(v), _) = lex.peek()? {
        lex.next_token()?;
        expect_star(lex)?;
        constant = Some(v);
    }
    // Optional named coefficient: an identifier followed by '*' that is not
    // itself an atom.
    if let (Tok::Ident(name), off) = lex.peek()? {
        if name != "id" {
            let save = lex.pos;
            lex.next_token()?;
            if let (Tok::Star, _) = lex.peek()? {
                if looks_like_deriv(&name)
                    && dim_names.contains(&name.strip_prefix('d').unwrap_or(""))
                {
                    return Err(Error::ParseError {
                        offset: off,
                        expected: "mixed partials written as 'dx dy' (space-separated)".into(),
                        found: format!("derivative {name:?} used as a coefficient"),
                    });
                }
                lex.next_token()?;
                named = Some(name);
            } else {
                lex.pos = save;
            }
        }
    }

    let multi_index = parse_atom(lex, dim_names)?;
    let coeff = match named {
        Some(name) => CoeffExpr::Named {
            name,
            scale: sign * constant.unwrap_or(1.0),
        },
        None => CoeffExpr::Const(sign * constant.unwrap_or(1.0)),
    };
    Ok(DerivativeTerm { multi_index, coeff })
}

fn expect_star(lex: &mut Lexer<'_>) -> Result<()> {
    let (tok, offset) = lex.next_token()?;
    if tok == Tok::Star {
        Ok(())
    } else {
        Err(Error::ParseError {
            offset,
            expected: "'*' after coefficient".into(),
            found: format!("{tok:?}"),
        })
    }
}

fn parse_atom(lex: &mut Lexer<'_>, dim_names: &[&str]) -> Result<Vec<u8>> {
    let offset = lex.peek_offset();
    let (tok, _) = lex.next_token()?;
    let first = match tok {
        Tok::Ident(name) if name == "id" => {
            return Ok(vec![0; dim_names.len()]);
        }
        Tok::Ident(name) => parse_deriv(lex, &name, dim_names, offset)?,
        other => {
            return Err(Error::ParseError {
                offset,
                expected: "'id' or a derivative like 'dx'".into(),
                found: format!("{other:?}"),
            })
        }
    };
    let mut idx = vec![0u8; dim_names.len()];
    idx[first.0] += first.1;
    // Optional second derivative factor for mixed partials.
    if first.1 == 1 {
        if let (Tok::Ident(name), off2) = lex.peek()? {
            if name != "id" && looks_like_deriv(&name) {
                lex.next_token()?;
                let second = parse_deriv(lex, &name, dim_names, off2)?;
                if second.1 != 1 {
                    return Err(Error::ParseError {
                        offset: off2,
                        expected: "first-order factor in a mixed partial".into(),
                        found: format!("d{}^2", dim_names[second.0]),
                    });
                }
                idx[second.0] += 1;
            }
        }
    }
    let total: u8 = idx.iter().sum();
    if total > 2 {
        return Err(Error::ParseError {
            offset,
            expected: "derivative of total order <= 2".into(),
            found: format!("order {total}"),
        });
    }
    Ok(idx)
}

fn looks_like_deriv(name: &str) -> bool {
    name.len() >= 2 && name.starts_with('d')
}

/// Parses a derivative token `d<name>` with an optional `^2`, returning
/// `(dimension index, order)`.
fn parse_deriv(
    lex: &mut Lexer<'_>,
    token: &str,
    dim_names: &[&str],
    offset: usize,
) -> Result<(usize, u8)> {
    let suffix = token.strip_prefix('d').ok_or_else(|| Error::ParseError {
        offset,
        expected: "derivative token starting with 'd'".into(),
        found: token.into(),
    })?;
    let k = dim_names
        .iter()
        .position(|d| *d == suffix)
        .ok_or_else(|| Error::ParseError {
            offset,
            expected: format!("one of the dimensions {dim_names:?}"),
            found: format!("unknown dimension {suffix:?}"),
        })?;
    if let (Tok::Caret, _) = lex.peek()? {
        lex.next_token()?;
        let (tok, off) = lex.next_token()?;
        match tok {
            Tok::Num(v) if v == 2.0 => Ok((k, 2)),
            other => Err(Error::ParseError {
                offset: off,
                expected: "exponent 2".into(),
                found: format!("{other:?}"),
            }),
        }
    } else {
        Ok((k, 1))
    }
}

/// Merges duplicate multi-indices: constants fold into one term, named
/// coefficients fold by name, and terms sort by multi-index then name.
fn canonicalize(terms: Vec<DerivativeTerm>, dim_names: &[&str]) -> LinearOperator {
    let mut consts: BTreeMap<Vec<u8>, f64> = BTreeMap::new();
    let mut named: BTreeMap<(Vec<u8>, String), f64> = BTreeMap::new();
    for t in terms {
        match t.coeff {
            CoeffExpr::Const(c) => {
                *consts.entry(t.multi_index).or_insert(0.0) += c;
            }
            CoeffExpr::Named { name, scale } => {
                *named.entry((t.multi_index, name)).or_insert(0.0) += scale;
            }
        }
    }
    let mut out: Vec<DerivativeTerm> = Vec::new();
    for (idx, c) in consts {
        if c != 0.0 {
            out.push(DerivativeTerm {
                multi_index: idx,
                coeff: CoeffExpr::Const(c),
            });
        }
    }
    for ((idx, name), scale) in named {
        if scale != 0.0 {
            out.push(DerivativeTerm {
                multi_index: idx,
                coeff: CoeffExpr::Named { name, scale },
            });
        }
    }
    out.sort_by(|a, b| {
        a.multi_index.cmp(&b.multi_index).then_with(|| {
            let an = match &a.coeff {
                CoeffExpr::Const(_) => "",
                CoeffExpr::Named { name, .. } => name.as_str(),
            };
            let bn = match &b.coeff {
                CoeffExpr::Const(_) => "",
                CoeffExpr::Named { name, .. } => name.as_str(),
            };
            an.cmp(bn)
        })
    });
    if out.is_empty() {
        // Everything cancelled; keep a null identity term so the operator
        // still has at least one term.
        out.push(DerivativeTerm {
            multi_index: vec![0; dim_names.len()],
            coeff: CoeffExpr::Const(0.0),
        });
    }
    LinearOperator {
        terms: out,
        dims: dim_names.iter().map(|s| s.to_string()).collect(),
    }
}
