//! Smooth maps between coordinate blocks, with exact or finite-difference
//! derivatives.
//!
//! A [`Signature`] names ordered groups of variables (for example `x` with 2
//! slots then `y` with 3) and fixes a flat slot layout. A [`Field`] is a map
//! from those slots to a [`Shape`]-ful of components, backed either by
//! expression trees (derivatives exact via forward-mode jets and symbolic
//! differentiation) or by a closure (derivatives by central differences,
//! tagged as such).

pub mod expr;
pub mod jet;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use expr::{Expr, Resolution, SlotSub, VarLookup};
use jet::{Jet1, Jet2};

/// Component layout of a field's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// Row-major `rows x cols`.
    Matrix(usize, usize),
    /// Row-major `d0 x d1 x d2`.
    Array3(usize, usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(k) => k,
            Shape::Matrix(r, c) => r * c,
            Shape::Array3(a, b, c) => a * b * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One named block of consecutive slots.
#[derive(Debug, Clone)]
pub struct VarGroup {
    pub name: String,
    pub len: usize,
}

/// Ordered variable groups plus named constants available to parsed
/// expressions.
#[derive(Debug, Clone, Default)]
pub struct Signature {
    groups: Vec<VarGroup>,
    params: Vec<(String, f64)>,
}

impl Signature {
    /// Builds a signature from `(name, len)` pairs.
    ///
    /// Names must be ASCII identifiers not ending in a digit, and no group
    /// name may equal another group name with digits appended; both rules
    /// keep `name + index` parsing unambiguous.
    pub fn new(groups: &[(&str, usize)]) -> Result<Signature> {
        let groups: Vec<VarGroup> = groups
            .iter()
            .map(|(n, l)| VarGroup {
                name: (*n).to_string(),
                len: *l,
            })
            .collect();
        for g in &groups {
            if g.name.is_empty()
                || !g.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                || g.name.chars().next().unwrap().is_ascii_digit()
                || g.name.ends_with(|c: char| c.is_ascii_digit())
            {
                return Err(Error::Config(format!(
                    "bad variable group name `{}`: must be an identifier not ending in a digit",
                    g.name
                )));
            }
        }
        for (i, a) in groups.iter().enumerate() {
            for b in groups.iter().skip(i + 1) {
                if a.name == b.name {
                    return Err(Error::Config(format!(
                        "duplicate variable group `{}`",
                        a.name
                    )));
                }
            }
        }
        Ok(Signature {
            groups,
            params: Vec::new(),
        })
    }

    /// Adds named constants that parse as literals.
    pub fn with_params(mut self, params: &[(&str, f64)]) -> Result<Signature> {
        for (name, v) in params {
            if self.groups.iter().any(|g| g.name == *name) {
                return Err(Error::Config(format!(
                    "parameter `{name}` collides with a variable group"
                )));
            }
            if self.params.iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("duplicate parameter `{name}`")));
            }
            self.params.push(((*name).to_string(), *v));
        }
        Ok(self)
    }

    pub fn groups(&self) -> &[VarGroup] {
        &self.groups
    }

    pub fn total_len(&self) -> usize {
        self.groups.iter().map(|g| g.len).sum()
    }

    /// Flat slot range of the named group.
    pub fn group_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut off = 0;
        for g in &self.groups {
            if g.name == name {
                return Some(off..off + g.len);
            }
            off += g.len;
        }
        None
    }

    /// Concatenates per-group values into a flat slot vector.
    pub fn pack(&self, parts: &[&[f64]]) -> Result<Vec<f64>> {
        if parts.len() != self.groups.len() {
            return Err(Error::Dimension(format!(
                "signature has {} groups, got {} value blocks",
                self.groups.len(),
                parts.len()
            )));
        }
        let mut flat = Vec::with_capacity(self.total_len());
        for (g, p) in self.groups.iter().zip(parts) {
            if p.len() != g.len {
                return Err(Error::Dimension(format!(
                    "group `{}` has {} slots, got {} values",
                    g.name,
                    g.len,
                    p.len()
                )));
            }
            flat.extend_from_slice(p);
        }
        Ok(flat)
    }
}

impl VarLookup for Signature {
    fn resolve(&self, name: &str) -> Option<Resolution> {
        // Exact group name resolves only for singleton groups.
        let mut off = 0;
        for g in &self.groups {
            if g.name == name && g.len == 1 {
                return Some(Resolution::Slot(off));
            }
            off += g.len;
        }
        // name = group prefix + 1-based index.
        let split = name
            .char_indices()
            .rev()
            .take_while(|(_, c)| c.is_ascii_digit())
            .last()
            .map(|(i, _)| i);
        if let Some(i) = split {
            if i > 0 {
                let (prefix, digits) = name.split_at(i);
                if let Ok(idx) = digits.parse::<usize>() {
                    if idx >= 1 {
                        let mut off = 0;
                        for g in &self.groups {
                            if g.name == prefix && idx <= g.len {
                                return Some(Resolution::Slot(off + idx - 1));
                            }
                            off += g.len;
                        }
                    }
                }
            }
        }
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| Resolution::Literal(*v))
    }

    fn slot_name(&self, slot: usize) -> String {
        let mut off = 0;
        for g in &self.groups {
            if slot < off + g.len {
                if g.len == 1 {
                    return g.name.clone();
                }
                return format!("{}{}", g.name, slot - off + 1);
            }
            off += g.len;
        }
        format!("slot{slot}")
    }

    fn declared(&self) -> Vec<String> {
        let mut out = Vec::new();
        for g in &self.groups {
            if g.len == 1 {
                out.push(g.name.clone());
            } else {
                for i in 1..=g.len {
                    out.push(format!("{}{}", g.name, i));
                }
            }
        }
        for (n, _) in &self.params {
            out.push(format!("{n} (param)"));
        }
        out
    }
}

/// How a field's derivatives are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivKind {
    /// Symbolic / forward-mode: exact up to rounding.
    Exact,
    /// Central finite differences with the stated relative step.
    FiniteDifference { h1: f64, h2: f64 },
}

type ClosureFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
enum Backend {
    Exprs(Arc<Vec<Expr>>),
    Closure(ClosureFn),
}

/// A smooth map from a signature's slots to `shape.len()` components.
#[derive(Clone)]
pub struct Field {
    sig: Signature,
    shape: Shape,
    backend: Backend,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.backend {
            Backend::Exprs(_) => "exprs",
            Backend::Closure(_) => "closure",
        };
        write!(
            f,
            "Field({} slots -> {:?}, {})",
            self.sig.total_len(),
            self.shape,
            kind
        )
    }
}

// First-derivative FD step: cbrt(machine eps) scaled by coordinate size.
fn fd_step1(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

// Second-derivative FD step: eps^(1/4) scaled by coordinate size.
fn fd_step2(x: f64) -> f64 {
    f64::EPSILON.powf(0.25) * x.abs().max(1.0)
}

impl Field {
    /// Expression-backed field; `components.len()` must equal `shape.len()`.
    pub fn from_exprs(sig: Signature, shape: Shape, components: Vec<Expr>) -> Result<Field> {
        if components.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "shape wants {} components, got {}",
                shape.len(),
                components.len()
            )));
        }
        let nslots = sig.total_len();
        for c in &components {
            if let Some(m) = expr::max_slot(c) {
                if m >= nslots {
                    return Err(Error::Dimension(format!(
                        "expression references slot {m} but signature has {nslots}"
                    )));
                }
            }
        }
        Ok(Field {
            sig,
            shape,
            backend: Backend::Exprs(Arc::new(components)),
        })
    }

    /// Parses one source string per component.
    pub fn parse(sig: Signature, shape: Shape, sources: &[&str]) -> Result<Field> {
        if sources.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "shape wants {} components, got {} expressions",
                shape.len(),
                sources.len()
            )));
        }
        let components = sources
            .iter()
            .map(|s| expr::parse(s, &sig))
            .collect::<Result<Vec<_>>>()?;
        Field::from_exprs(sig, shape, components)
    }

    /// Constant field (expression-backed, so it composes symbolically).
    pub fn constant(sig: Signature, shape: Shape, values: &[f64]) -> Result<Field> {
        if values.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "shape wants {} components, got {} values",
                shape.len(),
                values.len()
            )));
        }
        let components = values.iter().map(|v| expr::num(*v)).collect();
        Field::from_exprs(sig, shape, components)
    }

    /// Closure-backed field; derivatives fall back to central differences.
    pub fn from_closure<F>(sig: Signature, shape: Shape, f: F) -> Field
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Field {
            sig,
            shape,
            backend: Backend::Closure(Arc::new(f)),
        }
    }

    pub fn signature(&self) -> &Signature {
        &self.sig
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n_components(&self) -> usize {
        self.shape.len()
    }

    pub fn n_slots(&self) -> usize {
        self.sig.total_len()
    }

    pub fn derivative_kind(&self) -> DerivKind {
        match &self.backend {
            Backend::Exprs(_) => DerivKind::Exact,
            Backend::Closure(_) => DerivKind::FiniteDifference {
                h1: f64::EPSILON.cbrt(),
                h2: f64::EPSILON.powf(0.25),
            },
        }
    }

    /// Borrow of the expression components, if expression-backed.
    pub fn exprs(&self) -> Option<&[Expr]> {
        match &self.backend {
            Backend::Exprs(e) => Some(e),
            Backend::Closure(_) => None,
        }
    }

    fn check_flat(&self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.sig.total_len() {
            return Err(Error::Dimension(format!(
                "field over {} slots evaluated with {} values",
                self.sig.total_len(),
                flat.len()
            )));
        }
        Ok(())
    }

    /// Component values at a flat slot vector.
    ///
    /// A NaN or infinite component is an error; for expression-backed fields
    /// the message names the innermost subexpression that went non-finite
    /// (for example a division by zero or `log` of a non-positive value).
    pub fn value(&self, flat: &[f64]) -> Result<DVector<f64>> {
        self.check_flat(flat)?;
        let out = match &self.backend {
            Backend::Exprs(es) => DVector::from_iterator(
                es.len(),
                es.iter().map(|e| jet::eval_f64(e, flat)),
            ),
            Backend::Closure(f) => {
                let mut out = vec![0.0; self.shape.len()];
                f(flat, &mut out);
                DVector::from_vec(out)
            }
        };
        if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(self.nonfinite_detail(flat, bad, out[bad])));
        }
        Ok(out)
    }

    fn nonfinite_detail(&self, flat: &[f64], component: usize, value: f64) -> String {
        // Innermost subexpression whose own children evaluate finite.
        fn culprit<'a>(e: &'a Expr, flat: &[f64]) -> &'a Expr {
            let children: Vec<&Expr> = match e {
                Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                    vec![a, b]
                }
                Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => vec![a],
                Expr::Num(_) | Expr::Var(_) => vec![],
            };
            for c in children {
                if !jet::eval_f64(c, flat).is_finite() {
                    return culprit(c, flat);
                }
            }
            e
        }
        match &self.backend {
            Backend::Exprs(es) => {
                let sub = culprit(&es[component], flat);
                format!(
                    "component {component} evaluated to {value}; offending subexpression `{}`",
                    expr::print(sub, &self.sig)
                )
            }
            Backend::Closure(_) => {
                format!("component {component} evaluated to {value}")
            }
        }
    }

    /// Scalar value; panics on non-scalar shape misuse in debug builds.
    pub fn scalar(&self, flat: &[f64]) -> Result<f64> {
        debug_assert_eq!(self.shape.len(), 1);
        Ok(self.value(flat)?[0])
    }

    /// Jacobian: `n_components x n_slots`.
    pub fn jacobian(&self, flat: &[f64]) -> Result<DMatrix<f64>> {
        self.check_flat(flat)?;
        let (nc, ns) = (self.shape.len(), self.sig.total_len());
        match &self.backend {
            Backend::Exprs(es) => {
                let vars: Vec<Jet1> = flat
                    .iter()
                    .enumerate()
                    .map(|(i, v)| Jet1::variable(*v, ns, i))
                    .collect();
                let mut m = DMatrix::zeros(nc, ns);
                for (r, e) in es.iter().enumerate() {
                    let j = jet::eval_jet1(e, &vars);
                    for c in 0..ns {
                        m[(r, c)] = j.g[c];
                    }
                }
                Ok(m)
            }
            Backend::Closure(f) => {
                let mut m = DMatrix::zeros(nc, ns);
                let mut plus = vec![0.0; nc];
                let mut minus = vec![0.0; nc];
                let mut xb = flat.to_vec();
                for c in 0..ns {
                    let h = fd_step1(flat[c]);
                    xb[c] = flat[c] + h;
                    f(&xb, &mut plus);
                    xb[c] = flat[c] - h;
                    f(&xb, &mut minus);
                    xb[c] = flat[c];
                    for r in 0..nc {
                        m[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
                    }
                }
                Ok(m)
            }
        }
    }

    /// Hessians, one `n_slots x n_slots` matrix per component.
    pub fn hessian(&self, flat: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.check_flat(flat)?;
        let (nc, ns) = (self.shape.len(), self.sig.total_len());
        match &self.backend {
            Backend::Exprs(es) => {
                let vars: Vec<Jet2> = flat
                    .iter()
                    .enumerate()
                    .map(|(i, v)| Jet2::variable(*v, ns, i))
                    .collect();
                let mut out = Vec::with_capacity(nc);
                for e in es.iter() {
                    let j = jet::eval_jet2(e, &vars);
                    out.push(DMatrix::from_row_iterator(ns, ns, j.h.iter().copied()));
                }
                Ok(out)
            }
            Backend::Closure(f) => {
                let mut out = vec![DMatrix::zeros(ns, ns); nc];
                let mut buf_pp = vec![0.0; nc];
                let mut buf_pm = vec![0.0; nc];
                let mut buf_mp = vec![0.0; nc];
                let mut buf_mm = vec![0.0; nc];
                let mut base = vec![0.0; nc];
                f(flat, &mut base);
                let mut xb = flat.to_vec();
                for i in 0..ns {
                    let hi = fd_step2(flat[i]);
                    // Diagonal: (f(+h) - 2 f + f(-h)) / h^2.
                    xb[i] = flat[i] + hi;
                    f(&xb, &mut buf_pp);
                    xb[i] = flat[i] - hi;
                    f(&xb, &mut buf_mm);
                    xb[i] = flat[i];
                    for r in 0..nc {
                        out[r][(i, i)] = (buf_pp[r] - 2.0 * base[r] + buf_mm[r]) / (hi * hi);
                    }
                    for j in (i + 1)..ns {
                        let hj = fd_step2(flat[j]);
                        xb[i] = flat[i] + hi;
                        xb[j] = flat[j] + hj;
                        f(&xb, &mut buf_pp);
                        xb[j] = flat[j] - hj;
                        f(&xb, &mut buf_pm);
                        xb[i] = flat[i] - hi;
                        f(&xb, &mut buf_mm);
                        xb[j] = flat[j] + hj;
                        f(&xb, &mut buf_mp);
                        xb[i] = flat[i];
                        xb[j] = flat[j];
                        for r in 0..nc {
                            let v = (buf_pp[r] - buf_pm[r] - buf_mp[r] + buf_mm[r])
                                / (4.0 * hi * hj);
                            out[r][(i, j)] = v;
                            out[r][(j, i)] = v;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Partial derivative field of one component with respect to one slot.
    ///
    /// Expression-backed fields differentiate symbolically, so the result
    /// again has exact derivatives (this is how third derivatives of a
    /// Lagrangian become second derivatives of a first-derivative field).
    pub fn partial(&self, component: usize, slot: usize) -> Result<Field> {
        if component >= self.shape.len() || slot >= self.sig.total_len() {
            return Err(Error::Dimension(format!(
                "partial({component}, {slot}) out of range for {:?}",
                self
            )));
        }
        match &self.backend {
            Backend::Exprs(es) => {
                let d = expr::diff(&es[component], slot);
                Field::from_exprs(self.sig.clone(), Shape::Scalar, vec![d])
            }
            Backend::Closure(f) => {
                let f = f.clone();
                let nc = self.shape.len();
                Ok(Field::from_closure(
                    self.sig.clone(),
                    Shape::Scalar,
                    move |flat, out| {
                        let h = fd_step1(flat[slot]);
                        let mut xb = flat.to_vec();
                        let mut plus = vec![0.0; nc];
                        let mut minus = vec![0.0; nc];
                        xb[slot] = flat[slot] + h;
                        f(&xb, &mut plus);
                        xb[slot] = flat[slot] - h;
                        f(&xb, &mut minus);
                        out[0] = (plus[component] - minus[component]) / (2.0 * h);
                    },
                ))
            }
        }
    }

    /// Values and first two time derivatives of every component along a
    /// curve given by `(value, d/dt, d^2/dt^2)` per slot.
    pub fn along_curve(&self, curve: &[(f64, f64, f64)]) -> Result<Vec<(f64, f64, f64)>> {
        if curve.len() != self.sig.total_len() {
            return Err(Error::Dimension(format!(
                "curve has {} slots, field wants {}",
                curve.len(),
                self.sig.total_len()
            )));
        }
        match &self.backend {
            Backend::Exprs(es) => {
                let vars: Vec<Jet2> = curve
                    .iter()
                    .map(|(v, d1, d2)| Jet2::curve(*v, *d1, *d2))
                    .collect();
                Ok(es
                    .iter()
                    .map(|e| {
                        let j = jet::eval_jet2(e, &vars);
                        (j.v, j.d1(), j.d2())
                    })
                    .collect())
            }
            Backend::Closure(f) => {
                // 5-point stencils in the curve parameter.
                let nc = self.shape.len();
                let h = f64::EPSILON.powf(1.0 / 6.0);
                let mut samples = vec![vec![0.0; nc]; 5];
                for (k, s) in (-2i32..=2).zip(samples.iter_mut()) {
                    let t = k as f64 * h;
                    let flat: Vec<f64> = curve
                        .iter()
                        .map(|(v, d1, d2)| v + d1 * t + 0.5 * d2 * t * t)
                        .collect();
                    f(&flat, s);
                }
                Ok((0..nc)
                    .map(|r| {
                        let f_ = |i: usize| samples[i][r];
                        let d1 = (-f_(4) + 8.0 * f_(3) - 8.0 * f_(1) + f_(0)) / (12.0 * h);
                        let d2 = (-f_(4) + 16.0 * f_(3) - 30.0 * f_(2) + 16.0 * f_(1) - f_(0))
                            / (12.0 * h * h);
                        (f_(2), d1, d2)
                    })
                    .collect())
            }
        }
    }

    /// Rebuilds this field over a new signature, mapping old slot `i` to
    /// `slot_map[i]`. Expression-backed only.
    pub fn remap(&self, new_sig: Signature, slot_map: &[usize]) -> Result<Field> {
        let es = self.exprs().ok_or_else(|| {
            Error::Unsupported("cannot remap a closure-backed field symbolically".into())
        })?;
        if slot_map.len() != self.sig.total_len() {
            return Err(Error::Dimension(
                "slot map length does not match signature".into(),
            ));
        }
        let map: Vec<SlotSub> = slot_map.iter().map(|s| SlotSub::Slot(*s)).collect();
        let comps = es.iter().map(|e| expr::substitute(e, &map)).collect();
        Field::from_exprs(new_sig, self.shape, comps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig_xy() -> Signature {
        Signature::new(&[("x", 2), ("y", 3)]).unwrap()
    }

    #[test]
    fn signature_slot_naming() {
        let s = Signature::new(&[("psi", 1), ("v", 4)]).unwrap();
        assert!(matches!(s.resolve("psi"), Some(Resolution::Slot(0))));
        assert!(matches!(s.resolve("v3"), Some(Resolution::Slot(3))));
        assert!(s.resolve("v5").is_none());
        assert_eq!(s.slot_name(0), "psi");
        assert_eq!(s.slot_name(2), "v2");
    }

    #[test]
    fn signature_rejects_trailing_digit_names() {
        assert!(Signature::new(&[("y1", 2)]).is_err());
        assert!(Signature::new(&[("x", 1), ("x", 2)]).is_err());
    }

    #[test]
    fn params_inline_as_literals() {
        let s = Signature::new(&[("x", 1)])
            .unwrap()
            .with_params(&[("k", 2.5)])
            .unwrap();
        let f = Field::parse(s, Shape::Scalar, &["k * x^2"]).unwrap();
        assert!((f.scalar(&[3.0]).unwrap() - 22.5).abs() < 1e-15);
        // Parameters do not appear as differentiation slots.
        assert_eq!(f.n_slots(), 1);
    }

    #[test]
    fn jacobian_and_hessian_expr() {
        let f = Field::parse(sig_xy(), Shape::Vector(2), &["x1 * y2^2", "sin(x2) + y1 * y3"])
            .unwrap();
        let flat = [1.5, 0.3, 2.0, -1.0, 0.7];
        let j = f.jacobian(&flat).unwrap();
        assert!((j[(0, 0)] - 1.0).abs() < 1e-15); // d(x1 y2^2)/dx1 = y2^2 = 1
        assert!((j[(0, 3)] - 2.0 * 1.5 * -1.0).abs() < 1e-15);
        assert!((j[(1, 1)] - 0.3f64.cos()).abs() < 1e-15);
        assert!((j[(1, 2)] - 0.7).abs() < 1e-15);
        let h = f.hessian(&flat).unwrap();
        assert!((h[0][(0, 3)] - 2.0 * -1.0).abs() < 1e-15);
        assert_eq!(h[0][(0, 3)], h[0][(3, 0)]);
        assert!((h[1][(2, 4)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn closure_backend_fd_matches_expr() {
        let sig = Signature::new(&[("x", 2)]).unwrap();
        let fe = Field::parse(sig.clone(), Shape::Scalar, &["exp(x1) * x2^2"]).unwrap();
        let fc = Field::from_closure(sig, Shape::Scalar, |flat, out| {
            out[0] = flat[0].exp() * flat[1] * flat[1];
        });
        assert_eq!(fc.derivative_kind().clone(), fc.derivative_kind());
        let flat = [0.4, -1.1];
        let je = fe.jacobian(&flat).unwrap();
        let jc = fc.jacobian(&flat).unwrap();
        assert!((je - &jc).amax() < 1e-9);
        let he = fe.hessian(&flat).unwrap();
        let hc = fc.hessian(&flat).unwrap();
        assert!((he[0].clone() - &hc[0]).amax() < 1e-6);
    }

    #[test]
    fn along_curve_second_derivative() {
        // f(x) = x^2 along x(t) = 1 + 2t + 1.5 t^2:
        // f = 1, f' = 2 x x' = 4, f'' = 2 x'^2 + 2 x x'' = 8 + 6 = 14.
        let sig = Signature::new(&[("x", 1)]).unwrap();
        let f = Field::parse(sig, Shape::Scalar, &["x^2"]).unwrap();
        let out = f.along_curve(&[(1.0, 2.0, 3.0)]).unwrap();
        assert!((out[0].0 - 1.0).abs() < 1e-15);
        assert!((out[0].1 - 4.0).abs() < 1e-15);
        assert!((out[0].2 - 14.0).abs() < 1e-15);
    }

    #[test]
    fn partial_of_expr_field_is_exact() {
        let f = Field::parse(sig_xy(), Shape::Scalar, &["x1^3 * y1"]).unwrap();
        let d = f.partial(0, 0).unwrap();
        assert_eq!(d.derivative_kind(), DerivKind::Exact);
        let flat = [2.0, 0.0, 5.0, 0.0, 0.0];
        assert!((d.scalar(&flat).unwrap() - 3.0 * 4.0 * 5.0).abs() < 1e-12);
        // Second derivative of the original = first derivative of d.
        let dd = d.jacobian(&flat).unwrap();
        assert!((dd[(0, 0)] - 6.0 * 2.0 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_names_offending_subexpression() {
        let sig = Signature::new(&[("x", 2)]).unwrap();
        let f = Field::parse(sig, Shape::Scalar, &["1 + log(x1) / x2"]).unwrap();
        let err = f.value(&[-1.0, 2.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("log(x1)"), "got: {msg}");
        let err = f.value(&[1.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("log(x1) / x2"), "got: {err}");
    }

    #[test]
    fn pack_validates_group_lengths() {
        let s = sig_xy();
        assert!(s.pack(&[&[1.0, 2.0], &[3.0, 4.0, 5.0]]).is_ok());
        assert!(s.pack(&[&[1.0], &[3.0, 4.0, 5.0]]).is_err());
    }
}
