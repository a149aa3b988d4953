//! Forward-mode derivative carriers and expression evaluators.
//!
//! `Jet1` carries a value and gradient; `Jet2` adds a dense symmetric
//! Hessian. Evaluating an expression tree on jets seeded with unit
//! directions yields exact first and second partials in one pass (exact up
//! to floating-point rounding, no truncation error).
//!
//! A `Jet2` over a single variable doubles as a degree-2 Taylor arithmetic
//! in one parameter, which is how time derivatives along curves are
//! propagated.

use super::expr::{Expr, Func};

/// Value plus gradient with respect to `dim` inputs.
#[derive(Debug, Clone)]
pub struct Jet1 {
    pub v: f64,
    pub g: Vec<f64>,
}

impl Jet1 {
    pub fn constant(v: f64, dim: usize) -> Self {
        Jet1 {
            v,
            g: vec![0.0; dim],
        }
    }

    pub fn variable(v: f64, dim: usize, slot: usize) -> Self {
        let mut g = vec![0.0; dim];
        g[slot] = 1.0;
        Jet1 { v, g }
    }

    fn dim(&self) -> usize {
        self.g.len()
    }

    fn add(&self, o: &Jet1) -> Jet1 {
        Jet1 {
            v: self.v + o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| a + b).collect(),
        }
    }

    fn sub(&self, o: &Jet1) -> Jet1 {
        Jet1 {
            v: self.v - o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| a - b).collect(),
        }
    }

    fn mul(&self, o: &Jet1) -> Jet1 {
        Jet1 {
            v: self.v * o.v,
            g: self
                .g
                .iter()
                .zip(&o.g)
                .map(|(a, b)| a * o.v + b * self.v)
                .collect(),
        }
    }

    fn div(&self, o: &Jet1) -> Jet1 {
        let r = 1.0 / o.v;
        let v = self.v * r;
        Jet1 {
            v,
            g: self
                .g
                .iter()
                .zip(&o.g)
                .map(|(a, b)| (a - v * b) * r)
                .collect(),
        }
    }

    fn neg(&self) -> Jet1 {
        Jet1 {
            v: -self.v,
            g: self.g.iter().map(|a| -a).collect(),
        }
    }

    /// Chain rule for a scalar function with derivative `d1` at `self.v`.
    fn unary(&self, v: f64, d1: f64) -> Jet1 {
        Jet1 {
            v,
            g: self.g.iter().map(|a| d1 * a).collect(),
        }
    }

    fn powi(&self, k: i32) -> Jet1 {
        if k == 0 {
            return Jet1::constant(1.0, self.dim());
        }
        let v = self.v.powi(k);
        let d1 = k as f64 * self.v.powi(k - 1);
        self.unary(v, d1)
    }
}

/// Value, gradient, and symmetric Hessian with respect to `dim` inputs.
///
/// The Hessian is stored dense row-major (`dim * dim`); every operation
/// writes both triangles so exact symmetry holds by construction.
#[derive(Debug, Clone)]
pub struct Jet2 {
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl Jet2 {
    pub fn constant(v: f64, dim: usize) -> Self {
        Jet2 {
            v,
            g: vec![0.0; dim],
            h: vec![0.0; dim * dim],
        }
    }

    pub fn variable(v: f64, dim: usize, slot: usize) -> Self {
        let mut j = Jet2::constant(v, dim);
        j.g[slot] = 1.0;
        j
    }

    /// Degree-2 Taylor coefficient seed in a single parameter: value `v`,
    /// first derivative `d1`, second derivative `d2`.
    pub fn curve(v: f64, d1: f64, d2: f64) -> Self {
        Jet2 {
            v,
            g: vec![d1],
            h: vec![d2],
        }
    }

    /// First derivative in the single-parameter interpretation.
    pub fn d1(&self) -> f64 {
        debug_assert_eq!(self.g.len(), 1);
        self.g[0]
    }

    /// Second derivative in the single-parameter interpretation.
    pub fn d2(&self) -> f64 {
        debug_assert_eq!(self.h.len(), 1);
        self.h[0]
    }

    fn dim(&self) -> usize {
        self.g.len()
    }

    fn add(&self, o: &Jet2) -> Jet2 {
        Jet2 {
            v: self.v + o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| a + b).collect(),
            h: self.h.iter().zip(&o.h).map(|(a, b)| a + b).collect(),
        }
    }

    fn sub(&self, o: &Jet2) -> Jet2 {
        Jet2 {
            v: self.v - o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| a - b).collect(),
            h: self.h.iter().zip(&o.h).map(|(a, b)| a - b).collect(),
        }
    }

    fn mul(&self, o: &Jet2) -> Jet2 {
        let n = self.dim();
        let mut g = vec![0.0; n];
        for i in 0..n {
            g[i] = self.g[i] * o.v + o.g[i] * self.v;
        }
        let mut h = vec![0.0; n * n];
        // Fill the upper triangle and mirror so the result is symmetric to
        // the last bit regardless of summation order.
        for i in 0..n {
            for j in i..n {
                let v = self.v * o.h[i * n + j]
                    + o.v * self.h[i * n + j]
                    + (self.g[i] * o.g[j] + self.g[j] * o.g[i]);
                h[i * n + j] = v;
                h[j * n + i] = v;
            }
        }
        Jet2 {
            v: self.v * o.v,
            g,
            h,
        }
    }

    fn recip(&self) -> Jet2 {
        let n = self.dim();
        let r = 1.0 / self.v;
        let r2 = r * r;
        let r3 = r2 * r;
        let mut g = vec![0.0; n];
        for i in 0..n {
            g[i] = -r2 * self.g[i];
        }
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = -r2 * self.h[i * n + j] + 2.0 * r3 * self.g[i] * self.g[j];
                h[i * n + j] = v;
                h[j * n + i] = v;
            }
        }
        Jet2 { v: r, g, h }
    }

    fn div(&self, o: &Jet2) -> Jet2 {
        self.mul(&o.recip())
    }

    fn neg(&self) -> Jet2 {
        Jet2 {
            v: -self.v,
            g: self.g.iter().map(|a| -a).collect(),
            h: self.h.iter().map(|a| -a).collect(),
        }
    }

    /// Chain rule for a scalar function with first and second derivatives
    /// `d1`, `d2` at `self.v`.
    fn unary(&self, v: f64, d1: f64, d2: f64) -> Jet2 {
        let n = self.dim();
        let mut g = vec![0.0; n];
        for i in 0..n {
            g[i] = d1 * self.g[i];
        }
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let hv = d1 * self.h[i * n + j] + d2 * self.g[i] * self.g[j];
                h[i * n + j] = hv;
                h[j * n + i] = hv;
            }
        }
        Jet2 { v, g, h }
    }

    fn powi(&self, k: i32) -> Jet2 {
        if k == 0 {
            return Jet2::constant(1.0, self.dim());
        }
        let v = self.v.powi(k);
        let d1 = k as f64 * self.v.powi(k - 1);
        let d2 = (k as f64) * ((k - 1) as f64) * self.v.powi(k - 2);
        self.unary(v, d1, d2)
    }
}

fn func_derivs(f: Func, u: f64) -> (f64, f64, f64) {
    match f {
        Func::Sin => (u.sin(), u.cos(), -u.sin()),
        Func::Cos => (u.cos(), -u.sin(), -u.cos()),
        Func::Tan => {
            let t = u.tan();
            let s = 1.0 + t * t;
            (t, s, 2.0 * t * s)
        }
        Func::Exp => {
            let e = u.exp();
            (e, e, e)
        }
        Func::Log => (u.ln(), 1.0 / u, -1.0 / (u * u)),
        Func::Sqrt => {
            let s = u.sqrt();
            (s, 0.5 / s, -0.25 / (s * s * s))
        }
    }
}

/// Evaluates `e` on `Jet1` inputs indexed by slot.
pub fn eval_jet1(e: &Expr, vars: &[Jet1]) -> Jet1 {
    let dim = vars.first().map(|j| j.dim()).unwrap_or(0);
    match e {
        Expr::Num(v) => Jet1::constant(*v, dim),
        Expr::Var(s) => vars[*s].clone(),
        Expr::Add(a, b) => eval_jet1(a, vars).add(&eval_jet1(b, vars)),
        Expr::Sub(a, b) => eval_jet1(a, vars).sub(&eval_jet1(b, vars)),
        Expr::Mul(a, b) => eval_jet1(a, vars).mul(&eval_jet1(b, vars)),
        Expr::Div(a, b) => eval_jet1(a, vars).div(&eval_jet1(b, vars)),
        Expr::Neg(a) => eval_jet1(a, vars).neg(),
        Expr::Pow(a, k) => eval_jet1(a, vars).powi(*k),
        Expr::Call(f, a) => {
            let u = eval_jet1(a, vars);
            let (v, d1, _) = func_derivs(*f, u.v);
            u.unary(v, d1)
        }
    }
}

/// Evaluates `e` on `Jet2` inputs indexed by slot.
pub fn eval_jet2(e: &Expr, vars: &[Jet2]) -> Jet2 {
    let dim = vars.first().map(|j| j.dim()).unwrap_or(0);
    match e {
        Expr::Num(v) => Jet2::constant(*v, dim),
        Expr::Var(s) => vars[*s].clone(),
        Expr::Add(a, b) => eval_jet2(a, vars).add(&eval_jet2(b, vars)),
        Expr::Sub(a, b) => eval_jet2(a, vars).sub(&eval_jet2(b, vars)),
        Expr::Mul(a, b) => eval_jet2(a, vars).mul(&eval_jet2(b, vars)),
        Expr::Div(a, b) => eval_jet2(a, vars).div(&eval_jet2(b, vars)),
        Expr::Neg(a) => eval_jet2(a, vars).neg(),
        Expr::Pow(a, k) => eval_jet2(a, vars).powi(*k),
        Expr::Call(f, a) => {
            let u = eval_jet2(a, vars);
            let (v, d1, d2) = func_derivs(*f, u.v);
            u.unary(v, d1, d2)
        }
    }
}

/// Plain numeric evaluation.
pub fn eval_f64(e: &Expr, vars: &[f64]) -> f64 {
    match e {
        Expr::Num(v) => *v,
        Expr::Var(s) => vars[*s],
        Expr::Add(a, b) => eval_f64(a, vars) + eval_f64(b, vars),
        Expr::Sub(a, b) => eval_f64(a, vars) - eval_f64(b, vars),
        Expr::Mul(a, b) => eval_f64(a, vars) * eval_f64(b, vars),
        Expr::Div(a, b) => eval_f64(a, vars) / eval_f64(b, vars),
        Expr::Neg(a) => -eval_f64(a, vars),
        Expr::Pow(a, k) => eval_f64(a, vars).powi(*k),
        Expr::Call(f, a) => {
            let u = eval_f64(a, vars);
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
