//! Algebroid charts: anchor and structure functions over a coordinate
//! patch, builders for standard geometries, and structural validation.
//!
//! A chart has base dimension `m` (coordinates `x^i`) and fiber rank `n`
//! (basis sections `e_A`). The anchor is an `m x n` matrix field `rho^i_A(x)`;
//! the structure functions `C^C_{AB}(x)` are antisymmetric in the lower pair.
//! Validation checks three residuals at sample points:
//!
//! - antisymmetry: `C^C_{AB} + C^C_{BA}`;
//! - compatibility of anchor and structure:
//!   `rho^j_A d_j rho^i_B - rho^j_B d_j rho^i_A - rho^i_C C^C_{AB}`;
//! - the Jacobi-type identity: cyclic sum over `(A, B, C)` of
//!   `rho^i_A d_i C^D_{BC} + C^D_{AF} C^F_{BC}`.
//!
//! Structure functions can be stored canonically (entries for `A < B` only,
//! the rest fixed by antisymmetry) or raw (all `n^3` entries as given).
//! Canonical storage makes the antisymmetry residual vanish identically;
//! raw storage lets validation detect one-sided data errors, so perturbation
//! helpers and untrusted user input use it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calculus::expr::{self, Expr};
use crate::calculus::{Field, Shape, Signature};
use crate::error::{Error, Result};

/// Dense `n x n x n` array of structure values; `get(a, b, c)` reads
/// `C^c_{ab}` (all indices zero-based).
#[derive(Debug, Clone, PartialEq)]
pub struct C3 {
    n: usize,
    data: Vec<f64>,
}

impl C3 {
    pub fn zeros(n: usize) -> C3 {
        C3 {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    pub fn rank(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.n + b) * self.n + c]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, v: f64) {
        self.data[(a * self.n + b) * self.n + c] = v;
    }

    /// Sets `C^c_{ab} = v` and `C^c_{ba} = -v`.
    pub fn set_antisymmetric(&mut self, a: usize, b: usize, c: usize, v: f64) {
        self.set(a, b, c, v);
        self.set(b, a, c, -v);
    }

    pub fn max_antisymmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.n {
            for b in 0..self.n {
                for c in 0..self.n {
                    worst = worst.max((self.get(a, b, c) + self.get(b, a, c)).abs());
                }
            }
        }
        worst
    }
}

/// Index of the pair `(a, b)` with `a < b` in lexicographic order.
pub fn pair_index(a: usize, b: usize, n: usize) -> usize {
    debug_assert!(a < b && b < n);
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

pub fn n_pairs(n: usize) -> usize {
    n * (n - 1) / 2
}

/// Storage convention for structure functions.
#[derive(Clone, Debug)]
pub enum Structure {
    /// `n_pairs(n) * n` components: pair `(A < B)` major, upper index `C`
    /// minor. Antisymmetry holds by construction.
    Canonical(Field),
    /// All `n^3` components in `C3` layout, taken at face value.
    Raw(Field),
}

/// A coordinate chart for a Lie algebroid.
#[derive(Clone, Debug)]
pub struct AlgebroidChart {
    name: String,
    base_dim: usize,
    fiber_rank: usize,
    anchor: Field,
    structure: Structure,
}

impl AlgebroidChart {
    /// Wraps user-supplied anchor and structure fields, checking shapes.
    pub fn custom(
        name: &str,
        base_dim: usize,
        fiber_rank: usize,
        anchor: Field,
        structure: Structure,
    ) -> Result<AlgebroidChart> {
        let (m, n) = (base_dim, fiber_rank);
        if anchor.shape() != Shape::Matrix(m, n) {
            return Err(Error::Dimension(format!(
                "anchor must be a {m} x {n} matrix field, got {:?}",
                anchor.shape()
            )));
        }
        if anchor.n_slots() != m {
            return Err(Error::Dimension(
                "anchor must depend on the base coordinates only".into(),
            ));
        }
        let want = match &structure {
            Structure::Canonical(f) => (f, Shape::Vector(n_pairs(n) * n)),
            Structure::Raw(f) => (f, Shape::Array3(n, n, n)),
        };
        if want.0.shape() != want.1 {
            return Err(Error::Dimension(format!(
                "structure field has shape {:?}, expected {:?}",
                want.0.shape(),
                want.1
            )));
        }
        if want.0.n_slots() != m {
            return Err(Error::Dimension(
                "structure functions must depend on the base coordinates only".into(),
            ));
        }
        Ok(AlgebroidChart {
            name: name.to_string(),
            base_dim,
            fiber_rank,
            anchor,
            structure,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn fiber_rank(&self) -> usize {
        self.fiber_rank
    }

    pub fn anchor_field(&self) -> &Field {
        &self.anchor
    }

    /// Signature with the single base-coordinate group `x`.
    fn base_sig(m: usize) -> Signature {
        Signature::new(&[("x", m)]).expect("x is a valid group name")
    }

    /// Anchor matrix `rho^i_A` at `x` (`m x n`).
    pub fn anchor_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let v = self.anchor.value(x)?;
        Ok(DMatrix::from_row_iterator(
            self.base_dim,
            self.fiber_rank,
            v.iter().copied(),
        ))
    }

    /// Partial derivatives of the anchor: element `j` is the `m x n` matrix
    /// `d rho / d x^j`.
    pub fn anchor_jac_at(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let jac = self.anchor.jacobian(x)?;
        let (m, n) = (self.base_dim, self.fiber_rank);
        let mut out = Vec::with_capacity(m);
        for j in 0..m {
            let mut d = DMatrix::zeros(m, n);
            for i in 0..m {
                for a in 0..n {
                    d[(i, a)] = jac[(i * n + a, j)];
                }
            }
            out.push(d);
        }
        Ok(out)
    }

    /// Full structure array at `x`, assembled by antisymmetry for canonical
    /// storage or read directly for raw storage.
    pub fn structure_at(&self, x: &[f64]) -> Result<C3> {
        let n = self.fiber_rank;
        match &self.structure {
            Structure::Canonical(f) => {
                let v = f.value(x)?;
                let mut c = C3::zeros(n);
                for a in 0..n {
                    for b in (a + 1)..n {
                        let base = pair_index(a, b, n) * n;
                        for cc in 0..n {
                            c.set_antisymmetric(a, b, cc, v[base + cc]);
                        }
                    }
                }
                Ok(c)
            }
            Structure::Raw(f) => {
                let v = f.value(x)?;
                Ok(C3 {
                    n,
                    data: v.iter().copied().collect(),
                })
            }
        }
    }

    /// Partial derivatives of the structure array: element `j` is
    /// `d C / d x^j`.
    pub fn structure_jac_at(&self, x: &[f64]) -> Result<Vec<C3>> {
        let n = self.fiber_rank;
        let m = self.base_dim;
        match &self.structure {
            Structure::Canonical(f) => {
                let jac = f.jacobian(x)?;
                let mut out = Vec::with_capacity(m);
                for j in 0..m {
                    let mut c = C3::zeros(n);
                    for a in 0..n {
                        for b in (a + 1)..n {
                            let base = pair_index(a, b, n) * n;
                            for cc in 0..n {
                                c.set_antisymmetric(a, b, cc, jac[(base + cc, j)]);
                            }
                        }
                    }
                    out.push(c);
                }
                Ok(out)
            }
            Structure::Raw(f) => {
                let jac = f.jacobian(x)?;
                let mut out = Vec::with_capacity(m);
                for j in 0..m {
                    let mut c = C3::zeros(n);
                    for a in 0..n {
                        for b in 0..n {
                            for cc in 0..n {
                                c.set(a, b, cc, jac[((a * n + b) * n + cc, j)]);
                            }
                        }
                    }
                    out.push(c);
                }
                Ok(out)
            }
        }
    }

    /// Expression for `C^c_{ab}` over the base slots, when the structure
    /// field is expression-backed. Canonical storage is expanded by
    /// antisymmetry.
    pub fn structure_expr(&self, a: usize, b: usize, c: usize) -> Option<Expr> {
        let n = self.fiber_rank;
        match &self.structure {
            Structure::Canonical(f) => {
                let es = f.exprs()?;
                Some(if a == b {
                    expr::num(0.0)
                } else if a < b {
                    es[pair_index(a, b, n) * n + c].clone()
                } else {
                    expr::neg(es[pair_index(b, a, n) * n + c].clone())
                })
            }
            Structure::Raw(f) => Some(f.exprs()?[(a * n + b) * n + c].clone()),
        }
    }

    /// Expression for the anchor entry `rho^i_A` over the base slots, when
    /// the anchor is expression-backed.
    pub fn anchor_expr(&self, i: usize, a: usize) -> Option<Expr> {
        Some(self.anchor.exprs()?[i * self.fiber_rank + a].clone())
    }

    /// Uniform samples in `[-1, 1]^m`, reproducible from the seed. With
    /// `m = 0` every sample is the empty coordinate vector.
    pub fn sample_states(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let box_: Vec<(f64, f64)> = (0..self.base_dim).map(|_| (-1.0, 1.0)).collect();
        self.sample_states_in_box(count, seed, &box_)
            .expect("unit box is valid")
    }

    /// Uniform samples in a per-coordinate box, reproducible from the seed.
    pub fn sample_states_in_box(
        &self,
        count: usize,
        seed: u64,
        box_: &[(f64, f64)],
    ) -> Result<Vec<Vec<f64>>> {
        if box_.len() != self.base_dim {
            return Err(Error::Dimension(format!(
                "sample box has {} intervals, base dimension is {}",
                box_.len(),
                self.base_dim
            )));
        }
        for (lo, hi) in box_ {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "sample box interval [{lo}, {hi}] is empty"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| {
                box_.iter()
                    .map(|(lo, hi)| rng.gen_range(*lo..*hi))
                    .collect()
            })
            .collect())
    }

    /// Residual of the admissibility condition `xdot = rho(x) y`.
    pub fn admissibility_residual(
        &self,
        x: &[f64],
        y: &[f64],
        xdot: &[f64],
    ) -> Result<DVector<f64>> {
        if y.len() != self.fiber_rank || xdot.len() != self.base_dim {
            return Err(Error::Dimension(format!(
                "admissibility wants y of length {} and xdot of length {}, got {} and {}",
                self.fiber_rank,
                self.base_dim,
                y.len(),
                xdot.len()
            )));
        }
        let rho = self.anchor_at(x)?;
        Ok(DVector::from_column_slice(xdot) - rho * DVector::from_column_slice(y))
    }

    /// Returns a copy with raw structure storage and `delta` added to the
    /// single entry `C^c_{ab}`. The result deliberately breaks antisymmetry,
    /// which is how corrupted input data typically looks.
    pub fn with_structure_entry_bump(
        &self,
        a: usize,
        b: usize,
        c: usize,
        delta: f64,
    ) -> Result<AlgebroidChart> {
        let n = self.fiber_rank;
        if a >= n || b >= n || c >= n {
            return Err(Error::Dimension(format!(
                "structure entry ({a}, {b}, {c}) out of range for rank {n}"
            )));
        }
        let raw = self.raw_structure_exprs()?;
        let mut raw = raw;
        let idx = (a * n + b) * n + c;
        raw[idx] = expr::add(raw[idx].clone(), expr::num(delta));
        let field = Field::from_exprs(Self::base_sig(self.base_dim), Shape::Array3(n, n, n), raw)?;
        Ok(AlgebroidChart {
            name: format!("{}+bump", self.name),
            base_dim: self.base_dim,
            fiber_rank: self.fiber_rank,
            anchor: self.anchor.clone(),
            structure: Structure::Raw(field),
        })
    }

    /// Expression components of the full raw structure array.
    fn raw_structure_exprs(&self) -> Result<Vec<expr::Expr>> {
        let n = self.fiber_rank;
        match &self.structure {
            Structure::Raw(f) => f
                .exprs()
                .map(|e| e.to_vec())
                .ok_or_else(|| Error::Unsupported("structure field is closure-backed".into())),
            Structure::Canonical(f) => {
                let es = f.exprs().ok_or_else(|| {
                    Error::Unsupported("structure field is closure-backed".into())
                })?;
                let mut raw = vec![expr::num(0.0); n * n * n];
                for a in 0..n {
                    for b in (a + 1)..n {
                        let base = pair_index(a, b, n) * n;
                        for cc in 0..n {
                            let e = es[base + cc].clone();
                            raw[(a * n + b) * n + cc] = e.clone();
                            raw[(b * n + a) * n + cc] = expr::neg(e);
                        }
                    }
                }
                Ok(raw)
            }
        }
    }

    /// Validates the chart at the given sample points.
    pub fn validate(&self, samples: &[Vec<f64>], tol: f64) -> Result<ValidationReport> {
        let (m, n) = (self.base_dim, self.fiber_rank);
        let mut anti = ResidualSummary::default();
        let mut eq = ResidualSummary::default();
        let mut jac = ResidualSummary::default();

        for (si, x) in samples.iter().enumerate() {
            let at_sample = |e: Error| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("sample {si} at x = {x:?}: {msg}"))
                }
                other => other,
            };
            let rho = self.anchor_at(x).map_err(at_sample)?;
            let drho = self.anchor_jac_at(x).map_err(at_sample)?;
            let c = self.structure_at(x).map_err(at_sample)?;
            let dc = self.structure_jac_at(x).map_err(at_sample)?;

            for a in 0..n {
                for b in 0..n {
                    for cc in 0..n {
                        let r = (c.get(a, b, cc) + c.get(b, a, cc)).abs();
                        anti.consider(r, si, &[a, b, cc]);
                    }
                }
            }

            for a in 0..n {
                for b in 0..n {
                    for i in 0..m {
                        let mut lhs = 0.0;
                        for j in 0..m {
                            lhs += rho[(j, a)] * drho[j][(i, b)] - rho[(j, b)] * drho[j][(i, a)];
                        }
                        let mut rhs = 0.0;
                        for cc in 0..n {
                            rhs += rho[(i, cc)] * c.get(a, b, cc);
                        }
                        eq.consider((lhs - rhs).abs(), si, &[a, b, i]);
                    }
                }
            }

            for a in 0..n {
                for b in 0..n {
                    for cc in 0..n {
                        for d in 0..n {
                            let mut sum = 0.0;
                            for &(p, q, r) in &[(a, b, cc), (b, cc, a), (cc, a, b)] {
                                for i in 0..m {
                                    sum += rho[(i, p)] * dc[i].get(q, r, d);
                                }
                                for f in 0..n {
                                    sum += c.get(p, f, d) * c.get(q, r, f);
                                }
                            }
                            jac.consider(sum.abs(), si, &[a, b, cc, d]);
                        }
                    }
                }
            }
        }

        let passed = anti.max <= tol && eq.max <= tol && jac.max <= tol;
        Ok(ValidationReport {
            chart: self.name.clone(),
            base_dim: m,
            fiber_rank: n,
            n_samples: samples.len(),
            tol,
            antisymmetry: anti,
            anchor_compatibility: eq,
            jacobi: jac,
            passed,
        })
    }

    // -----------------------------------------------------------------
    // Builders
    // -----------------------------------------------------------------

    /// Tangent bundle of `R^m`: identity anchor, vanishing structure.
    pub fn tangent_bundle(m: usize) -> AlgebroidChart {
        let sig = Self::base_sig(m);
        let mut anchor = vec![0.0; m * m];
        for i in 0..m {
            anchor[i * m + i] = 1.0;
        }
        let anchor = Field::constant(sig.clone(), Shape::Matrix(m, m), &anchor).unwrap();
        let structure = Field::constant(
            sig,
            Shape::Vector(n_pairs(m) * m),
            &vec![0.0; n_pairs(m) * m],
        )
        .unwrap();
        AlgebroidChart {
            name: format!("tangent_bundle({m})"),
            base_dim: m,
            fiber_rank: m,
            anchor,
            structure: Structure::Canonical(structure),
        }
    }

    /// A Lie algebra as an algebroid over a point: zero-dimensional base,
    /// constant structure. Constants must already be antisymmetric.
    pub fn lie_algebra(name: &str, constants: &C3) -> Result<AlgebroidChart> {
        let n = constants.rank();
        let defect = constants.max_antisymmetry_defect();
        if defect > 1e-12 {
            return Err(Error::Validation(format!(
                "structure constants are not antisymmetric (defect {defect:.3e})"
            )));
        }
        let sig = Self::base_sig(0);
        let anchor = Field::constant(sig.clone(), Shape::Matrix(0, n), &[])?;
        let mut entries = vec![0.0; n_pairs(n) * n];
        for a in 0..n {
            for b in (a + 1)..n {
                for c in 0..n {
                    entries[pair_index(a, b, n) * n + c] = constants.get(a, b, c);
                }
            }
        }
        let structure = Field::constant(sig, Shape::Vector(n_pairs(n) * n), &entries)?;
        Ok(AlgebroidChart {
            name: name.to_string(),
            base_dim: 0,
            fiber_rank: n,
            anchor,
            structure: Structure::Canonical(structure),
        })
    }

    /// so(3) with the cross-product bracket: `C^3_{12} = C^1_{23} = C^2_{31} = 1`.
    pub fn so3() -> AlgebroidChart {
        let mut c = C3::zeros(3);
        c.set_antisymmetric(0, 1, 2, 1.0);
        c.set_antisymmetric(1, 2, 0, 1.0);
        c.set_antisymmetric(2, 0, 1, 1.0);
        Self::lie_algebra("so3", &c).expect("so3 constants are antisymmetric")
    }

    /// se(2), the planar Euclidean algebra: with basis (e1, e2, e3) where e3
    /// generates rotations, `[e1, e3] = -e2` and `[e2, e3] = e1`.
    pub fn se2() -> AlgebroidChart {
        let mut c = C3::zeros(3);
        c.set_antisymmetric(0, 2, 1, -1.0);
        c.set_antisymmetric(1, 2, 0, 1.0);
        Self::lie_algebra("se2", &c).expect("se2 constants are antisymmetric")
    }

    /// Action algebroid of a Lie algebra acting on `R^m`: the anchor sends
    /// the basis section `e_A` to minus the infinitesimal generator. The
    /// generator field has shape `Matrix(n, m)` (`gen^i_A` in row `A`).
    pub fn action_algebroid(
        name: &str,
        constants: &C3,
        generators: Field,
    ) -> Result<AlgebroidChart> {
        let n = constants.rank();
        let m = generators.n_slots();
        if generators.shape() != Shape::Matrix(n, m) {
            return Err(Error::Dimension(format!(
                "generators must be {n} x {m}, got {:?}",
                generators.shape()
            )));
        }
        let sig = Self::base_sig(m);
        let anchor = match generators.exprs() {
            Some(es) => {
                let mut comps = Vec::with_capacity(m * n);
                for i in 0..m {
                    for a in 0..n {
                        comps.push(expr::neg(es[a * m + i].clone()));
                    }
                }
                Field::from_exprs(sig.clone(), Shape::Matrix(m, n), comps)?
            }
            None => {
                let g = generators.clone();
                Field::from_closure(sig.clone(), Shape::Matrix(m, n), move |x, out| {
                    let v = g.value(x).expect("generator evaluation");
                    for i in 0..m {
                        for a in 0..n {
                            out[i * n + a] = -v[a * m + i];
                        }
                    }
                })
            }
        };
        let mut entries = vec![0.0; n_pairs(n) * n];
        for a in 0..n {
            for b in (a + 1)..n {
                for c in 0..n {
                    entries[pair_index(a, b, n) * n + c] = constants.get(a, b, c);
                }
            }
        }
        let structure = Field::constant(sig, Shape::Vector(n_pairs(n) * n), &entries)?;
        let chart = AlgebroidChart {
            name: name.to_string(),
            base_dim: m,
            fiber_rank: n,
            anchor,
            structure: Structure::Canonical(structure),
        };
        chart.self_check()?;
        Ok(chart)
    }

    /// Atiyah algebroid of a trivial principal bundle `R^m x G`, written in
    /// the frame of a connection. Fiber basis: `m` horizontal sections then
    /// `r` vertical ones (`r` = rank of the structure constants). The
    /// connection coefficients `A^B_i` form a `Matrix(r, m)` field over the
    /// base; if `curvature` is `None` it is derived as
    /// `B^C_{ij} = d_i A^C_j - d_j A^C_i - c^C_{DE} A^D_i A^E_j`
    /// (expression-backed connection required for that).
    pub fn atiyah_trivial(
        name: &str,
        constants: &C3,
        connection: Field,
        curvature: Option<Field>,
    ) -> Result<AlgebroidChart> {
        let r = constants.rank();
        let m = connection.n_slots();
        if connection.shape() != Shape::Matrix(r, m) {
            return Err(Error::Dimension(format!(
                "connection must be {r} x {m}, got {:?}",
                connection.shape()
            )));
        }
        let n = m + r;
        let sig = Self::base_sig(m);
        let conn = connection
            .exprs()
            .ok_or_else(|| {
                Error::Unsupported(
                    "atiyah_trivial needs an expression-backed connection".into(),
                )
            })?
            .to_vec();
        let a_expr = |bb: usize, i: usize| conn[bb * m + i].clone();

        // Curvature expressions B^C_{ij}, either supplied or derived.
        let curv: Vec<expr::Expr> = match curvature {
            Some(f) => {
                if f.shape() != Shape::Array3(r, m, m) || f.n_slots() != m {
                    return Err(Error::Dimension(format!(
                        "curvature must be Array3({r}, {m}, {m}) over the base, got {:?}",
                        f.shape()
                    )));
                }
                f.exprs()
                    .ok_or_else(|| {
                        Error::Unsupported(
                            "atiyah_trivial needs an expression-backed curvature".into(),
                        )
                    })?
                    .to_vec()
            }
            None => {
                let mut out = vec![expr::num(0.0); r * m * m];
                for cc in 0..r {
                    for i in 0..m {
                        for j in 0..m {
                            let mut e = expr::sub(
                                expr::diff(&a_expr(cc, j), i),
                                expr::diff(&a_expr(cc, i), j),
                            );
                            for d in 0..r {
                                for ee in 0..r {
                                    let k = constants.get(d, ee, cc);
                                    if k != 0.0 {
                                        e = expr::sub(
                                            e,
                                            expr::mul(
                                                expr::num(k),
                                                expr::mul(a_expr(d, i), a_expr(ee, j)),
                                            ),
                                        );
                                    }
                                }
                            }
                            out[(cc * m + i) * m + j] = e;
                        }
                    }
                }
                out
            }
        };

        // Anchor [I | 0].
        let mut anchor_comps = vec![expr::num(0.0); m * n];
        for i in 0..m {
            anchor_comps[i * n + i] = expr::num(1.0);
        }
        let anchor = Field::from_exprs(sig.clone(), Shape::Matrix(m, n), anchor_comps)?;

        // Canonical structure entries over pairs of the combined basis.
        let mut entries = vec![expr::num(0.0); n_pairs(n) * n];
        // Horizontal-horizontal: C^{m+C}_{ij} = -B^C_{ij}.
        for i in 0..m {
            for j in (i + 1)..m {
                for cc in 0..r {
                    entries[pair_index(i, j, n) * n + (m + cc)] =
                        expr::neg(curv[(cc * m + i) * m + j].clone());
                }
            }
        }
        // Horizontal-vertical: C^{m+C}_{i, m+A} = c^C_{AD} A^D_i.
        for i in 0..m {
            for aa in 0..r {
                for cc in 0..r {
                    let mut e = expr::num(0.0);
                    for d in 0..r {
                        let k = constants.get(aa, d, cc);
                        if k != 0.0 {
                            e = expr::add(e, expr::mul(expr::num(k), a_expr(d, i)));
                        }
                    }
                    entries[pair_index(i, m + aa, n) * n + (m + cc)] = e;
                }
            }
        }
        // Vertical-vertical: the Lie algebra constants.
        for aa in 0..r {
            for bb in (aa + 1)..r {
                for cc in 0..r {
                    let k = constants.get(aa, bb, cc);
                    if k != 0.0 {
                        entries[pair_index(m + aa, m + bb, n) * n + (m + cc)] = expr::num(k);
                    }
                }
            }
        }
        let structure = Field::from_exprs(sig, Shape::Vector(n_pairs(n) * n), entries)?;
        let chart = AlgebroidChart {
            name: name.to_string(),
            base_dim: m,
            fiber_rank: n,
            anchor,
            structure: Structure::Canonical(structure),
        };
        chart.self_check()?;
        Ok(chart)
    }

    /// Reduced chart for a planar rigid body with two symmetric rotors
    /// (base angle `psi`, fiber rank 4). `i1` is the body inertia, `i2` the
    /// combined rotor inertia; the vehicle mass must be positive but cancels
    /// from every coefficient.
    pub fn elroy_beanie(mass: f64, i1: f64, i2: f64) -> Result<AlgebroidChart> {
        if mass <= 0.0 || i1 <= 0.0 || i2 <= 0.0 {
            return Err(Error::Config(
                "elroy_beanie parameters (mass, i1, i2) must all be positive".into(),
            ));
        }
        let k = (i2 / (i1 * (i1 + i2))).sqrt();
        let j = 1.0 / (i1 + i2).sqrt();
        let r = ((i1 + i2) / (i1 * i2)).sqrt();
        let n = 4;
        let sig = Signature::new(&[("psi", 1)])?;
        let anchor = Field::constant(sig.clone(), Shape::Matrix(1, n), &[r, 0.0, 0.0, 0.0])?;
        let mut entries = vec![0.0; n_pairs(n) * n];
        entries[pair_index(0, 1, n) * n + 2] = -k;
        entries[pair_index(0, 2, n) * n + 1] = k;
        entries[pair_index(1, 3, n) * n + 2] = -j;
        entries[pair_index(2, 3, n) * n + 1] = j;
        let structure = Field::constant(sig, Shape::Vector(n_pairs(n) * n), &entries)?;
        Ok(AlgebroidChart {
            name: "elroy_beanie".to_string(),
            base_dim: 1,
            fiber_rank: n,
            anchor,
            structure: Structure::Canonical(structure),
        })
    }

    /// Validates on a default sample set and errors if the construction is
    /// inconsistent. Builders whose inputs can disagree call this.
    fn self_check(&self) -> Result<()> {
        let samples = self.sample_states(20, 0x5eed);
        let report = self.validate(&samples, 1e-10)?;
        if !report.passed {
            return Err(Error::Validation(format!(
                "builder `{}` produced an inconsistent chart: antisymmetry {:.3e}, \
                 anchor compatibility {:.3e}, jacobi {:.3e}",
                self.name,
                report.antisymmetry.max,
                report.anchor_compatibility.max,
                report.jacobi.max
            )));
        }
        Ok(())
    }
}

/// Worst residual of one validation check with its location.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ResidualSummary {
    pub max: f64,
    /// Index into the sample list where the maximum occurred.
    pub sample_index: usize,
    /// Fiber/base indices of the worst entry (zero-based).
    pub indices: Vec<usize>,
}

impl ResidualSummary {
    fn consider(&mut self, r: f64, sample: usize, idx: &[usize]) {
        if r > self.max {
            self.max = r;
            self.sample_index = sample;
            self.indices = idx.to_vec();
        }
    }
}

/// Outcome of [`AlgebroidChart::validate`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub chart: String,
    pub base_dim: usize,
    pub fiber_rank: usize,
    pub n_samples: usize,
    pub tol: f64,
    pub antisymmetry: ResidualSummary,
    pub anchor_compatibility: ResidualSummary,
    pub jacobi: ResidualSummary,
    pub passed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn so3_validates_clean() {
        let chart = AlgebroidChart::so3();
        let samples = chart.sample_states(50, 7);
        let rep = chart.validate(&samples, 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.jacobi.max, 0.0);
    }

    #[test]
    fn so3_single_entry_bump_is_detected() {
        let chart = AlgebroidChart::so3();
        let delta = 1e-3;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let bumped = chart.with_structure_entry_bump(a, b, c, delta).unwrap();
                    let rep = bumped
                        .validate(&bumped.sample_states(10, 7), 1e-10)
                        .unwrap();
                    assert!(!rep.passed);
                    let worst = rep.antisymmetry.max.max(rep.jacobi.max);
                    assert!(
                        worst >= 5e-4,
                        "bump at ({a},{b},{c}) only reached {worst:.3e}"
                    );
                }
            }
        }
    }

    #[test]
    fn se2_validates_clean() {
        let chart = AlgebroidChart::se2();
        let rep = chart.validate(&chart.sample_states(10, 3), 1e-10).unwrap();
        assert!(rep.passed);
    }

    #[test]
    fn tangent_bundle_validates_clean() {
        let chart = AlgebroidChart::tangent_bundle(3);
        let rep = chart.validate(&chart.sample_states(20, 3), 1e-10).unwrap();
        assert!(rep.passed);
        assert_eq!(chart.anchor_at(&[0.1, 0.2, 0.3]).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn action_algebroid_so3_on_r3() {
        // Generators of rotations on R^3: gen_A(x) = e_A x x.
        let sig = Signature::new(&[("x", 3)]).unwrap();
        let gens = Field::parse(
            sig,
            Shape::Matrix(3, 3),
            &["0", "-x3", "x2", "x3", "0", "-x1", "-x2", "x1", "0"],
        )
        .unwrap();
        let mut c = C3::zeros(3);
        c.set_antisymmetric(0, 1, 2, 1.0);
        c.set_antisymmetric(1, 2, 0, 1.0);
        c.set_antisymmetric(2, 0, 1, 1.0);
        let chart = AlgebroidChart::action_algebroid("so3_on_r3", &c, gens).unwrap();
        let rep = chart.validate(&chart.sample_states(30, 11), 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
        // Anchor is minus the generator: gen_1(x) = (0, -x3, x2).
        let rho = chart.anchor_at(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(rho[(1, 0)], 3.0);
        assert_eq!(rho[(2, 0)], -2.0);
    }

    #[test]
    fn atiyah_trivial_with_derived_curvature() {
        // so(3) connection over R^2 with non-commuting, x-dependent
        // coefficients so the bracket term in the curvature matters.
        let sig = Signature::new(&[("x", 2)]).unwrap();
        let conn = Field::parse(
            sig,
            Shape::Matrix(3, 2),
            &["x2", "0.3", "0.1 * x1", "-0.2", "0", "x1 * x2"],
        )
        .unwrap();
        let mut c = C3::zeros(3);
        c.set_antisymmetric(0, 1, 2, 1.0);
        c.set_antisymmetric(1, 2, 0, 1.0);
        c.set_antisymmetric(2, 0, 1, 1.0);
        let chart = AlgebroidChart::atiyah_trivial("atiyah_so3_r2", &c, conn, None).unwrap();
        assert_eq!(chart.base_dim(), 2);
        assert_eq!(chart.fiber_rank(), 5);
        let rep = chart.validate(&chart.sample_states(30, 13), 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn elroy_beanie_validates_and_masses_must_be_positive() {
        let chart = AlgebroidChart::elroy_beanie(1.5, 1.0, 2.0).unwrap();
        let rep = chart.validate(&chart.sample_states(20, 5), 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(AlgebroidChart::elroy_beanie(0.0, 1.0, 2.0).is_err());
        // K, J, R values for I1 = 1, I2 = 2.
        let c = chart.structure_at(&[0.4]).unwrap();
        let k = (2.0f64 / 3.0).sqrt();
        let j = 1.0 / 3.0f64.sqrt();
        assert!((c.get(0, 1, 2) + k).abs() < 1e-15);
        assert!((c.get(0, 2, 1) - k).abs() < 1e-15);
        assert!((c.get(1, 3, 2) + j).abs() < 1e-15);
        assert!((c.get(2, 3, 1) - j).abs() < 1e-15);
        let rho = chart.anchor_at(&[0.0]).unwrap();
        assert!((rho[(0, 0)] - (3.0f64 / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lie_algebra_rejects_non_antisymmetric_constants() {
        let mut c = C3::zeros(2);
        c.set(0, 1, 0, 1.0); // missing the (1,0) partner
        assert!(AlgebroidChart::lie_algebra("bad", &c).is_err());
    }
}
