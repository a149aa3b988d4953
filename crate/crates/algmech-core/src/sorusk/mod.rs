//! Second-order variational dynamics in a unified phase-space formulation.
//!
//! A second-order problem on a chart with base dimension `m` and fiber rank
//! `n` is posed by a Lagrangian `L(x, y, z)` where `y` is the fiber velocity
//! and `z` its time derivative. Dynamics live on the phase space with
//! coordinates `(x, y, z, p, pbar)`: costates `p` dual to `y` and `pbar`
//! dual to `z`, with Hamiltonian `H = <p, y> + <pbar, z> - L`.
//!
//! The evolution direction `X` is determined by the presymplectic equation
//! `Omega X + dH = 0` on the prolongation fiber. `Omega` is degenerate (its
//! kernel contains every `z`-vertical direction), so solutions exist only on
//! a submanifold: the kernel covectors of `Omega` pair with `dH` to produce
//! constraint functions, tangency of the flow to those constraints refines
//! the admissible directions, and iterating yields a stabilized constraint
//! chain ([`SecondOrderProblem::run_constraint_algorithm`]). When the
//! `z`-Hessian of `L` is invertible the chain stops after the primary level
//! `pbar = dL/dz` and the flow is the explicit ODE returned by
//! [`SecondOrderProblem::optimality_field`].
//!
//! Degenerate or constrained problems are covered by the multiplier
//! extension ([`SecondOrderProblem::multiplier_field`]), the first-order
//! vakonomic formulation ([`vakonomic::VakonomicProblem`]), and the reduced
//! field on the submanifold selected by an actuated-coordinate split
//! ([`reduced::ReducedSecondOrderProblem`]).

pub mod reduced;
pub mod vakonomic;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::algebroid::AlgebroidChart;
use crate::calculus::{Field, Shape};
use crate::error::{Error, Result};
use crate::linalg::{
    self, canonical_kernel, in_row_span, kernel_basis, solve_lu, SerMatrix,
};

pub use reduced::ReducedSecondOrderProblem;
pub use vakonomic::{Elimination, VakonomicProblem};

/// How constraints `Phi(x, y, z) = 0` enter a second-order problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    /// No constraints; the Lagrangian must be regular in `z`.
    Unconstrained,
    /// Constraints adjoined with multipliers; dynamics from the bordered
    /// system of [`SecondOrderProblem::multiplier_field`].
    Multipliers,
    /// First-order constraints handled by eliminating fiber velocities;
    /// see [`vakonomic::VakonomicProblem`].
    Vakonomic,
}

/// A point (or tangent vector) of the second-order phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PontryaginState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub p: DVector<f64>,
    pub pbar: DVector<f64>,
}

impl PontryaginState {
    pub fn zeros(m: usize, n: usize) -> PontryaginState {
        PontryaginState {
            x: DVector::zeros(m),
            y: DVector::zeros(n),
            z: DVector::zeros(n),
            p: DVector::zeros(n),
            pbar: DVector::zeros(n),
        }
    }

    /// Reassembles a state from the flat layout `(x, y, z, p, pbar)`.
    pub fn from_flat(m: usize, n: usize, flat: &[f64]) -> Result<PontryaginState> {
        if flat.len() != m + 4 * n {
            return Err(Error::Dimension(format!(
                "flat state has {} entries, want {}",
                flat.len(),
                m + 4 * n
            )));
        }
        Ok(PontryaginState {
            x: DVector::from_column_slice(&flat[..m]),
            y: DVector::from_column_slice(&flat[m..m + n]),
            z: DVector::from_column_slice(&flat[m + n..m + 2 * n]),
            p: DVector::from_column_slice(&flat[m + 2 * n..m + 3 * n]),
            pbar: DVector::from_column_slice(&flat[m + 3 * n..]),
        })
    }

    /// Flat layout `(x, y, z, p, pbar)`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend(self.x.iter());
        out.extend(self.y.iter());
        out.extend(self.z.iter());
        out.extend(self.p.iter());
        out.extend(self.pbar.iter());
        out
    }

    pub fn dim(&self) -> usize {
        self.x.len() + self.y.len() + self.z.len() + self.p.len() + self.pbar.len()
    }
}

/// A regularity check: the decisive matrix, its smallest singular value,
/// and the verdict at the stated tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub context: String,
    pub matrix: SerMatrix,
    pub min_singular_value: f64,
    pub tol: f64,
    pub regular: bool,
}

fn regularity_report(context: &str, matrix: DMatrix<f64>, tol: f64) -> RegularityReport {
    let min_sv = linalg::min_singular_value(&matrix);
    RegularityReport {
        context: context.to_string(),
        matrix: SerMatrix::from(&matrix),
        min_singular_value: min_sv,
        tol,
        regular: min_sv > tol,
    }
}

/// One level of the constraint chain.
#[derive(Debug, Clone, Serialize)]
pub struct ChainLevel {
    pub level: usize,
    /// Dimension of the admissible direction space entering this level.
    pub admitted_dim: usize,
    /// Dimension of the covector space annihilating the image of the
    /// presymplectic form on the admitted directions.
    pub kernel_dim: usize,
    /// Kernel covectors not implied by earlier levels (components in the
    /// prolongation fiber basis).
    pub new_covectors: Vec<Vec<f64>>,
    /// Values of the new constraint functions at the sample state.
    pub new_values: Vec<f64>,
    /// Largest `|<dH, e>|` over the whole kernel at the sample state; the
    /// linear system is solvable on the admitted space iff this vanishes.
    pub max_abs_kernel_pairing: f64,
    pub solvable: bool,
}

/// Outcome of the constraint algorithm, frozen at one sample state.
#[derive(Debug, Clone, Serialize)]
pub struct ConstraintChainReport {
    pub sample_state: Vec<f64>,
    pub fiber_dim: usize,
    pub tol: f64,
    pub levels: Vec<ChainLevel>,
    /// True when a level produced no new constraints.
    pub stabilized: bool,
    /// Dimension of the admitted direction space after the last level.
    pub final_admitted_dim: usize,
}

/// Linear data of the presymplectic equation frozen at one state: the form,
/// the differential of `H`, and the sensitivity of the `dH` components to a
/// move along each prolongation fiber direction.
#[derive(Debug, Clone)]
pub struct ChainFreeze {
    pub omega: DMatrix<f64>,
    pub dh: DVector<f64>,
    /// `d(dH components)/d(fiber direction)`: `dh_state_jacobian *
    /// prolongation_anchor`, square of size `5n`.
    pub sensitivity: DMatrix<f64>,
}

/// Outcome of one constraint level; `rows` and `covectors` accumulate
/// across levels.
#[derive(Debug, Clone)]
pub struct ChainStep {
    pub level: ChainLevel,
    pub rows: DMatrix<f64>,
    pub covectors: DMatrix<f64>,
}

/// Second-order Lagrangian problem on an algebroid chart.
///
/// `lagrangian` has three slot groups sized `(m, n, n)` for `(x, y, z)`.
/// Optional constraints share that signature shape.
#[derive(Debug, Clone)]
pub struct SecondOrderProblem {
    chart: AlgebroidChart,
    lagrangian: Field,
    constraints: Option<Field>,
    mode: ConstraintMode,
    /// Scalar fields `dL/dy_A`, built once so curve differentiation needs
    /// only second derivatives of these instead of third derivatives of `L`.
    dl_dy: Vec<Field>,
    /// Scalar fields `dL/dz_A`.
    dl_dz: Vec<Field>,
}

impl SecondOrderProblem {
    pub fn new(chart: AlgebroidChart, lagrangian: Field) -> Result<SecondOrderProblem> {
        let (m, n) = (chart.base_dim(), chart.fiber_rank());
        check_xyz_signature(&lagrangian, m, n, "lagrangian")?;
        if lagrangian.shape() != Shape::Scalar {
            return Err(Error::Dimension(
                "second-order lagrangian must be scalar".into(),
            ));
        }
        let mut dl_dy = Vec::with_capacity(n);
        let mut dl_dz = Vec::with_capacity(n);
        for a in 0..n {
            dl_dy.push(lagrangian.partial(0, m + a)?);
            dl_dz.push(lagrangian.partial(0, m + n + a)?);
        }
        Ok(SecondOrderProblem {
            chart,
            lagrangian,
            constraints: None,
            mode: ConstraintMode::Unconstrained,
            dl_dy,
            dl_dz,
        })
    }

    /// Adjoins constraints `Phi(x, y, z) = 0` handled per `mode`.
    pub fn with_constraints(
        mut self,
        constraints: Field,
        mode: ConstraintMode,
    ) -> Result<SecondOrderProblem> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        check_xyz_signature(&constraints, m, n, "constraints")?;
        if mode == ConstraintMode::Unconstrained {
            return Err(Error::Config(
                "constraints supplied but mode is unconstrained".into(),
            ));
        }
        self.constraints = Some(constraints);
        self.mode = mode;
        Ok(self)
    }

    pub fn chart(&self) -> &AlgebroidChart {
        &self.chart
    }

    pub fn lagrangian(&self) -> &Field {
        &self.lagrangian
    }

    pub fn constraints(&self) -> Option<&Field> {
        self.constraints.as_ref()
    }

    pub fn mode(&self) -> ConstraintMode {
        self.mode
    }

    pub fn base_dim(&self) -> usize {
        self.chart.base_dim()
    }

    pub fn fiber_rank(&self) -> usize {
        self.chart.fiber_rank()
    }

    /// Dimension of the phase space `(x, y, z, p, pbar)`.
    pub fn state_dim(&self) -> usize {
        self.chart.base_dim() + 4 * self.chart.fiber_rank()
    }

    /// Dimension of the prolongation fiber at a state.
    pub fn fiber_dim(&self) -> usize {
        5 * self.chart.fiber_rank()
    }

    /// Number of constraint components (0 when unconstrained).
    pub fn n_constraints(&self) -> usize {
        self.constraints.as_ref().map_or(0, |c| c.n_components())
    }

    fn lagrangian_flat(&self, s: &PontryaginState) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.chart.base_dim() + 2 * self.chart.fiber_rank());
        flat.extend(s.x.iter());
        flat.extend(s.y.iter());
        flat.extend(s.z.iter());
        flat
    }

    /// `H = <p, y> + <pbar, z> - L(x, y, z)`.
    pub fn pontryagin_hamiltonian(&self, s: &PontryaginState) -> Result<f64> {
        let l = self.lagrangian.scalar(&self.lagrangian_flat(s))?;
        Ok(s.p.dot(&s.y) + s.pbar.dot(&s.z) - l)
    }

    /// Primary constraint `pbar - dL/dz` (the level-0 output of the
    /// constraint algorithm).
    pub fn primary_constraint(&self, s: &PontryaginState) -> Result<DVector<f64>> {
        let n = self.chart.fiber_rank();
        let m = self.chart.base_dim();
        let jl = self.lagrangian.jacobian(&self.lagrangian_flat(s))?;
        Ok(DVector::from_fn(n, |a, _| s.pbar[a] - jl[(0, m + n + a)]))
    }

    /// Lifts `(x, y, z, p)` onto the primary constraint by setting
    /// `pbar = dL/dz`.
    pub fn primary_lift(
        &self,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        p: &[f64],
    ) -> Result<PontryaginState> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        if x.len() != m || y.len() != n || z.len() != n || p.len() != n {
            return Err(Error::Dimension("primary_lift: block sizes mismatch".into()));
        }
        let mut flat = Vec::with_capacity(m + 2 * n);
        flat.extend_from_slice(x);
        flat.extend_from_slice(y);
        flat.extend_from_slice(z);
        let jl = self.lagrangian.jacobian(&flat)?;
        Ok(PontryaginState {
            x: DVector::from_column_slice(x),
            y: DVector::from_column_slice(y),
            z: DVector::from_column_slice(z),
            p: DVector::from_column_slice(p),
            pbar: DVector::from_fn(n, |a, _| jl[(0, m + n + a)]),
        })
    }

    /// Time derivative of the state along the optimality flow:
    ///
    /// ```text
    /// xdot    = rho y
    /// ydot    = z
    /// pdot_A  = rho^i_A dL/dx^i - C^C_{AB} p_C y^B
    /// pbardot = -p + dL/dy
    /// zdot    : (d2L/dz2) zdot = pbardot - (d2L/dzdx) xdot - (d2L/dzdy) z
    /// ```
    ///
    /// The `zdot` solve keeps the flow tangent to `pbar = dL/dz`, so a state
    /// started on that submanifold stays on it; the solve fails with a
    /// regularity error when the `z`-Hessian is singular.
    pub fn optimality_field(&self, s: &PontryaginState) -> Result<PontryaginState> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let rho = self.chart.anchor_at(s.x.as_slice())?;
        let c = self.chart.structure_at(s.x.as_slice())?;
        let flat = self.lagrangian_flat(s);
        let jl = self.lagrangian.jacobian(&flat)?;
        let hl = &self.lagrangian.hessian(&flat)?[0];

        let xdot = &rho * &s.y;
        let ydot = s.z.clone();
        let pdot = DVector::from_fn(n, |a, _| {
            let mut v = 0.0;
            for i in 0..m {
                v += rho[(i, a)] * jl[(0, i)];
            }
            for b in 0..n {
                for cc in 0..n {
                    v -= c.get(a, b, cc) * s.p[cc] * s.y[b];
                }
            }
            v
        });
        let pbardot = DVector::from_fn(n, |a, _| -s.p[a] + jl[(0, m + a)]);

        let lzz = hl.view((m + n, m + n), (n, n)).into_owned();
        let mut rhs = pbardot.clone();
        for a in 0..n {
            for j in 0..m {
                rhs[a] -= hl[(m + n + a, j)] * xdot[j];
            }
            for b in 0..n {
                rhs[a] -= hl[(m + n + a, m + b)] * ydot[b];
            }
        }
        let zdot = solve_lu(&lzz, &rhs, "z-Hessian of the Lagrangian")?;

        Ok(PontryaginState {
            x: xdot,
            y: ydot,
            z: zdot,
            p: pdot,
            pbar: pbardot,
        })
    }

    /// [`Self::optimality_field`] on flat slices, for integrators.
    pub fn optimality_field_flat(&self, flat: &[f64], out: &mut [f64]) -> Result<()> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let s = PontryaginState::from_flat(m, n, flat)?;
        let d = self.optimality_field(&s)?;
        out.copy_from_slice(&d.flatten());
        Ok(())
    }

    /// Residual of the second-order variational equation along a fiber
    /// curve given by `(y, ydot, yddot, ydddot)` over the base point `x`:
    ///
    /// ```text
    /// R_A = d^2/dt^2 (dL/dz^A) - d/dt (dL/dy^A) + rho^i_A dL/dx^i
    ///       + C^C_{AB} y^B ( d/dt (dL/dz^C) - dL/dy^C )
    /// ```
    ///
    /// The base curve is completed from admissibility: `xdot = rho y` and
    /// its derivative. Time derivatives of `dL/dz`, `dL/dy` come from
    /// second-order propagation through the cached first-derivative fields,
    /// so no third derivatives of `L` are ever formed.
    pub fn second_order_el_residual(
        &self,
        x: &[f64],
        y: &[f64],
        ydot: &[f64],
        yddot: &[f64],
        ydddot: &[f64],
    ) -> Result<DVector<f64>> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        if x.len() != m || y.len() != n || ydot.len() != n || yddot.len() != n || ydddot.len() != n
        {
            return Err(Error::Dimension(
                "second_order_el_residual: block sizes mismatch".into(),
            ));
        }
        let rho = self.chart.anchor_at(x)?;
        let drho = self.chart.anchor_jac_at(x)?;
        let c = self.chart.structure_at(x)?;

        let mut xdot = vec![0.0; m];
        for i in 0..m {
            for a in 0..n {
                xdot[i] += rho[(i, a)] * y[a];
            }
        }
        let mut xddot = vec![0.0; m];
        for i in 0..m {
            for a in 0..n {
                let mut drho_dt = 0.0;
                for j in 0..m {
                    drho_dt += drho[j][(i, a)] * xdot[j];
                }
                xddot[i] += drho_dt * y[a] + rho[(i, a)] * ydot[a];
            }
        }

        let mut curve = Vec::with_capacity(m + 2 * n);
        for i in 0..m {
            curve.push((x[i], xdot[i], xddot[i]));
        }
        for a in 0..n {
            curve.push((y[a], ydot[a], yddot[a]));
        }
        for a in 0..n {
            curve.push((ydot[a], yddot[a], ydddot[a]));
        }

        let mut flat = Vec::with_capacity(m + 2 * n);
        flat.extend_from_slice(x);
        flat.extend_from_slice(y);
        flat.extend_from_slice(ydot);
        let jl = self.lagrangian.jacobian(&flat)?;

        let mut dlz = Vec::with_capacity(n); // (value, d/dt, d2/dt2) of dL/dz_A
        let mut dly = Vec::with_capacity(n);
        for a in 0..n {
            dlz.push(self.dl_dz[a].along_curve(&curve)?[0]);
            dly.push(self.dl_dy[a].along_curve(&curve)?[0]);
        }

        Ok(DVector::from_fn(n, |a, _| {
            let mut r = dlz[a].2 - dly[a].1;
            for i in 0..m {
                r += rho[(i, a)] * jl[(0, i)];
            }
            for b in 0..n {
                for cc in 0..n {
                    r += c.get(a, b, cc) * y[b] * (dlz[cc].1 - dly[cc].0);
                }
            }
            r
        }))
    }

    // -----------------------------------------------------------------
    // Presymplectic data
    // -----------------------------------------------------------------
    //
    // The prolongation fiber at a state has dimension 5n, ordered as five
    // n-blocks (a, b, c, d, f): `a` moves the base through the anchor and
    // carries the y-component of the underlying section pair, `b` is the
    // second section component, `c` and `d` are vertical along (p, pbar),
    // and `f` is vertical along z. The anchor of the prolongation sends
    // (a, b, c, d, f) to the state velocity
    // (xdot, ydot, zdot, pdot, pbardot) = (rho a, b, f, c, d).
    // An evolution direction X solves `Omega X + dH = 0`.

    /// Matrix of the presymplectic form in the fiber basis (size `5n`),
    /// antisymmetric exactly.
    pub fn presymplectic_matrix(&self, s: &PontryaginState) -> Result<DMatrix<f64>> {
        let n = self.chart.fiber_rank();
        let c = self.chart.structure_at(s.x.as_slice())?;
        let (a0, b0, c0, d0) = (0, n, 2 * n, 3 * n);
        let mut w = DMatrix::zeros(5 * n, 5 * n);
        for a in 0..n {
            for b in (a + 1)..n {
                let mut v = 0.0;
                for cc in 0..n {
                    v += c.get(a, b, cc) * s.p[cc];
                }
                w[(a0 + a, a0 + b)] = v;
                w[(a0 + b, a0 + a)] = -v;
            }
        }
        for a in 0..n {
            w[(a0 + a, c0 + a)] = 1.0;
            w[(c0 + a, a0 + a)] = -1.0;
            w[(b0 + a, d0 + a)] = 1.0;
            w[(d0 + a, b0 + a)] = -1.0;
        }
        Ok(w)
    }

    /// Components of `dH` in the dual fiber basis, ordered like the fiber
    /// blocks `(a, b, c, d, f)`.
    pub fn dh_covector(&self, s: &PontryaginState) -> Result<DVector<f64>> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let rho = self.chart.anchor_at(s.x.as_slice())?;
        let jl = self.lagrangian.jacobian(&self.lagrangian_flat(s))?;
        let mut g = DVector::zeros(5 * n);
        for a in 0..n {
            let mut v = 0.0;
            for i in 0..m {
                v -= rho[(i, a)] * jl[(0, i)];
            }
            g[a] = v;
            g[n + a] = s.p[a] - jl[(0, m + a)];
            g[2 * n + a] = s.y[a];
            g[3 * n + a] = s.z[a];
            g[4 * n + a] = s.pbar[a] - jl[(0, m + n + a)];
        }
        Ok(g)
    }

    /// Jacobian of the `dH` components with respect to the state
    /// `(x, y, z, p, pbar)`: `5n x (m + 4n)`.
    pub fn dh_state_jacobian(&self, s: &PontryaginState) -> Result<DMatrix<f64>> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let rho = self.chart.anchor_at(s.x.as_slice())?;
        let drho = self.chart.anchor_jac_at(s.x.as_slice())?;
        let flat = self.lagrangian_flat(s);
        let jl = self.lagrangian.jacobian(&flat)?;
        let hl = &self.lagrangian.hessian(&flat)?[0];
        let (xo, yo, zo, po, qo) = (0, m, m + n, m + 2 * n, m + 3 * n);
        let mut jg = DMatrix::zeros(5 * n, m + 4 * n);
        for a in 0..n {
            // a-block: -rho^i_A dL/dx^i.
            for j in 0..m {
                let mut v = 0.0;
                for i in 0..m {
                    v -= drho[j][(i, a)] * jl[(0, i)] + rho[(i, a)] * hl[(i, j)];
                }
                jg[(a, xo + j)] = v;
            }
            for b in 0..n {
                let mut vy = 0.0;
                let mut vz = 0.0;
                for i in 0..m {
                    vy -= rho[(i, a)] * hl[(i, m + b)];
                    vz -= rho[(i, a)] * hl[(i, m + n + b)];
                }
                jg[(a, yo + b)] = vy;
                jg[(a, zo + b)] = vz;
            }
            // b-block: p_A - dL/dy^A.
            for j in 0..m {
                jg[(n + a, xo + j)] = -hl[(m + a, j)];
            }
            for b in 0..n {
                jg[(n + a, yo + b)] = -hl[(m + a, m + b)];
                jg[(n + a, zo + b)] = -hl[(m + a, m + n + b)];
            }
            jg[(n + a, po + a)] = 1.0;
            // c-block: y^A. d-block: z^A.
            jg[(2 * n + a, yo + a)] = 1.0;
            jg[(3 * n + a, zo + a)] = 1.0;
            // f-block: pbar_A - dL/dz^A.
            for j in 0..m {
                jg[(4 * n + a, xo + j)] = -hl[(m + n + a, j)];
            }
            for b in 0..n {
                jg[(4 * n + a, yo + b)] = -hl[(m + n + a, m + b)];
                jg[(4 * n + a, zo + b)] = -hl[(m + n + a, m + n + b)];
            }
            jg[(4 * n + a, qo + a)] = 1.0;
        }
        Ok(jg)
    }

    /// Anchor of the prolongation: maps fiber coordinates `(a, b, c, d, f)`
    /// to the state velocity, `(m + 4n) x 5n`.
    pub fn prolongation_anchor(&self, s: &PontryaginState) -> Result<DMatrix<f64>> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let rho = self.chart.anchor_at(s.x.as_slice())?;
        let mut a = DMatrix::zeros(m + 4 * n, 5 * n);
        for i in 0..m {
            for b in 0..n {
                a[(i, b)] = rho[(i, b)];
            }
        }
        for b in 0..n {
            a[(m + b, n + b)] = 1.0; // ydot from b-block
            a[(m + n + b, 4 * n + b)] = 1.0; // zdot from f-block
            a[(m + 2 * n + b, 2 * n + b)] = 1.0; // pdot from c-block
            a[(m + 3 * n + b, 3 * n + b)] = 1.0; // pbardot from d-block
        }
        Ok(a)
    }

    /// Frozen linear data for the constraint algorithm at one state.
    pub fn chain_freeze(&self, s: &PontryaginState) -> Result<ChainFreeze> {
        let omega = self.presymplectic_matrix(s)?;
        let dh = self.dh_covector(s)?;
        let sensitivity = self.dh_state_jacobian(s)? * self.prolongation_anchor(s)?;
        Ok(ChainFreeze {
            omega,
            dh,
            sensitivity,
        })
    }

    /// One level of the constraint algorithm.
    ///
    /// `rows` are the accumulated tangency conditions cutting out the
    /// current admitted space, `covectors` the constraint covectors
    /// accepted so far (both may be empty at level 0). New constraints are
    /// covectors annihilating the image of the form on the admitted space
    /// that are independent of the accepted ones; each contributes its
    /// pairing with `dH` as a constraint function and its tangency row for
    /// the next level.
    pub fn constraint_step(
        &self,
        freeze: &ChainFreeze,
        level: usize,
        rows: &DMatrix<f64>,
        covectors: &DMatrix<f64>,
        tol: f64,
    ) -> ChainStep {
        let nf = freeze.omega.nrows();
        let admitted = kernel_basis(rows, nf, tol);
        let admitted_dim = admitted.ncols();
        let pairing = admitted.transpose() * &freeze.omega;
        let kernel = canonical_kernel(&kernel_basis(&pairing, nf, tol), tol);
        let kernel_dim = kernel.ncols();

        let mut max_abs = 0.0f64;
        for k in 0..kernel_dim {
            max_abs = max_abs.max(kernel.column(k).dot(&freeze.dh).abs());
        }

        let mut new_rows = rows.clone();
        let mut new_covs = covectors.clone();
        let mut new_covectors = Vec::new();
        let mut new_values = Vec::new();
        for k in 0..kernel_dim {
            let eta = kernel.column(k).into_owned();
            if in_row_span(&new_covs, &eta, tol) {
                continue;
            }
            let nr = new_covs.nrows();
            new_covs = new_covs.insert_row(nr, 0.0);
            new_covs.set_row(nr, &eta.transpose());
            // Tangency of the flow to phi_eta = <dH, eta>: the gradient of
            // phi along a fiber direction is eta^T * sensitivity.
            let row = eta.transpose() * &freeze.sensitivity;
            let nr = new_rows.nrows();
            new_rows = new_rows.insert_row(nr, 0.0);
            new_rows.set_row(nr, &row);
            new_values.push(eta.dot(&freeze.dh));
            new_covectors.push(eta.as_slice().to_vec());
        }

        ChainStep {
            level: ChainLevel {
                level,
                admitted_dim,
                kernel_dim,
                new_covectors,
                new_values,
                max_abs_kernel_pairing: max_abs,
                solvable: max_abs <= tol.max(1e-12) * (1.0 + freeze.dh.amax()),
            },
            rows: new_rows,
            covectors: new_covs,
        }
    }

    /// Runs the constraint algorithm to stabilization at `sample`.
    ///
    /// Covectors are frozen at the sample state: each accepted covector
    /// `eta` defines the global constraint function `state -> <dH(state),
    /// eta>`, and its tangency row refines the admitted directions for the
    /// next level. The chain stabilizes when a level adds nothing new; the
    /// admitted dimension is strictly decreasing until then (or constraints
    /// are trivial), so termination is guaranteed.
    pub fn run_constraint_algorithm(
        &self,
        sample: &PontryaginState,
        tol: f64,
    ) -> Result<ConstraintChainReport> {
        let freeze = self.chain_freeze(sample)?;
        let nf = freeze.omega.nrows();
        let mut rows = DMatrix::zeros(0, nf);
        let mut covs = DMatrix::zeros(0, nf);
        let mut levels = Vec::new();
        let mut stabilized = false;
        let mut final_dim = nf;
        for level in 0..=nf {
            let step = self.constraint_step(&freeze, level, &rows, &covs, tol);
            final_dim = step.level.admitted_dim;
            let fresh = !step.level.new_covectors.is_empty();
            levels.push(step.level);
            rows = step.rows;
            covs = step.covectors;
            if !fresh {
                stabilized = true;
                break;
            }
        }
        Ok(ConstraintChainReport {
            sample_state: sample.flatten(),
            fiber_dim: nf,
            tol,
            levels,
            stabilized,
            final_admitted_dim: final_dim,
        })
    }

    /// Regularity of the problem at `(x, y, z)`.
    ///
    /// Unconstrained: the `z`-Hessian of `L`. With multiplier constraints:
    /// the bordered matrix
    /// `[[d2L/dz2 + lambda . d2Phi/dz2, dPhi/dz^T], [dPhi/dz, 0]]`
    /// (`lambda` defaults to zero). Vakonomic problems carry their own
    /// check on [`VakonomicProblem::regularity`].
    pub fn regularity_test(
        &self,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        lambda: Option<&[f64]>,
        tol: f64,
    ) -> Result<RegularityReport> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let mut flat = Vec::with_capacity(m + 2 * n);
        flat.extend_from_slice(x);
        flat.extend_from_slice(y);
        flat.extend_from_slice(z);
        let hl = &self.lagrangian.hessian(&flat)?[0];
        let lzz = hl.view((m + n, m + n), (n, n)).into_owned();
        match (&self.constraints, self.mode) {
            (None, _) => Ok(regularity_report("z-Hessian of the Lagrangian", lzz, tol)),
            (Some(_), ConstraintMode::Vakonomic) => Err(Error::Unsupported(
                "vakonomic regularity is checked on the eliminated problem".into(),
            )),
            (Some(phi), _) => {
                let k = phi.n_components();
                let lam = match lambda {
                    Some(l) => {
                        if l.len() != k {
                            return Err(Error::Dimension(format!(
                                "lambda has {} entries, {} constraints",
                                l.len(),
                                k
                            )));
                        }
                        l.to_vec()
                    }
                    None => vec![0.0; k],
                };
                let jphi = phi.jacobian(&flat)?;
                let hphi = phi.hessian(&flat)?;
                let mut b = DMatrix::zeros(n + k, n + k);
                for a in 0..n {
                    for c in 0..n {
                        let mut v = lzz[(a, c)];
                        for (al, l) in lam.iter().enumerate() {
                            v += l * hphi[al][(m + n + a, m + n + c)];
                        }
                        b[(a, c)] = v;
                    }
                }
                for al in 0..k {
                    for a in 0..n {
                        b[(a, n + al)] = jphi[(al, m + n + a)];
                        b[(n + al, a)] = jphi[(al, m + n + a)];
                    }
                }
                Ok(regularity_report(
                    "bordered z-Hessian with constraint block",
                    b,
                    tol,
                ))
            }
        }
    }

    /// Evolution with multiplier-adjoined constraints. State layout
    /// `(x, y, z, p, pbar, lambda)`; the bordered solve determines
    /// `(zdot, lambdadot)` so the flow stays on `Phi = 0` and
    /// `pbar = d(L + lambda.Phi)/dz`.
    pub fn multiplier_field(&self, flat: &[f64], out: &mut [f64]) -> Result<()> {
        let phi = self.constraints.as_ref().ok_or_else(|| {
            Error::Config("multiplier_field needs constraints".into())
        })?;
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let k = phi.n_components();
        if flat.len() != m + 4 * n + k || out.len() != m + 4 * n + k {
            return Err(Error::Dimension(format!(
                "multiplier state has {} entries, want {}",
                flat.len(),
                m + 4 * n + k
            )));
        }
        let s = PontryaginState::from_flat(m, n, &flat[..m + 4 * n])?;
        let lam = &flat[m + 4 * n..];

        let rho = self.chart.anchor_at(s.x.as_slice())?;
        let c = self.chart.structure_at(s.x.as_slice())?;
        let lflat = self.lagrangian_flat(&s);
        let jl = self.lagrangian.jacobian(&lflat)?;
        let hl = &self.lagrangian.hessian(&lflat)?[0];
        let jphi = phi.jacobian(&lflat)?;
        let hphi = phi.hessian(&lflat)?;

        // Effective first and second derivatives of L + lambda . Phi.
        let s_len = m + 2 * n;
        let mut jeff = vec![0.0; s_len];
        for i in 0..s_len {
            jeff[i] = jl[(0, i)];
            for (al, l) in lam.iter().enumerate() {
                jeff[i] += l * jphi[(al, i)];
            }
        }
        let heff = |r: usize, cidx: usize| -> f64 {
            let mut v = hl[(r, cidx)];
            for (al, l) in lam.iter().enumerate() {
                v += l * hphi[al][(r, cidx)];
            }
            v
        };

        let xdot = &rho * &s.y;
        let ydot = s.z.clone();
        let mut pdot = DVector::zeros(n);
        for a in 0..n {
            for i in 0..m {
                pdot[a] += rho[(i, a)] * jeff[i];
            }
            for b in 0..n {
                for cc in 0..n {
                    pdot[a] -= c.get(a, b, cc) * s.p[cc] * s.y[b];
                }
            }
        }
        let pbardot = DVector::from_fn(n, |a, _| -s.p[a] + jeff[m + a]);

        // Bordered system for (zdot, lambdadot).
        let mut b = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        for a in 0..n {
            for cidx in 0..n {
                b[(a, cidx)] = heff(m + n + a, m + n + cidx);
            }
            for al in 0..k {
                b[(a, n + al)] = jphi[(al, m + n + a)];
                b[(n + al, a)] = jphi[(al, m + n + a)];
            }
            let mut v = pbardot[a];
            for j in 0..m {
                v -= heff(m + n + a, j) * xdot[j];
            }
            for bb in 0..n {
                v -= heff(m + n + a, m + bb) * ydot[bb];
            }
            rhs[a] = v;
        }
        for al in 0..k {
            let mut v = 0.0;
            for j in 0..m {
                v -= jphi[(al, j)] * xdot[j];
            }
            for bb in 0..n {
                v -= jphi[(al, m + bb)] * ydot[bb];
            }
            rhs[n + al] = v;
        }
        let sol = solve_lu(&b, &rhs, "bordered z-Hessian with constraint block")?;

        out[..m].copy_from_slice(xdot.as_slice());
        out[m..m + n].copy_from_slice(ydot.as_slice());
        out[m + n..m + 2 * n].copy_from_slice(&sol.as_slice()[..n]);
        out[m + 2 * n..m + 3 * n].copy_from_slice(pdot.as_slice());
        out[m + 3 * n..m + 4 * n].copy_from_slice(pbardot.as_slice());
        out[m + 4 * n..].copy_from_slice(&sol.as_slice()[n..]);
        Ok(())
    }
}

fn check_xyz_signature(f: &Field, m: usize, n: usize, what: &str) -> Result<()> {
    let groups = f.signature().groups();
    let lens: Vec<usize> = groups.iter().map(|g| g.len).collect();
    if lens != [m, n, n] {
        return Err(Error::Dimension(format!(
            "{what} must have slot groups sized ({m}, {n}, {n}), got {lens:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::Signature;

    fn rigid_body() -> SecondOrderProblem {
        let chart = AlgebroidChart::so3();
        let sig = Signature::new(&[("x", 0), ("y", 3), ("z", 3)]).unwrap();
        let l = Field::parse(sig, Shape::Scalar, &["0.5*(z1^2 + z2^2 + z3^2)"]).unwrap();
        SecondOrderProblem::new(chart, l).unwrap()
    }

    /// so(3) acting on R^3 by rotations: base dim 3 with an x-dependent
    /// anchor, for tests that need genuine base coupling.
    fn so3_on_r3() -> AlgebroidChart {
        let sig = Signature::new(&[("x", 3)]).unwrap();
        let gens = Field::parse(
            sig,
            Shape::Matrix(3, 3),
            &["0", "-x3", "x2", "x3", "0", "-x1", "-x2", "x1", "0"],
        )
        .unwrap();
        let mut c = crate::algebroid::C3::zeros(3);
        c.set_antisymmetric(0, 1, 2, 1.0);
        c.set_antisymmetric(1, 2, 0, 1.0);
        c.set_antisymmetric(2, 0, 1, 1.0);
        AlgebroidChart::action_algebroid("so3_on_r3", &c, gens).unwrap()
    }

    fn sample_state(seed: u64) -> PontryaginState {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = |k: usize| DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0));
        PontryaginState {
            x: v(0),
            y: v(3),
            z: v(3),
            p: v(3),
            pbar: v(3),
        }
    }

    #[test]
    fn rigid_body_field_is_cross_product_system() {
        let prob = rigid_body();
        let s = sample_state(7);
        let d = prob.optimality_field(&s).unwrap();
        // pdot = p x y, pbardot = -p + 0, zdot = pbardot.
        let cross = DVector::from_vec(vec![
            s.p[1] * s.y[2] - s.p[2] * s.y[1],
            s.p[2] * s.y[0] - s.p[0] * s.y[2],
            s.p[0] * s.y[1] - s.p[1] * s.y[0],
        ]);
        assert!((d.p - cross).amax() < 1e-14);
        assert!((d.pbar.clone() + &s.p).amax() < 1e-14);
        assert!((d.z - d.pbar).amax() < 1e-14);
        assert!((d.y - s.z).amax() < 1e-14);
    }

    #[test]
    fn optimality_flow_preserves_primary_constraint() {
        // d/dt (pbar - dL/dz) = 0 by construction of the zdot solve, so a
        // first-order Euler step moves the residual only at O(h^2).
        let chart = so3_on_r3();
        let sig = Signature::new(&[("x", 3), ("y", 3), ("z", 3)]).unwrap();
        let l = Field::parse(
            sig,
            Shape::Scalar,
            &["0.5*(z1^2 + 2*z2^2 + z3^2) + 0.3*z1*z3 - 0.2*(y1^2) - 0.1*x2^2"],
        )
        .unwrap();
        let prob = SecondOrderProblem::new(chart, l).unwrap();
        let s0 = {
            let mut s = sample_state(3);
            s.x = DVector::from_vec(vec![0.2, -0.4, 0.1]);
            prob.primary_lift(
                s.x.as_slice(),
                s.y.as_slice(),
                s.z.as_slice(),
                s.p.as_slice(),
            )
            .unwrap()
        };
        assert!(prob.primary_constraint(&s0).unwrap().amax() < 1e-15);
        let d = prob.optimality_field(&s0).unwrap();
        for h in [1e-3, 1e-4] {
            let flat: Vec<f64> = s0
                .flatten()
                .iter()
                .zip(d.flatten())
                .map(|(v, dv)| v + h * dv)
                .collect();
            let s1 = PontryaginState::from_flat(3, 3, &flat).unwrap();
            let r = prob.primary_constraint(&s1).unwrap().amax();
            assert!(r < 10.0 * h * h, "h={h}: residual {r}");
        }
    }

    #[test]
    fn presymplectic_matrix_antisymmetric_with_kernel_rank_n() {
        let prob = rigid_body();
        let s = sample_state(11);
        let w = prob.presymplectic_matrix(&s).unwrap();
        assert_eq!((w.clone() + w.transpose()).amax(), 0.0);
        let ker = kernel_basis(&w, 15, 1e-10);
        assert_eq!(ker.ncols(), 3);
        // Kernel is spanned by the f-block directions.
        for k in 0..3 {
            let col = ker.column(k);
            for i in 0..12 {
                assert!(col[i].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn optimality_direction_solves_presymplectic_equation() {
        // Lift the state derivative to fiber coordinates and check
        // Omega X + dH = 0 on a problem with base dependence.
        let chart = so3_on_r3();
        let sig = Signature::new(&[("x", 3), ("y", 3), ("z", 3)]).unwrap();
        let l = Field::parse(
            sig,
            Shape::Scalar,
            &["0.5*(z1^2 + z2^2 + z3^2) - 0.2*y2^2 - 0.3*x1^2 + 0.1*x3*y1"],
        )
        .unwrap();
        let prob = SecondOrderProblem::new(chart, l).unwrap();
        let s = {
            let t = sample_state(5);
            let x = [0.3, -0.2, 0.5];
            prob.primary_lift(&x, t.y.as_slice(), t.z.as_slice(), t.p.as_slice())
                .unwrap()
        };
        let d = prob.optimality_field(&s).unwrap();
        let n = 3;
        let mut xfib = DVector::zeros(5 * n);
        for a in 0..n {
            xfib[a] = s.y[a]; // a-block: section = y
            xfib[n + a] = d.y[a]; // b-block: ydot
            xfib[2 * n + a] = d.p[a]; // c-block: pdot
            xfib[3 * n + a] = d.pbar[a]; // d-block: pbardot
            xfib[4 * n + a] = d.z[a]; // f-block: zdot
        }
        let w = prob.presymplectic_matrix(&s).unwrap();
        let dh = prob.dh_covector(&s).unwrap();
        let res = (w * xfib + dh).amax();
        assert!(res < 1e-12, "residual {res}");
        // The prolongation anchor reproduces the state velocity.
        let a = prob.prolongation_anchor(&s).unwrap();
        let mut xfib2 = DVector::zeros(5 * n);
        for b in 0..n {
            xfib2[b] = s.y[b];
            xfib2[n + b] = d.y[b];
            xfib2[2 * n + b] = d.p[b];
            xfib2[3 * n + b] = d.pbar[b];
            xfib2[4 * n + b] = d.z[b];
        }
        let v = a * xfib2;
        let want = DVector::from_vec(d.flatten());
        assert!((v - want).amax() < 1e-13);
    }

    #[test]
    fn dh_state_jacobian_matches_finite_differences() {
        let chart = so3_on_r3();
        let sig = Signature::new(&[("x", 3), ("y", 3), ("z", 3)]).unwrap();
        let l = Field::parse(
            sig,
            Shape::Scalar,
            &["0.5*(z1^2 + z2^2 + z3^2) + 0.2*x1*z2 - 0.4*y3^2 + x2*y1"],
        )
        .unwrap();
        let prob = SecondOrderProblem::new(chart, l).unwrap();
        let mut s = sample_state(13);
        s.x = DVector::from_vec(vec![0.1, 0.7, -0.3]);
        let jg = prob.dh_state_jacobian(&s).unwrap();
        let flat0 = s.flatten();
        let h = 1e-6;
        for col in 0..flat0.len() {
            let mut fp = flat0.clone();
            fp[col] += h;
            let mut fm = flat0.clone();
            fm[col] -= h;
            let gp = prob
                .dh_covector(&PontryaginState::from_flat(3, 3, &fp).unwrap())
                .unwrap();
            let gm = prob
                .dh_covector(&PontryaginState::from_flat(3, 3, &fm).unwrap())
                .unwrap();
            for row in 0..15 {
                let fd = (gp[row] - gm[row]) / (2.0 * h);
                assert!(
                    (jg[(row, col)] - fd).abs() < 1e-6,
                    "({row},{col}): {} vs {}",
                    jg[(row, col)],
                    fd
                );
            }
        }
    }

    #[test]
    fn second_order_residual_vanishes_along_optimality_flow() {
        // Integrate the rigid-body optimality field briefly, extract the
        // fiber jet by finite differences, and check the residual there.
        let prob = rigid_body();
        let s0 = prob
            .primary_lift(
                &[],
                &[0.3, -0.5, 0.7],
                &[0.1, 0.2, -0.3],
                &[0.4, 0.0, -0.2],
            )
            .unwrap();
        let h = 1e-3;
        let mut states = Vec::new();
        let mut flat = s0.flatten();
        for _ in 0..7 {
            states.push(flat.clone());
            // RK4 step of the optimality field.
            let mut k = [vec![0.0; 12], vec![0.0; 12], vec![0.0; 12], vec![0.0; 12]];
            prob.optimality_field_flat(&flat, &mut k[0]).unwrap();
            let mid1: Vec<f64> = flat.iter().zip(&k[0]).map(|(v, d)| v + 0.5 * h * d).collect();
            prob.optimality_field_flat(&mid1, &mut k[1]).unwrap();
            let mid2: Vec<f64> = flat.iter().zip(&k[1]).map(|(v, d)| v + 0.5 * h * d).collect();
            prob.optimality_field_flat(&mid2, &mut k[2]).unwrap();
            let end: Vec<f64> = flat.iter().zip(&k[2]).map(|(v, d)| v + h * d).collect();
            prob.optimality_field_flat(&end, &mut k[3]).unwrap();
            for i in 0..12 {
                flat[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
        }
        // 5-point stencils for y-derivatives at the middle sample (index 3).
        let y_at = |i: usize, a: usize| states[i][a];
        let mut y = [0.0; 3];
        let mut yd = [0.0; 3];
        let mut ydd = [0.0; 3];
        let mut yddd = [0.0; 3];
        for a in 0..3 {
            let f = |i: usize| y_at(i + 1, a); // samples 1..5 centered at 3
            y[a] = f(2);
            yd[a] = (-f(4) + 8.0 * f(3) - 8.0 * f(1) + f(0)) / (12.0 * h);
            ydd[a] = (-f(4) + 16.0 * f(3) - 30.0 * f(2) + 16.0 * f(1) - f(0)) / (12.0 * h * h);
            let g = |i: usize| y_at(i, a); // samples 0..6 for the third derivative
            yddd[a] = (g(5) - 2.0 * g(4) + 2.0 * g(2) - g(1)) / (2.0 * h * h * h);
        }
        let r = prob
            .second_order_el_residual(&[], &y, &yd, &ydd, &yddd)
            .unwrap();
        assert!(r.amax() < 1e-4, "residual {}", r.amax());
    }

    #[test]
    fn chain_rigid_body_primary_level_and_stabilization() {
        let prob = rigid_body();
        let s = sample_state(17);
        let report = prob.run_constraint_algorithm(&s, 1e-9).unwrap();
        assert!(report.stabilized);
        assert_eq!(report.levels[0].admitted_dim, 15);
        assert_eq!(report.levels[0].kernel_dim, 3);
        assert_eq!(report.levels[0].new_covectors.len(), 3);
        // Frozen covectors are exactly the f-block unit vectors, so the
        // constraints read pbar_A - z_A at any state.
        for (k, eta) in report.levels[0].new_covectors.iter().enumerate() {
            for (i, v) in eta.iter().enumerate() {
                let want = if i == 12 + k { 1.0 } else { 0.0 };
                assert_eq!(*v, want, "covector {k} component {i}");
            }
            let val = report.levels[0].new_values[k];
            assert!((val - (s.pbar[k] - s.z[k])).abs() < 1e-15);
        }
        // Exactly one more level, which finds nothing new.
        assert_eq!(report.levels.len(), 2);
        assert!(report.levels[1].new_covectors.is_empty());
        assert_eq!(report.final_admitted_dim, 12);
    }

    #[test]
    fn chain_degenerate_abelian_needs_second_level() {
        // L = z2^2 / 2 on a rank-2 abelian chart: level 0 yields pbar_1 and
        // pbar_2 - z_2, level 1 adds p_1, later levels add only trivial
        // covectors and the chain stabilizes.
        let chart =
            AlgebroidChart::lie_algebra("ab2", &crate::algebroid::C3::zeros(2)).unwrap();
        let sig = Signature::new(&[("x", 0), ("y", 2), ("z", 2)]).unwrap();
        let l = Field::parse(sig, Shape::Scalar, &["0.5*z2^2"]).unwrap();
        let prob = SecondOrderProblem::new(chart, l).unwrap();
        let s = PontryaginState {
            x: DVector::zeros(0),
            y: DVector::from_vec(vec![0.3, -0.8]),
            z: DVector::from_vec(vec![0.5, 0.9]),
            p: DVector::from_vec(vec![0.2, -0.4]),
            pbar: DVector::from_vec(vec![0.6, 0.1]),
        };
        let report = prob.run_constraint_algorithm(&s, 1e-9).unwrap();
        assert!(report.stabilized);
        assert_eq!(report.levels[0].kernel_dim, 2);
        assert_eq!(report.levels[0].new_covectors.len(), 2);
        assert!(report.levels.len() >= 3, "needs a genuine second level");
        assert_eq!(report.levels[1].new_covectors.len(), 1);
        // The level-1 constraint is p_1 (dH pairing on the b1 direction).
        let eta = DVector::from_column_slice(&report.levels[1].new_covectors[0]);
        let val = eta.dot(&prob.dh_covector(&s).unwrap());
        assert!((val - s.p[0]).abs() < 1e-14);
    }

    #[test]
    fn regularity_modes() {
        let prob = rigid_body();
        let r = prob
            .regularity_test(&[], &[0.1, 0.2, 0.3], &[0.0, 0.0, 0.0], None, 1e-9)
            .unwrap();
        assert!(r.regular);
        let m = r.matrix.to_dmatrix();
        assert!((m - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);

        // Linear-in-z Lagrangian is non-regular.
        let chart = AlgebroidChart::tangent_bundle(1);
        let sig = Signature::new(&[("x", 1), ("y", 1), ("z", 1)]).unwrap();
        let l = Field::parse(sig, Shape::Scalar, &["z1*y1 - x1^2"]).unwrap();
        let prob = SecondOrderProblem::new(chart, l).unwrap();
        let r = prob
            .regularity_test(&[0.2], &[0.1], &[0.4], None, 1e-9)
            .unwrap();
        assert!(!r.regular);
        assert!(r.min_singular_value < 1e-14);
    }

    #[test]
    fn multiplier_field_stays_on_constraint() {
        // Constrain the rank-2 abelian problem with Phi = z1 - z2 and check
        // that the flow keeps both Phi and the extended primary constraint.
        let chart =
            AlgebroidChart::lie_algebra("ab2", &crate::algebroid::C3::zeros(2)).unwrap();
        let sig = Signature::new(&[("x", 0), ("y", 2), ("z", 2)]).unwrap();
        let l = Field::parse(sig.clone(), Shape::Scalar, &["0.5*(z1^2 + z2^2) - 0.3*y1^2"])
            .unwrap();
        let phi = Field::parse(sig, Shape::Vector(1), &["z1 - z2"]).unwrap();
        let prob = SecondOrderProblem::new(chart, l)
            .unwrap()
            .with_constraints(phi, ConstraintMode::Multipliers)
            .unwrap();
        // State on Phi = 0 with pbar = d(L + lambda Phi)/dz:
        // pbar1 = z1 + lambda, pbar2 = z2 - lambda.
        let (z, lam) = (0.4, 0.25);
        let mut flat = vec![
            0.3, -0.6, // y
            z, z, // z
            0.1, 0.2, // p
            z + lam,
            z - lam, // pbar
            lam,
        ];
        let mut out = vec![0.0; 9];
        let h = 1e-4;
        for _ in 0..100 {
            prob.multiplier_field(&flat, &mut out).unwrap();
            for (v, d) in flat.iter_mut().zip(&out) {
                *v += h * d;
            }
        }
        assert!((flat[2] - flat[3]).abs() < 1e-8, "Phi drift");
        let lam_now = flat[8];
        assert!((flat[6] - (flat[2] + lam_now)).abs() < 1e-7);
        assert!((flat[7] - (flat[3] - lam_now)).abs() < 1e-7);
    }
}
