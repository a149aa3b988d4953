//! Optimal control of mechanical systems as second-order variational
//! problems.
//!
//! A control problem consists of a mechanical Lagrangian `L(x, y)`, a cost
//! density `C(x, y, u)`, and a set of actuated fiber directions. The
//! controlled equations of motion identify the control with the
//! Euler-Lagrange left-hand side,
//!
//! ```text
//! u_A = F_A(x, y, z) = d/dt(dL/dy^A) - rho^i_A dL/dx^i + C^C_{AB} y^B dL/dy^C
//! ```
//!
//! (time derivative expanded along admissible curves, `ydot = z`), so
//! minimizing the cost is the same as minimizing the second-order Lagrangian
//! `Lt(x, y, z) = C(x, y, F(x, y, z))`. Controls are never state variables
//! of the synthesized problem; they are reconstructed algebraically from
//! `F` afterwards.
//!
//! With fewer controls than fiber directions the unactuated components of
//! `F` have nothing to equal, so they become second-order constraints
//! `Phi^alpha = F_alpha = 0`. When the unactuated velocity Hessian
//! `W_{alpha beta} = d2L/dy^alpha dy^beta` is invertible those constraints
//! solve for the unactuated accelerations, `z^alpha = G^alpha(x, y, z^a)`,
//! and the problem descends to the constraint submanifold with restricted
//! cost `Lt_M`.
//!
//! All synthesis here is symbolic: the builders differentiate and compose
//! expression trees, so the produced fields have exact derivatives of every
//! order the downstream formulations need.

use nalgebra::DVector;

use crate::algebroid::AlgebroidChart;
use crate::calculus::expr::{self, Expr, SlotSub};
use crate::calculus::{Field, Shape, Signature};
use crate::error::{Error, Result};
use crate::linalg::min_singular_value;
use crate::sorusk::{ConstraintMode, ReducedSecondOrderProblem, SecondOrderProblem};

/// Full `(x, y)` data at both ends of the horizon.
#[derive(Debug, Clone)]
pub struct Boundary {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub x_end: Vec<f64>,
    pub y_end: Vec<f64>,
}

impl Boundary {
    fn check(&self, m: usize, n: usize) -> Result<()> {
        for (what, got, want) in [
            ("initial base point", self.x0.len(), m),
            ("initial velocity", self.y0.len(), n),
            ("final base point", self.x_end.len(), m),
            ("final velocity", self.y_end.len(), n),
        ] {
            if got != want {
                return Err(Error::Dimension(format!(
                    "{what} has {got} entries, want {want}"
                )));
            }
        }
        Ok(())
    }
}

/// Optimal control data: dynamics Lagrangian, cost density, actuation
/// pattern, and two-point boundary conditions over a fixed horizon.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    chart: AlgebroidChart,
    lagrangian: Field,
    cost: Field,
    actuated: Vec<usize>,
    boundary: Boundary,
    horizon: f64,
}

/// Output of [`ControlProblem::build_underactuated`]: the constrained
/// second-order problem together with its reduction to the constraint
/// submanifold and the data needed to reconstruct controls.
#[derive(Debug, Clone)]
pub struct UnderactuatedProblem {
    constrained: SecondOrderProblem,
    reduced: ReducedSecondOrderProblem,
    /// Inverse of the unactuated velocity Hessian, `(x, y) -> Matrix`.
    w_inverse: Field,
    /// Actuated Euler-Lagrange components `F_a`, `(x, y, z) -> controls`.
    control: Field,
}

impl ControlProblem {
    pub fn new(
        chart: AlgebroidChart,
        lagrangian: Field,
        cost: Field,
        actuated: Vec<usize>,
        boundary: Boundary,
        horizon: f64,
    ) -> Result<ControlProblem> {
        let (m, n) = (chart.base_dim(), chart.fiber_rank());
        let lens: Vec<usize> = lagrangian.signature().groups().iter().map(|g| g.len).collect();
        if lens != [m, n] || lagrangian.shape() != Shape::Scalar {
            return Err(Error::Dimension(format!(
                "dynamics Lagrangian must be scalar over slot groups ({m}, {n}), got {lens:?}"
            )));
        }
        let k = actuated.len();
        if k == 0 || k > n {
            return Err(Error::Dimension(format!(
                "{k} actuated directions out of fiber rank {n}"
            )));
        }
        if actuated.windows(2).any(|w| w[0] >= w[1]) || actuated.iter().any(|a| *a >= n) {
            return Err(Error::Config(
                "actuated indices must be strictly increasing and within the fiber rank".into(),
            ));
        }
        let lens: Vec<usize> = cost.signature().groups().iter().map(|g| g.len).collect();
        if lens != [m, n, k] || cost.shape() != Shape::Scalar {
            return Err(Error::Dimension(format!(
                "cost must be scalar over slot groups ({m}, {n}, {k}) with one control per \
                 actuated direction, got {lens:?}"
            )));
        }
        boundary.check(m, n)?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(ControlProblem {
            chart,
            lagrangian,
            cost,
            actuated,
            boundary,
            horizon,
        })
    }

    pub fn chart(&self) -> &AlgebroidChart {
        &self.chart
    }

    pub fn lagrangian(&self) -> &Field {
        &self.lagrangian
    }

    pub fn cost(&self) -> &Field {
        &self.cost
    }

    pub fn actuated(&self) -> &[usize] {
        &self.actuated
    }

    /// Unactuated index complement, increasing.
    pub fn unactuated(&self) -> Vec<usize> {
        (0..self.chart.fiber_rank())
            .filter(|i| !self.actuated.contains(i))
            .collect()
    }

    pub fn boundary(&self) -> &Boundary {
        &self.boundary
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Euler-Lagrange left-hand sides `F_A` as expressions over `(x, y, z)`
    /// slots.
    fn el_lhs_exprs(&self) -> Result<Vec<Expr>> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let l = &self
            .lagrangian
            .exprs()
            .ok_or_else(|| Error::Unsupported(
                "control synthesis requires an expression-backed Lagrangian".into(),
            ))?[0];
        let missing = || {
            Error::Unsupported(
                "control synthesis requires an expression-backed anchor and structure".into(),
            )
        };
        let dl_dx: Vec<Expr> = (0..m).map(|i| expr::diff(l, i)).collect();
        let dl_dy: Vec<Expr> = (0..n).map(|a| expr::diff(l, m + a)).collect();
        let mut rho = vec![vec![expr::num(0.0); n]; m];
        for (i, row) in rho.iter_mut().enumerate() {
            for (a, e) in row.iter_mut().enumerate() {
                *e = self.chart.anchor_expr(i, a).ok_or_else(missing)?;
            }
        }
        let xdot: Vec<Expr> = (0..m)
            .map(|i| {
                (0..n).fold(expr::num(0.0), |acc, a| {
                    expr::add(acc, expr::mul(rho[i][a].clone(), expr::var(m + a)))
                })
            })
            .collect();

        let mut f = Vec::with_capacity(n);
        for a in 0..n {
            let mut e = expr::num(0.0);
            for (i, xd) in xdot.iter().enumerate() {
                e = expr::add(e, expr::mul(expr::diff(&dl_dy[a], i), xd.clone()));
            }
            for b in 0..n {
                e = expr::add(
                    e,
                    expr::mul(expr::diff(&dl_dy[a], m + b), expr::var(m + n + b)),
                );
            }
            for (i, dlx) in dl_dx.iter().enumerate() {
                e = expr::sub(e, expr::mul(rho[i][a].clone(), dlx.clone()));
            }
            for b in 0..n {
                for c in 0..n {
                    let s = self.chart.structure_expr(a, b, c).ok_or_else(missing)?;
                    e = expr::add(
                        e,
                        expr::mul(expr::mul(s, expr::var(m + b)), dl_dy[c].clone()),
                    );
                }
            }
            f.push(e);
        }
        Ok(f)
    }

    fn xyz_signature(&self) -> Signature {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        Signature::new(&[("x", m), ("y", n), ("z", n)]).expect("fixed group names are valid")
    }

    /// All Euler-Lagrange components `F_A` as a field over `(x, y, z)`.
    pub fn controlled_el_field(&self) -> Result<Field> {
        let n = self.chart.fiber_rank();
        Field::from_exprs(self.xyz_signature(), Shape::Vector(n), self.el_lhs_exprs()?)
    }

    /// Actuated components `F_a`, the algebraic control reconstruction.
    pub fn control_field(&self) -> Result<Field> {
        let f = self.el_lhs_exprs()?;
        let comps: Vec<Expr> = self.actuated.iter().map(|a| f[*a].clone()).collect();
        Field::from_exprs(
            self.xyz_signature(),
            Shape::Vector(self.actuated.len()),
            comps,
        )
    }

    /// Cost with controls substituted by the actuated `F_a`, over
    /// `(x, y, z)`.
    fn restricted_cost_exprs(&self) -> Result<Expr> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let f = self.el_lhs_exprs()?;
        let cost = &self
            .cost
            .exprs()
            .ok_or_else(|| Error::Unsupported(
                "control synthesis requires an expression-backed cost".into(),
            ))?[0];
        let mut map: Vec<SlotSub> = (0..m + n).map(SlotSub::Slot).collect();
        for a in &self.actuated {
            map.push(SlotSub::Tree(f[*a].clone()));
        }
        Ok(expr::substitute(cost, &map))
    }

    /// Synthesizes the unconstrained second-order problem of a fully
    /// actuated cost: `Lt(x, y, z) = cost(x, y, F(x, y, z))`.
    pub fn build_fully_actuated(&self) -> Result<SecondOrderProblem> {
        let n = self.chart.fiber_rank();
        if self.actuated.len() != n {
            return Err(Error::Config(format!(
                "fully actuated synthesis needs all {n} fiber directions actuated, got {}",
                self.actuated.len()
            )));
        }
        let lt = Field::from_exprs(
            self.xyz_signature(),
            Shape::Scalar,
            vec![self.restricted_cost_exprs()?],
        )?;
        SecondOrderProblem::new(self.chart.clone(), lt)
    }

    /// Synthesizes the constrained second-order problem of an underactuated
    /// cost together with its reduction `(Lt_M, G)` to the constraint
    /// submanifold.
    ///
    /// Requires the unactuated velocity Hessian `W` to be invertible; it is
    /// checked numerically at both boundary states and inverted symbolically
    /// (supported up to size 4).
    pub fn build_underactuated(&self) -> Result<UnderactuatedProblem> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let k = self.actuated.len();
        if k == n {
            return Err(Error::Config(
                "all fiber directions are actuated; use the fully actuated synthesis".into(),
            ));
        }
        let unactuated = self.unactuated();
        let mbar = unactuated.len();
        if mbar > 4 {
            return Err(Error::Unsupported(format!(
                "symbolic inversion of the unactuated velocity Hessian is supported up to \
                 size 4, got {mbar}"
            )));
        }
        let l = &self.lagrangian.exprs().ok_or_else(|| {
            Error::Unsupported("control synthesis requires an expression-backed Lagrangian".into())
        })?[0];

        // W_{alpha beta} and its symbolic inverse via the adjugate.
        let w: Vec<Vec<Expr>> = unactuated
            .iter()
            .map(|al| {
                unactuated
                    .iter()
                    .map(|be| expr::diff(&expr::diff(l, m + al), m + be))
                    .collect()
            })
            .collect();
        let det = sym_det(&w);
        let adj = sym_adjugate(&w);
        for (what, x, y) in [
            ("initial", &self.boundary.x0, &self.boundary.y0),
            ("final", &self.boundary.x_end, &self.boundary.y_end),
        ] {
            let mut flat = x.clone();
            flat.extend_from_slice(y);
            let wm = nalgebra::DMatrix::from_fn(mbar, mbar, |r, c| {
                crate::calculus::jet::eval_f64(&w[r][c], &flat)
            });
            let sv = min_singular_value(&wm);
            if sv < 1e-10 {
                return Err(Error::Regularity {
                    context: format!(
                        "unactuated velocity Hessian at the {what} boundary state x = {x:?}, \
                         y = {y:?}"
                    ),
                    min_sv: sv,
                });
            }
        }

        let f = self.el_lhs_exprs()?;
        let sig_xyz = self.xyz_signature();
        let phi_comps: Vec<Expr> = unactuated.iter().map(|al| f[*al].clone()).collect();
        let phi = Field::from_exprs(sig_xyz.clone(), Shape::Vector(mbar), phi_comps)?;
        let lt = Field::from_exprs(
            sig_xyz.clone(),
            Shape::Scalar,
            vec![self.restricted_cost_exprs()?],
        )?;
        let constrained = SecondOrderProblem::new(self.chart.clone(), lt.clone())?
            .with_constraints(phi, ConstraintMode::Multipliers)?;

        // Unactuated accelerations solved from Phi = 0 over (x, y, z^a):
        // z^alpha = -W^{alpha beta} (d2L/dy^beta dx_i xdot^i
        //           + d2L/dy^beta dy^a z^a - rho^i_beta dL/dx_i
        //           + C^C_{beta B} y^B dL/dy^C).
        let missing = || {
            Error::Unsupported(
                "control synthesis requires an expression-backed anchor and structure".into(),
            )
        };
        let dl_dx: Vec<Expr> = (0..m).map(|i| expr::diff(l, i)).collect();
        let dl_dy: Vec<Expr> = (0..n).map(|a| expr::diff(l, m + a)).collect();
        let mut rho = vec![vec![expr::num(0.0); n]; m];
        for (i, row) in rho.iter_mut().enumerate() {
            for (a, e) in row.iter_mut().enumerate() {
                *e = self.chart.anchor_expr(i, a).ok_or_else(missing)?;
            }
        }
        let xdot: Vec<Expr> = (0..m)
            .map(|i| {
                (0..n).fold(expr::num(0.0), |acc, a| {
                    expr::add(acc, expr::mul(rho[i][a].clone(), expr::var(m + a)))
                })
            })
            .collect();
        let mut inner = Vec::with_capacity(mbar);
        for be in &unactuated {
            let mut e = expr::num(0.0);
            for (i, xd) in xdot.iter().enumerate() {
                e = expr::add(e, expr::mul(expr::diff(&dl_dy[*be], i), xd.clone()));
            }
            for (pos, a) in self.actuated.iter().enumerate() {
                e = expr::add(
                    e,
                    expr::mul(expr::diff(&dl_dy[*be], m + a), expr::var(m + n + pos)),
                );
            }
            for (i, dlx) in dl_dx.iter().enumerate() {
                e = expr::sub(e, expr::mul(rho[i][*be].clone(), dlx.clone()));
            }
            for b in 0..n {
                for c in 0..n {
                    let s = self.chart.structure_expr(*be, b, c).ok_or_else(missing)?;
                    e = expr::add(
                        e,
                        expr::mul(expr::mul(s, expr::var(m + b)), dl_dy[c].clone()),
                    );
                }
            }
            inner.push(e);
        }
        let g_comps: Vec<Expr> = (0..mbar)
            .map(|q| {
                let numer = (0..mbar).fold(expr::num(0.0), |acc, b| {
                    expr::add(acc, expr::mul(adj[q][b].clone(), inner[b].clone()))
                });
                expr::neg(expr::div(numer, det.clone()))
            })
            .collect();
        let sig_xyza = Signature::new(&[("x", m), ("y", n), ("za", k)])
            .expect("fixed group names are valid");
        let g = Field::from_exprs(sig_xyza.clone(), Shape::Vector(mbar), g_comps.clone())?;

        // Restrict Lt to the constraint: rename actuated z-slots, substitute
        // G for unactuated ones.
        let mut map: Vec<SlotSub> = (0..m + n).map(SlotSub::Slot).collect();
        for a in 0..n {
            match self.actuated.iter().position(|x| *x == a) {
                Some(pos) => map.push(SlotSub::Slot(m + n + pos)),
                None => {
                    let q = unactuated.iter().position(|x| *x == a).expect("complement");
                    map.push(SlotSub::Tree(g_comps[q].clone()));
                }
            }
        }
        let lt_expr = &lt.exprs().expect("synthesized field is expression-backed")[0];
        let lm = Field::from_exprs(
            sig_xyza,
            Shape::Scalar,
            vec![expr::substitute(lt_expr, &map)],
        )?;
        let reduced =
            ReducedSecondOrderProblem::new(self.chart.clone(), self.actuated.clone(), lm, g)?;

        let sig_xy = self.lagrangian.signature().clone();
        let mut winv_comps = Vec::with_capacity(mbar * mbar);
        for r in 0..mbar {
            for c in 0..mbar {
                winv_comps.push(expr::div(adj[r][c].clone(), det.clone()));
            }
        }
        let w_inverse = Field::from_exprs(sig_xy, Shape::Matrix(mbar, mbar), winv_comps)?;
        let control = self.control_field()?;
        Ok(UnderactuatedProblem {
            constrained,
            reduced,
            w_inverse,
            control,
        })
    }
}

impl UnderactuatedProblem {
    /// Second-order problem carrying the unactuated components as
    /// constraints.
    pub fn constrained(&self) -> &SecondOrderProblem {
        &self.constrained
    }

    /// Reduction to the constraint submanifold; its
    /// [`ReducedSecondOrderProblem::reduced_field`] is the optimality flow.
    pub fn reduced(&self) -> &ReducedSecondOrderProblem {
        &self.reduced
    }

    pub fn w_inverse(&self) -> &Field {
        &self.w_inverse
    }

    /// Control reconstruction `u_a = F_a(x, y, z)`.
    pub fn control_field(&self) -> &Field {
        &self.control
    }

    /// Controls along a reduced state: completes `z` through `G` and
    /// evaluates the actuated Euler-Lagrange components.
    pub fn control_at(&self, x: &[f64], y: &[f64], za: &[f64]) -> Result<DVector<f64>> {
        let z = self.reduced.full_z(x, y, za)?;
        let mut flat = Vec::with_capacity(x.len() + y.len() + z.len());
        flat.extend_from_slice(x);
        flat.extend_from_slice(y);
        flat.extend_from_slice(z.as_slice());
        self.control.value(&flat)
    }
}

/// Laplace expansion along the first row. Sizes here are tiny (at most 4).
fn sym_det(a: &[Vec<Expr>]) -> Expr {
    let n = a.len();
    if n == 1 {
        return a[0][0].clone();
    }
    let mut det = expr::num(0.0);
    for j in 0..n {
        let cof = sym_det(&minor(a, 0, j));
        let term = expr::mul(a[0][j].clone(), cof);
        det = if j % 2 == 0 {
            expr::add(det, term)
        } else {
            expr::sub(det, term)
        };
    }
    det
}

/// Adjugate matrix: `inverse = adjugate / det`.
fn sym_adjugate(a: &[Vec<Expr>]) -> Vec<Vec<Expr>> {
    let n = a.len();
    if n == 1 {
        return vec![vec![expr::num(1.0)]];
    }
    let mut adj = vec![vec![expr::num(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            let cof = sym_det(&minor(a, j, i));
            adj[i][j] = if (i + j) % 2 == 0 { cof } else { expr::neg(cof) };
        }
    }
    adj
}

fn minor(a: &[Vec<Expr>], row: usize, col: usize) -> Vec<Vec<Expr>> {
    let n = a.len();
    let mut out = Vec::with_capacity(n - 1);
    for (r, arow) in a.iter().enumerate() {
        if r == row {
            continue;
        }
        let mut orow = Vec::with_capacity(n - 1);
        for (c, e) in arow.iter().enumerate() {
            if c == col {
                continue;
            }
            orow.push(e.clone());
        }
        out.push(orow);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanics::LagrangianProblem;
    use rand::{Rng, SeedableRng};

    fn trivial_boundary(m: usize, n: usize) -> Boundary {
        Boundary {
            x0: vec![0.0; m],
            y0: vec![0.0; n],
            x_end: vec![0.0; m],
            y_end: vec![0.0; n],
        }
    }

    fn quadratic_cost(m: usize, n: usize, k: usize) -> Field {
        let sig = Signature::new(&[("x", m), ("y", n), ("u", k)]).unwrap();
        let body = (1..=k)
            .map(|j| format!("u{j}^2"))
            .collect::<Vec<_>>()
            .join(" + ");
        Field::parse(sig, Shape::Scalar, &[&format!("0.5*({body})")]).unwrap()
    }

    fn rigid_body_problem(inertias: [f64; 3]) -> ControlProblem {
        let chart = AlgebroidChart::so3();
        let sig = Signature::new(&[("x", 0), ("y", 3)])
            .unwrap()
            .with_params(&[("i1", inertias[0]), ("i2", inertias[1]), ("i3", inertias[2])])
            .unwrap();
        let l = Field::parse(
            sig,
            Shape::Scalar,
            &["0.5*(i1*y1^2 + i2*y2^2 + i3*y3^2)"],
        )
        .unwrap();
        ControlProblem::new(
            chart,
            l,
            quadratic_cost(0, 3, 3),
            vec![0, 1, 2],
            trivial_boundary(0, 3),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn equal_inertias_collapse_to_acceleration_cost() {
        let prob = rigid_body_problem([1.0, 1.0, 1.0]);
        let so = prob.build_fully_actuated().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lt = so.lagrangian().scalar(&s).unwrap();
            let direct = 0.5 * (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]);
            assert!((lt - direct).abs() < 1e-14, "{lt} vs {direct}");
        }
    }

    #[test]
    fn general_inertias_match_displayed_synthesis() {
        let (i1, i2, i3) = (1.0, 2.0, 3.0);
        let prob = rigid_body_problem([i1, i2, i3]);
        let so = prob.build_fully_actuated().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (y, z) = (&s[..3], &s[3..]);
            let f1 = i1 * z[0] - (i2 - i3) * y[1] * y[2];
            let f2 = i2 * z[1] - (i3 - i1) * y[2] * y[0];
            let f3 = i3 * z[2] - (i1 - i2) * y[0] * y[1];
            let direct = 0.5 * (f1 * f1 + f2 * f2 + f3 * f3);
            let lt = so.lagrangian().scalar(&s).unwrap();
            assert!((lt - direct).abs() < 1e-13, "{lt} vs {direct}");
        }
    }

    #[test]
    fn synthesized_el_components_match_numeric_residual() {
        // Base-coupled chart and Lagrangian: the symbolic F must agree with
        // the numerically assembled Euler-Lagrange residual.
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
        let chart = AlgebroidChart::action_algebroid("so3_on_r3", &c, gens).unwrap();
        let lsig = Signature::new(&[("x", 3), ("y", 3)]).unwrap();
        let l = Field::parse(
            lsig.clone(),
            Shape::Scalar,
            &["0.5*(1 + 0.2*x1^2)*y1^2 + 0.5*(y2^2 + y3^2) + 0.3*x2*y3 - 0.4*x3^2"],
        )
        .unwrap();
        let prob = ControlProblem::new(
            chart.clone(),
            l.clone(),
            quadratic_cost(3, 3, 3),
            vec![0, 1, 2],
            trivial_boundary(3, 3),
            1.0,
        )
        .unwrap();
        let f = prob.controlled_el_field().unwrap();
        let lp = LagrangianProblem::new(chart, l).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let s: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fv = f.value(&s).unwrap();
            let rv = lp.el_residual(&s[..3], &s[3..6], &s[6..]).unwrap();
            assert!((fv - rv).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_cost_synthesizes_degenerate_problem() {
        let chart = AlgebroidChart::so3();
        let sig = Signature::new(&[("x", 0), ("y", 3)]).unwrap();
        let l = Field::parse(sig.clone(), Shape::Scalar, &["0.5*(y1^2 + y2^2 + y3^2)"]).unwrap();
        let zsig = Signature::new(&[("x", 0), ("y", 3), ("u", 3)]).unwrap();
        let cost = Field::parse(zsig, Shape::Scalar, &["0"]).unwrap();
        let prob = ControlProblem::new(
            chart,
            l,
            cost,
            vec![0, 1, 2],
            trivial_boundary(0, 3),
            1.0,
        )
        .unwrap();
        let so = prob.build_fully_actuated().unwrap();
        let rep = so
            .regularity_test(&[], &[0.1, 0.2, 0.3], &[0.4, 0.5, 0.6], None, 1e-9)
            .unwrap();
        assert!(!rep.regular);
    }

    #[test]
    fn actuation_count_routes_between_builders() {
        let chart = AlgebroidChart::tangent_bundle(2);
        let sig = Signature::new(&[("x", 2), ("y", 2)]).unwrap();
        let l = Field::parse(sig, Shape::Scalar, &["0.5*(y1^2 + y2^2)"]).unwrap();
        let full = ControlProblem::new(
            chart.clone(),
            l.clone(),
            quadratic_cost(2, 2, 2),
            vec![0, 1],
            trivial_boundary(2, 2),
            1.0,
        )
        .unwrap();
        assert!(matches!(full.build_underactuated(), Err(Error::Config(_))));
        let under = ControlProblem::new(
            chart,
            l,
            quadratic_cost(2, 2, 1),
            vec![0],
            trivial_boundary(2, 2),
            1.0,
        )
        .unwrap();
        assert!(matches!(under.build_fully_actuated(), Err(Error::Config(_))));
        // A cost with the wrong number of control slots never constructs.
        let chart = AlgebroidChart::tangent_bundle(2);
        let sig = Signature::new(&[("x", 2), ("y", 2)]).unwrap();
        let l = Field::parse(sig, Shape::Scalar, &["0.5*(y1^2 + y2^2)"]).unwrap();
        assert!(ControlProblem::new(
            chart,
            l,
            quadratic_cost(2, 2, 2),
            vec![0],
            trivial_boundary(2, 2),
            1.0,
        )
        .is_err());
    }

    #[test]
    fn abelian_underactuated_example() {
        // Flat metric, no base coupling: the unactuated acceleration is
        // forced to zero and the constraint is exactly z2.
        let chart = AlgebroidChart::tangent_bundle(2);
        let sig = Signature::new(&[("x", 2), ("y", 2)]).unwrap();
        let l = Field::parse(sig, Shape::Scalar, &["0.5*(y1^2 + y2^2)"]).unwrap();
        let prob = ControlProblem::new(
            chart,
            l,
            quadratic_cost(2, 2, 1),
            vec![0],
            trivial_boundary(2, 2),
            1.0,
        )
        .unwrap();
        let built = prob.build_underactuated().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = built.reduced().elimination().value(&s).unwrap();
            assert_eq!(g.amax(), 0.0);
            let winv = built.w_inverse().value(&s[..4]).unwrap();
            assert_eq!(winv[0], 1.0);
        }
        let phi = built.constrained().constraints().unwrap();
        let s = [0.3, -0.1, 0.5, 0.2, 0.7, -0.4];
        assert_eq!(phi.value(&s).unwrap()[0], s[5]);
    }

    #[test]
    fn eliminated_accelerations_annihilate_constraints() {
        // x-dependent metric with velocity coupling, both one and two
        // unactuated directions: substituting z^alpha = G^alpha into Phi
        // must give an algebraic identity.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let cases: Vec<(usize, Vec<usize>, &str)> = vec![
            (
                2,
                vec![0],
                "0.5*(1 + 0.3*x1^2)*y1^2 + 0.5*(1 + 0.1*x2^2)*y2^2 + 0.2*y1*y2 - 0.3*x1*x2",
            ),
            (
                3,
                vec![0],
                "0.5*(y1^2 + y2^2 + y3^2) + 0.2*y2*y3 + 0.1*x1*y2^2 + 0.15*x3*y2*y3 - 0.2*x2^2",
            ),
        ];
        for (mn, actuated, lsrc) in cases {
            let chart = AlgebroidChart::tangent_bundle(mn);
            let sig = Signature::new(&[("x", mn), ("y", mn)]).unwrap();
            let l = Field::parse(sig, Shape::Scalar, &[lsrc]).unwrap();
            let k = actuated.len();
            let prob = ControlProblem::new(
                chart,
                l,
                quadratic_cost(mn, mn, k),
                actuated,
                trivial_boundary(mn, mn),
                1.0,
            )
            .unwrap();
            let built = prob.build_underactuated().unwrap();
            let phi = built.constrained().constraints().unwrap();
            for _ in 0..30 {
                let x: Vec<f64> = (0..mn).map(|_| rng.gen_range(-0.8..0.8)).collect();
                let y: Vec<f64> = (0..mn).map(|_| rng.gen_range(-0.8..0.8)).collect();
                let za: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.8..0.8)).collect();
                let z = built.reduced().full_z(&x, &y, &za).unwrap();
                let mut flat = x.clone();
                flat.extend_from_slice(&y);
                flat.extend_from_slice(z.as_slice());
                let r = phi.value(&flat).unwrap().amax();
                assert!(r < 1e-12, "constraint residual {r} after elimination");
            }
        }
    }

    #[test]
    fn beanie_synthesis_matches_direct_reduction() {
        let (i1, i2, vk): (f64, f64, f64) = (1.3, 0.7, 0.45);
        let kk = (i2 / (i1 * (i1 + i2))).sqrt();
        let jj = 1.0 / (i1 + i2).sqrt();
        let rr = ((i1 + i2) / (i1 * i2)).sqrt();
        let chart = AlgebroidChart::elroy_beanie(2.0, i1, i2).unwrap();
        let lsig = Signature::new(&[("x", 1), ("y", 4)])
            .unwrap()
            .with_params(&[("vk", vk)])
            .unwrap();
        let l = Field::parse(
            lsig,
            Shape::Scalar,
            &["0.5*(y1^2 + y2^2 + y3^2 + y4^2) - 0.5*vk*x^2"],
        )
        .unwrap();
        let prob = ControlProblem::new(
            chart.clone(),
            l,
            quadratic_cost(1, 4, 1),
            vec![0],
            trivial_boundary(1, 4),
            1.0,
        )
        .unwrap();
        let built = prob.build_underactuated().unwrap();

        let rsig = Signature::new(&[("x", 1), ("y", 4), ("za", 1)])
            .unwrap()
            .with_params(&[("kk", kk), ("jj", jj), ("rr", rr), ("vk", vk)])
            .unwrap();
        let lm = Field::parse(rsig.clone(), Shape::Scalar, &["0.5*(za + rr*vk*x)^2"]).unwrap();
        let g = Field::parse(
            rsig,
            Shape::Vector(3),
            &["jj*y3*y4 - kk*y1*y3", "kk*y1*y2 - jj*y2*y4", "0"],
        )
        .unwrap();
        let direct = ReducedSecondOrderProblem::new(chart, vec![0], lm, g).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let dim = direct.state_dim();
        let mut da = vec![0.0; dim];
        let mut db = vec![0.0; dim];
        for _ in 0..40 {
            let s: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            built.reduced().reduced_field(&s, &mut da).unwrap();
            direct.reduced_field(&s, &mut db).unwrap();
            for i in 0..dim {
                assert!(
                    (da[i] - db[i]).abs() < 1e-10,
                    "component {i}: {} vs {}",
                    da[i],
                    db[i]
                );
            }
        }
        // Controls along reduced states are the actuated residual
        // za + R V'(psi).
        let u = built.control_at(&[0.3], &[0.2, -0.1, 0.4, 0.5], &[0.7]).unwrap();
        assert!((u[0] - (0.7 + rr * vk * 0.3)).abs() < 1e-13);
    }
}
