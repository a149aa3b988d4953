//! Vakonomic dynamics: first-order variational problems with velocity
//! constraints enforced before variation.
//!
//! Constraints `Phi^alpha(x, y) = 0` are resolved by eliminating a chosen
//! subset of fiber velocities, `y^alpha = Psi^alpha(x, y^a)`, either from a
//! closed-form elimination or implicitly (values by Newton, derivatives by
//! the implicit function theorem). Writing `Lt` for the restricted
//! Lagrangian, the momenta evolve by
//!
//! ```text
//! xdot   = rho y
//! pdot_A = rho^i_A (dLt/dx^i - p_beta dPsi^beta/dx^i) - C^B_{AD} p_B y^D
//! ```
//!
//! while the retained velocities are recovered from the algebraic relation
//! `p_a = N_a = dLt/dy^a - p_beta dPsi^beta/dy^a`: differentiating it in
//! time gives a linear solve with matrix `M_ab = dN_a/dy^b`, the regularity
//! matrix of the formulation.

use nalgebra::{DMatrix, DVector};

use crate::algebroid::AlgebroidChart;
use crate::calculus::{Field, Shape};
use crate::error::{Error, Result};
use crate::linalg::solve_lu;

use super::{regularity_report, RegularityReport};

/// How the eliminated velocities are expressed through the retained ones.
#[derive(Debug, Clone)]
pub enum Elimination {
    /// `Psi(x, y^a)` given in closed form, one component per eliminated
    /// index.
    Explicit(Field),
    /// `Phi(x, y) = 0` solved for the eliminated block at evaluation time.
    /// Newton starts from `guess` (nearest-branch semantics); first and
    /// second derivatives come from the implicit function theorem, so they
    /// are exact whenever `phi` has exact derivatives.
    Implicit {
        phi: Field,
        guess: Vec<f64>,
        tol: f64,
        max_iter: usize,
    },
}

/// First-order constrained variational problem in eliminated form.
#[derive(Debug, Clone)]
pub struct VakonomicProblem {
    chart: AlgebroidChart,
    lagrangian: Field,
    /// Eliminated fiber indices `alpha`, strictly increasing.
    eliminated: Vec<usize>,
    /// Retained indices `a`, strictly increasing.
    retained: Vec<usize>,
    elimination: Elimination,
}

/// Value and first two derivative arrays of `Psi` with respect to the free
/// slots `(x, y^a)`.
struct ElimJets {
    val: DVector<f64>,
    /// `mbar x s` with `s = m + #retained`.
    jac: DMatrix<f64>,
    /// One `s x s` matrix per eliminated component.
    hess: Vec<DMatrix<f64>>,
}

/// Restriction of the Lagrangian to the constraint, with derivatives over
/// the free slots.
struct RestrictedJets {
    yfull: DVector<f64>,
    psi: ElimJets,
    lt_val: f64,
    lt_grad: DVector<f64>,
    lt_hess: DMatrix<f64>,
}

impl VakonomicProblem {
    pub fn new(
        chart: AlgebroidChart,
        lagrangian: Field,
        eliminated: Vec<usize>,
        elimination: Elimination,
    ) -> Result<VakonomicProblem> {
        let (m, n) = (chart.base_dim(), chart.fiber_rank());
        let lens: Vec<usize> = lagrangian.signature().groups().iter().map(|g| g.len).collect();
        if lens != [m, n] || lagrangian.shape() != Shape::Scalar {
            return Err(Error::Dimension(format!(
                "vakonomic lagrangian must be scalar over slot groups ({m}, {n}), got {lens:?}"
            )));
        }
        let mbar = eliminated.len();
        if mbar == 0 || mbar > n {
            return Err(Error::Dimension(format!(
                "{mbar} eliminated directions out of fiber rank {n}"
            )));
        }
        if eliminated.windows(2).any(|w| w[0] >= w[1]) || eliminated.iter().any(|a| *a >= n) {
            return Err(Error::Config(
                "eliminated indices must be strictly increasing and within the fiber rank".into(),
            ));
        }
        let retained: Vec<usize> = (0..n).filter(|i| !eliminated.contains(i)).collect();
        match &elimination {
            Elimination::Explicit(psi) => {
                let lens: Vec<usize> = psi.signature().groups().iter().map(|g| g.len).collect();
                if lens != [m, retained.len()] || psi.n_components() != mbar {
                    return Err(Error::Dimension(format!(
                        "explicit elimination must map slot groups ({m}, {}) to {mbar} \
                         components",
                        retained.len()
                    )));
                }
            }
            Elimination::Implicit { phi, guess, .. } => {
                let lens: Vec<usize> = phi.signature().groups().iter().map(|g| g.len).collect();
                if lens != [m, n] || phi.n_components() != mbar {
                    return Err(Error::Dimension(format!(
                        "implicit constraints must map slot groups ({m}, {n}) to {mbar} \
                         components"
                    )));
                }
                if guess.len() != mbar {
                    return Err(Error::Dimension(format!(
                        "implicit elimination guess must have {mbar} entries"
                    )));
                }
            }
        }
        Ok(VakonomicProblem {
            chart,
            lagrangian,
            eliminated,
            retained,
            elimination,
        })
    }

    pub fn chart(&self) -> &AlgebroidChart {
        &self.chart
    }

    pub fn eliminated(&self) -> &[usize] {
        &self.eliminated
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// State layout `(x, p, y^a)`.
    pub fn state_dim(&self) -> usize {
        self.chart.base_dim() + self.chart.fiber_rank() + self.retained.len()
    }

    fn split<'a>(&self, flat: &'a [f64]) -> Result<(&'a [f64], &'a [f64], &'a [f64])> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        if flat.len() != m + n + self.retained.len() {
            return Err(Error::Dimension(format!(
                "vakonomic state has {} entries, want {}",
                flat.len(),
                m + n + self.retained.len()
            )));
        }
        Ok((&flat[..m], &flat[m..m + n], &flat[m + n..]))
    }

    fn elim_jets(&self, x: &[f64], ya: &[f64]) -> Result<ElimJets> {
        let m = self.chart.base_dim();
        let kr = self.retained.len();
        let mbar = self.eliminated.len();
        let s = m + kr;
        match &self.elimination {
            Elimination::Explicit(psi) => {
                let mut flat = Vec::with_capacity(s);
                flat.extend_from_slice(x);
                flat.extend_from_slice(ya);
                Ok(ElimJets {
                    val: psi.value(&flat)?,
                    jac: psi.jacobian(&flat)?,
                    hess: psi.hessian(&flat)?,
                })
            }
            Elimination::Implicit {
                phi,
                guess,
                tol,
                max_iter,
            } => {
                let n = self.chart.fiber_rank();
                // Slot of phi carrying free coordinate s, and the
                // eliminated slots.
                let free_slot =
                    |sidx: usize| if sidx < m { sidx } else { m + self.retained[sidx - m] };
                let elim_slot = |b: usize| m + self.eliminated[b];

                let mut flat = vec![0.0; m + n];
                flat[..m].copy_from_slice(x);
                for (pos, a) in self.retained.iter().enumerate() {
                    flat[m + a] = ya[pos];
                }
                for (b, al) in self.eliminated.iter().enumerate() {
                    flat[m + al] = guess[b];
                }
                let mut converged = false;
                for _ in 0..*max_iter {
                    let f = phi.value(&flat)?;
                    if f.amax() <= *tol {
                        converged = true;
                        break;
                    }
                    let j = phi.jacobian(&flat)?;
                    let a = DMatrix::from_fn(mbar, mbar, |r, c| j[(r, elim_slot(c))]);
                    let dw = solve_lu(&a, &f, "implicit elimination block")?;
                    for b in 0..mbar {
                        flat[elim_slot(b)] -= dw[b];
                    }
                }
                if !converged {
                    let residual = phi.value(&flat)?.amax();
                    if residual > *tol {
                        return Err(Error::NonConvergence {
                            context: "implicit elimination".into(),
                            iterations: *max_iter,
                            residual,
                        });
                    }
                }

                let jphi = phi.jacobian(&flat)?;
                let hphi = phi.hessian(&flat)?;
                let a = DMatrix::from_fn(mbar, mbar, |r, c| jphi[(r, elim_slot(c))]);
                let lu = a.clone().lu();
                let solve = |rhs: DVector<f64>| -> Result<DVector<f64>> {
                    lu.solve(&rhs).ok_or_else(|| Error::Regularity {
                        context: "implicit elimination block".into(),
                        min_sv: crate::linalg::min_singular_value(&a),
                    })
                };

                let val = DVector::from_fn(mbar, |b, _| flat[elim_slot(b)]);
                let mut jac = DMatrix::zeros(mbar, s);
                for sidx in 0..s {
                    let rhs = DVector::from_fn(mbar, |r, _| -jphi[(r, free_slot(sidx))]);
                    let col = solve(rhs)?;
                    jac.set_column(sidx, &col);
                }
                let mut hess = vec![DMatrix::zeros(s, s); mbar];
                for si in 0..s {
                    for sj in si..s {
                        let mut rhs = DVector::zeros(mbar);
                        for r in 0..mbar {
                            let h = &hphi[r];
                            let mut v = h[(free_slot(si), free_slot(sj))];
                            for b in 0..mbar {
                                v += h[(free_slot(si), elim_slot(b))] * jac[(b, sj)];
                                v += h[(free_slot(sj), elim_slot(b))] * jac[(b, si)];
                            }
                            for b in 0..mbar {
                                for g in 0..mbar {
                                    v += h[(elim_slot(b), elim_slot(g))]
                                        * jac[(b, si)]
                                        * jac[(g, sj)];
                                }
                            }
                            rhs[r] = -v;
                        }
                        let col = solve(rhs)?;
                        for b in 0..mbar {
                            hess[b][(si, sj)] = col[b];
                            hess[b][(sj, si)] = col[b];
                        }
                    }
                }
                Ok(ElimJets { val, jac, hess })
            }
        }
    }

    fn restricted_jets(&self, x: &[f64], ya: &[f64]) -> Result<RestrictedJets> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let kr = self.retained.len();
        let s = m + kr;
        let psi = self.elim_jets(x, ya)?;

        let mut yfull = DVector::zeros(n);
        for (pos, a) in self.retained.iter().enumerate() {
            yfull[*a] = ya[pos];
        }
        for (b, al) in self.eliminated.iter().enumerate() {
            yfull[*al] = psi.val[b];
        }
        let mut flat = vec![0.0; m + n];
        flat[..m].copy_from_slice(x);
        for a in 0..n {
            flat[m + a] = yfull[a];
        }
        let lt_val = self.lagrangian.scalar(&flat)?;
        let jl = self.lagrangian.jacobian(&flat)?;
        let hl = &self.lagrangian.hessian(&flat)?[0];

        let full_slot = |sidx: usize| if sidx < m { sidx } else { m + self.retained[sidx - m] };
        let elim_slot = |b: usize| m + self.eliminated[b];

        let mut lt_grad = DVector::zeros(s);
        for sidx in 0..s {
            let mut v = jl[(0, full_slot(sidx))];
            for b in 0..self.eliminated.len() {
                v += jl[(0, elim_slot(b))] * psi.jac[(b, sidx)];
            }
            lt_grad[sidx] = v;
        }
        let mut lt_hess = DMatrix::zeros(s, s);
        for si in 0..s {
            for sj in si..s {
                let mut v = hl[(full_slot(si), full_slot(sj))];
                for b in 0..self.eliminated.len() {
                    v += hl[(full_slot(si), elim_slot(b))] * psi.jac[(b, sj)];
                    v += hl[(full_slot(sj), elim_slot(b))] * psi.jac[(b, si)];
                    v += jl[(0, elim_slot(b))] * psi.hess[b][(si, sj)];
                }
                for b in 0..self.eliminated.len() {
                    for g in 0..self.eliminated.len() {
                        v += hl[(elim_slot(b), elim_slot(g))] * psi.jac[(b, si)] * psi.jac[(g, sj)];
                    }
                }
                lt_hess[(si, sj)] = v;
                lt_hess[(sj, si)] = v;
            }
        }
        Ok(RestrictedJets {
            yfull,
            psi,
            lt_val,
            lt_grad,
            lt_hess,
        })
    }

    /// Full fiber velocity at a state, with eliminated components from the
    /// constraint.
    pub fn full_velocity(&self, flat: &[f64]) -> Result<DVector<f64>> {
        let (x, _, ya) = self.split(flat)?;
        Ok(self.restricted_jets(x, ya)?.yfull)
    }

    /// Time derivative of `(x, p, y^a)` along the vakonomic flow.
    pub fn vakonomic_field(&self, flat: &[f64], out: &mut [f64]) -> Result<()> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let kr = self.retained.len();
        let (x, p, ya) = self.split(flat)?;
        if out.len() != flat.len() {
            return Err(Error::Dimension("output buffer size mismatch".into()));
        }
        let jets = self.restricted_jets(x, ya)?;
        let rho = self.chart.anchor_at(x)?;
        let c = self.chart.structure_at(x)?;

        let p_e: Vec<f64> = self.eliminated.iter().map(|al| p[*al]).collect();
        // d(Lt - p_beta Psi^beta)/d(free slot).
        let eff = |sidx: usize| -> f64 {
            let mut v = jets.lt_grad[sidx];
            for (b, pe) in p_e.iter().enumerate() {
                v -= pe * jets.psi.jac[(b, sidx)];
            }
            v
        };
        let eff2 = |si: usize, sj: usize| -> f64 {
            let mut v = jets.lt_hess[(si, sj)];
            for (b, pe) in p_e.iter().enumerate() {
                v -= pe * jets.psi.hess[b][(si, sj)];
            }
            v
        };

        let xdot = &rho * &jets.yfull;
        let mut pdot = vec![0.0; n];
        for a in 0..n {
            for i in 0..m {
                pdot[a] += rho[(i, a)] * eff(i);
            }
            for d in 0..n {
                for b in 0..n {
                    pdot[a] -= c.get(a, d, b) * p[b] * jets.yfull[d];
                }
            }
        }

        let mut mm = DMatrix::zeros(kr, kr);
        let mut rhs = DVector::zeros(kr);
        for a in 0..kr {
            for b in 0..kr {
                mm[(a, b)] = eff2(m + a, m + b);
            }
            let mut v = pdot[self.retained[a]];
            for j in 0..m {
                v -= eff2(m + a, j) * xdot[j];
            }
            for (b, al) in self.eliminated.iter().enumerate() {
                v += jets.psi.jac[(b, m + a)] * pdot[*al];
            }
            rhs[a] = v;
        }
        let yadot = solve_lu(&mm, &rhs, "vakonomic regularity matrix")?;

        out[..m].copy_from_slice(xdot.as_slice());
        out[m..m + n].copy_from_slice(&pdot);
        out[m + n..].copy_from_slice(yadot.as_slice());
        Ok(())
    }

    /// Vakonomic energy `<p, y> - Lt`, conserved along the flow.
    pub fn hamiltonian(&self, flat: &[f64]) -> Result<f64> {
        let (x, p, ya) = self.split(flat)?;
        let jets = self.restricted_jets(x, ya)?;
        let mut h = -jets.lt_val;
        for a in 0..self.chart.fiber_rank() {
            h += p[a] * jets.yfull[a];
        }
        Ok(h)
    }

    /// Residual of the algebraic relation `p_a - N_a` defining the retained
    /// momenta.
    pub fn constraint_residual(&self, flat: &[f64]) -> Result<DVector<f64>> {
        let m = self.chart.base_dim();
        let (x, p, ya) = self.split(flat)?;
        let jets = self.restricted_jets(x, ya)?;
        let p_e: Vec<f64> = self.eliminated.iter().map(|al| p[*al]).collect();
        Ok(DVector::from_fn(self.retained.len(), |a, _| {
            let mut v = p[self.retained[a]] - jets.lt_grad[m + a];
            for (b, pe) in p_e.iter().enumerate() {
                v += pe * jets.psi.jac[(b, m + a)];
            }
            v
        }))
    }

    /// Completes `(x, y^a)` and the eliminated momenta into a state on
    /// `p_a = N_a`.
    pub fn primary_lift(&self, x: &[f64], ya: &[f64], p_eliminated: &[f64]) -> Result<Vec<f64>> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        if p_eliminated.len() != self.eliminated.len() {
            return Err(Error::Dimension(format!(
                "want {} eliminated momenta, got {}",
                self.eliminated.len(),
                p_eliminated.len()
            )));
        }
        let jets = self.restricted_jets(x, ya)?;
        let mut p = vec![0.0; n];
        for (b, al) in self.eliminated.iter().enumerate() {
            p[*al] = p_eliminated[b];
        }
        for (pos, a) in self.retained.iter().enumerate() {
            let mut v = jets.lt_grad[m + pos];
            for (b, pe) in p_eliminated.iter().enumerate() {
                v -= pe * jets.psi.jac[(b, m + pos)];
            }
            p[*a] = v;
        }
        let mut flat = Vec::with_capacity(self.state_dim());
        flat.extend_from_slice(x);
        flat.extend_from_slice(&p);
        flat.extend_from_slice(ya);
        Ok(flat)
    }

    /// Regularity of the formulation: the matrix `M_ab` closing the
    /// `ydot^a` solve.
    pub fn regularity_test(&self, flat: &[f64], tol: f64) -> Result<RegularityReport> {
        let m = self.chart.base_dim();
        let kr = self.retained.len();
        let (x, p, ya) = self.split(flat)?;
        let jets = self.restricted_jets(x, ya)?;
        let p_e: Vec<f64> = self.eliminated.iter().map(|al| p[*al]).collect();
        let mut mm = DMatrix::zeros(kr, kr);
        for a in 0..kr {
            for b in 0..kr {
                let mut v = jets.lt_hess[(m + a, m + b)];
                for (bb, pe) in p_e.iter().enumerate() {
                    v -= pe * jets.psi.hess[bb][(m + a, m + b)];
                }
                mm[(a, b)] = v;
            }
        }
        Ok(regularity_report("vakonomic regularity matrix", mm, tol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::Signature;
    use rand::{Rng, SeedableRng};

    #[test]
    fn explicit_and_implicit_eliminations_agree() {
        // Same constraint y1 = 0.4 x2 + 0.3 y2^2 given both ways; the
        // implicit route exercises the Newton solve and both IFT derivative
        // orders.
        let chart = AlgebroidChart::tangent_bundle(2);
        let lsig = Signature::new(&[("x", 2), ("y", 2)]).unwrap();
        let l = Field::parse(
            lsig.clone(),
            Shape::Scalar,
            &["0.5*(y1^2 + y2^2) + 0.3*x1*y2 - 0.2*x2^2"],
        )
        .unwrap();
        let psi_sig = Signature::new(&[("x", 2), ("ya", 1)]).unwrap();
        let psi = Field::parse(psi_sig, Shape::Vector(1), &["0.4*x2 + 0.3*ya^2"]).unwrap();
        let explicit = VakonomicProblem::new(
            chart.clone(),
            l.clone(),
            vec![0],
            Elimination::Explicit(psi),
        )
        .unwrap();
        let phi = Field::parse(lsig, Shape::Vector(1), &["y1 - 0.4*x2 - 0.3*y2^2"]).unwrap();
        let implicit = VakonomicProblem::new(
            chart,
            l,
            vec![0],
            Elimination::Implicit {
                phi,
                guess: vec![0.0],
                tol: 1e-13,
                max_iter: 25,
            },
        )
        .unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut de = vec![0.0; 5];
        let mut di = vec![0.0; 5];
        for _ in 0..30 {
            let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            explicit.vakonomic_field(&s, &mut de).unwrap();
            implicit.vakonomic_field(&s, &mut di).unwrap();
            for i in 0..5 {
                assert!(
                    (de[i] - di[i]).abs() < 1e-10,
                    "component {i}: {} vs {}",
                    de[i],
                    di[i]
                );
            }
            let re = explicit.regularity_test(&s, 1e-9).unwrap();
            let ri = implicit.regularity_test(&s, 1e-9).unwrap();
            assert!((re.matrix.data[0] - ri.matrix.data[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn fixed_velocity_constraint_gives_straight_motion() {
        // Abelian, L = |y|^2/2, y1 pinned to 0.7: the retained velocity and
        // all momenta freeze.
        let chart = AlgebroidChart::tangent_bundle(2);
        let lsig = Signature::new(&[("x", 2), ("y", 2)]).unwrap();
        let l = Field::parse(lsig, Shape::Scalar, &["0.5*(y1^2 + y2^2)"]).unwrap();
        let psi_sig = Signature::new(&[("x", 2), ("ya", 1)]).unwrap();
        let psi = Field::parse(psi_sig, Shape::Vector(1), &["0.7"]).unwrap();
        let prob =
            VakonomicProblem::new(chart, l, vec![0], Elimination::Explicit(psi)).unwrap();
        let s = prob.primary_lift(&[0.1, -0.2], &[0.5], &[0.9]).unwrap();
        assert!(prob.constraint_residual(&s).unwrap().amax() < 1e-15);
        let mut out = vec![0.0; 5];
        prob.vakonomic_field(&s, &mut out).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-15); // xdot1 = Psi
        assert!((out[1] - 0.5).abs() < 1e-15); // xdot2 = ya
        for v in &out[2..] {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn so3_flow_conserves_energy_and_momentum_relation() {
        let chart = AlgebroidChart::so3();
        let lsig = Signature::new(&[("x", 0), ("y", 3)]).unwrap();
        let l = Field::parse(
            lsig,
            Shape::Scalar,
            &["0.5*(y1^2 + 1.4*y2^2 + 0.8*y3^2)"],
        )
        .unwrap();
        let psi_sig = Signature::new(&[("x", 0), ("ya", 2)]).unwrap();
        let psi = Field::parse(psi_sig, Shape::Vector(1), &["0.6"]).unwrap();
        let prob =
            VakonomicProblem::new(chart, l, vec![2], Elimination::Explicit(psi)).unwrap();
        let mut s = prob.primary_lift(&[], &[0.4, -0.3], &[0.25]).unwrap();
        let h0 = prob.hamiltonian(&s).unwrap();
        let dim = s.len();
        let h = 1e-3;
        let mut k = vec![vec![0.0; dim]; 4];
        for _ in 0..2000 {
            prob.vakonomic_field(&s, &mut k[0]).unwrap();
            let m1: Vec<f64> = s.iter().zip(&k[0]).map(|(v, d)| v + 0.5 * h * d).collect();
            prob.vakonomic_field(&m1, &mut k[1]).unwrap();
            let m2: Vec<f64> = s.iter().zip(&k[1]).map(|(v, d)| v + 0.5 * h * d).collect();
            prob.vakonomic_field(&m2, &mut k[2]).unwrap();
            let e: Vec<f64> = s.iter().zip(&k[2]).map(|(v, d)| v + h * d).collect();
            prob.vakonomic_field(&e, &mut k[3]).unwrap();
            for i in 0..dim {
                s[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
        }
        let h1 = prob.hamiltonian(&s).unwrap();
        assert!((h1 - h0).abs() < 1e-9, "energy drift {}", h1 - h0);
        assert!(prob.constraint_residual(&s).unwrap().amax() < 1e-9);
    }
}
