//! Explicit second-order dynamics on the final constraint submanifold of an
//! underactuated optimal control problem.
//!
//! After eliminating the unactuated accelerations `z^alpha = G^alpha(x, y,
//! z^a)` and restricting the cost to the actuated ones, the flow closes on
//! the variables `(x, y, z^a, p, pbar)`: a costate pair for every fiber
//! direction, but acceleration coordinates only for the actuated split `a`.
//! The actuated `pbar_a` are determined algebraically by
//! `N_a = dLM/dz^a - pbar_beta dG^beta/dz^a`, and differentiating that
//! relation in time yields the linear solve that closes `zdot^a`.

use nalgebra::{DMatrix, DVector};

use crate::algebroid::AlgebroidChart;
use crate::calculus::{Field, Shape};
use crate::error::{Error, Result};
use crate::linalg::solve_lu;

use super::{regularity_report, RegularityReport};

/// Reduced problem data: restricted cost `l_m(x, y, z^a)` and eliminated
/// accelerations `g(x, y, z^a) -> z^alpha`.
#[derive(Debug, Clone)]
pub struct ReducedSecondOrderProblem {
    chart: AlgebroidChart,
    /// Actuated fiber indices `a`, strictly increasing.
    actuated: Vec<usize>,
    /// Complementary unactuated indices `alpha`, strictly increasing.
    unactuated: Vec<usize>,
    l_m: Field,
    g: Field,
}

impl ReducedSecondOrderProblem {
    /// `l_m` and `g` share slot groups sized `(m, n, k)` with
    /// `k = actuated.len()`; `g` has one component per unactuated index.
    pub fn new(
        chart: AlgebroidChart,
        actuated: Vec<usize>,
        l_m: Field,
        g: Field,
    ) -> Result<ReducedSecondOrderProblem> {
        let (m, n) = (chart.base_dim(), chart.fiber_rank());
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
        let unactuated: Vec<usize> = (0..n).filter(|i| !actuated.contains(i)).collect();
        for (f, what, comps) in [(&l_m, "restricted cost", 1), (&g, "elimination", n - k)] {
            let lens: Vec<usize> = f.signature().groups().iter().map(|g| g.len).collect();
            if lens != [m, n, k] {
                return Err(Error::Dimension(format!(
                    "{what} must have slot groups sized ({m}, {n}, {k}), got {lens:?}"
                )));
            }
            if f.n_components() != comps {
                return Err(Error::Dimension(format!(
                    "{what} must have {comps} components, got {}",
                    f.n_components()
                )));
            }
        }
        if l_m.shape() != Shape::Scalar {
            return Err(Error::Dimension("restricted cost must be scalar".into()));
        }
        Ok(ReducedSecondOrderProblem {
            chart,
            actuated,
            unactuated,
            l_m,
            g,
        })
    }

    pub fn chart(&self) -> &AlgebroidChart {
        &self.chart
    }

    pub fn actuated(&self) -> &[usize] {
        &self.actuated
    }

    pub fn unactuated(&self) -> &[usize] {
        &self.unactuated
    }

    pub fn restricted_cost(&self) -> &Field {
        &self.l_m
    }

    pub fn elimination(&self) -> &Field {
        &self.g
    }

    /// State layout `(x, y, z^a, p, pbar)`.
    pub fn state_dim(&self) -> usize {
        self.chart.base_dim() + 2 * self.chart.fiber_rank() + self.actuated.len()
            + self.chart.fiber_rank()
    }

    fn split<'a>(&self, flat: &'a [f64]) -> Result<(&'a [f64], &'a [f64], &'a [f64], &'a [f64], &'a [f64])> {
        let (m, n, k) = (
            self.chart.base_dim(),
            self.chart.fiber_rank(),
            self.actuated.len(),
        );
        if flat.len() != m + 3 * n + k {
            return Err(Error::Dimension(format!(
                "reduced state has {} entries, want {}",
                flat.len(),
                m + 3 * n + k
            )));
        }
        Ok((
            &flat[..m],
            &flat[m..m + n],
            &flat[m + n..m + n + k],
            &flat[m + n + k..m + 2 * n + k],
            &flat[m + 2 * n + k..],
        ))
    }

    /// Full acceleration vector: `z^a` from the state, `z^alpha = G^alpha`.
    pub fn full_z(&self, x: &[f64], y: &[f64], za: &[f64]) -> Result<DVector<f64>> {
        let n = self.chart.fiber_rank();
        let mut fflat = Vec::with_capacity(x.len() + y.len() + za.len());
        fflat.extend_from_slice(x);
        fflat.extend_from_slice(y);
        fflat.extend_from_slice(za);
        let gv = self.g.value(&fflat)?;
        let mut z = DVector::zeros(n);
        for (pos, a) in self.actuated.iter().enumerate() {
            z[*a] = za[pos];
        }
        for (pos, al) in self.unactuated.iter().enumerate() {
            z[*al] = gv[pos];
        }
        Ok(z)
    }

    /// Time derivative of `(x, y, z^a, p, pbar)` along the reduced flow:
    ///
    /// ```text
    /// xdot      = rho y
    /// ydot^a    = z^a,  ydot^alpha = G^alpha
    /// pdot_A    = rho^i_A (dLM/dx^i - pbar_beta dG^beta/dx^i)
    ///             - C^C_{AB} p_C y^B
    /// pbardot_A = -p_A + dLM/dy^A - pbar_beta dG^beta/dy^A
    /// zdot^a    : M_ab zdot^b = pbardot_a - dN_a/d(x,y) . (xdot, ydot)
    ///             + dG^beta/dz^a pbardot_beta
    /// ```
    ///
    /// with `N_a = dLM/dz^a - pbar_beta dG^beta/dz^a` and
    /// `M_ab = dN_a/dz^b`. Along the flow `pbar_a = N_a` is invariant.
    pub fn reduced_field(&self, flat: &[f64], out: &mut [f64]) -> Result<()> {
        let (m, n, k) = (
            self.chart.base_dim(),
            self.chart.fiber_rank(),
            self.actuated.len(),
        );
        let (x, y, za, p, pbar) = self.split(flat)?;
        if out.len() != flat.len() {
            return Err(Error::Dimension("output buffer size mismatch".into()));
        }
        let rho = self.chart.anchor_at(x)?;
        let c = self.chart.structure_at(x)?;
        let mut fflat = Vec::with_capacity(m + n + k);
        fflat.extend_from_slice(x);
        fflat.extend_from_slice(y);
        fflat.extend_from_slice(za);
        let jl = self.l_m.jacobian(&fflat)?;
        let hl = &self.l_m.hessian(&fflat)?[0];
        let gv = self.g.value(&fflat)?;
        let jg = self.g.jacobian(&fflat)?;
        let hg = self.g.hessian(&fflat)?;

        let pbar_u: Vec<f64> = self.unactuated.iter().map(|al| pbar[*al]).collect();
        // First derivatives of LM - pbar_beta G^beta over the field slots.
        let eff = |slot: usize| -> f64 {
            let mut v = jl[(0, slot)];
            for (b, pb) in pbar_u.iter().enumerate() {
                v -= pb * jg[(b, slot)];
            }
            v
        };
        let eff2 = |r: usize, s: usize| -> f64 {
            let mut v = hl[(r, s)];
            for (b, pb) in pbar_u.iter().enumerate() {
                v -= pb * hg[b][(r, s)];
            }
            v
        };

        let mut xdot = vec![0.0; m];
        for i in 0..m {
            for a in 0..n {
                xdot[i] += rho[(i, a)] * y[a];
            }
        }
        let mut ydot = vec![0.0; n];
        for (pos, a) in self.actuated.iter().enumerate() {
            ydot[*a] = za[pos];
        }
        for (pos, al) in self.unactuated.iter().enumerate() {
            ydot[*al] = gv[pos];
        }
        let mut pdot = vec![0.0; n];
        for a in 0..n {
            for i in 0..m {
                pdot[a] += rho[(i, a)] * eff(i);
            }
            for b in 0..n {
                for cc in 0..n {
                    pdot[a] -= c.get(a, b, cc) * p[cc] * y[b];
                }
            }
        }
        let mut pbardot = vec![0.0; n];
        for a in 0..n {
            pbardot[a] = -p[a] + eff(m + a);
        }

        let zoff = m + n;
        let mut mm = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for a in 0..k {
            for b in 0..k {
                mm[(a, b)] = eff2(zoff + a, zoff + b);
            }
            let mut v = pbardot[self.actuated[a]];
            for j in 0..m {
                v -= eff2(zoff + a, j) * xdot[j];
            }
            for b in 0..n {
                v -= eff2(zoff + a, m + b) * ydot[b];
            }
            for (b, al) in self.unactuated.iter().enumerate() {
                v += jg[(b, zoff + a)] * pbardot[*al];
            }
            rhs[a] = v;
        }
        let zadot = solve_lu(&mm, &rhs, "reduced z-Hessian")?;

        out[..m].copy_from_slice(&xdot);
        out[m..m + n].copy_from_slice(&ydot);
        out[m + n..m + n + k].copy_from_slice(zadot.as_slice());
        out[m + n + k..m + 2 * n + k].copy_from_slice(&pdot);
        out[m + 2 * n + k..].copy_from_slice(&pbardot);
        Ok(())
    }

    /// Hamiltonian on the reduced space:
    /// `<p, y> + pbar_a z^a + pbar_beta G^beta - LM`.
    pub fn hamiltonian(&self, flat: &[f64]) -> Result<f64> {
        let (x, y, za, p, pbar) = self.split(flat)?;
        let mut fflat = Vec::with_capacity(flat.len());
        fflat.extend_from_slice(x);
        fflat.extend_from_slice(y);
        fflat.extend_from_slice(za);
        let l = self.l_m.scalar(&fflat)?;
        let gv = self.g.value(&fflat)?;
        let mut h = -l;
        for (pa, ya) in p.iter().zip(y) {
            h += pa * ya;
        }
        for (pos, a) in self.actuated.iter().enumerate() {
            h += pbar[*a] * za[pos];
        }
        for (pos, al) in self.unactuated.iter().enumerate() {
            h += pbar[*al] * gv[pos];
        }
        Ok(h)
    }

    /// Residual of the algebraic relation `pbar_a - N_a`; zero along flows
    /// started on it.
    pub fn primary_residual(&self, flat: &[f64]) -> Result<DVector<f64>> {
        let (m, n, _) = (
            self.chart.base_dim(),
            self.chart.fiber_rank(),
            self.actuated.len(),
        );
        let (x, y, za, _, pbar) = self.split(flat)?;
        let mut fflat = Vec::with_capacity(flat.len());
        fflat.extend_from_slice(x);
        fflat.extend_from_slice(y);
        fflat.extend_from_slice(za);
        let jl = self.l_m.jacobian(&fflat)?;
        let jg = self.g.jacobian(&fflat)?;
        let zoff = m + n;
        Ok(DVector::from_fn(self.actuated.len(), |a, _| {
            let mut v = pbar[self.actuated[a]] - jl[(0, zoff + a)];
            for (b, al) in self.unactuated.iter().enumerate() {
                v += pbar[*al] * jg[(b, zoff + a)];
            }
            v
        }))
    }

    /// Sets `pbar_a = N_a` given the rest of the state, producing a state
    /// on the algebraic submanifold.
    pub fn primary_lift(
        &self,
        x: &[f64],
        y: &[f64],
        za: &[f64],
        p: &[f64],
        pbar_unactuated: &[f64],
    ) -> Result<Vec<f64>> {
        let (m, n) = (self.chart.base_dim(), self.chart.fiber_rank());
        let k = self.actuated.len();
        if pbar_unactuated.len() != n - k {
            return Err(Error::Dimension(format!(
                "want {} unactuated costate entries, got {}",
                n - k,
                pbar_unactuated.len()
            )));
        }
        let mut fflat = Vec::with_capacity(m + n + k);
        fflat.extend_from_slice(x);
        fflat.extend_from_slice(y);
        fflat.extend_from_slice(za);
        let jl = self.l_m.jacobian(&fflat)?;
        let jg = self.g.jacobian(&fflat)?;
        let zoff = m + n;
        let mut pbar = vec![0.0; n];
        for (pos, al) in self.unactuated.iter().enumerate() {
            pbar[*al] = pbar_unactuated[pos];
        }
        for (pos, a) in self.actuated.iter().enumerate() {
            let mut v = jl[(0, zoff + pos)];
            for (b, _) in self.unactuated.iter().enumerate() {
                v -= pbar_unactuated[b] * jg[(b, zoff + pos)];
            }
            pbar[*a] = v;
        }
        let mut flat = Vec::with_capacity(self.state_dim());
        flat.extend_from_slice(x);
        flat.extend_from_slice(y);
        flat.extend_from_slice(za);
        flat.extend_from_slice(p);
        flat.extend_from_slice(&pbar);
        Ok(flat)
    }

    /// Regularity of the reduced problem: the matrix `M_ab` closing the
    /// `zdot^a` solve.
    pub fn regularity_test(&self, flat: &[f64], tol: f64) -> Result<RegularityReport> {
        let (m, n, k) = (
            self.chart.base_dim(),
            self.chart.fiber_rank(),
            self.actuated.len(),
        );
        let (x, y, za, _, pbar) = self.split(flat)?;
        let mut fflat = Vec::with_capacity(m + n + k);
        fflat.extend_from_slice(x);
        fflat.extend_from_slice(y);
        fflat.extend_from_slice(za);
        let hl = &self.l_m.hessian(&fflat)?[0];
        let hg = self.g.hessian(&fflat)?;
        let zoff = m + n;
        let mut mm = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                let mut v = hl[(zoff + a, zoff + b)];
                for (bb, al) in self.unactuated.iter().enumerate() {
                    v -= pbar[*al] * hg[bb][(zoff + a, zoff + b)];
                }
                mm[(a, b)] = v;
            }
        }
        Ok(regularity_report("reduced z-Hessian", mm, tol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::Signature;
    use crate::sorusk::{PontryaginState, SecondOrderProblem};
    use rand::{Rng, SeedableRng};

    fn beanie_constants(i1: f64, i2: f64) -> (f64, f64, f64) {
        (
            (i2 / (i1 * (i1 + i2))).sqrt(),
            1.0 / (i1 + i2).sqrt(),
            ((i1 + i2) / (i1 * i2)).sqrt(),
        )
    }

    /// Beanie reduced problem with potential V(psi) = vk/2 psi^2, rotor
    /// torque actuated (direction 1).
    fn beanie_reduced(i1: f64, i2: f64, vk: f64) -> ReducedSecondOrderProblem {
        let (kk, jj, rr) = beanie_constants(i1, i2);
        let chart = AlgebroidChart::elroy_beanie(1.0, i1, i2).unwrap();
        let sig = Signature::new(&[("x", 1), ("y", 4), ("za", 1)])
            .unwrap()
            .with_params(&[("kk", kk), ("jj", jj), ("rr", rr), ("vk", vk)])
            .unwrap();
        // dV/dpsi = vk * psi.
        let l_m = Field::parse(sig.clone(), Shape::Scalar, &["0.5*(za + rr*vk*x)^2"]).unwrap();
        let g = Field::parse(
            sig,
            Shape::Vector(3),
            &[
                "jj*y3*y4 - kk*y1*y3",
                "kk*y1*y2 - jj*y2*y4",
                "0",
            ],
        )
        .unwrap();
        ReducedSecondOrderProblem::new(chart, vec![0], l_m, g).unwrap()
    }

    /// Independent transcription of the beanie optimality system, written
    /// out equation by equation.
    fn beanie_oracle(i1: f64, i2: f64, vk: f64, s: &[f64], out: &mut [f64]) {
        let (kk, jj, rr) = beanie_constants(i1, i2);
        let (psi, v, z1) = (s[0], &s[1..5], s[5]);
        let p = &s[6..10];
        let pb = &s[10..14];
        let dv = vk * psi; // V'
        let ddv = vk; // V''
        out[0] = rr * v[0];
        out[1] = z1;
        out[2] = jj * v[2] * v[3] - kk * v[0] * v[2];
        out[3] = kk * v[0] * v[1] - jj * v[1] * v[3];
        out[4] = 0.0;
        out[5] = -p[0] + kk * (pb[1] * v[2] - pb[2] * v[1]) - rr * rr * ddv * v[0];
        out[6] = rr * rr * ddv * (z1 + rr * dv) + kk * (p[2] * v[1] - p[1] * v[2]);
        out[7] = jj * p[2] * v[3] - kk * p[2] * v[0];
        out[8] = kk * p[1] * v[0] - jj * p[1] * v[3];
        out[9] = jj * (p[1] * v[2] - p[2] * v[1]);
        out[10] = -p[0] + kk * (pb[1] * v[2] - pb[2] * v[1]);
        out[11] = -p[1] + pb[2] * (jj * v[3] - kk * v[0]);
        out[12] = -p[2] + pb[1] * (kk * v[0] - jj * v[3]);
        out[13] = -p[3] + jj * (pb[2] * v[1] - pb[1] * v[2]);
    }

    #[test]
    fn beanie_reduced_field_matches_hand_transcription() {
        let (i1, i2, vk) = (1.3, 0.6, 0.8);
        let prob = beanie_reduced(i1, i2, vk);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut got = vec![0.0; 14];
        let mut want = vec![0.0; 14];
        for _ in 0..50 {
            let s: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prob.reduced_field(&s, &mut got).unwrap();
            beanie_oracle(i1, i2, vk, &s, &mut want);
            for i in 0..14 {
                assert!(
                    (got[i] - want[i]).abs() < 1e-12,
                    "component {i}: {} vs {}",
                    got[i],
                    want[i]
                );
            }
        }
    }

    #[test]
    fn beanie_flow_conserves_hamiltonian_and_primary() {
        let (i1, i2, vk) = (1.0, 1.0, 0.5);
        let prob = beanie_reduced(i1, i2, vk);
        let mut s = prob
            .primary_lift(
                &[0.2],
                &[0.3, -0.1, 0.4, 0.6],
                &[0.1],
                &[0.05, -0.3, 0.2, 0.1],
                &[0.4, -0.2, 0.3],
            )
            .unwrap();
        assert!(prob.primary_residual(&s).unwrap().amax() < 1e-15);
        let h0 = prob.hamiltonian(&s).unwrap();
        let h = 1e-3;
        let dim = s.len();
        let mut k = vec![vec![0.0; dim]; 4];
        for _ in 0..1000 {
            prob.reduced_field(&s, &mut k[0]).unwrap();
            let m1: Vec<f64> = s.iter().zip(&k[0]).map(|(v, d)| v + 0.5 * h * d).collect();
            prob.reduced_field(&m1, &mut k[1]).unwrap();
            let m2: Vec<f64> = s.iter().zip(&k[1]).map(|(v, d)| v + 0.5 * h * d).collect();
            prob.reduced_field(&m2, &mut k[2]).unwrap();
            let e: Vec<f64> = s.iter().zip(&k[2]).map(|(v, d)| v + h * d).collect();
            prob.reduced_field(&e, &mut k[3]).unwrap();
            for i in 0..dim {
                s[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
        }
        let h1 = prob.hamiltonian(&s).unwrap();
        assert!((h1 - h0).abs() < 1e-9, "energy drift {}", h1 - h0);
        assert!(prob.primary_residual(&s).unwrap().amax() < 1e-9);
    }

    #[test]
    fn fully_actuated_reduction_equals_optimality_field() {
        // With every direction actuated the reduced flow must coincide with
        // the second-order optimality field for the same Lagrangian.
        let chart = AlgebroidChart::so3();
        let sig2 = Signature::new(&[("x", 0), ("y", 3), ("z", 3)]).unwrap();
        let l2 = Field::parse(
            sig2,
            Shape::Scalar,
            &["0.5*(z1^2 + z2^2 + z3^2) + 0.2*y1*z2"],
        )
        .unwrap();
        let full = SecondOrderProblem::new(chart.clone(), l2).unwrap();

        let sigr = Signature::new(&[("x", 0), ("y", 3), ("za", 3)]).unwrap();
        let lr = Field::parse(
            sigr.clone(),
            Shape::Scalar,
            &["0.5*(za1^2 + za2^2 + za3^2) + 0.2*y1*za2"],
        )
        .unwrap();
        let g = Field::parse(sigr, Shape::Vector(0), &[]).unwrap();
        let red = ReducedSecondOrderProblem::new(chart, vec![0, 1, 2], lr, g).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let flat: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = PontryaginState::from_flat(0, 3, &flat).unwrap();
            let d = full.optimality_field(&s).unwrap();
            let mut out = vec![0.0; 12];
            red.reduced_field(&flat, &mut out).unwrap();
            let want = d.flatten();
            for i in 0..12 {
                assert!((out[i] - want[i]).abs() < 1e-13, "component {i}");
            }
        }
    }

    #[test]
    fn beanie_regularity_is_unit_scalar() {
        let prob = beanie_reduced(1.0, 1.0, 0.0);
        let s = vec![0.1; 14];
        let r = prob.regularity_test(&s, 1e-9).unwrap();
        assert!(r.regular);
        assert_eq!(r.matrix.rows, 1);
        assert!((r.matrix.data[0] - 1.0).abs() < 1e-15);
    }
}
