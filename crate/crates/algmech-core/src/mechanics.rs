//! First-order mechanics on an algebroid chart: Lagrangian dynamics (with
//! the anchored reconstruction of base coordinates), energy, the Legendre
//! map, and Hamiltonian dynamics on the dual.

use nalgebra::{DMatrix, DVector};

use crate::algebroid::AlgebroidChart;
use crate::calculus::{Field, Signature};
use crate::error::{Error, Result};
use crate::linalg;

/// A Lagrangian `L(x, y)` over a chart. The field's signature must be the
/// groups `x` (base) then `y` (fiber velocities).
#[derive(Clone, Debug)]
pub struct LagrangianProblem {
    pub chart: AlgebroidChart,
    pub lagrangian: Field,
}

/// Expected signature for first-order Lagrangians.
pub fn lagrangian_signature(m: usize, n: usize) -> Signature {
    Signature::new(&[("x", m), ("y", n)]).expect("valid group names")
}

/// Expected signature for Hamiltonians on the dual.
pub fn hamiltonian_signature(m: usize, n: usize) -> Signature {
    Signature::new(&[("x", m), ("p", n)]).expect("valid group names")
}

impl LagrangianProblem {
    pub fn new(chart: AlgebroidChart, lagrangian: Field) -> Result<LagrangianProblem> {
        let want = chart.base_dim() + chart.fiber_rank();
        if lagrangian.n_slots() != want || lagrangian.n_components() != 1 {
            return Err(Error::Dimension(format!(
                "lagrangian must be scalar over {} slots (x then y), got {} slots",
                want,
                lagrangian.n_slots()
            )));
        }
        Ok(LagrangianProblem { chart, lagrangian })
    }

    fn dims(&self) -> (usize, usize) {
        (self.chart.base_dim(), self.chart.fiber_rank())
    }

    fn flat(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut f = Vec::with_capacity(x.len() + y.len());
        f.extend_from_slice(x);
        f.extend_from_slice(y);
        f
    }

    /// Evaluates the equation-of-motion residual at a state with candidate
    /// fiber acceleration `z`:
    ///
    /// `R_A = d/dt(dL/dy^A) + C^C_{AB} y^B dL/dy^C - rho^i_A dL/dx^i`
    ///
    /// with the time derivative expanded along an admissible curve
    /// (`xdot = rho y`, `ydot = z`). A trajectory solves the equations of
    /// motion exactly when `R = 0` along it.
    pub fn el_residual(&self, x: &[f64], y: &[f64], z: &[f64]) -> Result<DVector<f64>> {
        let (m, n) = self.dims();
        let flat = self.flat(x, y);
        let jac = self.lagrangian.jacobian(&flat)?;
        let hess = &self.lagrangian.hessian(&flat)?[0];
        let rho = self.chart.anchor_at(x)?;
        let c = self.chart.structure_at(x)?;

        let xdot = {
            let yv = DVector::from_column_slice(y);
            &rho * yv
        };
        let mut r = DVector::zeros(n);
        for a in 0..n {
            let mut v = 0.0;
            for i in 0..m {
                v += hess[(m + a, i)] * xdot[i];
            }
            for b in 0..n {
                v += hess[(m + a, m + b)] * z[b];
            }
            for b in 0..n {
                for cc in 0..n {
                    v += c.get(a, b, cc) * y[b] * jac[(0, m + cc)];
                }
            }
            for i in 0..m {
                v -= rho[(i, a)] * jac[(0, i)];
            }
            r[a] = v;
        }
        Ok(r)
    }

    /// Time derivative of the first-order state `(x, y)`:
    /// `xdot = rho y`, `ydot` solved from the fiber Hessian of `L`.
    /// Fails with a regularity error when that Hessian is singular.
    pub fn el_rhs(&self, x: &[f64], y: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let (m, n) = self.dims();
        let flat = self.flat(x, y);
        let jac = self.lagrangian.jacobian(&flat)?;
        let hess = &self.lagrangian.hessian(&flat)?[0];
        let rho = self.chart.anchor_at(x)?;
        let c = self.chart.structure_at(x)?;

        let yv = DVector::from_column_slice(y);
        let xdot = &rho * &yv;

        let mut rhs = DVector::zeros(n);
        for a in 0..n {
            let mut v = 0.0;
            for i in 0..m {
                v += rho[(i, a)] * jac[(0, i)];
                v -= hess[(m + a, i)] * xdot[i];
            }
            for b in 0..n {
                for cc in 0..n {
                    v -= c.get(a, b, cc) * y[b] * jac[(0, m + cc)];
                }
            }
            rhs[a] = v;
        }
        let w = hess.view((m, m), (n, n)).into_owned();
        let ydot = linalg::solve_lu(&w, &rhs, "fiber Hessian of the Lagrangian")?;
        Ok((xdot, ydot))
    }

    /// Energy `E = dL/dy . y - L`, conserved along solutions.
    pub fn energy(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let (m, n) = self.dims();
        let flat = self.flat(x, y);
        let jac = self.lagrangian.jacobian(&flat)?;
        let l = self.lagrangian.scalar(&flat)?;
        let mut e = -l;
        for a in 0..n {
            e += jac[(0, m + a)] * y[a];
        }
        Ok(e)
    }

    /// Legendre map: momenta `p_A = dL/dy^A`.
    pub fn legendre(&self, x: &[f64], y: &[f64]) -> Result<DVector<f64>> {
        let (m, n) = self.dims();
        let flat = self.flat(x, y);
        let jac = self.lagrangian.jacobian(&flat)?;
        Ok(DVector::from_iterator(n, (0..n).map(|a| jac[(0, m + a)])))
    }

    /// Fiber Hessian `d^2 L / dy dy` at a state.
    pub fn fiber_hessian(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        let (m, n) = self.dims();
        let flat = self.flat(x, y);
        let hess = &self.lagrangian.hessian(&flat)?[0];
        Ok(hess.view((m, m), (n, n)).into_owned())
    }
}

/// A Hamiltonian `H(x, p)` over a chart, with signature groups `x` then `p`.
#[derive(Clone, Debug)]
pub struct HamiltonianProblem {
    pub chart: AlgebroidChart,
    pub hamiltonian: Field,
}

impl HamiltonianProblem {
    pub fn new(chart: AlgebroidChart, hamiltonian: Field) -> Result<HamiltonianProblem> {
        let want = chart.base_dim() + chart.fiber_rank();
        if hamiltonian.n_slots() != want || hamiltonian.n_components() != 1 {
            return Err(Error::Dimension(format!(
                "hamiltonian must be scalar over {} slots (x then p), got {} slots",
                want,
                hamiltonian.n_slots()
            )));
        }
        Ok(HamiltonianProblem { chart, hamiltonian })
    }

    /// Hamilton equations on the dual:
    /// `xdot^i = rho^i_A dH/dp_A`,
    /// `pdot_A = -rho^i_A dH/dx^i - p_C C^C_{AB} dH/dp_B`.
    pub fn hamilton_rhs(&self, x: &[f64], p: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let m = self.chart.base_dim();
        let n = self.chart.fiber_rank();
        let mut flat = Vec::with_capacity(m + n);
        flat.extend_from_slice(x);
        flat.extend_from_slice(p);
        let jac = self.hamiltonian.jacobian(&flat)?;
        let rho = self.chart.anchor_at(x)?;
        let c = self.chart.structure_at(x)?;

        let mut xdot = DVector::zeros(m);
        for i in 0..m {
            for a in 0..n {
                xdot[i] += rho[(i, a)] * jac[(0, m + a)];
            }
        }
        let mut pdot = DVector::zeros(n);
        for a in 0..n {
            let mut v = 0.0;
            for i in 0..m {
                v -= rho[(i, a)] * jac[(0, i)];
            }
            for b in 0..n {
                for cc in 0..n {
                    v -= p[cc] * c.get(a, b, cc) * jac[(0, m + b)];
                }
            }
            pdot[a] = v;
        }
        Ok((xdot, pdot))
    }

    pub fn value(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        let mut flat = Vec::with_capacity(x.len() + p.len());
        flat.extend_from_slice(x);
        flat.extend_from_slice(p);
        self.hamiltonian.scalar(&flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::Shape;

    /// Free rigid body on so(3): L = (I1 y1^2 + I2 y2^2 + I3 y3^2) / 2.
    fn rigid_body(i: [f64; 3]) -> LagrangianProblem {
        let chart = AlgebroidChart::so3();
        let sig = lagrangian_signature(0, 3)
            .with_params(&[("I1", i[0]), ("I2", i[1]), ("I3", i[2])])
            .unwrap();
        let l = Field::parse(
            sig,
            Shape::Scalar,
            &["0.5 * (I1 * y1^2 + I2 * y2^2 + I3 * y3^2)"],
        )
        .unwrap();
        LagrangianProblem::new(chart, l).unwrap()
    }

    #[test]
    fn rigid_body_equations_match_euler() {
        let i = [1.0, 2.0, 3.0];
        let prob = rigid_body(i);
        let y = [0.3, -0.2, 0.5];
        let (_, ydot) = prob.el_rhs(&[], &y).unwrap();
        // I1 w1' = (I2 - I3) w2 w3, cyclic.
        let expect = [
            (i[1] - i[2]) * y[1] * y[2] / i[0],
            (i[2] - i[0]) * y[2] * y[0] / i[1],
            (i[0] - i[1]) * y[0] * y[1] / i[2],
        ];
        for a in 0..3 {
            assert!((ydot[a] - expect[a]).abs() < 1e-14, "axis {a}");
        }
        // The residual at (y, z = ydot) vanishes.
        let z: Vec<f64> = ydot.iter().copied().collect();
        let r = prob.el_residual(&[], &y, &z).unwrap();
        assert!(r.amax() < 1e-14);
    }

    #[test]
    fn energy_and_legendre() {
        let prob = rigid_body([1.0, 2.0, 3.0]);
        let y = [0.1, 0.2, 0.3];
        let e = prob.energy(&[], &y).unwrap();
        assert!((e - 0.5 * (0.01 + 2.0 * 0.04 + 3.0 * 0.09)).abs() < 1e-15);
        let p = prob.legendre(&[], &y).unwrap();
        assert!((p[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn hamilton_rigid_body_matches_lagrangian_flow() {
        let i = [1.0, 2.0, 3.0];
        let chart = AlgebroidChart::so3();
        let sig = hamiltonian_signature(0, 3)
            .with_params(&[("I1", i[0]), ("I2", i[1]), ("I3", i[2])])
            .unwrap();
        let h = Field::parse(
            sig,
            Shape::Scalar,
            &["0.5 * (p1^2 / I1 + p2^2 / I2 + p3^2 / I3)"],
        )
        .unwrap();
        let hp = HamiltonianProblem::new(chart, h).unwrap();
        let y = [0.3, -0.2, 0.5];
        let p = [i[0] * y[0], i[1] * y[1], i[2] * y[2]];
        let (_, pdot) = hp.hamilton_rhs(&[], &p).unwrap();
        // pdot should equal d/dt (I w) from the Euler equations.
        let lp = rigid_body(i);
        let (_, ydot) = lp.el_rhs(&[], &y).unwrap();
        for a in 0..3 {
            assert!((pdot[a] - i[a] * ydot[a]).abs() < 1e-14);
        }
    }

    #[test]
    fn tangent_bundle_reduces_to_classical_el() {
        // L = |y|^2 / 2 - (x1^2 + 2 x2^2) / 2 on TB(2): ydot = -grad V.
        let chart = AlgebroidChart::tangent_bundle(2);
        let sig = lagrangian_signature(2, 2);
        let l = Field::parse(
            sig,
            Shape::Scalar,
            &["0.5 * (y1^2 + y2^2) - 0.5 * (x1^2 + 2 * x2^2)"],
        )
        .unwrap();
        let prob = LagrangianProblem::new(chart, l).unwrap();
        let (xdot, ydot) = prob.el_rhs(&[0.3, -0.4], &[1.0, 2.0]).unwrap();
        assert!((xdot[0] - 1.0).abs() < 1e-15);
        assert!((xdot[1] - 2.0).abs() < 1e-15);
        assert!((ydot[0] + 0.3).abs() < 1e-14);
        assert!((ydot[1] + 2.0 * -0.4).abs() < 1e-14);
    }

    #[test]
    fn degenerate_lagrangian_reports_regularity_error() {
        let chart = AlgebroidChart::tangent_bundle(1);
        let sig = lagrangian_signature(1, 1);
        let l = Field::parse(sig, Shape::Scalar, &["y * x"]).unwrap();
        let prob = LagrangianProblem::new(chart, l).unwrap();
        assert!(matches!(
            prob.el_rhs(&[1.0], &[1.0]),
            Err(Error::Regularity { .. })
        ));
    }
}
