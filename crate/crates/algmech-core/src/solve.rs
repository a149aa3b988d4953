//! Numerical engines: explicit integrators with dense output, invariant
//! monitors, shooting for two-point boundary-value problems, and
//! brute-force action-gradient oracles for cross-validation.
//!
//! Everything here treats the dynamical fields as black boxes
//! `f(state) -> state derivative`; the geometry lives upstream. Monitors
//! are pure functions of the stored states, recomputable bit for bit from
//! a serialized trajectory.

use nalgebra::{DMatrix, DVector};

use crate::algebroid::AlgebroidChart;
use crate::error::{Error, Result};
use crate::linalg::solve_lu;
use crate::mechanics::LagrangianProblem;
use crate::sorusk::{PontryaginState, ReducedSecondOrderProblem, SecondOrderProblem};

/// Time stepping scheme for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Classical fixed-step fourth-order Runge-Kutta.
    Rk4 { h: f64 },
    /// Dormand-Prince 5(4) with proportional step control.
    Rk45 { rtol: f64, atol: f64 },
}

/// Integration output: accepted nodes with state derivatives (for dense
/// output) and named monitor channels.
#[derive(Debug, Clone)]
pub struct Trajectory {
    t: Vec<f64>,
    states: Vec<Vec<f64>>,
    derivs: Vec<Vec<f64>>,
    monitors: Vec<(String, Vec<f64>)>,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn end_time(&self) -> f64 {
        *self.t.last().expect("trajectory has at least one node")
    }

    pub fn end_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one node")
    }

    /// Dense output: cubic Hermite interpolation on the step enclosing `t`,
    /// using the stored endpoint derivatives.
    pub fn sample(&self, t: f64) -> Result<Vec<f64>> {
        let t0 = self.t[0];
        let t1 = self.end_time();
        if t < t0 - 1e-12 || t > t1 + 1e-12 {
            return Err(Error::Config(format!(
                "sample time {t} outside the integrated range [{t0}, {t1}]"
            )));
        }
        let t = t.clamp(t0, t1);
        // Index of the interval [t_i, t_{i+1}] containing t.
        let i = match self.t.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => return Ok(self.states[i].clone()),
            Err(i) => i.clamp(1, self.t.len() - 1) - 1,
        };
        let dt = self.t[i + 1] - self.t[i];
        let th = (t - self.t[i]) / dt;
        let h00 = (1.0 + 2.0 * th) * (1.0 - th) * (1.0 - th);
        let h10 = th * (1.0 - th) * (1.0 - th);
        let h01 = th * th * (3.0 - 2.0 * th);
        let h11 = th * th * (th - 1.0);
        let dim = self.state_dim();
        let mut out = vec![0.0; dim];
        for d in 0..dim {
            out[d] = h00 * self.states[i][d]
                + h10 * dt * self.derivs[i][d]
                + h01 * self.states[i + 1][d]
                + h11 * dt * self.derivs[i + 1][d];
        }
        Ok(out)
    }

    /// Evaluates a scalar function of the state at every node and stores it
    /// as a named channel.
    pub fn compute_monitor<F>(&mut self, name: &str, mut f: F) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let mut vals = Vec::with_capacity(self.states.len());
        for s in &self.states {
            vals.push(f(s)?);
        }
        self.monitors.push((name.to_string(), vals));
        Ok(())
    }

    pub fn monitors(&self) -> &[(String, Vec<f64>)] {
        &self.monitors
    }

    pub fn monitor(&self, name: &str) -> Option<&[f64]> {
        self.monitors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Largest step between stored nodes.
    pub fn max_step(&self) -> f64 {
        self.t.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Prefixes solver errors with the time at which they occurred.
fn stamp(e: Error, t: f64) -> Error {
    match e {
        Error::NonFinite(s) => Error::NonFinite(format!("at t = {t:.6}: {s}")),
        Error::Regularity { context, min_sv } => Error::Regularity {
            context: format!("at t = {t:.6}: {context}"),
            min_sv,
        },
        Error::NonConvergence {
            context,
            iterations,
            residual,
        } => Error::NonConvergence {
            context: format!("at t = {t:.6}: {context}"),
            iterations,
            residual,
        },
        other => other,
    }
}

/// A failed stage evaluation that step control can react to by shrinking.
fn recoverable(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Regularity { .. })
}

/// Integrates `sdot = field(s)` from `s0` over `[0, t_end]`.
pub fn integrate<F>(mut field: F, s0: &[f64], t_end: f64, method: Method) -> Result<Trajectory>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::Config(format!(
            "integration horizon must be positive, got {t_end}"
        )));
    }
    match method {
        Method::Rk4 { h } => {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("step size must be positive, got {h}")));
            }
            rk4_path(&mut field, s0, t_end, h)
        }
        Method::Rk45 { rtol, atol } => {
            if !(rtol > 0.0 && atol > 0.0) {
                return Err(Error::Config(format!(
                    "tolerances must be positive, got rtol = {rtol}, atol = {atol}"
                )));
            }
            rk45_path(&mut field, s0, t_end, rtol, atol)
        }
    }
}

fn rk4_path<F>(field: &mut F, s0: &[f64], t_end: f64, h: f64) -> Result<Trajectory>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let dim = s0.len();
    let n_full = ((t_end / h) + 1e-12).floor() as usize;
    let rem = t_end - n_full as f64 * h;
    let n_steps = n_full + usize::from(rem > 1e-12);

    let mut t = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut derivs = Vec::with_capacity(n_steps + 1);
    let mut d0 = vec![0.0; dim];
    field(s0, &mut d0).map_err(|e| stamp(e, 0.0))?;
    t.push(0.0);
    states.push(s0.to_vec());
    derivs.push(d0);

    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for step in 0..n_steps {
        let t0 = step as f64 * h;
        let t1 = if step + 1 == n_steps {
            t_end
        } else {
            (step + 1) as f64 * h
        };
        let hs = t1 - t0;
        let s = states.last().expect("nonempty").clone();
        let k1 = derivs.last().expect("nonempty").clone();
        let err = |e| stamp(e, t0);

        for d in 0..dim {
            tmp[d] = s[d] + 0.5 * hs * k1[d];
        }
        field(&tmp, &mut k2).map_err(err)?;
        for d in 0..dim {
            tmp[d] = s[d] + 0.5 * hs * k2[d];
        }
        field(&tmp, &mut k3).map_err(err)?;
        for d in 0..dim {
            tmp[d] = s[d] + hs * k3[d];
        }
        field(&tmp, &mut k4).map_err(err)?;
        let mut s1 = vec![0.0; dim];
        for d in 0..dim {
            s1[d] = s[d] + hs / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
        let mut d1 = vec![0.0; dim];
        field(&s1, &mut d1).map_err(|e| stamp(e, t1))?;
        t.push(t1);
        states.push(s1);
        derivs.push(d1);
    }
    Ok(Trajectory {
        t,
        states,
        derivs,
        monitors: Vec::new(),
    })
}

/// Dormand-Prince 5(4) tableau.
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Difference between the fifth- and fourth-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn rk45_path<F>(field: &mut F, s0: &[f64], t_end: f64, rtol: f64, atol: f64) -> Result<Trajectory>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let dim = s0.len();
    let h_min = 1e-14 * t_end.max(1.0);
    let mut h = (t_end / 100.0).min(0.1);

    let mut t = vec![0.0];
    let mut states = vec![s0.to_vec()];
    let mut d0 = vec![0.0; dim];
    field(s0, &mut d0).map_err(|e| stamp(e, 0.0))?;
    let mut derivs = vec![d0];

    let mut k = vec![vec![0.0; dim]; 7];
    let mut tmp = vec![0.0; dim];
    let mut tc = 0.0;
    let mut rejections_in_row = 0usize;
    while tc < t_end - 1e-12 * t_end.max(1.0) {
        if h < h_min {
            return Err(Error::NonConvergence {
                context: format!("adaptive step size underflow at t = {tc:.6}"),
                iterations: t.len(),
                residual: h,
            });
        }
        let hs = h.min(t_end - tc);
        let s = states.last().expect("nonempty").clone();
        k[0].copy_from_slice(derivs.last().expect("nonempty"));

        let mut stage_err: Option<Error> = None;
        for stage in 0..6 {
            for d in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(stage + 1) {
                    acc += DP_A[stage][j] * kj[d];
                }
                tmp[d] = s[d] + hs * acc;
            }
            let (head, tail) = k.split_at_mut(stage + 1);
            let _ = head;
            if let Err(e) = field(&tmp, &mut tail[0]) {
                if recoverable(&e) {
                    stage_err = Some(e);
                    break;
                }
                return Err(stamp(e, tc));
            }
        }
        if let Some(e) = stage_err {
            h *= 0.5;
            rejections_in_row += 1;
            if rejections_in_row > 60 {
                return Err(stamp(e, tc));
            }
            continue;
        }
        // k[6] currently holds the last stage derivative; the fifth-order
        // solution only uses k[0..6].
        let mut s1 = vec![0.0; dim];
        let mut err = 0.0;
        for d in 0..dim {
            let mut acc5 = 0.0;
            let mut ed = 0.0;
            for j in 0..7 {
                acc5 += DP_B5[j] * k[j][d];
                ed += DP_E[j] * k[j][d];
            }
            s1[d] = s[d] + hs * acc5;
            let scale = atol + rtol * s[d].abs().max(s1[d].abs());
            let r = hs * ed / scale;
            err += r * r;
        }
        let err = (err / dim as f64).sqrt();
        if !err.is_finite() {
            h *= 0.5;
            rejections_in_row += 1;
            if rejections_in_row > 60 {
                return Err(Error::NonConvergence {
                    context: format!("repeated non-finite error estimates at t = {tc:.6}"),
                    iterations: t.len(),
                    residual: h,
                });
            }
            continue;
        }
        let fac = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        if err <= 1.0 {
            let mut d1 = vec![0.0; dim];
            match field(&s1, &mut d1) {
                Ok(()) => {}
                Err(e) if recoverable(&e) => {
                    h *= 0.5;
                    rejections_in_row += 1;
                    if rejections_in_row > 60 {
                        return Err(stamp(e, tc));
                    }
                    continue;
                }
                Err(e) => return Err(stamp(e, tc + hs)),
            }
            tc += hs;
            t.push(tc);
            states.push(s1);
            derivs.push(d1);
            rejections_in_row = 0;
            h *= fac;
        } else {
            h *= fac.min(1.0);
            rejections_in_row += 1;
            if rejections_in_row > 60 {
                return Err(Error::NonConvergence {
                    context: format!("step control stalled at t = {tc:.6}"),
                    iterations: t.len(),
                    residual: err,
                });
            }
        }
    }
    Ok(Trajectory {
        t,
        states,
        derivs,
        monitors: Vec::new(),
    })
}

/// Canonical state column names `x1..xm, y1..yn, z1..zn, p1..pn,
/// pbar1..pbarn`.
pub fn pontryagin_columns(m: usize, n: usize) -> Vec<String> {
    let mut cols = Vec::with_capacity(m + 4 * n);
    for (prefix, count) in [("x", m), ("y", n), ("z", n), ("p", n), ("pbar", n)] {
        for i in 1..=count {
            cols.push(format!("{prefix}{i}"));
        }
    }
    cols
}

/// Writes `t, <state columns>, <monitor columns>` rows with 17 significant
/// digits, enough for exact round trips.
pub fn write_csv<W: std::io::Write>(
    out: &mut W,
    traj: &Trajectory,
    state_columns: &[String],
) -> Result<()> {
    if state_columns.len() != traj.state_dim() {
        return Err(Error::Dimension(format!(
            "{} column names for state dimension {}",
            state_columns.len(),
            traj.state_dim()
        )));
    }
    let mut header = String::from("t");
    for c in state_columns {
        header.push_str(", ");
        header.push_str(c);
    }
    for (name, _) in &traj.monitors {
        header.push_str(", ");
        header.push_str(name);
    }
    writeln!(out, "{header}")?;
    for (i, tv) in traj.t.iter().enumerate() {
        let mut row = format!("{tv:.16e}");
        for v in &traj.states[i] {
            row.push_str(&format!(", {v:.16e}"));
        }
        for (_, vals) in &traj.monitors {
            row.push_str(&format!(", {:.16e}", vals[i]));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Derivative of a state channel from dense output, by five-point central
/// differences with sampling step `max(1e-3, 2 * integration step)`. Twice
/// the integration step keeps every stencil point in a distinct dense-
/// output piece (and on grid nodes, where interpolation is exact, whenever
/// `t` itself is one), while the O(s^2) truncation of the third-derivative
/// stencil stays below 1e-5 for state scales of order one.
pub fn finite_difference_jet(
    traj: &Trajectory,
    channel: usize,
    order: u32,
    t: f64,
) -> Result<f64> {
    if channel >= traj.state_dim() {
        return Err(Error::Dimension(format!(
            "channel {channel} out of range for state dimension {}",
            traj.state_dim()
        )));
    }
    if !(1..=3).contains(&order) {
        return Err(Error::Config(format!(
            "derivative order must be 1, 2, or 3, got {order}"
        )));
    }
    let s = f64::max(1e-3, 2.0 * traj.max_step());
    let (t0, t1) = (traj.t[0], traj.end_time());
    if t - 2.0 * s < t0 - 1e-12 || t + 2.0 * s > t1 + 1e-12 {
        return Err(Error::Config(format!(
            "five-point stencil of half-width {} around t = {t} leaves [{t0}, {t1}]",
            2.0 * s
        )));
    }
    let mut v = [0.0; 5];
    for (i, vi) in v.iter_mut().enumerate() {
        let ts = t + (i as f64 - 2.0) * s;
        *vi = traj.sample(ts)?[channel];
    }
    Ok(match order {
        1 => (v[0] - 8.0 * v[1] + 8.0 * v[3] - v[4]) / (12.0 * s),
        2 => (-v[0] + 16.0 * v[1] - 30.0 * v[2] + 16.0 * v[3] - v[4]) / (12.0 * s * s),
        _ => (v[4] - 2.0 * v[3] + 2.0 * v[1] - v[0]) / (2.0 * s * s * s),
    })
}

/// Outcome of a shooting solve.
#[derive(Debug, Clone)]
pub struct ShootingResult {
    pub converged: bool,
    /// Max-norm of the final residual vector.
    pub residual_norm: f64,
    /// Newton updates taken.
    pub iterations: usize,
    pub unknowns: Vec<f64>,
}

/// Damped Newton iteration on a square map `r(u) = 0` with a forward-
/// difference Jacobian. Backtracks by halving (minimum factor `2^-10`) on
/// the max-norm of the residual; returns the best iterate when stalled or
/// out of iterations.
pub fn newton_solve<F>(
    mut map: F,
    guess: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ShootingResult>
where
    F: FnMut(&[f64]) -> Result<DVector<f64>>,
{
    let nu = guess.len();
    let mut u = guess.to_vec();
    let mut r = map(&u)?;
    if r.len() != nu {
        return Err(Error::Config(format!(
            "shooting system is not square: {nu} unknowns, {} residuals",
            r.len()
        )));
    }
    let mut rnorm = r.amax();
    let mut iterations = 0;
    while iterations < max_iter && rnorm >= tol {
        let mut jac = DMatrix::zeros(nu, nu);
        for c in 0..nu {
            let delta = f64::EPSILON.sqrt() * u[c].abs().max(1.0);
            let saved = u[c];
            u[c] += delta;
            let rp = map(&u)?;
            u[c] = saved;
            for row in 0..nu {
                jac[(row, c)] = (rp[row] - r[row]) / delta;
            }
        }
        let du = solve_lu(&jac, &r, "shooting Jacobian")?;
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda >= 2f64.powi(-10) {
            let trial: Vec<f64> = u.iter().zip(du.iter()).map(|(v, d)| v - lambda * d).collect();
            match map(&trial) {
                Ok(rt) if rt.amax() < rnorm => {
                    u = trial;
                    rnorm = rt.amax();
                    r = rt;
                    accepted = true;
                    break;
                }
                _ => lambda *= 0.5,
            }
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    Ok(ShootingResult {
        converged: rnorm < tol,
        residual_norm: rnorm,
        iterations,
        unknowns: u,
    })
}

/// The two optimality-system shapes the boundary-value driver accepts.
#[derive(Clone, Copy)]
pub enum OptimalitySystem<'a> {
    Full(&'a SecondOrderProblem),
    Reduced(&'a ReducedSecondOrderProblem),
}

impl OptimalitySystem<'_> {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            OptimalitySystem::Full(p) => (p.base_dim(), p.fiber_rank()),
            OptimalitySystem::Reduced(p) => {
                (p.chart().base_dim(), p.chart().fiber_rank())
            }
        }
    }

    /// Length of the acceleration block carried in the state (`n`, or the
    /// actuated count for reduced systems).
    pub fn z_dim(&self) -> usize {
        match self {
            OptimalitySystem::Full(p) => p.fiber_rank(),
            OptimalitySystem::Reduced(p) => p.actuated().len(),
        }
    }

    /// Costate unknowns beyond `p(0)`: the unactuated `pbar` block of
    /// reduced systems.
    pub fn extra_costates(&self) -> usize {
        match self {
            OptimalitySystem::Full(_) => 0,
            OptimalitySystem::Reduced(p) => p.unactuated().len(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            OptimalitySystem::Full(p) => p.state_dim(),
            OptimalitySystem::Reduced(p) => p.state_dim(),
        }
    }

    pub fn field(&self, flat: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            OptimalitySystem::Full(p) => p.optimality_field_flat(flat, out),
            OptimalitySystem::Reduced(p) => p.reduced_field(flat, out),
        }
    }

    pub fn hamiltonian(&self, flat: &[f64]) -> Result<f64> {
        match self {
            OptimalitySystem::Full(p) => {
                let (m, n) = self.dims();
                p.pontryagin_hamiltonian(&PontryaginState::from_flat(m, n, flat)?)
            }
            OptimalitySystem::Reduced(p) => p.hamiltonian(flat),
        }
    }

    /// Builds the initial state on the primary constraint from boundary
    /// data and unknowns.
    fn initial_state(
        &self,
        x0: &[f64],
        y0: &[f64],
        z0: &[f64],
        p0: &[f64],
        extra: &[f64],
    ) -> Result<Vec<f64>> {
        match self {
            OptimalitySystem::Full(p) => Ok(p.primary_lift(x0, y0, z0, p0)?.flatten()),
            OptimalitySystem::Reduced(p) => p.primary_lift(x0, y0, z0, p0, extra),
        }
    }

    /// `(x, y, z-block)` slices of a flat state.
    fn blocks<'b>(&self, flat: &'b [f64]) -> (&'b [f64], &'b [f64], &'b [f64]) {
        let (m, n) = self.dims();
        let zd = self.z_dim();
        (
            &flat[..m],
            &flat[m..m + n],
            &flat[m + n..m + n + zd],
        )
    }
}

/// Two-point boundary data: the initial `(x, y)` is always prescribed;
/// `z(0)` may be prescribed or left as a shooting unknown; endpoint blocks
/// are targeted when present.
#[derive(Debug, Clone, Default)]
pub struct BoundarySpec {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub z0: Option<Vec<f64>>,
    pub x_end: Option<Vec<f64>>,
    pub y_end: Option<Vec<f64>>,
    pub z_end: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ShootingConfig {
    pub method: Method,
    /// Shooting segments; 1 is single shooting.
    pub segments: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Initial guess for the base unknowns `[z(0) if free, p(0), extra
    /// costates]`; zeros when absent.
    pub guess: Option<Vec<f64>>,
}

impl Default for ShootingConfig {
    fn default() -> ShootingConfig {
        ShootingConfig {
            method: Method::Rk4 { h: 1e-3 },
            segments: 1,
            tol: 1e-9,
            max_iter: 40,
            guess: None,
        }
    }
}

/// Solves the two-point boundary-value problem for an optimality system by
/// (multiple) shooting. Unknowns are `[z(0) if free, p(0), extra costates]`
/// plus interior segment states; residuals are segment continuity plus the
/// prescribed endpoint blocks. The system must be square.
pub fn shoot(
    sys: &OptimalitySystem,
    boundary: &BoundarySpec,
    horizon: f64,
    cfg: &ShootingConfig,
) -> Result<(ShootingResult, Trajectory)> {
    let (m, n) = sys.dims();
    let zd = sys.z_dim();
    let extra = sys.extra_costates();
    if boundary.x0.len() != m || boundary.y0.len() != n {
        return Err(Error::Dimension(format!(
            "initial boundary data must have sizes ({m}, {n}), got ({}, {})",
            boundary.x0.len(),
            boundary.y0.len()
        )));
    }
    for (what, block, want) in [
        ("z(0)", &boundary.z0, zd),
        ("x(T)", &boundary.x_end, m),
        ("y(T)", &boundary.y_end, n),
        ("z(T)", &boundary.z_end, zd),
    ] {
        if let Some(b) = block {
            if b.len() != want {
                return Err(Error::Dimension(format!(
                    "{what} must have {want} entries, got {}",
                    b.len()
                )));
            }
        }
    }
    let z_free = boundary.z0.is_none();
    let n_unknowns = if z_free { zd } else { 0 } + n + extra;
    let n_residuals = boundary.x_end.as_ref().map_or(0, |_| m)
        + boundary.y_end.as_ref().map_or(0, |_| n)
        + boundary.z_end.as_ref().map_or(0, |_| zd);
    if n_unknowns != n_residuals {
        return Err(Error::Config(format!(
            "shooting system is not square: {n_unknowns} unknowns ({}p(0){} ) against \
             {n_residuals} endpoint residuals",
            if z_free { "z(0), " } else { "" },
            if extra > 0 { ", unactuated costates" } else { "" },
        )));
    }
    let segments = cfg.segments.max(1);
    let seg_t = horizon / segments as f64;
    let dim = sys.state_dim();

    let base_guess = match &cfg.guess {
        Some(g) => {
            if g.len() != n_unknowns {
                return Err(Error::Dimension(format!(
                    "guess must have {n_unknowns} entries, got {}",
                    g.len()
                )));
            }
            g.clone()
        }
        None => vec![0.0; n_unknowns],
    };

    let initial_from = |u: &[f64]| -> Result<Vec<f64>> {
        let (z0v, rest) = if z_free {
            (u[..zd].to_vec(), &u[zd..])
        } else {
            (boundary.z0.clone().expect("checked above"), u)
        };
        sys.initial_state(&boundary.x0, &boundary.y0, &z0v, &rest[..n], &rest[n..])
    };

    // Interior segment start states, warm-started by one forward pass.
    let mut full_guess = base_guess.clone();
    if segments > 1 {
        let mut s = initial_from(&base_guess)?;
        for _ in 0..segments - 1 {
            let next = match integrate(
                |f: &[f64], o: &mut [f64]| sys.field(f, o),
                &s,
                seg_t,
                cfg.method,
            ) {
                Ok(traj) => traj.end_state().to_vec(),
                Err(_) => s.clone(),
            };
            full_guess.extend_from_slice(&next);
            s = next;
        }
    }

    let residual_map = |u: &[f64]| -> Result<DVector<f64>> {
        let mut res = Vec::with_capacity(u.len());
        let mut start = initial_from(&u[..n_unknowns])?;
        for seg in 0..segments {
            let traj = integrate(
                |f: &[f64], o: &mut [f64]| sys.field(f, o),
                &start,
                seg_t,
                cfg.method,
            )?;
            let end = traj.end_state();
            if seg + 1 < segments {
                let node = &u[n_unknowns + seg * dim..n_unknowns + (seg + 1) * dim];
                for d in 0..dim {
                    res.push(node[d] - end[d]);
                }
                start = node.to_vec();
            } else {
                let (xe, ye, ze) = sys.blocks(end);
                if let Some(want) = &boundary.x_end {
                    res.extend(xe.iter().zip(want).map(|(a, b)| a - b));
                }
                if let Some(want) = &boundary.y_end {
                    res.extend(ye.iter().zip(want).map(|(a, b)| a - b));
                }
                if let Some(want) = &boundary.z_end {
                    res.extend(ze.iter().zip(want).map(|(a, b)| a - b));
                }
            }
        }
        Ok(DVector::from_vec(res))
    };

    let mut result = newton_solve(residual_map, &full_guess, cfg.tol, cfg.max_iter)?;

    // Final trajectory from the solved unknowns, stitched across segments.
    let mut traj: Option<Trajectory> = None;
    let mut start = initial_from(&result.unknowns[..n_unknowns])?;
    for seg in 0..segments {
        let part = integrate(
            |f: &[f64], o: &mut [f64]| sys.field(f, o),
            &start,
            seg_t,
            cfg.method,
        )?;
        start = if seg + 1 < segments {
            result.unknowns[n_unknowns + seg * dim..n_unknowns + (seg + 1) * dim].to_vec()
        } else {
            Vec::new()
        };
        traj = Some(match traj {
            None => part,
            Some(mut acc) => {
                let offset = acc.end_time();
                for (i, tv) in part.t.iter().enumerate() {
                    if i == 0 {
                        continue;
                    }
                    acc.t.push(offset + tv);
                    acc.states.push(part.states[i].clone());
                    acc.derivs.push(part.derivs[i].clone());
                }
                acc
            }
        });
    }
    result.unknowns.truncate(n_unknowns);
    Ok((result, traj.expect("at least one segment")))
}

/// A uniformly sampled admissible path: fiber nodes `y_i` with the base
/// curve integrated from `xdot = rho(x) y`.
#[derive(Debug, Clone)]
pub struct DiscretePath {
    pub h: f64,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

/// One base-curve step of length `h` under linearly interpolated fiber
/// values.
fn advance_base(
    chart: &AlgebroidChart,
    x: &[f64],
    y0: &[f64],
    y1: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let m = chart.base_dim();
    if m == 0 {
        return Ok(Vec::new());
    }
    let ym: Vec<f64> = y0.iter().zip(y1).map(|(a, b)| 0.5 * (a + b)).collect();
    let vel = |xv: &[f64], yv: &[f64]| -> Result<DVector<f64>> {
        Ok(chart.anchor_at(xv)? * DVector::from_column_slice(yv))
    };
    let k1 = vel(x, y0)?;
    let x2: Vec<f64> = (0..m).map(|i| x[i] + 0.5 * h * k1[i]).collect();
    let k2 = vel(&x2, &ym)?;
    let x3: Vec<f64> = (0..m).map(|i| x[i] + 0.5 * h * k2[i]).collect();
    let k3 = vel(&x3, &ym)?;
    let x4: Vec<f64> = (0..m).map(|i| x[i] + h * k3[i]).collect();
    let k4 = vel(&x4, y1)?;
    Ok((0..m)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrates the base curve under the admissibility condition for given
/// fiber nodes on a uniform grid over `[0, t_end]`.
pub fn admissible_path(
    chart: &AlgebroidChart,
    x0: &[f64],
    y_nodes: &[Vec<f64>],
    t_end: f64,
) -> Result<DiscretePath> {
    let (m, n) = (chart.base_dim(), chart.fiber_rank());
    if y_nodes.len() < 5 {
        return Err(Error::Config(
            "a discrete path needs at least five fiber nodes".into(),
        ));
    }
    if x0.len() != m || y_nodes.iter().any(|y| y.len() != n) {
        return Err(Error::Dimension(format!(
            "path data must have base dimension {m} and fiber rank {n}"
        )));
    }
    let h = t_end / (y_nodes.len() - 1) as f64;
    let mut x = Vec::with_capacity(y_nodes.len());
    x.push(x0.to_vec());
    for i in 0..y_nodes.len() - 1 {
        let next = advance_base(chart, &x[i], &y_nodes[i], &y_nodes[i + 1], h)?;
        x.push(next);
    }
    Ok(DiscretePath {
        h,
        x,
        y: y_nodes.to_vec(),
    })
}

/// Brute-force gradient of the trapezoid-discretized action with respect
/// to structured variations at interior nodes.
///
/// The variation at node `j` in fiber direction `d` is the complete lift
/// of a tent section `eta`: the fiber nodes change by
/// `delta y = eta' + C(eta, y)` (discrete central derivative of the tent
/// plus the bracket correction) and the base curve is re-integrated, so
/// the varied path stays admissible. Entry `[j-2][d]` of the result is
/// `-(1/h) dA/d eta_{j,d}` by central finite differences, for
/// `j = 2..N-2`; the outermost interior nodes are skipped because tents
/// touching an endpoint pick up the trapezoid end-weights. Along
/// solutions of the equations of motion the gradient vanishes to
/// discretization order, and in general it approximates the
/// Euler-Lagrange residual.
pub fn oracle_action_gradient(
    prob: &LagrangianProblem,
    path: &DiscretePath,
) -> Result<Vec<Vec<f64>>> {
    let chart = &prob.chart;
    let (m, n) = (chart.base_dim(), chart.fiber_rank());
    let nn = path.y.len() - 1;
    let h = path.h;
    let lag = |x: &[f64], y: &[f64]| -> Result<f64> {
        let mut flat = Vec::with_capacity(m + n);
        flat.extend_from_slice(x);
        flat.extend_from_slice(y);
        prob.lagrangian.scalar(&flat)
    };
    let weight = |i: usize| if i == 0 || i == nn { 0.5 } else { 1.0 };

    let mut grad = vec![vec![0.0; n]; nn - 3];
    for j in 2..nn - 1 {
        let c_at_j = chart.structure_at(&path.x[j])?;
        for d in 0..n {
            let eps = 1e-4;
            // Tail action after perturbing with eta = sign * eps * e_d at
            // node j. The fiber nodes j-1, j, j+1 change, so the base
            // increment over [j-2, j-1] already differs; restarting the
            // re-integration at node j-2 keeps that first perturbed
            // increment, and past j+1 the base deviation cancels back to
            // discretization order.
            let lo = j - 2;
            let tail = |sign: f64| -> Result<f64> {
                let mut acc = 0.0;
                let mut xc = path.x[lo].clone();
                let y_at = |i: usize| -> Vec<f64> {
                    let mut y = path.y[i].clone();
                    if i == j - 1 {
                        y[d] += sign * eps / (2.0 * h);
                    } else if i == j + 1 {
                        y[d] -= sign * eps / (2.0 * h);
                    } else if i == j {
                        for cc in 0..n {
                            let mut corr = 0.0;
                            for b in 0..n {
                                corr += c_at_j.get(b, d, cc) * path.y[j][b];
                            }
                            y[cc] += sign * eps * corr;
                        }
                    }
                    y
                };
                let mut yc = y_at(lo);
                acc += weight(lo) * lag(&xc, &yc)?;
                for i in lo..nn {
                    let ynext = y_at(i + 1);
                    xc = advance_base(chart, &xc, &yc, &ynext, h)?;
                    yc = ynext;
                    acc += weight(i + 1) * lag(&xc, &yc)?;
                }
                Ok(acc)
            };
            let plus = tail(1.0)?;
            let minus = tail(-1.0)?;
            grad[j - 2][d] = -(plus - minus) / (2.0 * eps);
        }
    }
    Ok(grad)
}

/// Equation-of-motion residuals along a path, with the fiber acceleration
/// from central differences, evaluated at the same nodes `j = 2..N-2` as
/// [`oracle_action_gradient`] so the two series align row by row.
pub fn path_el_residuals(
    prob: &LagrangianProblem,
    path: &DiscretePath,
) -> Result<Vec<Vec<f64>>> {
    let nn = path.y.len() - 1;
    let n = prob.chart.fiber_rank();
    let mut out = Vec::with_capacity(nn.saturating_sub(3));
    for j in 2..nn - 1 {
        let ydot: Vec<f64> = (0..n)
            .map(|d| (path.y[j + 1][d] - path.y[j - 1][d]) / (2.0 * path.h))
            .collect();
        let r = prob.el_residual(&path.x[j], &path.y[j], &ydot)?;
        out.push(r.as_slice().to_vec());
    }
    Ok(out)
}

/// Brute-force gradient of the second-order action on a tangent bundle.
///
/// The path is a base curve `x_0..x_N`; velocities and accelerations at
/// interior nodes come from central differences, and the action sums
/// `h * Lt(x_i, y_i, z_i)` over `i = 1..N-1`. Entry `[j-2][d]` is
/// `(1/h) dA/dx_{j,d}` for `j = 2..N-2` (the first and last two nodes are
/// clamped, fixing endpoint position and velocity); along solutions of the
/// fourth-order equations it vanishes to discretization order.
pub fn oracle_second_order_action_gradient(
    prob: &SecondOrderProblem,
    x_nodes: &[Vec<f64>],
    t_end: f64,
) -> Result<Vec<Vec<f64>>> {
    let chart = prob.chart();
    let (m, n) = (chart.base_dim(), chart.fiber_rank());
    if m != n {
        return Err(Error::Unsupported(
            "the second-order action oracle needs a tangent-bundle chart".into(),
        ));
    }
    let probe = x_nodes.first().map(Vec::as_slice).unwrap_or(&[]);
    let rho = chart.anchor_at(probe)?;
    if (rho - DMatrix::identity(m, m)).amax() > 1e-12
        || chart.structure_at(probe)?.max_antisymmetry_defect() > 0.0
    {
        return Err(Error::Unsupported(
            "the second-order action oracle needs a tangent-bundle chart".into(),
        ));
    }
    if x_nodes.len() < 7 {
        return Err(Error::Config(
            "a second-order path needs at least seven base nodes".into(),
        ));
    }
    if x_nodes.iter().any(|x| x.len() != m) {
        return Err(Error::Dimension(format!(
            "path nodes must have base dimension {m}"
        )));
    }
    let nn = x_nodes.len() - 1;
    let h = t_end / nn as f64;
    let term = |xs: &[Vec<f64>], i: usize| -> Result<f64> {
        let mut flat = Vec::with_capacity(3 * m);
        flat.extend_from_slice(&xs[i]);
        for d in 0..m {
            flat.push((xs[i + 1][d] - xs[i - 1][d]) / (2.0 * h));
        }
        for d in 0..m {
            flat.push((xs[i + 1][d] - 2.0 * xs[i][d] + xs[i - 1][d]) / (h * h));
        }
        prob.lagrangian().scalar(&flat)
    };
    let mut grad = vec![vec![0.0; m]; nn.saturating_sub(3)];
    let mut xs = x_nodes.to_vec();
    for j in 2..=nn - 2 {
        for d in 0..m {
            let eps = 1e-5 * xs[j][d].abs().max(1.0);
            let mut local = |sign: f64| -> Result<f64> {
                xs[j][d] = x_nodes[j][d] + sign * eps;
                let mut acc = 0.0;
                for i in [j - 1, j, j + 1] {
                    acc += term(&xs, i)?;
                }
                xs[j][d] = x_nodes[j][d];
                Ok(acc)
            };
            let plus = local(1.0)?;
            let minus = local(-1.0)?;
            grad[j - 2][d] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grad)
}
