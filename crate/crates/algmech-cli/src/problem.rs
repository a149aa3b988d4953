//! Problem-file schema and conversion into core objects.
//!
//! A problem file is a single JSON document selecting a chart (builtin or
//! custom), the defining expressions, boundary data, solver settings, and
//! an execution mode. Schema violations are reported with a JSON-pointer
//! style path to the offending field. Fiber and control indices in the
//! file are 1-based, matching the variable names `y1..yn` and `u1..uk`.

use std::collections::BTreeMap;
use std::path::Path;

use algmech_core::algebroid::{n_pairs, pair_index, AlgebroidChart, Structure, C3};
use algmech_core::calculus::{expr, Field, Shape, Signature};
use algmech_core::error::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub algebroid: AlgebroidSpec,
    pub mode: Mode,
    /// Named constants available in every expression of the file.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// `L(x, y)` for first-order modes, `L(x, y, z)` for second-order ones.
    #[serde(default)]
    pub lagrangian: Option<String>,
    /// `H(x, p)` for simulate-hamilton.
    #[serde(default)]
    pub hamiltonian: Option<String>,
    /// `C(x, y, u)` for solve-ocp, one control per actuated direction.
    #[serde(default)]
    pub cost: Option<String>,
    /// Actuated fiber indices (1-based) for solve-ocp; all when absent.
    #[serde(default)]
    pub actuation: Option<Vec<usize>>,
    /// Velocity constraints `Phi(x, y)` for vakonomic mode.
    #[serde(default)]
    pub constraints: Option<Vec<String>>,
    /// Fiber indices (1-based) eliminated by the constraints.
    #[serde(default)]
    pub eliminated: Option<Vec<usize>>,
    #[serde(default)]
    pub boundary: Option<BoundaryFile>,
    #[serde(default)]
    pub solver: SolverFile,
    #[serde(default)]
    pub validation: ValidationFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Validate,
    SimulateEl,
    SimulateHamilton,
    SecondOrder,
    Vakonomic,
    SolveOcp,
    ConstraintChain,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Validate => "validate",
            Mode::SimulateEl => "simulate-el",
            Mode::SimulateHamilton => "simulate-hamilton",
            Mode::SecondOrder => "second-order",
            Mode::Vakonomic => "vakonomic",
            Mode::SolveOcp => "solve-ocp",
            Mode::ConstraintChain => "constraint-chain",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum AlgebroidSpec {
    Builtin(BuiltinSpec),
    Custom(CustomSpec),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSpec {
    pub m: usize,
    pub n: usize,
    /// Anchor matrix `rho^i_A`, row i, column A, as expressions in
    /// `x1..xm` and parameters.
    pub rho: Vec<Vec<String>>,
    /// Sparse structure functions `C^C_{AB}`.
    #[serde(default, rename = "C")]
    pub c: Vec<CEntry>,
    /// With the default `true`, entries require `A < B` and the mirrored
    /// values are implied; `false` stores entries literally so that
    /// deliberately broken structures can be fed to validation.
    #[serde(default = "default_true")]
    pub antisymmetrize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CEntry {
    #[serde(rename = "A")]
    pub a: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "C_index")]
    pub c_index: usize,
    pub expr: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryFile {
    #[serde(default)]
    pub x0: Vec<f64>,
    #[serde(default)]
    pub y0: Vec<f64>,
    #[serde(default)]
    pub z0: Option<Vec<f64>>,
    /// Initial momenta: full for initial-value runs, eliminated block for
    /// vakonomic mode.
    #[serde(default)]
    pub p0: Option<Vec<f64>>,
    /// Initial second-order momenta (unactuated block in reduced runs).
    #[serde(default)]
    pub pbar0: Option<Vec<f64>>,
    #[serde(default, rename = "xT")]
    pub x_end: Option<Vec<f64>>,
    #[serde(default, rename = "yT")]
    pub y_end: Option<Vec<f64>>,
    #[serde(default, rename = "zT")]
    pub z_end: Option<Vec<f64>>,
    #[serde(rename = "T", default = "default_horizon")]
    pub t_end: f64,
}

fn default_horizon() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Rk4,
    Rk45,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverFile {
    pub method: MethodName,
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
    pub newton_tol: f64,
    pub max_iter: usize,
    pub segments: usize,
}

impl Default for SolverFile {
    fn default() -> SolverFile {
        SolverFile {
            method: MethodName::Rk4,
            h: 1e-3,
            rtol: 1e-8,
            atol: 1e-10,
            newton_tol: 1e-9,
            max_iter: 40,
            segments: 1,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationFile {
    pub tol: f64,
    pub samples: usize,
    /// Per-base-coordinate sampling intervals; `[-1, 1]^m` when absent.
    pub sample_box: Option<Vec<[f64; 2]>>,
}

impl Default for ValidationFile {
    fn default() -> ValidationFile {
        ValidationFile {
            tol: 1e-8,
            samples: 20,
            sample_box: None,
        }
    }
}

pub fn load(path: &Path) -> Result<ProblemFile> {
    let text = std::fs::read_to_string(path)?;
    parse_problem(&text)
}

pub fn parse_problem(text: &str) -> Result<ProblemFile> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::Validation(format!("problem file at `{}`: {}", pointer(e.path()), e.inner())))
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Map { key } => out.push_str(key),
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Schema violations found after deserialization, tagged with a pointer.
fn at(pointer: &str, msg: impl std::fmt::Display) -> Error {
    Error::Validation(format!("problem file at `{pointer}`: {msg}"))
}

/// Re-tags expression errors with the field they came from.
fn locate(pointer: &str, e: Error) -> Error {
    match e {
        Error::Parse { .. } | Error::UnknownIdentifier { .. } => at(pointer, e),
        other => other,
    }
}

impl ProblemFile {
    pub fn chart(&self) -> Result<AlgebroidChart> {
        build_chart(&self.algebroid, &self.params)
    }

    /// Signature params from the file-level constant map.
    pub fn param_list(&self) -> Vec<(&str, f64)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v)).collect()
    }

    /// Parses a scalar expression over the given groups with the file's
    /// parameters in scope.
    pub fn scalar_field(
        &self,
        source: &str,
        groups: &[(&str, usize)],
        pointer: &str,
    ) -> Result<Field> {
        let sig = Signature::new(groups)?.with_params(&self.param_list())?;
        Field::parse(sig, Shape::Scalar, &[source]).map_err(|e| locate(pointer, e))
    }

    pub fn required<'a, T>(&self, field: &'a Option<T>, pointer: &str, what: &str) -> Result<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| at(pointer, format!("{what} is required for mode {}", self.mode.name())))
    }

    pub fn boundary(&self) -> Result<&BoundaryFile> {
        self.boundary
            .as_ref()
            .ok_or_else(|| at("/boundary", format!("boundary data is required for mode {}", self.mode.name())))
    }
}

impl BoundaryFile {
    /// A required block with an exact length.
    pub fn block<'a>(&self, v: &'a [f64], want: usize, pointer: &str) -> Result<&'a [f64]> {
        if v.len() != want {
            return Err(at(pointer, format!("expected {want} entries, got {}", v.len())));
        }
        Ok(v)
    }

    /// An optional block with an exact length, falling back to zeros.
    pub fn block_or_zeros(
        &self,
        v: &Option<Vec<f64>>,
        want: usize,
        pointer: &str,
    ) -> Result<Vec<f64>> {
        match v {
            Some(v) => Ok(self.block(v, want, pointer)?.to_vec()),
            None => Ok(vec![0.0; want]),
        }
    }

    pub fn horizon(&self) -> Result<f64> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(at("/boundary/T", format!("horizon must be positive, got {}", self.t_end)));
        }
        Ok(self.t_end)
    }
}

/// Converts a 1-based strictly increasing index list into 0-based form.
pub fn one_based(list: &[usize], n: usize, pointer: &str) -> Result<Vec<usize>> {
    for (i, v) in list.iter().enumerate() {
        if *v == 0 || *v > n {
            return Err(at(&format!("{pointer}/{i}"), format!("index {v} outside 1..={n}")));
        }
        if i > 0 && list[i - 1] >= *v {
            return Err(at(pointer, "indices must be strictly increasing"));
        }
    }
    Ok(list.iter().map(|v| v - 1).collect())
}

fn int_param(params: &BTreeMap<String, f64>, key: &str, pointer: &str) -> Result<usize> {
    let v = *params
        .get(key)
        .ok_or_else(|| at(pointer, format!("missing integer parameter `{key}`")))?;
    if v.fract() != 0.0 || !(0.0..=64.0).contains(&v) {
        return Err(at(pointer, format!("`{key}` must be a small non-negative integer, got {v}")));
    }
    Ok(v as usize)
}

fn real_param(params: &BTreeMap<String, f64>, key: &str, pointer: &str) -> Result<f64> {
    params
        .get(key)
        .copied()
        .ok_or_else(|| at(pointer, format!("missing parameter `{key}`")))
}

pub fn build_chart(spec: &AlgebroidSpec, params: &BTreeMap<String, f64>) -> Result<AlgebroidChart> {
    match spec {
        AlgebroidSpec::Builtin(b) => {
            let ptr = "/algebroid/builtin/params";
            match b.name.as_str() {
                "tangent_bundle" => Ok(AlgebroidChart::tangent_bundle(int_param(&b.params, "m", ptr)?)),
                "so3" => Ok(AlgebroidChart::so3()),
                "se2" => Ok(AlgebroidChart::se2()),
                "abelian" => {
                    let n = int_param(&b.params, "n", ptr)?;
                    AlgebroidChart::lie_algebra(&format!("abelian({n})"), &C3::zeros(n))
                }
                "elroy_beanie" => AlgebroidChart::elroy_beanie(
                    real_param(&b.params, "mass", ptr)?,
                    real_param(&b.params, "I1", ptr)?,
                    real_param(&b.params, "I2", ptr)?,
                ),
                other => Err(at(
                    "/algebroid/builtin/name",
                    format!(
                        "unknown builtin `{other}`; available: tangent_bundle, so3, se2, abelian, elroy_beanie"
                    ),
                )),
            }
        }
        AlgebroidSpec::Custom(c) => build_custom(c, params),
    }
}

fn build_custom(c: &CustomSpec, params: &BTreeMap<String, f64>) -> Result<AlgebroidChart> {
    let (m, n) = (c.m, c.n);
    let plist: Vec<(&str, f64)> = params.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let sig = Signature::new(&[("x", m)])?.with_params(&plist)?;

    if c.rho.len() != m || c.rho.iter().any(|row| row.len() != n) {
        return Err(at(
            "/algebroid/custom/rho",
            format!("anchor must be an {m} x {n} matrix of expressions"),
        ));
    }
    let rho_flat: Vec<&str> = c.rho.iter().flatten().map(String::as_str).collect();
    let anchor = Field::parse(sig.clone(), Shape::Matrix(m, n), &rho_flat)
        .map_err(|e| locate("/algebroid/custom/rho", e))?;

    let structure = if c.antisymmetrize {
        let mut entries = vec![expr::num(0.0); n_pairs(n) * n];
        let mut seen = vec![false; n_pairs(n) * n];
        for (i, e) in c.c.iter().enumerate() {
            let ptr = format!("/algebroid/custom/C/{i}");
            let (a, b, cc) = check_entry_indices(e, n, &ptr)?;
            if a >= b {
                return Err(at(
                    &ptr,
                    "entries require A < B (the mirrored value is implied); \
                     set antisymmetrize to false to store raw entries",
                ));
            }
            let idx = pair_index(a, b, n) * n + cc;
            if seen[idx] {
                return Err(at(&ptr, "duplicate entry for this (A, B, C_index)"));
            }
            seen[idx] = true;
            entries[idx] = expr::parse(&e.expr, &sig).map_err(|err| locate(&ptr, err))?;
        }
        Structure::Canonical(Field::from_exprs(
            sig,
            Shape::Vector(n_pairs(n) * n),
            entries,
        )?)
    } else {
        let mut entries = vec![expr::num(0.0); n * n * n];
        let mut seen = vec![false; n * n * n];
        for (i, e) in c.c.iter().enumerate() {
            let ptr = format!("/algebroid/custom/C/{i}");
            let (a, b, cc) = check_entry_indices(e, n, &ptr)?;
            let idx = (a * n + b) * n + cc;
            if seen[idx] {
                return Err(at(&ptr, "duplicate entry for this (A, B, C_index)"));
            }
            seen[idx] = true;
            entries[idx] = expr::parse(&e.expr, &sig).map_err(|err| locate(&ptr, err))?;
        }
        Structure::Raw(Field::from_exprs(sig, Shape::Array3(n, n, n), entries)?)
    };
    AlgebroidChart::custom("custom", m, n, anchor, structure)
}

fn check_entry_indices(e: &CEntry, n: usize, ptr: &str) -> Result<(usize, usize, usize)> {
    for (what, v) in [("A", e.a), ("B", e.b), ("C_index", e.c_index)] {
        if v == 0 || v > n {
            return Err(at(ptr, format!("{what} = {v} outside 1..={n}")));
        }
    }
    Ok((e.a - 1, e.b - 1, e.c_index - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_builtin_file_parses() {
        let pf = parse_problem(
            r#"{
                "algebroid": {"builtin": {"name": "so3"}},
                "mode": "validate"
            }"#,
        )
        .unwrap();
        assert_eq!(pf.mode, Mode::Validate);
        let chart = pf.chart().unwrap();
        assert_eq!(chart.fiber_rank(), 3);
        assert_eq!(pf.solver.h, 1e-3);
        assert_eq!(pf.validation.samples, 20);
    }

    #[test]
    fn unknown_field_is_rejected_with_pointer() {
        let err = parse_problem(
            r#"{
                "algebroid": {"builtin": {"name": "so3"}},
                "mode": "validate",
                "lagrangain": "0.5*y1^2"
            }"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lagrangain"), "{msg}");
    }

    #[test]
    fn custom_chart_entry_with_reversed_pair_is_rejected() {
        let err = parse_problem(
            r#"{
                "algebroid": {"custom": {
                    "m": 0, "n": 3,
                    "rho": [],
                    "C": [{"A": 2, "B": 1, "C_index": 3, "expr": "1"}]
                }},
                "mode": "validate"
            }"#,
        )
        .unwrap()
        .chart()
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/algebroid/custom/C/0"), "{msg}");
        assert!(msg.contains("A < B"), "{msg}");
    }

    #[test]
    fn raw_structure_admits_asymmetric_entries() {
        let pf = parse_problem(
            r#"{
                "algebroid": {"custom": {
                    "m": 0, "n": 3,
                    "rho": [],
                    "antisymmetrize": false,
                    "C": [
                        {"A": 1, "B": 2, "C_index": 3, "expr": "1"},
                        {"A": 2, "B": 1, "C_index": 3, "expr": "-1.001"}
                    ]
                }},
                "mode": "validate"
            }"#,
        )
        .unwrap();
        let chart = pf.chart().unwrap();
        let c = chart.structure_at(&[]).unwrap();
        assert!(c.max_antisymmetry_defect() > 1e-4);
    }

    #[test]
    fn custom_chart_with_parameters_in_anchor() {
        let pf = parse_problem(
            r#"{
                "algebroid": {"custom": {
                    "m": 1, "n": 1,
                    "rho": [["scale * x1"]]
                }},
                "params": {"scale": 2.5},
                "mode": "validate"
            }"#,
        )
        .unwrap();
        let chart = pf.chart().unwrap();
        let rho = chart.anchor_at(&[2.0]).unwrap();
        assert_eq!(rho[(0, 0)], 5.0);
    }

    #[test]
    fn one_based_index_lists_are_checked() {
        assert_eq!(one_based(&[1, 3], 4, "/actuation").unwrap(), vec![0, 2]);
        assert!(one_based(&[0], 4, "/actuation").is_err());
        assert!(one_based(&[2, 2], 4, "/actuation").is_err());
        assert!(one_based(&[5], 4, "/actuation").is_err());
    }

    #[test]
    fn builtin_params_are_validated() {
        let pf = parse_problem(
            r#"{
                "algebroid": {"builtin": {"name": "tangent_bundle", "params": {"m": 2.5}}},
                "mode": "validate"
            }"#,
        )
        .unwrap();
        let msg = pf.chart().unwrap_err().to_string();
        assert!(msg.contains("non-negative integer"), "{msg}");
    }
}
