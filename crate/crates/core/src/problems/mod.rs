//! Synthetic bilevel instances with closed-form ground truth, and the problem
//! JSON format that makes them replayable.

mod p1;
mod p2;
mod p3;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use p1::P1;
pub use p2::{P2Matrices, P2, P2_SINGULAR_RANGE};
pub use p3::{P3, P3_MU_MARGIN, P3_SCAN_HALF_WIDTH};

use crate::error::{Error, Result};
use crate::oracle::{BilevelProblem, ProblemConstants};

pub const PROBLEM_IDS: [&str; 3] = ["p1", "p2", "p3"];

pub const P2_DEFAULT_DX: usize = 3;
pub const P2_DEFAULT_DY: usize = 5;
pub const P2_DEFAULT_RANK: usize = 3;
pub const DEFAULT_SEED: u64 = 7;

pub fn make_p1() -> P1 {
    P1::new()
}

pub fn make_p2(d_x: usize, d_y: usize, rank: usize, seed: u64) -> Result<P2> {
    P2::generate(d_x, d_y, rank, seed)
}

pub fn make_p3_nonconvex(seed: u64) -> P3 {
    P3::new(seed)
}

/// Serializable description of a problem instance.
///
/// Field order is fixed: `id`, `params`, `matrices`, `constants`, `box`.
/// Matrices are stored as arrays of rows; vectors as a single row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub id: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(default)]
    pub matrices: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ProblemConstants>,
    #[serde(rename = "box", default)]
    pub bounds: Vec<[f64; 2]>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().cloned().collect())
        .collect()
}

fn vector_row(v: &DVector<f64>) -> Vec<Vec<f64>> {
    vec![v.iter().cloned().collect()]
}

fn rows_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!(
            "matrix {name} must be a non-empty rectangular array"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "matrix {name} has non-finite entries"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

fn rows_vector(name: &str, rows: &[Vec<f64>]) -> Result<DVector<f64>> {
    match rows {
        [row] if !row.is_empty() && row.iter().all(|v| v.is_finite()) => {
            Ok(DVector::from_column_slice(row))
        }
        _ => Err(Error::Format(format!(
            "vector {name} must be a single non-empty finite row"
        ))),
    }
}

impl ProblemSpec {
    /// Spec for a built-in id with default parameters.
    pub fn builtin(id: &str) -> Result<Self> {
        Self::builtin_seeded(id, DEFAULT_SEED)
    }

    /// Spec for a built-in id with default dimensions and the given seed.
    pub fn builtin_seeded(id: &str, seed: u64) -> Result<Self> {
        match id {
            "p1" => Ok(Self::from_p1(&P1::new())),
            "p2" => {
                let p = make_p2(P2_DEFAULT_DX, P2_DEFAULT_DY, P2_DEFAULT_RANK, seed)?;
                Ok(Self::from_p2(&p, seed))
            }
            "p3" => Ok(Self::from_p3(&P3::new(seed), seed)),
            other => Err(Error::Argument(format!(
                "unknown problem id {other:?}; known ids: {}",
                PROBLEM_IDS.join(", ")
            ))),
        }
    }

    pub fn from_p1(p: &P1) -> Self {
        Self {
            id: "p1".into(),
            params: BTreeMap::new(),
            matrices: BTreeMap::new(),
            constants: p.constants().cloned(),
            bounds: p1::P1_BOX.to_vec(),
        }
    }

    pub fn from_p2(p: &P2, seed: u64) -> Self {
        let m = p.matrices();
        let mut params = BTreeMap::new();
        params.insert("d_x".into(), Value::from(p.dim_x() as u64));
        params.insert("d_y".into(), Value::from(p.dim_y() as u64));
        params.insert("rank".into(), Value::from(p.rank() as u64));
        params.insert("seed".into(), Value::from(seed));
        let mut matrices = BTreeMap::new();
        matrices.insert("A".into(), matrix_rows(&m.a));
        matrices.insert("B".into(), matrix_rows(&m.b_mat));
        matrices.insert("b".into(), vector_row(&m.b_vec));
        matrices.insert("y_bar".into(), vector_row(&m.y_bar));
        matrices.insert("x_bar".into(), vector_row(&m.x_bar));
        let w = p2::P2_BOX_HALF_WIDTH;
        Self {
            id: "p2".into(),
            params,
            matrices,
            constants: p.constants().cloned(),
            bounds: vec![[-w, w]; p.dim_x() + p.dim_y()],
        }
    }

    pub fn from_p3(p: &P3, seed: u64) -> Self {
        let mut params = BTreeMap::new();
        params.insert("seed".into(), Value::from(seed));
        Self {
            id: "p3".into(),
            params,
            matrices: BTreeMap::new(),
            constants: p.constants().cloned(),
            bounds: p3::P3_BOX.to_vec(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        if let Some(c) = &spec.constants {
            c.validate()?;
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Resolves a CLI argument: a built-in id or a path to a problem JSON file.
    pub fn resolve(arg: &str, seed: u64) -> Result<Self> {
        if PROBLEM_IDS.contains(&arg) {
            return Self::builtin_seeded(arg, seed);
        }
        let path = Path::new(arg);
        if path.extension().is_some_and(|e| e == "json") || path.exists() {
            if !path.exists() {
                return Err(Error::Argument(format!(
                    "problem file {arg} does not exist"
                )));
            }
            return Self::load(path);
        }
        Self::builtin_seeded(arg, seed)
    }

    pub fn param_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| Error::Format(format!("param {key} must be a finite number"))),
        }
    }

    pub fn param_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| Error::Format(format!("param {key} must be a nonnegative integer"))),
        }
    }

    fn matrix(&self, name: &str) -> Result<&Vec<Vec<f64>>> {
        self.matrices
            .get(name)
            .ok_or_else(|| Error::Format(format!("problem {} is missing matrix {name}", self.id)))
    }

    /// Default outer starting point for the instance.
    pub fn default_x0(&self) -> Result<Vec<f64>> {
        let dim = self.dim_x()?;
        let fill = match self.param_f64("x0")? {
            Some(v) => v,
            None => match self.id.as_str() {
                "p1" | "p3" => 5.0,
                _ => 2.0,
            },
        };
        Ok(vec![fill; dim])
    }

    pub fn dim_x(&self) -> Result<usize> {
        match self.id.as_str() {
            "p1" | "p3" => Ok(1),
            "p2" => Ok(self.matrix("B")?.first().map_or(0, Vec::len)),
            other => Err(Error::Format(format!("unknown problem id {other:?}"))),
        }
    }

    pub fn instantiate(&self) -> Result<Box<dyn BilevelProblem>> {
        let base: Box<dyn BilevelProblem> = match self.id.as_str() {
            "p1" => Box::new(P1::with_constants(
                self.constants
                    .clone()
                    .unwrap_or_else(P1::declared_constants),
            )),
            "p2" => {
                let m = P2Matrices {
                    a: rows_matrix("A", self.matrix("A")?)?,
                    b_mat: rows_matrix("B", self.matrix("B")?)?,
                    b_vec: rows_vector("b", self.matrix("b")?)?,
                    y_bar: rows_vector("y_bar", self.matrix("y_bar")?)?,
                    x_bar: rows_vector("x_bar", self.matrix("x_bar")?)?,
                };
                let rank = self
                    .param_u64("rank")?
                    .ok_or_else(|| Error::Format("p2 requires params.rank".into()))?
                    as usize;
                Box::new(P2::from_matrices(m, rank, self.constants.clone())?)
            }
            "p3" => {
                let seed = self.param_u64("seed")?.unwrap_or(DEFAULT_SEED);
                let constants = self
                    .constants
                    .clone()
                    .unwrap_or_else(|| P3::estimate_constants(seed));
                Box::new(P3::with_constants(constants))
            }
            other => {
                return Err(Error::Argument(format!(
                    "unknown problem id {other:?}; known ids: {}",
                    PROBLEM_IDS.join(", ")
                )))
            }
        };
        if let Some(c) = base.constants() {
            c.validate()?;
        }
        if !self.bounds.is_empty() {
            let expected = base.dim_x() + base.dim_y();
            if self.bounds.len() != expected || self.bounds.iter().any(|[lo, hi]| !(lo <= hi)) {
                return Err(Error::Format(format!(
                    "box must list {expected} [lo, hi] pairs"
                )));
            }
        }
        match self.param_f64("gradient_scale")? {
            Some(scale) if scale != 1.0 => Ok(Box::new(GradientScaled { inner: base, scale })),
            _ => Ok(base),
        }
    }
}

/// Fault-injection wrapper that multiplies every analytic gradient by `scale`
/// while leaving values untouched.
pub struct GradientScaled {
    pub inner: Box<dyn BilevelProblem>,
    pub scale: f64,
}

impl GradientScaled {
    fn scaled(&self, v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|c| c * self.scale).collect()
    }
}

impl BilevelProblem for GradientScaled {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }
    fn dim_y(&self) -> usize {
        self.inner.dim_y()
    }
    fn f_value(&self, x: &[f64], y: &[f64]) -> f64 {
        self.inner.f_value(x, y)
    }
    fn grad_x_f(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.scaled(self.inner.grad_x_f(x, y))
    }
    fn grad_y_f(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.scaled(self.inner.grad_y_f(x, y))
    }
    fn g_value(&self, x: &[f64], y: &[f64]) -> f64 {
        self.inner.g_value(x, y)
    }
    fn grad_x_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.scaled(self.inner.grad_x_g(x, y))
    }
    fn grad_y_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.scaled(self.inner.grad_y_g(x, y))
    }
    fn constants(&self) -> Option<&ProblemConstants> {
        self.inner.constants()
    }
    fn hess_yy_g(&self, x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        self.inner.hess_yy_g(x, y)
    }
    fn hess_xy_g(&self, x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        self.inner.hess_xy_g(x, y)
    }
    fn phi(&self, x: &[f64]) -> Option<f64> {
        self.inner.phi(x)
    }
    fn grad_phi(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.inner.grad_phi(x)
    }
    fn y_star(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.inner.y_star(x)
    }
    fn y_sigma_star(&self, x: &[f64], sigma: f64) -> Option<Vec<f64>> {
        self.inner.y_sigma_star(x, sigma)
    }
    fn lower_set_distance(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        self.inner.lower_set_distance(x, y)
    }
    fn penalty_set_distance(&self, x: &[f64], sigma: f64, y: &[f64]) -> Option<f64> {
        self.inner.penalty_set_distance(x, sigma, y)
    }
}
