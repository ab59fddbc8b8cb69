use std::ops::{Deref, Index};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real vector whose components are all finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: format!("component {i} is {}", data[i]),
                iterate: Some(data),
            });
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Squared Euclidean norm, accumulated left to right.
    pub fn norm_squared(&self) -> f64 {
        norm_squared(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &[f64]) -> Result<Self> {
        crate::error::check_dim(self.dim(), other.len())?;
        Self::new(
            self.0
                .iter()
                .zip(other)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &[f64]) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|a| a * factor).collect())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Self::new(data)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm_squared(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_squared(a).sqrt()
}

/// `‖a − b‖`.
pub fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d)
}
