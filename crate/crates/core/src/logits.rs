//! Per-token class grids: logits, perturbed logits and noise share one layout.

use crate::error::{Error, Result};

/// `height x width` tokens, each with a row of `classes` reals. Row-major by
/// token, then class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrid {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
}

/// Unnormalized log-probabilities `p_t` predicted for one scale.
pub type LogitsMap = ClassGrid;
/// `q_t = p_t + n_t`, constructed so that each token's argmax is its label.
pub type PerturbedLogits = ClassGrid;
/// Inverse Gumbel noise `n_t` for one scale.
pub type NoiseMap = ClassGrid;

impl ClassGrid {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::input("class grid needs at least one class"));
        }
        if values.len() != height * width * classes {
            return Err(Error::input(format!(
                "class grid {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                values.len()
            )));
        }
        Ok(ClassGrid {
            height,
            width,
            classes,
            values,
        })
    }

    pub fn from_rows(height: usize, width: usize, classes: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::input("class grid rows have inconsistent lengths"));
        }
        Self::new(height, width, classes, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.values[token * self.classes..(token + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.classes)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ClassGrid) -> bool {
        (self.height, self.width, self.classes) == (other.height, other.width, other.classes)
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ClassGrid) -> Result<ClassGrid> {
        if !self.same_shape(other) {
            return Err(Error::input("class grid shapes differ"));
        }
        Ok(ClassGrid {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            ..*self
        })
    }
}
