use serde::{Deserialize, Serialize};

/// Per-dimension min/max used to map actions affinely onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Output of [`ActionStats::normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Dimensions with `max - min` below tolerance; they map to 0.
    pub constant_dims: Vec<usize>,
}

const CONSTANT_TOL: f64 = 1e-12;

impl ActionStats {
    pub fn fit<'a, I>(rows: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut it = rows.into_iter();
        let first = it.next()?;
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for row in it {
            for (i, &v) in row.iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Some(Self { min, max })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    pub fn constant_dims(&self) -> Vec<usize> {
        (0..self.dims()).filter(|&i| self.max[i] - self.min[i] < CONSTANT_TOL).collect()
    }

    pub fn normalize(&self, x: &[f64]) -> Normalized {
        let values = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let span = self.max[i] - self.min[i];
                if span < CONSTANT_TOL {
                    0.0
                } else {
                    2.0 * (v - self.min[i]) / span - 1.0
                }
            })
            .collect();
        Normalized { values, constant_dims: self.constant_dims() }
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, &v)| {
                let span = self.max[i] - self.min[i];
                if span < CONSTANT_TOL {
                    self.min[i]
                } else {
                    (v + 1.0) * 0.5 * span + self.min[i]
                }
            })
            .collect()
    }
}
