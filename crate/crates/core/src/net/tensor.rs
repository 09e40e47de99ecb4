use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activations laid out as `[batch, channels, frames, joints]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        FeatureTensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(FeatureTensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut t = FeatureTensor::zeros(shape);
        let [b, c, tt, n] = shape;
        let mut k = 0;
        for ib in 0..b {
            for ic in 0..c {
                for it in 0..tt {
                    for jn in 0..n {
                        t.data[k] = f([ib, ic, it, jn]);
                        k += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn frames(&self) -> usize {
        self.shape[2]
    }

    pub fn joints(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, t: usize, n: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + t) * self.shape[3] + n
    }

    pub fn get(&self, b: usize, c: usize, t: usize, n: usize) -> f64 {
        self.data[self.offset(b, c, t, n)]
    }

    pub fn set(&mut self, b: usize, c: usize, t: usize, n: usize, v: f64) {
        let k = self.offset(b, c, t, n);
        self.data[k] = v;
    }

    /// The joint vector at `(b, c, t)`.
    pub fn joints_at(&self, b: usize, c: usize, t: usize) -> &[f64] {
        let k = self.offset(b, c, t, 0);
        &self.data[k..k + self.shape[3]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureTensor {
        FeatureTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[FeatureTensor]) -> Result<FeatureTensor> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let [_, c, t, n] = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut batch = 0;
        for p in parts {
            if p.shape[1..] != [c, t, n] {
                return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(FeatureTensor {
            shape: [batch, c, t, n],
            data,
        })
    }

    /// Reorders the joint axis so joint `i` moves to `perm[i]`.
    pub fn permute_joints(&self, perm: &[usize]) -> FeatureTensor {
        let mut out = FeatureTensor::zeros(self.shape);
        let [b, c, t, n] = self.shape;
        for ib in 0..b {
            for ic in 0..c {
                for it in 0..t {
                    for j in 0..n {
                        out.set(ib, ic, it, perm[j], self.get(ib, ic, it, j));
                    }
                }
            }
        }
        out
    }
}
