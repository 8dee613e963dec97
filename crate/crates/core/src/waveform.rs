//! Time-stamped sequences of unknown vectors with linear interpolation.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    t: Vec<f64>,
    values: Vec<Vec<f64>>,
}

/// `n_steps + 1` equispaced samples covering `[t0, t1]`, endpoints exact.
pub fn uniform_grid(t0: f64, t1: f64, n_steps: usize) -> Vec<f64> {
    (0..=n_steps)
        .map(|k| if k == n_steps { t1 } else { t0 + (t1 - t0) * k as f64 / n_steps as f64 })
        .collect()
}

impl Waveform {
    pub fn new(t: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if t.is_empty() || t.len() != values.len() {
            return Err(Error::GridMismatch(format!("{} times for {} samples", t.len(), values.len())));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::GridMismatch("time grid is not strictly increasing".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::GridMismatch("samples differ in dimension".into()));
        }
        Ok(Waveform { t, values })
    }

    /// Same vector at every time of `t`.
    pub fn constant(t: Vec<f64>, value: Vec<f64>) -> Result<Self> {
        let values = vec![value; t.len()];
        Waveform::new(t, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn start(&self) -> f64 {
        self.t[0]
    }

    pub fn end(&self) -> f64 {
        self.t[self.t.len() - 1]
    }

    pub fn last(&self) -> &[f64] {
        &self.values[self.values.len() - 1]
    }

    /// Piecewise linear interpolation; `t` must lie inside the grid up to a
    /// relative slack of 1e-12 of the span.
    pub fn at(&self, t: f64) -> Result<Vec<f64>> {
        let (t0, t1) = (self.start(), self.end());
        let slack = 1e-12 * (t1 - t0).abs().max(t1.abs());
        if !(t >= t0 - slack && t <= t1 + slack) {
            return Err(Error::OutOfRange { t, t0, t1 });
        }
        if self.t.len() == 1 {
            return Ok(self.values[0].clone());
        }
        let k = self.t.partition_point(|&s| s < t).clamp(1, self.t.len() - 1);
        let (ta, tb) = (self.t[k - 1], self.t[k]);
        let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        Ok(self.values[k - 1].iter().zip(&self.values[k]).map(|(a, b)| a + w * (b - a)).collect())
    }

    /// Appends samples of `other`, dropping its first sample when it repeats
    /// the current end time.
    pub fn extend(&mut self, other: &Waveform) -> Result<()> {
        let skip = usize::from((other.start() - self.end()).abs() <= 1e-12 * self.end().abs().max(1e-300));
        for k in skip..other.len() {
            if !(other.t[k] > self.end()) || other.values[k].len() != self.dim() {
                return Err(Error::GridMismatch("cannot append waveform".into()));
            }
            self.t.push(other.t[k]);
            self.values.push(other.values[k].clone());
        }
        Ok(())
    }
}
