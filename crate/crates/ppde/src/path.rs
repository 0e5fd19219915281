use crate::error::{Error, Result};

/// A càdlàg path stored as values on a time grid, read back with
/// right-continuous step interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl GridPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidParameter("path needs matching, non-empty times and values".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("path times must increase strictly".into()));
        }
        Ok(Self { times, values })
    }

    /// Samples `f` on `n + 1` uniform points of `[0, horizon]`.
    pub fn from_fn(horizon: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let times: Vec<f64> = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
        let values = times.iter().map(|&t| f(t)).collect();
        Self { times, values }
    }

    pub fn constant(horizon: f64, value: f64) -> Self {
        Self { times: vec![0.0, horizon], values: vec![value, value] }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        self.values[k.saturating_sub(1)]
    }

    fn with_knot(&self, s: f64) -> Self {
        let mut out = self.clone();
        if !self.times.iter().any(|&x| x == s) && s > self.start() {
            let k = self.times.partition_point(|&x| x < s);
            let v = self.value_at(s);
            out.times.insert(k, s);
            out.values.insert(k, v);
        }
        out
    }

    /// Vertical bump `x + y·1_{[s, T]}`.
    pub fn bump(&self, s: f64, y: f64) -> Self {
        let mut out = self.with_knot(s);
        for (t, v) in out.times.iter().zip(out.values.iter_mut()) {
            if *t >= s {
                *v += y;
            }
        }
        out
    }

    /// Path stopped at `s`: `x(s ∧ ·)`.
    pub fn freeze(&self, s: f64) -> Self {
        let mut out = self.with_knot(s);
        let v = self.value_at(s);
        for (t, x) in out.times.iter().zip(out.values.iter_mut()) {
            if *t > s {
                *x = v;
            }
        }
        out
    }
}
