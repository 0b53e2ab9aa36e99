//! Time-dependent vector fields with reverse-mode Jacobian access.
//!
//! Scores, generative drifts and inference drifts all implement
//! [`VectorField`]. The time argument is whatever clock the caller uses:
//! inference time `s` for scores and inference drifts, generative time `t`
//! for generative drifts.

use std::sync::Arc;

use crate::rng::{rademacher_vec, Rng};
use crate::stats::MeanStderr;

pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// Writes `J(x, t)^T v` into `out`.
    fn vjp_into(&self, x: &[f64], t: f64, v: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, t, &mut out);
        out
    }

    fn vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.vjp_into(x, t, v, &mut out);
        out
    }

    /// Row-major Jacobian, `J[i * d + j] = d out_i / d x_j`, from `d` vjp passes.
    fn jacobian(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim();
        let mut jac = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for i in 0..d {
            e[i] = 1.0;
            self.vjp_into(x, t, &e, &mut jac[i * d..(i + 1) * d]);
            e[i] = 0.0;
        }
        jac
    }

    /// Value and row-major Jacobian together; implementors with a shared
    /// forward pass override this.
    fn eval_and_jacobian(&self, x: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        (self.eval(x, t), self.jacobian(x, t))
    }

    /// Exact trace of the Jacobian.
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let d = self.dim();
        let mut e = vec![0.0; d];
        let mut row = vec![0.0; d];
        let mut tr = 0.0;
        for i in 0..d {
            e[i] = 1.0;
            self.vjp_into(x, t, &e, &mut row);
            tr += row[i];
            e[i] = 0.0;
        }
        tr
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (**self).eval_into(x, t, out)
    }
    fn vjp_into(&self, x: &[f64], t: f64, v: &[f64], out: &mut [f64]) {
        (**self).vjp_into(x, t, v, out)
    }
    fn eval_and_jacobian(&self, x: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        (**self).eval_and_jacobian(x, t)
    }
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        (**self).divergence(x, t)
    }
}

impl<T: VectorField + ?Sized> VectorField for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (**self).eval_into(x, t, out)
    }
    fn vjp_into(&self, x: &[f64], t: f64, v: &[f64], out: &mut [f64]) {
        (**self).vjp_into(x, t, v, out)
    }
    fn eval_and_jacobian(&self, x: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        (**self).eval_and_jacobian(x, t)
    }
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        (**self).divergence(x, t)
    }
}

/// How a divergence `tr J` is obtained inside an estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivMode {
    /// `d` vjp passes.
    #[default]
    Exact,
    /// Rademacher probes `v^T J v`.
    Hutchinson { probes: usize },
}

/// Hutchinson estimate of `tr J` with Rademacher probes, plus its standard error.
pub fn hutchinson<F: VectorField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    probes: usize,
    rng: &mut Rng,
) -> (f64, f64) {
    let d = field.dim();
    let mut jv = vec![0.0; d];
    let samples: Vec<f64> = (0..probes.max(1))
        .map(|_| {
            let v = rademacher_vec(rng, d);
            field.vjp_into(x, t, &v, &mut jv);
            v.iter().zip(&jv).map(|(a, b)| a * b).sum()
        })
        .collect();
    let m = MeanStderr::from_values(&samples);
    (m.mean, m.stderr)
}

/// Divergence under `mode`.
pub fn divergence_with<F: VectorField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    mode: DivMode,
    rng: &mut Rng,
) -> f64 {
    match mode {
        DivMode::Exact => field.divergence(x, t),
        DivMode::Hutchinson { probes } => hutchinson(field, x, t, probes, rng).0,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl VectorField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_into(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn vjp_into(&self, _x: &[f64], _t: f64, _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn divergence(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `slope(t) * x + offset`: isotropic affine fields with closed-form Jacobians.
#[derive(Clone)]
pub struct AffineField {
    dim: usize,
    slope: ScalarFn,
    offset: Vec<f64>,
}

impl AffineField {
    pub fn new(dim: usize, slope: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            dim,
            slope: Arc::new(slope),
            offset: vec![0.0; dim],
        }
    }

    /// `c * x` for every `t`.
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        Self::new(dim, move |_| c)
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        assert_eq!(offset.len(), self.dim);
        self.offset = offset;
        self
    }
}

impl std::fmt::Debug for AffineField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AffineField")
            .field("dim", &self.dim)
            .field("offset", &self.offset)
            .finish_non_exhaustive()
    }
}

impl VectorField for AffineField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let c = (self.slope)(t);
        for ((o, xi), b) in out.iter_mut().zip(x).zip(&self.offset) {
            *o = c * xi + b;
        }
    }
    fn vjp_into(&self, _x: &[f64], t: f64, v: &[f64], out: &mut [f64]) {
        let c = (self.slope)(t);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = c * vi;
        }
    }
    fn divergence(&self, _x: &[f64], t: f64) -> f64 {
        (self.slope)(t) * self.dim as f64
    }
}
