//! Output activations: the ideal one-hot argmax, plain softmax, and the
//! differentiable power-normalised surrogate `e_k^α / Σ e_j^α` whose
//! sharpness α follows a staged schedule.

use crate::error::{Error, Result};

/// Offset added after softplus so power-normalisation never sees zero.
pub const POSITIVITY_EPS: f64 = 1e-6;

/// `H × W × K` per-pixel vectors, pixel-major (`(y * W + x) * K + k`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap {
    height: usize,
    width: usize,
    k: usize,
    values: Vec<f64>,
}

impl EmbeddingMap {
    pub fn new(height: usize, width: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("embedding needs at least one channel".into()));
        }
        if values.len() != height * width * k {
            return Err(Error::Shape {
                expected: format!("{height}x{width}x{k}"),
                got: format!("{} values", values.len()),
            });
        }
        Ok(EmbeddingMap {
            height,
            width,
            k,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, k: usize) -> Self {
        EmbeddingMap {
            height,
            width,
            k,
            values: vec![0.0; height * width * k],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.k)
    }

    /// Applies a per-pixel map producing another `K`-vector.
    pub fn map_pixels(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> EmbeddingMap {
        let mut values = Vec::with_capacity(self.values.len());
        for v in self.pixels() {
            values.extend(f(v));
        }
        EmbeddingMap {
            values,
            ..*self
        }
    }
}

/// Piecewise-constant sharpness schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSpec {
    /// `(first epoch, alpha)` pairs, epochs strictly increasing from 0.
    pub schedule: Vec<(usize, f64)>,
}

impl ActivationSpec {
    pub fn new(schedule: Vec<(usize, f64)>) -> Result<Self> {
        if schedule.is_empty() {
            return Err(Error::Config("alpha schedule is empty".into()));
        }
        if schedule[0].0 != 0 {
            return Err(Error::Config("alpha schedule must start at epoch 0".into()));
        }
        if schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config(
                "alpha schedule epochs must be strictly increasing".into(),
            ));
        }
        if let Some(&(_, a)) = schedule.iter().find(|(_, a)| !(*a >= 1.0) || !a.is_finite()) {
            return Err(Error::Config(format!("alpha {a} must be a finite value >= 1")));
        }
        Ok(ActivationSpec { schedule })
    }

    /// `alphas[i]` starts at epoch `i * every`.
    pub fn stepped(alphas: &[f64], every: usize) -> Result<Self> {
        Self::new(
            alphas
                .iter()
                .enumerate()
                .map(|(i, &a)| (i * every, a))
                .collect(),
        )
    }

    /// The published recipe: `[2, 2, 4, 6, 8]`, changing every 80 epochs.
    pub fn paper_default() -> Self {
        Self::stepped(&[2.0, 2.0, 4.0, 6.0, 8.0], 80).expect("valid default schedule")
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.schedule.iter().map(|&(_, a)| a).collect()
    }
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self::paper_default()
    }
}

/// Sharpness in force at `epoch`.
pub fn alpha_at(spec: &ActivationSpec, epoch: usize) -> f64 {
    spec.schedule
        .iter()
        .take_while(|(start, _)| *start <= epoch)
        .last()
        .map(|&(_, a)| a)
        .unwrap_or(spec.schedule[0].1)
}

/// Index of the maximum; ties go to the lowest index.
pub fn hard_argmax_index(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn hard_argmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    if !v.is_empty() {
        out[hard_argmax_index(v)] = 1.0;
    }
    out
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / s).collect()
}

/// `v_k^α / Σ_j v_j^α` for strictly positive `v`, evaluated in the log domain.
///
/// Panics on a non-positive entry: callers run [`positivity`] first.
pub fn param_argmax(v: &[f64], alpha: f64) -> Vec<f64> {
    assert!(
        v.iter().all(|&x| x > 0.0),
        "param_argmax requires strictly positive inputs, got {v:?}"
    );
    let logs: Vec<f64> = v.iter().map(|&x| alpha * x.ln()).collect();
    softmax(&logs)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(x) + 1e-6`, elementwise.
pub fn positivity(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| softplus(x) + POSITIVITY_EPS).collect()
}

/// Pulls `grad_out` (w.r.t. the output of [`param_argmax`]) back to its input.
///
/// With `p = param_argmax(s, α)`: `∂L/∂s_m = α p_m (g_m − Σ_k g_k p_k) / s_m`.
pub fn param_argmax_vjp(s: &[f64], p: &[f64], alpha: f64, grad_out: &[f64]) -> Vec<f64> {
    let dot: f64 = grad_out.iter().zip(p).map(|(g, p)| g * p).sum();
    s.iter()
        .zip(p)
        .zip(grad_out)
        .map(|((&s, &p), &g)| alpha * p * (g - dot) / s)
        .collect()
}

/// Pulls a gradient back through [`positivity`].
pub fn positivity_vjp(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter().zip(grad_out).map(|(&x, &g)| g * sigmoid(x)).collect()
}

/// `param_argmax(positivity(·), α)` over every pixel.
pub fn activate(raw: &EmbeddingMap, alpha: f64) -> EmbeddingMap {
    raw.map_pixels(|v| param_argmax(&positivity(v), alpha))
}

/// Gradient of a loss through [`activate`], given the loss gradient with
/// respect to the activated map.
pub fn activate_vjp(raw: &EmbeddingMap, alpha: f64, grad_out: &EmbeddingMap) -> EmbeddingMap {
    let k = raw.k;
    let mut values = Vec::with_capacity(raw.values.len());
    for (v, g) in raw.pixels().zip(grad_out.values.chunks_exact(k)) {
        let s = positivity(v);
        let p = param_argmax(&s, alpha);
        let gs = param_argmax_vjp(&s, &p, alpha, g);
        values.extend(positivity_vjp(v, &gs));
    }
    EmbeddingMap {
        values,
        ..*raw
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn hard_argmax_cases() {
        assert_eq!(hard_argmax(&[3.0, 1.0, 2.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(hard_argmax(&[1.0, 1.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(hard_argmax(&[0.0, 0.0, 0.0, 5.0]), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_cases() {
        assert!(close(&softmax(&[3.3; 4]), &[0.25; 4], 1e-15));
        assert!(close(
            &softmax(&[2f64.ln(), 0.0, 0.0, 0.0]),
            &[0.4, 0.2, 0.2, 0.2],
            1e-15
        ));
        let big = softmax(&[1000.0, 0.0, 0.0, 0.0]);
        assert!(big.iter().all(|x| x.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn param_argmax_cases() {
        let v = [2.0, 1.0, 1.0, 1.0];
        assert!(close(
            &param_argmax(&v, 2.0),
            &[4.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0],
            1e-12
        ));
        assert!(close(
            &param_argmax(&v, 8.0),
            &[256.0 / 259.0, 1.0 / 259.0, 1.0 / 259.0, 1.0 / 259.0],
            1e-12
        ));
        assert!(close(&param_argmax(&[0.7; 4], 6.0), &[0.25; 4], 1e-15));
    }

    #[test]
    #[should_panic(expected = "strictly positive")]
    fn param_argmax_rejects_zero() {
        param_argmax(&[1.0, 0.0], 2.0);
    }

    #[test]
    fn positivity_cases() {
        let z = positivity(&[0.0; 4]);
        assert!(z.iter().all(|&x| (x - (2f64.ln() + 1e-6)).abs() < 1e-15));
        let big = positivity(&[50.0]);
        assert!((big[0] - 50.000001).abs() < 1e-9);
        let o = positivity(&[-3.0, -1.0, 0.5, 4.0]);
        assert!(o.windows(2).all(|w| w[0] < w[1]));
        assert!(positivity(&[-800.0])[0] > 0.0);
    }

    #[test]
    fn schedule_lookup() {
        let s = ActivationSpec::paper_default();
        assert_eq!(alpha_at(&s, 0), 2.0);
        assert_eq!(alpha_at(&s, 79), 2.0);
        assert_eq!(alpha_at(&s, 160), 4.0);
        assert_eq!(alpha_at(&s, 250), 6.0);
        assert_eq!(alpha_at(&s, 599), 8.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(ActivationSpec::new(vec![]).is_err());
        assert!(ActivationSpec::new(vec![(0, 2.0), (0, 3.0)]).is_err());
        assert!(ActivationSpec::new(vec![(0, 0.5)]).is_err());
        assert!(ActivationSpec::new(vec![(5, 2.0)]).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let x = [0.3, -1.2, 2.0, 0.1];
        let g = [0.7, -0.4, 0.2, 1.1];
        let alpha = 6.0;
        let f = |x: &[f64]| -> f64 {
            param_argmax(&positivity(x), alpha)
                .iter()
                .zip(&g)
                .map(|(p, g)| p * g)
                .sum()
        };
        let s = positivity(&x);
        let p = param_argmax(&s, alpha);
        let an = positivity_vjp(&x, &param_argmax_vjp(&s, &p, alpha, &g));
        for i in 0..4 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - an[i]).abs() < 1e-7, "{i}: {num} vs {}", an[i]);
        }
    }

    proptest! {
        #[test]
        fn param_argmax_on_simplex_and_keeps_argmax(
            v in proptest::collection::vec(-6.0f64..6.0, 2..11),
            alpha in 1.0f64..12.0,
        ) {
            let s = positivity(&v);
            let p = param_argmax(&s, alpha);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.0 && x < 1.0 + 1e-12));
            prop_assert_eq!(hard_argmax_index(&p), hard_argmax_index(&v));
        }
    }
}
