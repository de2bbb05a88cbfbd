//! Noise predictors: the trait surface plus the fixed-architecture MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, CraftError, Result};
use crate::scalar::{all_finite, Scalar};

/// Largest period of the sinusoidal time embedding. Chosen around `2T` for
/// the default 50-step schedule so every component varies over the range.
pub const TIME_EMBED_MAX_PERIOD: f64 = 100.0;

/// Prompt condition `c_i^(j)`: `variant == 0` is the original prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition<F> {
    pub id: u64,
    pub variant: u32,
    pub class: usize,
    pub embedding: Vec<F>,
}

impl<F> Condition<F> {
    pub fn is_original(&self) -> bool {
        self.variant == 0
    }
}

/// Anything that predicts the injected noise from `(x_t, t, c)`.
pub trait NoisePredictor<F: Scalar>: Sync {
    fn data_dim(&self) -> usize;

    fn predict(&self, x_t: &[F], t: usize, cond: &[F]) -> Result<Vec<F>>;
}

/// A predictor with a flat parameter vector and an exact gradient of the
/// squared prediction error.
pub trait ParametricPredictor<F: Scalar>: NoisePredictor<F> + Clone + Send {
    fn params(&self) -> &[F];

    fn params_mut(&mut self) -> &mut [F];

    /// Adds `scale * d/dtheta ||eps_hat - target||^2` into `grad` and returns
    /// the squared error itself.
    fn accumulate_sq_err_grad(
        &self,
        x_t: &[F],
        t: usize,
        cond: &[F],
        target: &[F],
        scale: F,
        grad: &mut [F],
    ) -> Result<F>;

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// Layer sizes of the epsilon-predictor MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden: [usize; 2],
}

/// Offsets of each tensor inside the flat parameter vector, in storage order
/// `W1 (h1 x in), b1, W2 (h2 x h1), b2, W3 (d x h2), b3`, weights row-major.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    pub fn param_count(&self) -> usize {
        self.layout().end
    }

    fn layout(&self) -> Layout {
        let [h1, h2] = self.hidden;
        let w1 = 0;
        let b1 = w1 + h1 * self.input_dim();
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let w3 = b2 + h2;
        let b3 = w3 + self.data_dim * h2;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + self.data_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden.contains(&0) {
            return Err(CraftError::Domain(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of an integer timestep. Component `k` uses frequency
/// `P^(-floor(k/2) / ceil(dim/2))`, sine for even `k`, cosine for odd `k`.
pub fn time_embedding<F: Scalar>(t: usize, dim: usize) -> Vec<F> {
    let half = dim.div_ceil(2).max(1);
    let tf = F::from_usize_lossy(t);
    let log_period = F::lit(TIME_EMBED_MAX_PERIOD.ln());
    (0..dim)
        .map(|k| {
            let freq = (-log_period * F::from_usize_lossy(k / 2) / F::from_usize_lossy(half)).exp();
            if k % 2 == 0 {
                (tf * freq).sin()
            } else {
                (tf * freq).cos()
            }
        })
        .collect()
}

/// Weights of the two-hidden-layer tanh MLP `eps_theta(x_t, t, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    arch: Architecture,
    values: Vec<F>,
}

struct Activations<F> {
    input: Vec<F>,
    h1: Vec<F>,
    h2: Vec<F>,
    out: Vec<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            values: vec![F::zero(); arch.param_count()],
            arch,
        })
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let l = arch.layout();
        let [h1, h2] = arch.hidden;
        for (range, fan_in) in [
            (l.w1..l.b1, arch.input_dim()),
            (l.w2..l.b2, h1),
            (l.w3..l.b3, h2),
        ] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.values[range] {
                *v = F::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(p)
    }

    pub fn from_values(arch: Architecture, values: Vec<F>) -> Result<Self> {
        arch.validate()?;
        ensure_dim(arch.param_count(), values.len())?;
        if !all_finite(&values) {
            return Err(CraftError::Numeric("non-finite parameter".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    fn forward(&self, x_t: &[F], t: usize, cond: &[F]) -> Result<Activations<F>> {
        let a = &self.arch;
        ensure_dim(a.data_dim, x_t.len())?;
        ensure_dim(a.cond_dim, cond.len())?;
        let l = a.layout();
        let [n1, n2] = a.hidden;
        let n_in = a.input_dim();

        let mut input = Vec::with_capacity(n_in);
        input.extend_from_slice(x_t);
        input.extend(time_embedding::<F>(t, a.time_dim));
        input.extend_from_slice(cond);

        let v = &self.values;
        let h1 = dense(&v[l.w1..l.b1], &v[l.b1..l.w2], &input, n1, n_in, true);
        let h2 = dense(&v[l.w2..l.b2], &v[l.b2..l.w3], &h1, n2, n1, true);
        let out = dense(&v[l.w3..l.b3], &v[l.b3..l.end], &h2, a.data_dim, n2, false);
        if !all_finite(&out) || !all_finite(&h2) || !all_finite(&h1) {
            return Err(CraftError::Numeric(format!("non-finite activation at t={t}")));
        }
        Ok(Activations { input, h1, h2, out })
    }
}

fn dense<F: Scalar>(w: &[F], b: &[F], x: &[F], rows: usize, cols: usize, tanh: bool) -> Vec<F> {
    (0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            let z = row.iter().zip(x).fold(b[r], |acc, (&wi, &xi)| acc + wi * xi);
            if tanh {
                z.tanh()
            } else {
                z
            }
        })
        .collect()
}

impl<F: Scalar> NoisePredictor<F> for ModelParams<F> {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict(&self, x_t: &[F], t: usize, cond: &[F]) -> Result<Vec<F>> {
        Ok(self.forward(x_t, t, cond)?.out)
    }
}

impl<F: Scalar> ParametricPredictor<F> for ModelParams<F> {
    fn params(&self) -> &[F] {
        &self.values
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    fn accumulate_sq_err_grad(
        &self,
        x_t: &[F],
        t: usize,
        cond: &[F],
        target: &[F],
        scale: F,
        grad: &mut [F],
    ) -> Result<F> {
        ensure_dim(self.values.len(), grad.len())?;
        ensure_dim(self.arch.data_dim, target.len())?;
        let act = self.forward(x_t, t, cond)?;
        let l = self.arch.layout();
        let [n1, n2] = self.arch.hidden;
        let n_in = self.arch.input_dim();
        let d = self.arch.data_dim;
        let v = &self.values;

        let resid: Vec<F> = act.out.iter().zip(target).map(|(&o, &e)| o - e).collect();
        let sq = resid.iter().fold(F::zero(), |acc, &r| acc + r * r);
        if scale == F::zero() {
            return Ok(sq);
        }

        // d(scale * ||r||^2)/d out
        let two_s = F::lit(2.0) * scale;
        let d_out: Vec<F> = resid.iter().map(|&r| two_s * r).collect();

        let d_h2 = backprop_dense(
            grad,
            &v[l.w3..l.b3],
            (l.w3, l.b3),
            &d_out,
            &act.h2,
            d,
            n2,
        );
        let d_z2: Vec<F> = d_h2
            .iter()
            .zip(&act.h2)
            .map(|(&g, &h)| g * (F::one() - h * h))
            .collect();
        let d_h1 = backprop_dense(
            grad,
            &v[l.w2..l.b2],
            (l.w2, l.b2),
            &d_z2,
            &act.h1,
            n2,
            n1,
        );
        let d_z1: Vec<F> = d_h1
            .iter()
            .zip(&act.h1)
            .map(|(&g, &h)| g * (F::one() - h * h))
            .collect();
        backprop_dense(
            grad,
            &v[l.w1..l.b1],
            (l.w1, l.b1),
            &d_z1,
            &act.input,
            n1,
            n_in,
        );
        Ok(sq)
    }
}

/// Accumulates weight/bias gradients of `z = W x + b` and returns `W^T dz`.
fn backprop_dense<F: Scalar>(
    grad: &mut [F],
    w: &[F],
    (w_off, b_off): (usize, usize),
    dz: &[F],
    x: &[F],
    rows: usize,
    cols: usize,
) -> Vec<F> {
    let mut dx = vec![F::zero(); cols];
    for r in 0..rows {
        let g = dz[r];
        grad[b_off + r] = grad[b_off + r] + g;
        let row = r * cols;
        for c in 0..cols {
            grad[w_off + row + c] = grad[w_off + row + c] + g * x[c];
            dx[c] = dx[c] + w[row + c] * g;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn arch(d: usize, dt: usize, dc: usize, h1: usize, h2: usize) -> Architecture {
        Architecture {
            data_dim: d,
            time_dim: dt,
            cond_dim: dc,
            hidden: [h1, h2],
        }
    }

    #[test]
    fn param_count_matches_layout() {
        let a = arch(2, 4, 3, 5, 6);
        let n_in = 9;
        assert_eq!(a.param_count(), 5 * n_in + 5 + 6 * 5 + 6 + 2 * 6 + 2);
        assert_eq!(arch(1, 1, 1, 1, 5).param_count(), 20);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let p = ModelParams::<f64>::zeros(arch(2, 4, 3, 8, 8)).unwrap();
        let out = p.predict(&[1.0, -2.0], 7, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_two_unit_net() {
        // d=1, no time embedding, one condition input, two hidden units per layer.
        let a = arch(1, 0, 1, 2, 2);
        #[rustfmt::skip]
        let values = vec![
            0.5, -0.25,   // W1 row 0 (x, c)
            0.1, 0.3,     // W1 row 1
            0.05, -0.05,  // b1
            1.0, -1.0,    // W2 row 0
            0.5, 0.5,     // W2 row 1
            0.0, 0.2,     // b2
            2.0, -3.0,    // W3
            0.1,          // b3
        ];
        let p = ModelParams::from_values(a, values).unwrap();
        let (x, c) = (0.8f64, -0.4f64);
        let h1 = [
            (0.5 * x - 0.25 * c + 0.05).tanh(),
            (0.1 * x + 0.3 * c - 0.05).tanh(),
        ];
        let h2 = [
            (h1[0] - h1[1]).tanh(),
            (0.5 * h1[0] + 0.5 * h1[1] + 0.2).tanh(),
        ];
        let expected = 2.0 * h2[0] - 3.0 * h2[1] + 0.1;
        let got = p.predict(&[x], 3, &[c]).unwrap()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn unused_condition_dimension_is_inert() {
        let a = arch(2, 4, 3, 6, 6);
        let mut rng = rng_from_seed(9);
        let mut p = ModelParams::<f64>::init(a, &mut rng).unwrap();
        // zero the fan-out of condition input 2
        let col = a.data_dim + a.time_dim + 2;
        for r in 0..a.hidden[0] {
            p.params_mut()[r * a.input_dim() + col] = 0.0;
        }
        let base = p.predict(&[0.3, 0.1], 10, &[1.0, 0.0, 0.0]).unwrap();
        let moved = p.predict(&[0.3, 0.1], 10, &[1.0, 0.0, 5.0]).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn rejects_bad_dimensions_and_nonfinite() {
        let p = ModelParams::<f64>::zeros(arch(2, 2, 1, 3, 3)).unwrap();
        assert!(p.predict(&[1.0], 1, &[0.0]).is_err());
        assert!(p.predict(&[1.0, 2.0], 1, &[0.0, 1.0]).is_err());
        let mut bad = p.values().to_vec();
        bad[0] = f64::NAN;
        assert!(ModelParams::from_values(p.architecture(), bad).is_err());
        let mut huge = p.clone();
        let b3 = huge.num_params() - 1;
        huge.params_mut()[b3] = f64::INFINITY;
        assert!(matches!(huge.predict(&[0.0, 0.0], 1, &[0.0]), Err(CraftError::Numeric(_))));
    }

    #[test]
    fn time_embedding_shape() {
        let e: Vec<f64> = time_embedding(3, 5);
        assert_eq!(e.len(), 5);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[1] - 3f64.cos()).abs() < 1e-15);
    }
}
