//! Low-rank adapters with per-direction gates.
//!
//! An adapter augments a frozen `d x k` base matrix `W0` with factors
//! `A (d x r)` and `B (r x k)`. A gate vector `m` in `[0,1]^r` scales each
//! rank-one direction `a_j b_j^T`, giving the filtered update `A diag(m) B`.
//! The layer output is `(W0 + alpha * A diag(m) B) x`, evaluated in factored
//! order so the dense update is only formed when someone asks for it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    w0: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    alpha: f64,
    rank: usize,
}

/// Dense `A diag(m) B` for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredUpdate {
    pub delta: Matrix,
}

impl AdapterLayer {
    pub fn new(w0: Matrix, a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let rank = a.cols();
        if rank == 0 {
            return Err(Error::Domain("adapter rank must be at least 1".into()));
        }
        if b.rows() != rank {
            return Err(Error::dim("adapter factors", a.shape(), b.shape()));
        }
        if a.rows() != w0.rows() || b.cols() != w0.cols() {
            return Err(Error::dim(
                "adapter vs base",
                (a.rows(), b.cols()),
                w0.shape(),
            ));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            w0,
            a,
            b,
            alpha,
            rank,
        })
    }

    /// Standard initialisation: `A` Gaussian with std `1/sqrt(d)`, `B` zero,
    /// so the initial update vanishes.
    pub fn init<R: Rng + ?Sized>(w0: Matrix, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let (d, k) = w0.shape();
        let a = Matrix::random_normal(d, rank, 1.0 / (d as f64).sqrt(), rng);
        let b = Matrix::zeros(rank, k);
        Self::new(w0, a, b, alpha)
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    /// Replaces both trainable factors, keeping the frozen base.
    pub fn set_factors(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::dim("set_factors", a.shape(), self.a.shape()));
        }
        self.a = a;
        self.b = b;
        Ok(())
    }

    /// Number of trainable entries in `A` and `B`.
    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    fn check_gate(&self, m: &[f64]) -> Result<()> {
        if m.len() != self.rank {
            return Err(Error::dim("gate", (self.rank, 1), (m.len(), 1)));
        }
        if let Some(bad) = m.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("gate entry {bad} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn filtered_update(&self, m: &[f64]) -> Result<FilteredUpdate> {
        self.check_gate(m)?;
        let scaled_b = self.scale_b_rows(m);
        Ok(FilteredUpdate {
            delta: self.a.matmul(&scaled_b)?,
        })
    }

    fn scale_b_rows(&self, m: &[f64]) -> Matrix {
        let mut scaled = self.b.clone();
        for (j, g) in m.iter().enumerate() {
            scaled.row_mut(j).iter_mut().for_each(|v| *v *= g);
        }
        scaled
    }

    /// `W0 x + alpha * A (diag(m) (B x))`.
    pub fn forward(&self, m: &[f64], x: &Matrix) -> Result<Matrix> {
        self.check_gate(m)?;
        if x.rows() != self.in_dim() {
            return Err(Error::dim("adapter forward", self.w0.shape(), x.shape()));
        }
        let bx = self.b.matmul(x)?;
        let mut gated = bx;
        for (j, g) in m.iter().enumerate() {
            gated.row_mut(j).iter_mut().for_each(|v| *v *= g);
        }
        let low_rank = self.a.matmul(&gated)?;
        let mut y = self.w0.matmul(x)?;
        y.axpy(self.alpha, &low_rank)?;
        Ok(y)
    }

    /// Folds an update into the base: `W0 + alpha * delta`.
    pub fn merge(&self, update: &FilteredUpdate) -> Result<Matrix> {
        if update.delta.shape() != self.w0.shape() {
            return Err(Error::dim("merge", self.w0.shape(), update.delta.shape()));
        }
        let mut merged = self.w0.clone();
        merged.axpy(self.alpha, &update.delta)?;
        Ok(merged)
    }
}

/// Tape handles for one adapter: `W0` is recorded as a constant.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w0: Var,
    pub a: Var,
    pub b: Var,
    pub alpha: f64,
}

impl AdapterVars {
    pub fn record(tape: &Tape, layer: &AdapterLayer) -> Result<Self> {
        Ok(Self {
            w0: tape.constant(layer.w0.clone())?,
            a: tape.leaf(layer.a.clone())?,
            b: tape.leaf(layer.b.clone())?,
            alpha: layer.alpha,
        })
    }

    /// `A diag(m) B` on the tape. `gate` is an `r x 1` node, clamped to `[0,1]`.
    pub fn filtered_update(&self, tape: &Tape, gate: Var) -> Result<Var> {
        let m = tape.clamp(gate, 0.0, 1.0)?;
        let dm = tape.diag(m)?;
        let gated_b = tape.matmul(dm, self.b)?;
        tape.matmul(self.a, gated_b)
    }

    /// Factored forward `W0 x + alpha * A (diag(m) (B x))`.
    pub fn forward(&self, tape: &Tape, gate: Var, x: Var) -> Result<Var> {
        let m = tape.clamp(gate, 0.0, 1.0)?;
        let dm = tape.diag(m)?;
        let bx = tape.matmul(self.b, x)?;
        let gated = tape.matmul(dm, bx)?;
        let low_rank = tape.matmul(self.a, gated)?;
        let base = tape.matmul(self.w0, x)?;
        let scaled = tape.scale(low_rank, self.alpha)?;
        tape.add(base, scaled)
    }

    /// Forward with a dense update already formed: `W0 x + alpha * delta x`.
    pub fn forward_dense(&self, tape: &Tape, delta: Var, x: Var) -> Result<Var> {
        let base = tape.matmul(self.w0, x)?;
        let upd = tape.matmul(delta, x)?;
        let scaled = tape.scale(upd, self.alpha)?;
        tape.add(base, scaled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(seed: u64, d: usize, k: usize, r: usize, alpha: f64) -> AdapterLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = Matrix::random_normal(d, k, 1.0, &mut rng);
        let a = Matrix::random_normal(d, r, 1.0, &mut rng);
        let b = Matrix::random_normal(r, k, 1.0, &mut rng);
        AdapterLayer::new(w0, a, b, alpha).unwrap()
    }

    /// Sum of gated rank-one outer products, entry by entry.
    fn rank_one_sum(layer: &AdapterLayer, m: &[f64]) -> Matrix {
        let (d, k) = layer.w0().shape();
        let mut out = Matrix::zeros(d, k);
        for (j, g) in m.iter().enumerate() {
            for i in 0..d {
                for c in 0..k {
                    out.set(
                        i,
                        c,
                        out.get(i, c) + g * layer.a.get(i, j) * layer.b.get(j, c),
                    );
                }
            }
        }
        out
    }

    #[test]
    fn zero_gate_gives_zero_update() {
        let layer = random_layer(1, 4, 5, 3, 2.0);
        let u = layer.filtered_update(&[0.0; 3]).unwrap();
        assert_eq!(u.delta, Matrix::zeros(4, 5));
    }

    #[test]
    fn open_gate_is_plain_lora() {
        let layer = random_layer(2, 4, 5, 3, 2.0);
        let u = layer.filtered_update(&[1.0; 3]).unwrap();
        assert_eq!(u.delta, layer.a.matmul(&layer.b).unwrap());
    }

    #[test]
    fn single_direction_matches_rank_one_expansion() {
        let layer = random_layer(3, 4, 5, 3, 2.0);
        let m = [1.0, 0.0, 0.0];
        let u = layer.filtered_update(&m).unwrap();
        assert!(u.delta.max_abs_diff(&rank_one_sum(&layer, &m)).unwrap() < 1e-14);
        let m = [0.3, 0.9, 0.5];
        let u = layer.filtered_update(&m).unwrap();
        assert!(u.delta.max_abs_diff(&rank_one_sum(&layer, &m)).unwrap() < 1e-14);
    }

    #[test]
    fn gate_errors() {
        let layer = random_layer(4, 3, 3, 2, 1.0);
        assert!(matches!(
            layer.filtered_update(&[1.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            layer.filtered_update(&[1.0, 1.2]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            layer.filtered_update(&[-0.1, 0.5]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn constructor_invariants() {
        let w0 = Matrix::zeros(3, 4);
        assert!(
            AdapterLayer::new(w0.clone(), Matrix::zeros(3, 2), Matrix::zeros(3, 4), 1.0).is_err()
        );
        assert!(
            AdapterLayer::new(w0.clone(), Matrix::zeros(3, 0), Matrix::zeros(0, 4), 1.0).is_err()
        );
        assert!(AdapterLayer::new(w0, Matrix::zeros(3, 2), Matrix::zeros(2, 4), 0.0).is_err());
    }

    #[test]
    fn zero_a_or_tiny_alpha_leaves_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = random_layer(5, 4, 3, 2, 3.0);
        let x = Matrix::random_normal(3, 6, 1.0, &mut rng);
        let base = layer.w0().matmul(&x).unwrap();
        layer
            .set_factors(Matrix::zeros(4, 2), layer.b.clone())
            .unwrap();
        let y = layer.forward(&[0.4, 1.0], &x).unwrap();
        assert_eq!(y, base);
        assert!(layer.forward(&[1.0, 1.0], &Matrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn forward_matches_factored_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = random_layer(6, 5, 4, 3, 16.0);
        let x = Matrix::random_normal(4, 7, 1.0, &mut rng);
        let m = [0.2, 0.7, 1.0];
        let bx = layer.b.matmul(&x).unwrap();
        let dbx = Matrix::diag(&m).matmul(&bx).unwrap();
        let oracle = layer
            .w0()
            .matmul(&x)
            .unwrap()
            .add(&layer.a.matmul(&dbx).unwrap().scale(16.0))
            .unwrap();
        assert!(
            layer
                .forward(&m, &x)
                .unwrap()
                .max_abs_diff(&oracle)
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn merge_is_linear_in_alpha() {
        let base = random_layer(7, 3, 3, 2, 1.0);
        let doubled =
            AdapterLayer::new(base.w0().clone(), base.a.clone(), base.b.clone(), 2.0).unwrap();
        let upd = base.filtered_update(&[0.5, 1.0]).unwrap();
        let diff = doubled
            .merge(&upd)
            .unwrap()
            .sub(&base.merge(&upd).unwrap())
            .unwrap();
        assert!(diff.max_abs_diff(&upd.delta).unwrap() < 1e-14);
        let zero = FilteredUpdate {
            delta: Matrix::zeros(3, 3),
        };
        assert_eq!(base.merge(&zero).unwrap(), *base.w0());
        let bad = FilteredUpdate {
            delta: Matrix::zeros(2, 3),
        };
        assert!(base.merge(&bad).is_err());
    }

    #[test]
    fn merged_matches_adapter_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = random_layer(8, 6, 5, 4, 16.0);
        let m = [0.1, 0.0, 0.8, 1.0];
        let merged = layer.merge(&layer.filtered_update(&m).unwrap()).unwrap();
        for _ in 0..50 {
            let x = Matrix::random_normal(5, 1, 1.0, &mut rng);
            let diff = merged
                .matmul(&x)
                .unwrap()
                .max_abs_diff(&layer.forward(&m, &x).unwrap())
                .unwrap();
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn w0_receives_no_gradient() {
        let layer = random_layer(9, 3, 3, 2, 2.0);
        let tape = Tape::new();
        let vars = AdapterVars::record(&tape, &layer).unwrap();
        let gate = tape.leaf(Matrix::column(&[0.5, 0.5])).unwrap();
        let x = tape.constant(Matrix::ones(3, 2)).unwrap();
        let y = vars.forward(&tape, gate, x).unwrap();
        let loss = tape.sum_squares(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(vars.w0).is_none());
        assert!(
            grads.get(vars.a).is_some() && grads.get(vars.b).is_some() && grads.get(gate).is_some()
        );
    }

    #[test]
    fn composed_forward_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layer = random_layer(10, 4, 3, 2, 2.0);
        let x = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let w0 = layer.w0().clone();
        let report = grad_check(
            |t, v| {
                let vars = AdapterVars {
                    w0: t.constant(w0.clone())?,
                    a: v[0],
                    b: v[1],
                    alpha: 2.0,
                };
                let x = t.constant(x.clone())?;
                let y = vars.forward(t, v[2], x)?;
                let h = t.tanh(y)?;
                t.sum_squares(h)
            },
            &[
                layer.a.clone(),
                layer.b.clone(),
                Matrix::column(&[0.35, 0.6]),
            ],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
