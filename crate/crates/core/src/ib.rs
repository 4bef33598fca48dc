//! Variational information-bottleneck gates.
//!
//! Each adapter's gate vector is drawn from a learned posterior and pulled
//! toward a fixed prior by a KL penalty. Two parameterisations:
//!
//! * `Gaussian`: `q = N(mu, sigma^2 I)` against `N(0, sigma^2 I)`, whose KL is
//!   the L2 penalty `|mu|^2 / (2 sigma^2)`. Samples are clamped into `[0,1]`.
//! * `Bernoulli`: `mu` holds logits; samples use the binary-concrete
//!   relaxation `sigmoid((logit + g1 - g0) / tau)` with Gumbel noise, and the
//!   KL is taken against a `Bernoulli(prior_p)` prior.
//!
//! Sampling is split into drawing noise and applying it, so a caller can
//! freeze the noise and differentiate the gate pathwise.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_PRIOR_P: f64 = 0.5;

/// Relaxed-Bernoulli pre-activations are clipped here so samples stay
/// strictly inside (0, 1) in double precision.
const LOGIT_CLIP: f64 = 36.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Gaussian,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub mode: GateMode,
    /// Posterior mean (Gaussian) or logits (Bernoulli).
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub tau: f64,
    pub beta: f64,
    pub prior_p: f64,
}

/// Frozen noise for one gate draw: `eps` for Gaussian gates, `g1 - g0` for
/// Bernoulli gates.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNoise(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IBLossTerms {
    pub task: f64,
    pub kl: f64,
    pub total: f64,
}

impl GateState {
    pub fn new(
        mode: GateMode,
        mu: Vec<f64>,
        sigma: f64,
        tau: f64,
        beta: f64,
        prior_p: f64,
    ) -> Result<Self> {
        let state = Self {
            mode,
            mu,
            sigma,
            tau,
            beta,
            prior_p,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Domain(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Domain(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Domain(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.prior_p > 0.0 && self.prior_p < 1.0) {
            return Err(Error::Domain(format!(
                "prior_p must lie in (0,1), got {}",
                self.prior_p
            )));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.mu.len()
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> GateNoise {
        let r = self.rank();
        match self.mode {
            GateMode::Gaussian => GateNoise((0..r).map(|_| StandardNormal.sample(rng)).collect()),
            GateMode::Bernoulli => {
                let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel is valid");
                GateNoise(
                    (0..r)
                        .map(|_| gumbel.sample(rng) - gumbel.sample(rng))
                        .collect(),
                )
            }
        }
    }

    /// Noise-free gate: the Gaussian mean clamped into `[0,1]`, or the
    /// relaxed-Bernoulli sample at zero Gumbel difference.
    pub fn zero_noise(&self) -> GateNoise {
        GateNoise(vec![0.0; self.rank()])
    }

    pub fn gate_from_noise(&self, noise: &GateNoise) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&noise.0)
            .map(|(mu, n)| match self.mode {
                GateMode::Gaussian => (mu + self.sigma * n).clamp(0.0, 1.0),
                GateMode::Bernoulli => {
                    sigmoid(((mu + n) / self.tau).clamp(-LOGIT_CLIP, LOGIT_CLIP))
                }
            })
            .collect()
    }

    pub fn sample_gate<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise = self.draw_noise(rng);
        self.gate_from_noise(&noise)
    }

    /// Records the gate for frozen `noise` as an `r x 1` node that is
    /// differentiable in `mu` (an `r x 1` node).
    pub fn tape_gate(&self, tape: &Tape, mu: Var, noise: &GateNoise) -> Result<Var> {
        let noise = tape.constant(Matrix::column(&noise.0))?;
        match self.mode {
            GateMode::Gaussian => {
                let scaled = tape.scale(noise, self.sigma)?;
                let z = tape.add(mu, scaled)?;
                tape.clamp(z, 0.0, 1.0)
            }
            GateMode::Bernoulli => {
                let shifted = tape.add(mu, noise)?;
                let z = tape.scale(shifted, 1.0 / self.tau)?;
                let z = tape.clamp(z, -LOGIT_CLIP, LOGIT_CLIP)?;
                tape.sigmoid(z)
            }
        }
    }

    fn require(&self, mode: GateMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Contract(format!(
                "operation needs a {mode:?} gate, state is {:?}",
                self.mode
            )));
        }
        Ok(())
    }

    /// `|mu|^2 / (2 sigma^2)`.
    pub fn kl_gaussian(&self) -> Result<f64> {
        self.require(GateMode::Gaussian)?;
        let sq: f64 = self.mu.iter().map(|m| m * m).sum();
        Ok(sq / (2.0 * self.sigma * self.sigma))
    }

    /// `sum_j KL(Bernoulli(sigmoid(logit_j)) || Bernoulli(prior_p))`.
    pub fn kl_bernoulli(&self) -> Result<f64> {
        self.require(GateMode::Bernoulli)?;
        let (ln_p, ln_1p) = (self.prior_p.ln(), (1.0 - self.prior_p).ln());
        Ok(self
            .mu
            .iter()
            .map(|&l| {
                let q = sigmoid(l);
                // log q and log(1-q) straight from the logit stay finite at saturation.
                let ln_q = -softplus(-l);
                let ln_1q = -softplus(l);
                q * (ln_q - ln_p) + (1.0 - q) * (ln_1q - ln_1p)
            })
            .sum())
    }

    pub fn kl(&self) -> Result<f64> {
        match self.mode {
            GateMode::Gaussian => self.kl_gaussian(),
            GateMode::Bernoulli => self.kl_bernoulli(),
        }
    }

    /// KL of the posterior parameterised by the `mu` node, on the tape.
    pub fn tape_kl(&self, tape: &Tape, mu: Var) -> Result<Var> {
        match self.mode {
            GateMode::Gaussian => {
                let sq = tape.sum_squares(mu)?;
                tape.scale(sq, 1.0 / (2.0 * self.sigma * self.sigma))
            }
            GateMode::Bernoulli => {
                let q = tape.sigmoid(mu)?;
                let neg = tape.scale(mu, -1.0)?;
                let ln_q = tape.scale(tape.softplus(neg)?, -1.0)?;
                let ln_1q = tape.scale(tape.softplus(mu)?, -1.0)?;
                let first = tape.mul(q, tape.offset(ln_q, -self.prior_p.ln())?)?;
                let one_minus_q = tape.offset(tape.scale(q, -1.0)?, 1.0)?;
                let second =
                    tape.mul(one_minus_q, tape.offset(ln_1q, -(1.0 - self.prior_p).ln())?)?;
                tape.sum(tape.add(first, second)?)
            }
        }
    }
}

/// `task + beta * KL`, with every term differentiable in `mu`.
pub fn ib_loss(tape: &Tape, task: Var, state: &GateState, mu: Var) -> Result<(Var, IBLossTerms)> {
    let kl = state.tape_kl(tape, mu)?;
    let weighted = tape.scale(kl, state.beta)?;
    let total = tape.add(task, weighted)?;
    let terms = IBLossTerms {
        task: tape.scalar(task)?,
        kl: tape.scalar(kl)?,
        total: tape.scalar(total)?,
    };
    Ok((total, terms))
}
