//! Seeded randomness and the Gumbel-Softmax relaxation.
//!
//! Every random draw in the crate goes through [`Rng`], a ChaCha8 stream
//! keyed by `(seed, stream)`. Training derives one stream per purpose and
//! per `(epoch, batch)` via [`StreamId`], so results never depend on the
//! order in which batches are visited.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{log_sum_exp, sigmoid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower/upper clamp for uniforms before the double log.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Resumable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// What a derived stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamId {
    Init,
    Shuffle { epoch: u64 },
    Noise { epoch: u64, batch: u64 },
    Binarize { epoch: u64 },
    /// Noise for ELBO estimates reported outside training.
    Eval,
}

impl StreamId {
    fn encode(self) -> u64 {
        const EPOCH_BITS: u32 = 24;
        const BATCH_BITS: u32 = 32;
        let (tag, epoch, batch) = match self {
            StreamId::Init => (1u64, 0, 0),
            StreamId::Shuffle { epoch } => (2, epoch, 0),
            StreamId::Noise { epoch, batch } => (3, epoch, batch),
            StreamId::Binarize { epoch } => (4, epoch, 0),
            StreamId::Eval => (5, 0, 0),
        };
        debug_assert!(epoch < 1 << EPOCH_BITS && batch < 1 << BATCH_BITS);
        (tag << (EPOCH_BITS + BATCH_BITS)) | (epoch << BATCH_BITS) | batch
    }
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn derive(seed: u64, id: StreamId) -> Self {
        Self::with_stream(seed, id.encode())
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::with_stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        // Box–Muller; the cosine branch only.
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform())
    }
}

/// `−log(−log u)` with `u` clamped into `[1e−12, 1 − 1e−12]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    out.data_mut().iter_mut().for_each(|v| *v = rng.gumbel());
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelaxationKind {
    /// Rows of the last axis are distributions over `k` classes.
    Categorical,
    /// Every entry is an independent relaxed Bernoulli value.
    Binary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSample {
    pub values: Tensor,
    pub temperature: f64,
    pub kind: RelaxationKind,
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// `y_i = exp((log μ_i + ε_i)/τ) / Σ_j exp((log μ_j + ε_j)/τ)`.
pub fn gumbel_softmax(log_mu: &[f64], eps: &[f64], tau: f64) -> Result<RelaxedSample> {
    check_temperature(tau)?;
    if log_mu.len() != eps.len() || log_mu.is_empty() {
        return Err(Error::dim("gumbel_softmax", &[log_mu.len()], &[eps.len()]));
    }
    if log_mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("log-probabilities must be finite".into()));
    }
    let scaled: Vec<f64> = log_mu.iter().zip(eps).map(|(l, e)| (l + e) / tau).collect();
    let lse = log_sum_exp(&scaled);
    let values = scaled.iter().map(|s| (s - lse).exp()).collect();
    Ok(RelaxedSample {
        values: Tensor::new(vec![1, log_mu.len()], values)?,
        temperature: tau,
        kind: RelaxationKind::Categorical,
    })
}

/// Two-class Gumbel-Softmax over the logits `(logit, 0)`, returning the
/// probability of the first class: `σ((logit + ε₀ − ε₁) / τ)`.
pub fn binary_concrete(logit: f64, eps_pair: (f64, f64), tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    Ok(binary_concrete_unchecked(logit, eps_pair, tau))
}

#[inline]
pub(crate) fn binary_concrete_unchecked(logit: f64, (e0, e1): (f64, f64), tau: f64) -> f64 {
    sigmoid((logit + e0 - e1) / tau)
}

/// One-hot at the row argmax (first index wins ties) for categorical
/// samples; `1` iff the value is at least `0.5` for binary ones.
pub fn harden(y: &RelaxedSample) -> Tensor {
    match y.kind {
        RelaxationKind::Binary => y.values.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        RelaxationKind::Categorical => {
            let mut out = y.values.zeros_like();
            let cols = y.values.cols();
            for (i, row) in y.values.iter_rows().enumerate() {
                let best = argmax(row);
                out.data_mut()[i * cols + best] = 1.0;
            }
            out
        }
    }
}

/// Index of the largest value; the smallest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn gumbel_transform_fixed_point_and_tails() {
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-15);
        let lo = gumbel_from_uniform(0.0);
        assert!(lo.is_finite() && lo < -3.0);
        let hi = gumbel_from_uniform(1.0);
        assert!(hi.is_finite() && hi > 27.0);
        // u → 0⁺ saturates at the clamp: −log(−log 1e−12) ≈ −3.32.
        assert_eq!(gumbel_from_uniform(0.0), gumbel_from_uniform(1e-300));
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = Rng::new(5);
        let n = 1_000_000;
        let mean = (0..n).map(|_| rng.gumbel()).sum::<f64>() / n as f64;
        assert!((mean - EULER_MASCHERONI).abs() < 0.01, "{mean}");
    }

    #[test]
    fn gumbel_softmax_examples() {
        let y = gumbel_softmax(&[0.0, 0.0], &[0.0, 0.0], 0.37).unwrap();
        assert_eq!(y.values.data(), &[0.5, 0.5]);

        let y = gumbel_softmax(&[1.0, 0.0, 0.0], &[0.0; 3], 0.1).unwrap();
        assert!(y.values.data().iter().cloned().fold(0.0, f64::max) > 0.9999);

        // softmax(0.4, −0.5): e^0.9 / (1 + e^0.9) = 0.710949502625…
        let y = gumbel_softmax(&[0.3, -0.3], &[0.1, -0.2], 1.0).unwrap();
        assert!((y.values.data()[0] - 0.710_949_502_6).abs() < 1e-9);
        assert!((y.values.data()[1] - 0.289_050_497_4).abs() < 1e-9);

        assert!(gumbel_softmax(&[0.0, 0.0], &[0.0, 0.0], 0.0).is_err());
        assert!(gumbel_softmax(&[0.0, 0.0], &[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn binary_concrete_matches_two_class_softmax() {
        assert_eq!(binary_concrete(0.0, (0.3, 0.3), 0.5).unwrap(), 0.5);
        assert!(binary_concrete(0.0, (0.0, 0.0), 0.0).is_err());

        let mut rng = Rng::new(99);
        for _ in 0..1000 {
            let logit = rng.uniform_range(-6.0, 6.0);
            let tau = rng.uniform_range(0.05, 2.0);
            let eps = (rng.gumbel(), rng.gumbel());
            let a = binary_concrete(logit, eps, tau).unwrap();
            let b = gumbel_softmax(&[logit, 0.0], &[eps.0, eps.1], tau).unwrap();
            assert!((a - b.values.data()[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn low_temperature_binary_concrete_recovers_bernoulli_mean() {
        let mut rng = Rng::new(3);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| binary_concrete(2.0, (rng.gumbel(), rng.gumbel()), 0.01).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - sigmoid(2.0)).abs() < 0.02, "{mean}");
    }

    #[test]
    fn harden_examples() {
        let cat = |v: Vec<f64>| RelaxedSample {
            values: Tensor::new(vec![1, v.len()], v).unwrap(),
            temperature: 1.0,
            kind: RelaxationKind::Categorical,
        };
        assert_eq!(harden(&cat(vec![0.9, 0.1])).data(), &[1.0, 0.0]);
        assert_eq!(harden(&cat(vec![0.5, 0.5])).data(), &[1.0, 0.0]);
        let bin = RelaxedSample {
            values: Tensor::vector(vec![0.4999, 0.5, 0.73]).unwrap(),
            temperature: 1.0,
            kind: RelaxationKind::Binary,
        };
        assert_eq!(harden(&bin).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn samples_lie_on_the_simplex() {
        let mut rng = Rng::new(17);
        for _ in 0..2000 {
            let k = 2 + rng.below(8);
            let log_mu: Vec<f64> = (0..k).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
            let eps: Vec<f64> = (0..k).map(|_| rng.gumbel()).collect();
            let tau = rng.uniform_range(0.5, 3.0);
            let y = gumbel_softmax(&log_mu, &eps, tau).unwrap();
            assert!((y.values.sum() - 1.0).abs() < 1e-12);
            assert!(y.values.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn hardening_is_monotone_in_temperature() {
        let mut rng = Rng::new(23);
        for _ in 0..500 {
            let log_mu: Vec<f64> = (0..4).map(|_| rng.uniform_range(-3.0, 0.0)).collect();
            let eps: Vec<f64> = (0..4).map(|_| rng.gumbel()).collect();
            let mut last = 0.0;
            for tau in [1.0, 0.5, 0.1, 0.01] {
                let y = gumbel_softmax(&log_mu, &eps, tau).unwrap();
                let top = y.values.data().iter().cloned().fold(0.0, f64::max);
                assert!(top >= last);
                last = top;
            }
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let draw = |seed, id| {
            let mut rng = Rng::derive(seed, id);
            (0..64).map(|_| rng.gumbel().to_bits()).collect::<Vec<_>>()
        };
        let id = StreamId::Noise { epoch: 3, batch: 7 };
        assert_eq!(draw(1, id), draw(1, id));
        assert_ne!(draw(1, id), draw(2, id));
        assert_ne!(draw(1, id), draw(1, StreamId::Noise { epoch: 3, batch: 8 }));
    }

    #[test]
    fn state_round_trip_resumes_the_stream() {
        let mut rng = Rng::with_stream(7, 12);
        for _ in 0..13 {
            rng.uniform();
        }
        let mut resumed = Rng::from_state(rng.state());
        for _ in 0..20 {
            assert_eq!(rng.uniform().to_bits(), resumed.uniform().to_bits());
        }
    }

    /// The Monte Carlo estimate of E[h(y)] has a standard error that shrinks
    /// like 1/√L: going from L = 10² to 10⁴ cuts it by about 10×.
    #[test]
    fn monte_carlo_error_shrinks_with_sample_count() {
        let h = |y: f64| y * y;
        let std_err = |l: usize, seed: u64| {
            let mut rng = Rng::new(seed);
            let vals: Vec<f64> = (0..l)
                .map(|_| h(binary_concrete(0.7, (rng.gumbel(), rng.gumbel()), 0.5).unwrap()))
                .collect();
            let mean = vals.iter().sum::<f64>() / l as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (l - 1) as f64;
            (var / l as f64).sqrt()
        };
        let small = std_err(100, 1);
        let large = std_err(10_000, 2);
        let ratio = small / large;
        assert!(ratio > 7.0 && ratio < 14.0, "ratio {ratio}");
    }
}
