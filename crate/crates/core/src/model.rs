//! The joint model: an MLP recognition network producing per-bit Bernoulli
//! means for the latent code, an MLP generative network producing pixel
//! Bernoulli means, and a Bernoulli mixture prior over codes.
//!
//! The ELBO is estimated from relaxed (binary concrete) latent samples and
//! differentiated by hand; [`elbo_and_grad`] returns the gradient of the
//! batch-mean ELBO (an ascent direction).

use crate::diffcore::{
    affine_forward, log_softmax_backward, log_softmax_forward, log_sum_exp, relu_forward, sigmoid,
};
use crate::error::{Error, Result};
use crate::sampling::{argmax, binary_concrete_unchecked, Rng};
use crate::tensor::{gemm, Tensor, View};

/// Every Bernoulli mean is clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]`
/// before taking logs; the clamp has zero derivative when active.
pub const PROB_CLAMP: f64 = 1e-7;

#[inline]
fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

#[inline]
fn bernoulli_log_mass(y: f64, p: f64) -> f64 {
    let (p, _) = clamp_prob(p);
    y * p.ln() + (1.0 - y) * (1.0 - p).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn zeros_like(&self) -> Dense {
        Dense {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

/// Mixture prior `p(c) p(z | c)`, stored as unconstrained logits.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    /// `[K]`; `π = softmax(pi_logits)`.
    pub pi_logits: Tensor,
    /// `[K × dim_z]`; `μ_z = sigmoid(mu_z_logits)`.
    pub mu_z_logits: Tensor,
}

impl MixtureParams {
    pub fn new(pi_logits: Tensor, mu_z_logits: Tensor) -> Result<Self> {
        let (k, _) = mu_z_logits.dims2("mixture")?;
        if pi_logits.shape() != [k] {
            return Err(Error::dim("mixture", pi_logits.shape(), mu_z_logits.shape()));
        }
        Ok(Self {
            pi_logits,
            mu_z_logits,
        })
    }

    pub fn k(&self) -> usize {
        self.mu_z_logits.shape()[0]
    }

    pub fn dim_z(&self) -> usize {
        self.mu_z_logits.shape()[1]
    }

    pub fn log_pi(&self) -> Vec<f64> {
        let lse = log_sum_exp(self.pi_logits.data());
        self.pi_logits.data().iter().map(|v| v - lse).collect()
    }

    pub fn pi(&self) -> Vec<f64> {
        let v = self.pi_logits.data();
        let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - top).exp()).collect();
        let total: f64 = e.iter().sum();
        e.iter().map(|x| x / total).collect()
    }

    pub fn mu_z(&self) -> Tensor {
        self.mu_z_logits.map(sigmoid)
    }

    /// `(log μ_z, log(1 − μ_z))` after clamping, both `[K × dim_z]`.
    fn log_tables(&self) -> (Vec<f64>, Vec<f64>) {
        self.mu_z_logits
            .data()
            .iter()
            .map(|&m| {
                let (p, _) = clamp_prob(sigmoid(m));
                (p.ln(), (1.0 - p).ln())
            })
            .unzip()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VabParams {
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
    pub mixture: MixtureParams,
}

impl VabParams {
    pub fn new(encoder: Vec<Dense>, decoder: Vec<Dense>, mixture: MixtureParams) -> Result<Self> {
        let params = Self {
            encoder,
            decoder,
            mixture,
        };
        params.validate()?;
        Ok(params)
    }

    /// Layer shapes chain from the input through the code and back.
    pub fn validate(&self) -> Result<()> {
        let chain = |layers: &[Dense], from: usize, to: usize, what: &str| -> Result<()> {
            if layers.is_empty() {
                return Err(Error::Input(format!("{what} has no layers")));
            }
            let mut width = from;
            for layer in layers {
                let (m, n) = layer.weight.dims2("layer")?;
                if m != width || layer.bias.shape() != [n] {
                    return Err(Error::dim("layer chain", &[width], layer.weight.shape()));
                }
                width = n;
            }
            if width != to {
                return Err(Error::dim("layer chain", &[width], &[to]));
            }
            Ok(())
        };
        let d = self.encoder.first().map_or(0, Dense::fan_in);
        chain(&self.encoder, d, self.mixture.dim_z(), "encoder")?;
        chain(&self.decoder, self.mixture.dim_z(), d, "decoder")
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].fan_in()
    }

    pub fn dim_z(&self) -> usize {
        self.mixture.dim_z()
    }

    pub fn k(&self) -> usize {
        self.mixture.k()
    }

    /// Every trainable tensor in a fixed order: encoder `(W, b)` pairs,
    /// decoder pairs, then `pi_logits` and `mu_z_logits`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in self.encoder.iter().chain(&self.decoder) {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.mixture.pi_logits);
        out.push(&self.mixture.mu_z_logits);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.mixture.pi_logits);
        out.push(&mut self.mixture.mu_z_logits);
        out
    }

    /// Names aligned with [`VabParams::tensors`], e.g. `encoder.0.weight`.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (group, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for i in 0..layers.len() {
                out.push(format!("{group}.{i}.weight"));
                out.push(format!("{group}.{i}.bias"));
            }
        }
        out.push("mixture.pi_logits".into());
        out.push("mixture.mu_z_logits".into());
        out
    }

    pub fn zeros_like(&self) -> VabParams {
        VabParams {
            encoder: self.encoder.iter().map(Dense::zeros_like).collect(),
            decoder: self.decoder.iter().map(Dense::zeros_like).collect(),
            mixture: MixtureParams {
                pi_logits: self.mixture.pi_logits.zeros_like(),
                mu_z_logits: self.mixture.mu_z_logits.zeros_like(),
            },
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Inputs and pre-activations of an MLP forward pass, kept for backward.
struct MlpTrace {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

/// Affine layers with ReLU between them and no activation after the last.
fn mlp_forward(layers: &[Dense], x: &Tensor, keep: bool) -> Result<(Tensor, Option<MlpTrace>)> {
    let mut trace = keep.then(|| MlpTrace {
        inputs: Vec::with_capacity(layers.len()),
        pre: Vec::with_capacity(layers.len()),
    });
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        let a = affine_forward(&h, &layer.weight, &layer.bias)?;
        let last = i + 1 == layers.len();
        let next = if last { a.clone() } else { relu_forward(&a) };
        if let Some(t) = trace.as_mut() {
            t.inputs.push(std::mem::replace(&mut h, next));
            t.pre.push(a);
        } else {
            h = next;
        }
    }
    Ok((h, trace))
}

/// Accumulates layer gradients into `grads`; returns the input gradient
/// when `want_input` is set.
fn mlp_backward(
    layers: &[Dense],
    trace: &MlpTrace,
    d_out: Tensor,
    grads: &mut [Dense],
    want_input: bool,
) -> Result<Option<Tensor>> {
    let mut d = d_out;
    for i in (0..layers.len()).rev() {
        if i + 1 != layers.len() {
            for (g, &a) in d.data_mut().iter_mut().zip(trace.pre[i].data()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let input = &trace.inputs[i];
        let (rows, fan_in) = input.dims2("mlp_backward")?;
        if d.shape() != [rows, layers[i].fan_out()] {
            return Err(Error::dim("mlp_backward", d.shape(), &[rows, layers[i].fan_out()]));
        }
        gemm(1.0, View::of(input).t(), View::of(&d), 1.0, grads[i].weight.data_mut());
        let db = grads[i].bias.data_mut();
        for row in d.iter_rows() {
            db.iter_mut().zip(row).for_each(|(acc, g)| *acc += g);
        }
        if i > 0 || want_input {
            let mut d_in = vec![0.0; rows * fan_in];
            gemm(1.0, View::of(&d), View::of(&layers[i].weight).t(), 0.0, &mut d_in);
            d = Tensor::matrix(rows, fan_in, d_in)?;
        }
    }
    Ok(want_input.then_some(d))
}

fn check_input(params: &VabParams, x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (b, d) = x.dims2(op)?;
    if d != params.input_dim() {
        return Err(Error::dim(op, x.shape(), &[b, params.input_dim()]));
    }
    Ok((b, d))
}

fn check_codes(dim_z: usize, y: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (b, d) = y.dims2(op)?;
    if d != dim_z {
        return Err(Error::dim(op, y.shape(), &[b, dim_z]));
    }
    Ok((b, d))
}

/// Pre-sigmoid encoder output.
pub fn encode_logits(params: &VabParams, x: &Tensor) -> Result<Tensor> {
    check_input(params, x, "encode")?;
    Ok(mlp_forward(&params.encoder, x, false)?.0)
}

/// Per-bit Bernoulli means of `q(z | x)`.
pub fn encode(params: &VabParams, x: &Tensor) -> Result<Tensor> {
    Ok(encode_logits(params, x)?.map(sigmoid))
}

/// Pixel Bernoulli means of `p(x | z)`; accepts hard bits or relaxed codes.
pub fn decode(params: &VabParams, y: &Tensor) -> Result<Tensor> {
    check_codes(params.dim_z(), y, "decode")?;
    Ok(mlp_forward(&params.decoder, y, false)?.0.map(sigmoid))
}

/// `Σ_j x log μ + (1 − x) log(1 − μ)` per row.
pub fn log_p_x_given_z(mu_x: &Tensor, x: &Tensor) -> Result<Tensor> {
    mu_x.expect_same_shape("log_p_x_given_z", x)?;
    let rows = mu_x
        .iter_rows()
        .zip(x.iter_rows())
        .map(|(m, x)| m.iter().zip(x).map(|(&m, &x)| bernoulli_log_mass(x, m)).sum())
        .collect();
    Tensor::vector(rows)
}

fn log_p_z_rows(log_mu: &[f64], log_one_minus: &[f64], y: &Tensor, k: usize) -> Vec<f64> {
    let d = y.cols();
    let mut out = Vec::with_capacity(y.rows() * k);
    for row in y.iter_rows() {
        for c in 0..k {
            let a = &log_mu[c * d..(c + 1) * d];
            let b = &log_one_minus[c * d..(c + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * a[j] + (1.0 - row[j]) * b[j];
            }
            out.push(acc);
        }
    }
    out
}

/// `log p(y | c)` for every row and component, `[B × K]`.
pub fn log_p_z_given_c(mixture: &MixtureParams, y: &Tensor) -> Result<Tensor> {
    let (b, _) = check_codes(mixture.dim_z(), y, "log_p_z_given_c")?;
    let (a, bm) = mixture.log_tables();
    Tensor::matrix(b, mixture.k(), log_p_z_rows(&a, &bm, y, mixture.k()))
}

/// `log π_c + log p(y | c)`, `[B × K]`.
fn log_joint(mixture: &MixtureParams, y: &Tensor) -> Result<Tensor> {
    let mut joint = log_p_z_given_c(mixture, y)?;
    let log_pi = mixture.log_pi();
    for row in joint.data_mut().chunks_exact_mut(log_pi.len()) {
        row.iter_mut().zip(&log_pi).for_each(|(v, lp)| *v += lp);
    }
    Ok(joint)
}

/// `q(c | y) = π_c p(y|c) / Σ_c' π_c' p(y|c')`, evaluated in log space.
pub fn cluster_posterior(mixture: &MixtureParams, y: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_forward(&log_joint(mixture, y)?).map(f64::exp))
}

/// Hard clusters for binary codes: argmax of the posterior, ties to the
/// smallest index. This is all the consumer side needs.
pub fn classify_codes(mixture: &MixtureParams, codes: &Tensor) -> Result<Vec<usize>> {
    Ok(log_joint(mixture, codes)?.iter_rows().map(argmax).collect())
}

/// Deterministic binary code: bit is set iff the encoder mean is ≥ 0.5.
pub fn hard_codes(params: &VabParams, x: &Tensor) -> Result<Tensor> {
    Ok(encode(params, x)?.map(|m| if m >= 0.5 { 1.0 } else { 0.0 }))
}

pub fn assign_clusters(params: &VabParams, x: &Tensor) -> Result<Vec<usize>> {
    classify_codes(&params.mixture, &hard_codes(params, x)?)
}

pub fn assign_cluster(params: &VabParams, x: &[f64]) -> Result<usize> {
    let row = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(assign_clusters(params, &row)?[0])
}

/// Decoder means of the hard codes: what a receiver reconstructs.
pub fn reconstruct(params: &VabParams, x: &Tensor) -> Result<Tensor> {
    decode(params, &hard_codes(params, x)?)
}

/// Batch means of the five expectation terms of the ELBO.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboBreakdown {
    /// `E log p(x | z)`
    pub recon: f64,
    /// `E log p(z | c)`
    pub prior_z: f64,
    /// `E log p(c)`
    pub prior_c: f64,
    /// `−E log q(z | x)`
    pub entropy_z: f64,
    /// `−E log q(c | z)`
    pub entropy_c: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn from_terms(recon: f64, prior_z: f64, prior_c: f64, entropy_z: f64, entropy_c: f64) -> Self {
        Self {
            recon,
            prior_z,
            prior_c,
            entropy_z,
            entropy_c,
            total: recon + prior_z + prior_c + entropy_z + entropy_c,
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("recon", self.recon),
            ("prior_z", self.prior_z),
            ("prior_c", self.prior_c),
            ("entropy_z", self.entropy_z),
            ("entropy_c", self.entropy_c),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("ELBO term {name}")));
            }
        }
        Ok(())
    }
}

/// Gumbel noise pairs for `L` relaxed draws of a `[B × dim_z]` code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub draws: Vec<(Tensor, Tensor)>,
}

impl LatentNoise {
    pub fn sample(rng: &mut Rng, samples: usize, rows: usize, dim_z: usize) -> Self {
        let draws = (0..samples)
            .map(|_| {
                let mut g0 = Tensor::zeros(&[rows, dim_z]);
                let mut g1 = Tensor::zeros(&[rows, dim_z]);
                for (a, b) in g0.data_mut().iter_mut().zip(g1.data_mut()) {
                    *a = rng.gumbel();
                    *b = rng.gumbel();
                }
                (g0, g1)
            })
            .collect();
        Self { draws }
    }
}

/// Which terms the gradient follows. Reported breakdowns always carry
/// every term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Full,
    /// Plain autoencoder warm-up: reconstruction only.
    ReconstructionOnly,
}

/// Monte Carlo ELBO with `samples` fresh noise draws per row.
pub fn elbo(params: &VabParams, x: &Tensor, rng: &mut Rng, tau: f64, samples: usize) -> Result<ElboBreakdown> {
    if samples == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let noise = LatentNoise::sample(rng, samples, x.rows(), params.dim_z());
    elbo_with_noise(params, x, &noise, tau)
}

pub fn elbo_with_noise(params: &VabParams, x: &Tensor, noise: &LatentNoise, tau: f64) -> Result<ElboBreakdown> {
    evaluate(params, x, noise, tau, None)
}

/// ELBO and its gradient with respect to every parameter.
pub fn elbo_and_grad(
    params: &VabParams,
    x: &Tensor,
    noise: &LatentNoise,
    tau: f64,
    objective: Objective,
) -> Result<(ElboBreakdown, VabParams)> {
    let mut grads = params.zeros_like();
    let breakdown = evaluate(params, x, noise, tau, Some((objective, &mut grads)))?;
    Ok((breakdown, grads))
}

/// [`elbo_and_grad`] writing into a reusable gradient buffer shaped like
/// `params`; previous contents are discarded.
pub fn elbo_and_grad_into(
    params: &VabParams,
    x: &Tensor,
    noise: &LatentNoise,
    tau: f64,
    objective: Objective,
    grads: &mut VabParams,
) -> Result<ElboBreakdown> {
    let same = grads.tensors().iter().zip(params.tensors()).all(|(g, p)| g.shape() == p.shape());
    if !same || grads.tensors().len() != params.tensors().len() {
        return Err(Error::Parameter("gradient buffer does not match the parameters".into()));
    }
    grads.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
    evaluate(params, x, noise, tau, Some((objective, grads)))
}

fn evaluate(
    params: &VabParams,
    x: &Tensor,
    noise: &LatentNoise,
    tau: f64,
    grad_request: Option<(Objective, &mut VabParams)>,
) -> Result<ElboBreakdown> {
    let objective = grad_request.as_ref().map(|(o, _)| *o);
    let mut grads = grad_request.map(|(_, g)| g);
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if noise.draws.is_empty() {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let (batch, _) = check_input(params, x, "elbo")?;
    let (k, dz) = (params.k(), params.dim_z());
    for (g0, g1) in &noise.draws {
        if g0.shape() != [batch, dz] || g1.shape() != [batch, dz] {
            return Err(Error::dim("elbo noise", g0.shape(), &[batch, dz]));
        }
    }
    let want_grad = objective.is_some();
    let full = objective == Some(Objective::Full);

    let (logits, enc_trace) = mlp_forward(&params.encoder, x, want_grad)?;
    let mu: Vec<(f64, bool)> = logits.data().iter().map(|&s| clamp_prob(sigmoid(s))).collect();
    let (log_mz, log_1mz) = params.mixture.log_tables();
    let log_pi = params.mixture.log_pi();

    let scale = 1.0 / (batch * noise.draws.len()) as f64;
    let mut sums = [0.0f64; 5];
    let mut d_logits = vec![0.0; batch * dz];
    let mut d_log_mz = vec![0.0; k * dz];
    let mut d_log_1mz = vec![0.0; k * dz];
    let mut d_log_pi = vec![0.0; k];

    for (g0, g1) in &noise.draws {
        let y_data: Vec<f64> = logits
            .data()
            .iter()
            .zip(g0.data().iter().zip(g1.data()))
            .map(|(&s, (&e0, &e1))| binary_concrete_unchecked(s, (e0, e1), tau))
            .collect();
        let y = Tensor::matrix(batch, dz, y_data)?;

        let (dec_logits, dec_trace) = mlp_forward(&params.decoder, &y, want_grad)?;
        let mu_x = dec_logits.map(sigmoid);
        sums[0] += log_p_x_given_z(&mu_x, x)?.sum();

        let lpz = log_p_z_rows(&log_mz, &log_1mz, &y, k);
        let mut q = vec![0.0; k];
        let mut d_y = vec![0.0; batch * dz];
        for i in 0..batch {
            let lpz_i = &lpz[i * k..(i + 1) * k];
            let joint: Vec<f64> = lpz_i.iter().zip(&log_pi).map(|(a, b)| a + b).collect();
            let lse = log_sum_exp(&joint);
            for c in 0..k {
                let log_q = joint[c] - lse;
                q[c] = log_q.exp();
                sums[1] += q[c] * lpz_i[c];
                sums[2] += q[c] * log_pi[c];
                sums[4] -= q[c] * log_q;
            }
            let y_i = y.row(i);
            for j in 0..dz {
                let (m, _) = mu[i * dz + j];
                sums[3] -= y_i[j] * m.ln() + (1.0 - y_i[j]) * (1.0 - m).ln();
            }

            if full {
                // prior_z + prior_c + entropy_c ≡ log Σ_c π_c p(y|c), whose
                // gradient with respect to the joint log-density is q(c|y).
                for c in 0..k {
                    let w = scale * q[c];
                    d_log_pi[c] += w;
                    for j in 0..dz {
                        d_y[i * dz + j] += w * (log_mz[c * dz + j] - log_1mz[c * dz + j]);
                        d_log_mz[c * dz + j] += w * y_i[j];
                        d_log_1mz[c * dz + j] += w * (1.0 - y_i[j]);
                    }
                }
                for j in 0..dz {
                    let (m, active) = mu[i * dz + j];
                    d_y[i * dz + j] -= scale * (m.ln() - (1.0 - m).ln());
                    if active {
                        d_logits[i * dz + j] += scale * (m - y_i[j]);
                    }
                }
            }
        }

        if let (Some(grads), Some(trace)) = (grads.as_mut(), dec_trace.as_ref()) {
            let mut d_dec = dec_logits.zeros_like();
            for ((dl, &m), &xv) in d_dec.data_mut().iter_mut().zip(mu_x.data()).zip(x.data()) {
                if clamp_prob(m).1 {
                    *dl = scale * (xv - m);
                }
            }
            let d_from_dec = mlp_backward(&params.decoder, trace, d_dec, &mut grads.decoder, true)?
                .expect("input gradient requested");
            for (dy, g) in d_y.iter_mut().zip(d_from_dec.data()) {
                *dy += g;
            }
            for ((dl, &dy), &yv) in d_logits.iter_mut().zip(&d_y).zip(y.data()) {
                *dl += dy * yv * (1.0 - yv) / tau;
            }
        }
    }

    let [recon, prior_z, prior_c, entropy_z, entropy_c] = sums.map(|s| s * scale);
    let breakdown = ElboBreakdown::from_terms(recon, prior_z, prior_c, entropy_z, entropy_c);
    breakdown.check_finite()?;

    if let (Some(grads), Some(trace)) = (grads.as_mut(), enc_trace.as_ref()) {
        let d_logits = Tensor::matrix(batch, dz, d_logits)?;
        mlp_backward(&params.encoder, trace, d_logits, &mut grads.encoder, false)?;

        let d_mz = grads.mixture.mu_z_logits.data_mut();
        for (idx, &m) in params.mixture.mu_z_logits.data().iter().enumerate() {
            let p = sigmoid(m);
            if clamp_prob(p).1 {
                d_mz[idx] = d_log_mz[idx] * (1.0 - p) - d_log_1mz[idx] * p;
            }
        }
        let log_pi_t = Tensor::matrix(1, k, log_pi)?;
        let up = Tensor::matrix(1, k, d_log_pi)?;
        let d_pi = log_softmax_backward(&log_pi_t, &up)?;
        grads.mixture.pi_logits.data_mut().copy_from_slice(d_pi.data());
    }
    Ok(breakdown)
}
