//! Analytic ELBO gradients against central differences with frozen noise.

use vab_core::model::{elbo_and_grad, elbo_with_noise, LatentNoise, Objective, VabParams};
use vab_core::sampling::Rng;
use vab_core::trainer::{init_params, TrainConfig};
use vab_core::Tensor;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        input_dim: 4,
        hidden: vec![5],
        dim_z: 2,
        k: 2,
        pixels_per_image: 4,
        ..TrainConfig::default()
    }
}

struct Point {
    params: VabParams,
    x: Tensor,
    noise: LatentNoise,
    tau: f64,
}

fn random_point(seed: u64) -> Point {
    let mut rng = Rng::new(seed);
    let mut params = init_params(&tiny_config(), &mut rng).unwrap();
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|w| *w += 0.5 * rng.standard_normal());
    }
    let x = Tensor::matrix(2, 4, (0..8).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect()).unwrap();
    let noise = LatentNoise::sample(&mut rng, 1, 2, 2);
    let tau = rng.uniform_range(0.3, 1.0);
    Point { params, x, noise, tau }
}

/// Smallest |pre-activation| of any hidden unit; central differences are
/// unreliable when a step can cross a ReLU kink.
fn kink_margin(params: &VabParams, x: &Tensor, noise: &LatentNoise, tau: f64) -> f64 {
    fn affine(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..n_out)
                    .map(|j| b.data()[j] + (0..n_in).map(|i| row[i] * w.data()[i * n_out + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }
    let mut margin = f64::INFINITY;
    let mut walk = |input: Vec<Vec<f64>>, layers: &[vab_core::model::Dense]| -> Vec<Vec<f64>> {
        let mut h = input;
        for (i, layer) in layers.iter().enumerate() {
            h = affine(&h, &layer.weight, &layer.bias);
            if i + 1 < layers.len() {
                for v in h.iter_mut().flatten() {
                    margin = margin.min(v.abs());
                    *v = v.max(0.0);
                }
            }
        }
        h
    };
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    let logits = walk(rows, &params.encoder);
    let (g0, g1) = &noise.draws[0];
    let y: Vec<Vec<f64>> = logits
        .iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .map(|(j, s)| {
                    let k = r * row.len() + j;
                    1.0 / (1.0 + (-(s + g0.data()[k] - g1.data()[k]) / tau).exp())
                })
                .collect()
        })
        .collect();
    walk(y, &params.decoder);
    margin
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(numeric).max(1e-8)
}

/// Central differences of the total ELBO, one tensor per parameter.
fn numeric_gradient(point: &Point) -> Vec<Vec<f64>> {
    let mut probe = point.params.clone();
    let count = probe.tensors().len();
    (0..count)
        .map(|t| {
            let len = probe.tensors()[t].len();
            (0..len)
                .map(|i| {
                    let orig = probe.tensors()[t].data()[i];
                    probe.tensors_mut()[t].data_mut()[i] = orig + STEP;
                    let plus = elbo_with_noise(&probe, &point.x, &point.noise, point.tau).unwrap().total;
                    probe.tensors_mut()[t].data_mut()[i] = orig - STEP;
                    let minus = elbo_with_noise(&probe, &point.x, &point.noise, point.tau).unwrap().total;
                    probe.tensors_mut()[t].data_mut()[i] = orig;
                    (plus - minus) / (2.0 * STEP)
                })
                .collect()
        })
        .collect()
}

fn usable_points(count: usize) -> Vec<Point> {
    (0u64..)
        .map(random_point)
        .filter(|p| kink_margin(&p.params, &p.x, &p.noise, p.tau) > 1e3 * STEP)
        .take(count)
        .collect()
}

#[test]
fn total_gradient_matches_central_differences_at_fifty_points() {
    let mut worst: f64 = 0.0;
    for point in usable_points(50) {
        let (_, grads) = elbo_and_grad(&point.params, &point.x, &point.noise, point.tau, Objective::Full).unwrap();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let numeric: Vec<f64> = numeric_gradient(&point).concat();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    assert!(worst <= TOLERANCE, "worst relative error {worst:e}");
}

#[test]
fn every_parameter_group_matches_central_differences() {
    for point in usable_points(10) {
        let (_, grads) = elbo_and_grad(&point.params, &point.x, &point.noise, point.tau, Objective::Full).unwrap();
        let numeric = numeric_gradient(&point);
        let names = point.params.tensor_names();
        let n_enc = 2 * point.params.encoder.len();
        let n_dec = 2 * point.params.decoder.len();
        let groups = [
            ("encoder", 0..n_enc),
            ("decoder", n_enc..n_enc + n_dec),
            ("pi_logits", n_enc + n_dec..n_enc + n_dec + 1),
            ("mu_z_logits", n_enc + n_dec + 1..names.len()),
        ];
        for (group, range) in groups {
            let analytic: Vec<f64> = grads.tensors()[range.clone()].iter().flat_map(|t| t.data().to_vec()).collect();
            let expected: Vec<f64> = numeric[range].concat();
            let err = relative_error(&analytic, &expected);
            assert!(err <= TOLERANCE, "{group}: relative error {err:e}");
        }
    }
}

#[test]
fn reconstruction_only_gradient_leaves_the_prior_alone() {
    let point = random_point(7);
    let (_, grads) =
        elbo_and_grad(&point.params, &point.x, &point.noise, point.tau, Objective::ReconstructionOnly).unwrap();
    assert!(grads.mixture.pi_logits.data().iter().all(|&g| g == 0.0));
    assert!(grads.mixture.mu_z_logits.data().iter().all(|&g| g == 0.0));

    // Oracle: central differences of the reconstruction term alone.
    let mut probe = point.params.clone();
    let w = &mut probe.decoder[0].weight;
    let orig = w.data()[0];
    w.data_mut()[0] = orig + STEP;
    let plus = elbo_with_noise(&probe, &point.x, &point.noise, point.tau).unwrap().recon;
    probe.decoder[0].weight.data_mut()[0] = orig - STEP;
    let minus = elbo_with_noise(&probe, &point.x, &point.noise, point.tau).unwrap().recon;
    let numeric = (plus - minus) / (2.0 * STEP);
    let analytic = grads.decoder[0].weight.data()[0];
    assert!((analytic - numeric).abs() <= TOLERANCE * numeric.abs().max(1e-6), "{analytic} vs {numeric}");
}
