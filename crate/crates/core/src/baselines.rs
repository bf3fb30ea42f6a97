//! Raw-pixel clustering baselines: k-means (greedy k-means++ seeding, Lloyd
//! iterations) and a diagonal-covariance Gaussian mixture fitted by EM.
//! Both sit behind [`ClusteringMethod`] so callers pick one by name.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::diffcore::log_sum_exp;
use crate::error::{Error, Result};
use crate::sampling::{argmax, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansModel {
    pub centroids: Tensor,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every accepted assignment step, first to last.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the smaller index.
fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_fit_input(data: &Tensor, k: usize) -> Result<(usize, usize)> {
    let (n, d) = data.dims2("cluster fit")?;
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Input(format!("need at least K = {k} points, got {n}")));
    }
    if !data.is_finite() {
        return Err(Error::Input("data contains non-finite values".into()));
    }
    Ok((n, d))
}

/// Index drawn with probability proportional to `weights`.
fn weighted_draw(weights: &[f64], total: f64, rng: &mut Rng) -> usize {
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    weights
        .iter()
        .position(|&w| {
            acc += w;
            acc > target
        })
        .unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).unwrap())
}

/// Greedy k-means++: each new centre is the best of `2 + ⌊ln k⌋` D²-weighted
/// candidates, judged by the potential it leaves behind.
fn kmeans_pp(data: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let n = data.rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = data.iter_rows().map(|x| sq_dist(x, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            // Fewer distinct points than clusters: any point will do.
            chosen.push(rng.below(n));
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = weighted_draw(&dist, total, rng);
            let next: Vec<f64> = dist
                .iter()
                .zip(data.iter_rows())
                .map(|(&d, x)| d.min(sq_dist(x, data.row(cand))))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, next));
            }
        }
        let (_, cand, next) = best.expect("at least two trials");
        chosen.push(cand);
        dist = next;
    }
    data.select_rows(&chosen).expect("seed indices are in range")
}

fn assign(data: &Tensor, centroids: &Tensor) -> (Vec<usize>, Vec<f64>) {
    data.iter_rows().map(|x| nearest(x, centroids)).unzip()
}

/// Cluster means; an empty cluster takes the point farthest from its
/// current centroid (each point is used at most once).
fn update(data: &Tensor, labels: &[usize], dists: &[f64], k: usize) -> Tensor {
    let d = data.cols();
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (x, &c) in data.iter_rows().zip(labels) {
        counts[c] += 1;
        sums[c * d..(c + 1) * d].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    let mut by_distance: Vec<usize> = (0..labels.len()).collect();
    by_distance.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
    let mut donors = by_distance.into_iter();
    for c in 0..k {
        let row = &mut sums[c * d..(c + 1) * d];
        if counts[c] == 0 {
            let far = donors.next().expect("N ≥ K guarantees a donor");
            row.copy_from_slice(data.row(far));
        } else {
            let inv = counts[c] as f64;
            row.iter_mut().for_each(|s| *s /= inv);
        }
    }
    Tensor::matrix(k, d, sums).expect("shape is k×d")
}

/// Greedy k-means++ seeding followed by Lloyd iterations.
///
/// Stops when no centroid moves by `tol` or more (Euclidean), after
/// `max_iter` updates, or when an update would not lower the inertia.
pub fn kmeans_fit(data: &Tensor, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansModel> {
    check_fit_input(data, k)?;
    let mut rng = Rng::new(seed);
    let mut centroids = kmeans_pp(data, k, &mut rng);
    let (mut labels, mut dists) = assign(data, &centroids);
    let mut inertia: f64 = dists.iter().sum();
    let mut trace = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iter {
        let next = update(data, &labels, &dists, k);
        let (next_labels, next_dists) = assign(data, &next);
        let next_inertia: f64 = next_dists.iter().sum();
        if next_inertia > inertia {
            break;
        }
        let shift = centroids
            .iter_rows()
            .zip(next.iter_rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        iterations += 1;
        centroids = next;
        labels = next_labels;
        dists = next_dists;
        inertia = next_inertia;
        trace.push(inertia);
        if shift < tol {
            break;
        }
    }
    Ok(KMeansModel {
        centroids,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

pub fn kmeans_predict(model: &KMeansModel, data: &Tensor) -> Result<Vec<usize>> {
    let (_, d) = data.dims2("kmeans_predict")?;
    if d != model.centroids.cols() {
        return Err(Error::dim("kmeans_predict", data.shape(), model.centroids.shape()));
    }
    Ok(data.iter_rows().map(|x| nearest(x, &model.centroids).0).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Tensor,
    pub variances: Tensor,
    /// Mean per-sample log-likelihood before each M-step and after the last.
    pub loglik_trace: Vec<f64>,
    pub var_floor: f64,
}

impl GmmModel {
    /// `log w_c + log N(x | μ_c, diag σ²_c)` for every row and component.
    pub fn log_joint(&self, data: &Tensor) -> Result<Tensor> {
        let (n, d) = data.dims2("gmm")?;
        if d != self.means.cols() {
            return Err(Error::dim("gmm", data.shape(), self.means.shape()));
        }
        let k = self.weights.len();
        let consts: Vec<f64> = (0..k)
            .map(|c| {
                let log_det: f64 = self.variances.row(c).iter().map(|v| v.ln()).sum();
                self.weights[c].ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + log_det)
            })
            .collect();
        let precisions = self.variances.map(|v| 1.0 / v);
        let mut out = Vec::with_capacity(n * k);
        for x in data.iter_rows() {
            for c in 0..k {
                let quad: f64 = x
                    .iter()
                    .zip(self.means.row(c))
                    .zip(precisions.row(c))
                    .map(|((xi, m), p)| (xi - m) * (xi - m) * p)
                    .sum();
                out.push(consts[c] - 0.5 * quad);
            }
        }
        Tensor::matrix(n, k, out)
    }

    /// Posterior component probabilities and the mean log-likelihood.
    pub fn responsibilities(&self, data: &Tensor) -> Result<(Tensor, f64)> {
        let mut joint = self.log_joint(data)?;
        let mut total = 0.0;
        for row in joint.data_mut().chunks_exact_mut(self.weights.len()) {
            let lse = log_sum_exp(row);
            total += lse;
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        Ok((joint, total / data.rows() as f64))
    }
}

/// EM for a diagonal Gaussian mixture, initialised from [`kmeans_fit`].
///
/// Variances are clamped below at `var_floor`; the clamp is the exact
/// constrained maximiser per coordinate, so EM stays monotone. Stops when
/// the mean log-likelihood gains less than `tol`.
pub fn gmm_fit(data: &Tensor, k: usize, seed: u64, max_iter: usize, tol: f64, var_floor: f64) -> Result<GmmModel> {
    let (n, d) = check_fit_input(data, k)?;
    if !(var_floor > 0.0) {
        return Err(Error::Parameter("variance floor must be positive".into()));
    }
    let init = kmeans_fit(data, k, seed, 100, 1e-4)?;
    let labels = kmeans_predict(&init, data)?;
    let mut resp = vec![0.0; n * k];
    labels.iter().enumerate().for_each(|(i, &c)| resp[i * k + c] = 1.0);
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: Tensor::zeros(&[k, d]),
        variances: Tensor::filled(&[k, d], 1.0),
        loglik_trace: Vec::new(),
        var_floor,
    };
    m_step(&mut model, data, &Tensor::matrix(n, k, resp)?);
    for _ in 0..max_iter {
        let (resp, ll) = model.responsibilities(data)?;
        if !ll.is_finite() {
            return Err(Error::NonFinite("GMM log-likelihood".into()));
        }
        let gain = model.loglik_trace.last().map(|prev| ll - prev);
        model.loglik_trace.push(ll);
        if gain.is_some_and(|g| g < tol) {
            return Ok(model);
        }
        m_step(&mut model, data, &resp);
    }
    let (_, ll) = model.responsibilities(data)?;
    model.loglik_trace.push(ll);
    Ok(model)
}

fn m_step(model: &mut GmmModel, data: &Tensor, resp: &Tensor) {
    let (n, d) = (data.rows(), data.cols());
    let k = model.weights.len();
    // Keeps a component that lost all mass from dividing by zero.
    let tiny = 10.0 * f64::EPSILON;
    let mut nk = vec![tiny; k];
    let mut means = vec![0.0; k * d];
    for (x, r) in data.iter_rows().zip(resp.iter_rows()) {
        for c in 0..k {
            nk[c] += r[c];
            means[c * d..(c + 1) * d].iter_mut().zip(x).for_each(|(m, v)| *m += r[c] * v);
        }
    }
    for c in 0..k {
        means[c * d..(c + 1) * d].iter_mut().for_each(|m| *m /= nk[c]);
    }
    let mut vars = vec![0.0; k * d];
    for (x, r) in data.iter_rows().zip(resp.iter_rows()) {
        for c in 0..k {
            let mu = &means[c * d..(c + 1) * d];
            vars[c * d..(c + 1) * d]
                .iter_mut()
                .zip(x.iter().zip(mu))
                .for_each(|(s, (v, m))| *s += r[c] * (v - m) * (v - m));
        }
    }
    for c in 0..k {
        vars[c * d..(c + 1) * d]
            .iter_mut()
            .for_each(|s| *s = (*s / nk[c]).max(model.var_floor));
    }
    let total: f64 = nk.iter().sum();
    model.weights = nk.iter().map(|v| v / total).collect();
    model.means = Tensor::matrix(k, d, means).expect("k×d");
    model.variances = Tensor::matrix(k, d, vars).expect("k×d");
    debug_assert_eq!(n, resp.rows());
}

/// Most responsible component per row; ties go to the smaller index.
pub fn gmm_predict(model: &GmmModel, data: &Tensor) -> Result<Vec<usize>> {
    let joint = model.log_joint(data)?;
    Ok(joint.iter_rows().map(argmax).collect())
}

/// Iteration limits shared by the registered baselines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub var_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-4,
            var_floor: DEFAULT_VAR_FLOOR,
        }
    }
}

/// A clustering algorithm that labels the rows it was fitted on.
pub trait ClusteringMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn fit_predict(&self, data: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>>;
}

pub struct KMeans(pub FitOptions);

impl ClusteringMethod for KMeans {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn fit_predict(&self, data: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
        let model = kmeans_fit(data, k, seed, self.0.max_iter, self.0.tol)?;
        kmeans_predict(&model, data)
    }
}

pub struct Gmm(pub FitOptions);

impl ClusteringMethod for Gmm {
    fn name(&self) -> &'static str {
        "gmm"
    }

    fn fit_predict(&self, data: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
        let o = self.0;
        let model = gmm_fit(data, k, seed, o.max_iter, o.tol, o.var_floor)?;
        gmm_predict(&model, data)
    }
}

/// Clustering methods keyed by name.
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn ClusteringMethod>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self {
            methods: BTreeMap::new(),
        }
    }

    /// `kmeans` and `gmm` with default options.
    pub fn with_baselines() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(KMeans(FitOptions::default())));
        r.register(Box::new(Gmm(FitOptions::default())));
        r
    }

    /// Adds a method, replacing any previous one with the same name.
    pub fn register(&mut self, method: Box<dyn ClusteringMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ClusteringMethod> {
        self.methods.get(name).map(|m| m.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown clustering method {name:?} (available: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clouds(rng: &mut Rng, per: usize, d: usize) -> (Tensor, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..per {
                rows.push((0..d).map(|_| c as f64 + 0.05 * rng.standard_normal()).collect());
                labels.push(c);
            }
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    fn column_mean(t: &Tensor, rows: std::ops::Range<usize>) -> Vec<f64> {
        let n = rows.len() as f64;
        let mut out = vec![0.0; t.cols()];
        for i in rows {
            out.iter_mut().zip(t.row(i)).for_each(|(o, v)| *o += v);
        }
        out.iter().map(|v| v / n).collect()
    }

    #[test]
    fn separated_clouds_give_their_means() {
        let mut rng = Rng::new(1);
        let (data, _) = two_clouds(&mut rng, 50, 3);
        let model = kmeans_fit(&data, 2, 4, 100, 1e-12).unwrap();
        let mut expected = [column_mean(&data, 0..50), column_mean(&data, 50..100)];
        if model.centroids.row(0)[0] > 0.5 {
            expected.swap(0, 1);
        }
        for (c, e) in expected.iter().enumerate() {
            for (a, b) in model.centroids.row(c).iter().zip(e) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_cluster_is_the_global_mean() {
        let data = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0], vec![3.0, 3.0]]).unwrap();
        let model = kmeans_fit(&data, 1, 0, 10, 0.0).unwrap();
        assert_eq!(model.centroids.data(), &[3.0, 3.0]);
    }

    #[test]
    fn inertia_beats_random_assignments() {
        let mut rng = Rng::new(3);
        let data = Tensor::matrix(20, 2, (0..40).map(|_| rng.uniform()).collect()).unwrap();
        let model = kmeans_fit(&data, 3, 9, 100, 1e-12).unwrap();
        assert!(model.inertia_trace.windows(2).all(|w| w[1] <= w[0]));
        for _ in 0..1000 {
            let labels: Vec<usize> = (0..20).map(|_| rng.below(3)).collect();
            let mut cost = 0.0;
            for c in 0..3 {
                let members: Vec<usize> = (0..20).filter(|&i| labels[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                let sel = data.select_rows(&members).unwrap();
                let mean = column_mean(&sel, 0..members.len());
                cost += sel.iter_rows().map(|x| sq_dist(x, &mean)).sum::<f64>();
            }
            assert!(model.inertia <= cost + 1e-12);
        }
    }

    #[test]
    fn kmeans_prediction_rules() {
        let model = KMeansModel {
            centroids: Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap(),
            inertia: 0.0,
            iterations: 0,
            inertia_trace: vec![],
        };
        let pts = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0], vec![1.9, 5.0]]).unwrap();
        let batch = kmeans_predict(&model, &pts).unwrap();
        assert_eq!(batch, vec![1, 0, 0, 1]);
        let looped: Vec<usize> = pts
            .iter_rows()
            .map(|p| {
                let single = Tensor::matrix(1, 2, p.to_vec()).unwrap();
                kmeans_predict(&model, &single).unwrap()[0]
            })
            .collect();
        assert_eq!(batch, looped);
        assert!(kmeans_predict(&model, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn too_few_points_is_an_input_error() {
        let data = Tensor::zeros(&[2, 3]);
        assert!(matches!(kmeans_fit(&data, 3, 0, 10, 0.0), Err(Error::Input(_))));
        assert!(matches!(gmm_fit(&data, 3, 0, 10, 0.0, 1e-6), Err(Error::Input(_))));
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let mut rng = Rng::new(5);
        let data = Tensor::matrix(60, 4, (0..240).map(|_| rng.uniform()).collect()).unwrap();
        assert_eq!(kmeans_fit(&data, 4, 7, 50, 0.0).unwrap(), kmeans_fit(&data, 4, 7, 50, 0.0).unwrap());
    }

    #[test]
    fn gmm_recovers_separated_gaussians() {
        let mut rng = Rng::new(11);
        let n = 400;
        let (m0, m1, sd) = (-3.0, 4.0, 1.0);
        let mut rows = Vec::new();
        for i in 0..n {
            let m = if i % 2 == 0 { m0 } else { m1 };
            rows.push(vec![m + sd * rng.standard_normal()]);
        }
        let data = Tensor::from_rows(&rows).unwrap();
        let model = gmm_fit(&data, 2, 1, 200, 1e-10, 1e-6).unwrap();
        let mut means = model.means.data().to_vec();
        means.sort_by(f64::total_cmp);
        let se = sd / ((n / 2) as f64).sqrt();
        assert!((means[0] - m0).abs() < 3.0 * se, "{means:?}");
        assert!((means[1] - m1).abs() < 3.0 * se, "{means:?}");

        assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(model.variances.data().iter().all(|&v| v >= 1e-6));
        assert!(model.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));
        let (resp, _) = model.responsibilities(&data).unwrap();
        assert!(resp.iter_rows().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-10));
    }

    #[test]
    fn gmm_prediction_rules() {
        let model = GmmModel {
            weights: vec![0.5, 0.5],
            means: Tensor::from_rows(&[vec![-1.0], vec![1.0]]).unwrap(),
            variances: Tensor::filled(&[2, 1], 1.0),
            loglik_trace: vec![],
            var_floor: 1e-6,
        };
        let pts = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![-1.0], vec![0.3]]).unwrap();
        let batch = gmm_predict(&model, &pts).unwrap();
        assert_eq!(batch, vec![0, 1, 0, 1]);
        let looped: Vec<usize> = pts
            .iter_rows()
            .map(|p| gmm_predict(&model, &Tensor::matrix(1, 1, p.to_vec()).unwrap()).unwrap()[0])
            .collect();
        assert_eq!(batch, looped);

        let skewed = GmmModel {
            weights: vec![0.1, 0.9],
            ..model
        };
        assert_eq!(gmm_predict(&skewed, &Tensor::from_rows(&[vec![1.0]]).unwrap()).unwrap(), vec![1]);
    }

    #[test]
    fn gmm_loglik_is_monotone_on_pixels_like_data() {
        let mut rng = Rng::new(2);
        let data = Tensor::matrix(
            200,
            12,
            (0..2400).map(|i| if i % 5 == 0 { 0.0 } else { rng.uniform().powi(3) }).collect(),
        )
        .unwrap();
        let model = gmm_fit(&data, 4, 3, 100, 0.0, 1e-6).unwrap();
        assert!(model.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));
    }

    #[test]
    fn registry_selects_by_name() {
        let reg = MethodRegistry::with_baselines();
        assert_eq!(reg.names(), vec!["gmm", "kmeans"]);
        assert!(matches!(reg.get("spectral"), Err(Error::Config(_))));
        let mut rng = Rng::new(4);
        let (data, truth) = two_clouds(&mut rng, 30, 5);
        for name in reg.names() {
            let pred = reg.get(name).unwrap().fit_predict(&data, 2, 1).unwrap();
            assert_eq!(crate::metrics::clustering_acc(&pred, &truth, 2).unwrap(), 1.0);
        }
    }
}
