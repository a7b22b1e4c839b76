//! Gaussian mixture modeling of latent codes.
//!
//! Full-covariance mixtures fit by expectation-maximization, with
//! log-sum-exp posteriors over Cholesky-based Gaussian log-densities, a
//! covariance ridge against collapsed latent dimensions, and cluster-count
//! selection by Silhouette and pairwise Jensen-Shannon scores.

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

/// Weighted mixture of `K` full-covariance Gaussians over `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    /// Mixing weights on the simplex.
    pub weights: Vec<f64>,
    /// Component means, each of shape `[d]`.
    pub means: Vec<Tensor>,
    /// Component covariances, each symmetric positive-definite `[d, d]`.
    pub covariances: Vec<Tensor>,
}

impl GaussianMixture {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    /// Checks the simplex, shape and positive-definiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if self.means.len() != k || self.covariances.len() != k {
            return Err(Error::dim(
                "GaussianMixture",
                format!("{k} means and covariances"),
                format!("{} means, {} covariances", self.means.len(), self.covariances.len()),
            ));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {sum}, not 1")));
        }
        let d = self.dim();
        for (i, (m, c)) in self.means.iter().zip(&self.covariances).enumerate() {
            if m.shape() != [d] || c.shape() != [d, d] {
                return Err(Error::dim(
                    format!("mixture component {i}"),
                    format!("mean [{d}], covariance [{d}, {d}]"),
                    format!("mean {:?}, covariance {:?}", m.shape(), c.shape()),
                ));
            }
            cholesky(c)?;
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix,
/// stored row-major.
fn cholesky(a: &Tensor) -> Result<Vec<f64>> {
    let d = a.shape()[0];
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a.at(i, j);
            for p in 0..j {
                sum -= l[i * d + p] * l[j * d + p];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Factorization(format!(
                        "matrix not positive definite at pivot {i} (value {sum:.3e})"
                    )));
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L y = b` by forward substitution.
fn forward_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut sum = b[i];
        for j in 0..i {
            sum -= l[i * d + j] * y[j];
        }
        y[i] = sum / l[i * d + i];
    }
    y
}

/// Cached per-component factorization for repeated density evaluation.
struct ComponentDensity {
    mean: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
    dim: usize,
}

impl ComponentDensity {
    fn new(mean: &Tensor, cov: &Tensor) -> Result<ComponentDensity> {
        let d = mean.len();
        let chol = cholesky(cov)?;
        let log_det: f64 = (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(ComponentDensity {
            mean: mean.data().to_vec(),
            chol,
            log_norm,
            dim: d,
        })
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let diff: Vec<f64> = z.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        let y = forward_solve(&self.chol, self.dim, &diff);
        let quad: f64 = y.iter().map(|v| v * v).sum();
        self.log_norm - 0.5 * quad
    }

    /// Draws `x = mean + L eps` with `eps ~ N(0, I)`.
    fn sample(&self, rng: &mut SplitRng) -> Vec<f64> {
        let eps = rng.normal_vec(self.dim);
        let mut x = self.mean.clone();
        for i in 0..self.dim {
            for j in 0..=i {
                x[i] += self.chol[i * self.dim + j] * eps[j];
            }
        }
        x
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log density of the mixture at `z`, via log-sum-exp over Cholesky-based
/// component log-densities.
pub fn log_density(z: &Tensor, gmm: &GaussianMixture) -> Result<f64> {
    let d = gmm.dim();
    if z.len() != d {
        return Err(Error::dim("log_density", format!("[{d}]"), format!("{:?}", z.shape())));
    }
    let mut terms = Vec::with_capacity(gmm.k());
    for k in 0..gmm.k() {
        let comp = ComponentDensity::new(&gmm.means[k], &gmm.covariances[k])?;
        let w = gmm.weights[k];
        if w > 0.0 {
            terms.push(w.ln() + comp.log_density(z.data()));
        }
    }
    let ld = log_sum_exp(&terms);
    if !ld.is_finite() {
        return Err(Error::Numeric(format!("mixture log-density is {ld}")));
    }
    Ok(ld)
}

/// `N x K` posterior responsibilities; rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    data: Vec<f64>,
    n: usize,
    k: usize,
}

impl Responsibilities {
    /// Builds from raw rows (testing and hard-assignment construction).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Responsibilities> {
        let n = rows.len();
        let k = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * k);
        for row in &rows {
            if row.len() != k {
                return Err(Error::dim("Responsibilities", format!("{k} columns"), format!("{}", row.len())));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!("responsibility row does not lie on the simplex: {row:?}")));
            }
            data.extend_from_slice(row);
        }
        Ok(Responsibilities { data, n, k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    /// Hard labels by row-wise argmax.
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                self.row(i)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(idx, _)| idx)
                    .unwrap_or(0)
            })
            .collect()
    }
}

fn check_codes(codes: &[Tensor]) -> Result<usize> {
    let Some(first) = codes.first() else {
        return Err(Error::Length {
            context: "gmm codes".into(),
            required: 1,
            got: 0,
        });
    };
    let d = first.len();
    for c in codes {
        if c.len() != d {
            return Err(Error::dim("gmm codes", format!("[{d}]"), format!("{:?}", c.shape())));
        }
    }
    Ok(d)
}

fn e_step_with_loglik(codes: &[Tensor], gmm: &GaussianMixture) -> Result<(Responsibilities, f64)> {
    let n = codes.len();
    let k = gmm.k();
    let comps = (0..k)
        .map(|j| ComponentDensity::new(&gmm.means[j], &gmm.covariances[j]))
        .collect::<Result<Vec<_>>>()?;
    let log_w: Vec<f64> = gmm
        .weights
        .iter()
        .map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
        .collect();

    let mut data = vec![0.0; n * k];
    let mut loglik = 0.0;
    for (i, z) in codes.iter().enumerate() {
        let logs: Vec<f64> = (0..k).map(|j| log_w[j] + comps[j].log_density(z.data())).collect();
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            return Err(Error::Numeric(format!("posterior normalizer is {lse} at code {i}")));
        }
        loglik += lse;
        let row = &mut data[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (r, &l) in row.iter_mut().zip(&logs) {
            *r = (l - lse).exp();
            sum += *r;
        }
        // Renormalize so each row sums to 1 exactly up to rounding.
        for r in row.iter_mut() {
            *r /= sum;
        }
    }
    Ok((Responsibilities { data, n, k }, loglik))
}

/// Posterior responsibilities of each code under the mixture.
pub fn e_step(codes: &[Tensor], gmm: &GaussianMixture) -> Result<Responsibilities> {
    check_codes(codes)?;
    Ok(e_step_with_loglik(codes, gmm)?.0)
}

/// Fraction of total mass below which a component counts as empty.
pub const EMPTY_CLUSTER_FRACTION: f64 = 1e-8;

fn ridge_of(codes: &[Tensor], d: usize) -> f64 {
    // 1e-6 * trace(sample covariance) / d
    let n = codes.len() as f64;
    let mut mean = vec![0.0; d];
    for c in codes {
        for (m, &v) in mean.iter_mut().zip(c.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut trace = 0.0;
    for c in codes {
        for (j, &v) in c.data().iter().enumerate() {
            let dv = v - mean[j];
            trace += dv * dv;
        }
    }
    1e-6 * (trace / n) / d as f64
}

/// Weighted maximum-likelihood update of weights, means and covariances,
/// with a ridge added to each covariance diagonal.
pub fn m_step(codes: &[Tensor], resp: &Responsibilities) -> Result<GaussianMixture> {
    let d = check_codes(codes)?;
    let n = codes.len();
    if resp.n() != n {
        return Err(Error::dim("m_step", format!("{n} rows"), format!("{}", resp.n())));
    }
    let k = resp.k();
    let ridge = ridge_of(codes, d);

    let mut mass = vec![0.0; k];
    for i in 0..n {
        for (j, &r) in resp.row(i).iter().enumerate() {
            mass[j] += r;
        }
    }
    for (j, &m) in mass.iter().enumerate() {
        if m < EMPTY_CLUSTER_FRACTION * n as f64 {
            return Err(Error::EmptyCluster { k: j, mass: m });
        }
    }

    let mut means = Vec::with_capacity(k);
    for j in 0..k {
        let mut mu = vec![0.0; d];
        for (i, c) in codes.iter().enumerate() {
            let r = resp.row(i)[j];
            for (m, &v) in mu.iter_mut().zip(c.data()) {
                *m += r * v;
            }
        }
        for m in mu.iter_mut() {
            *m /= mass[j];
        }
        means.push(Tensor::new_unchecked(vec![d], mu));
    }

    let mut covariances = Vec::with_capacity(k);
    for j in 0..k {
        let mu = means[j].data();
        let mut cov = vec![0.0; d * d];
        for (i, c) in codes.iter().enumerate() {
            let r = resp.row(i)[j];
            let diff: Vec<f64> = c.data().iter().zip(mu).map(|(&a, &b)| a - b).collect();
            for p in 0..d {
                let rp = r * diff[p];
                for q in 0..=p {
                    cov[p * d + q] += rp * diff[q];
                }
            }
        }
        for p in 0..d {
            for q in 0..=p {
                cov[p * d + q] /= mass[j];
                cov[q * d + p] = cov[p * d + q];
            }
            cov[p * d + p] += ridge;
        }
        covariances.push(Tensor::new_unchecked(vec![d, d], cov));
    }

    let total: f64 = mass.iter().sum();
    let weights: Vec<f64> = mass.iter().map(|&m| m / total).collect();
    Ok(GaussianMixture {
        weights,
        means,
        covariances,
    })
}

fn global_covariance(codes: &[Tensor], d: usize, ridge: f64) -> Tensor {
    let n = codes.len() as f64;
    let mut mean = vec![0.0; d];
    for c in codes {
        for (m, &v) in mean.iter_mut().zip(c.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for c in codes {
        let diff: Vec<f64> = c.data().iter().zip(&mean).map(|(&a, &b)| a - b).collect();
        for p in 0..d {
            for q in 0..=p {
                cov[p * d + q] += diff[p] * diff[q];
            }
        }
    }
    for p in 0..d {
        for q in 0..=p {
            cov[p * d + q] /= n;
            cov[q * d + p] = cov[p * d + q];
        }
        cov[p * d + p] += ridge;
    }
    Tensor::new_unchecked(vec![d, d], cov)
}

/// Distance-weighted mean seeding: the first mean is a random code, each
/// further mean a code sampled with probability proportional to its squared
/// distance from the nearest chosen mean.
fn seed_means(codes: &[Tensor], k: usize, rng: &mut SplitRng) -> Vec<Tensor> {
    let n = codes.len();
    let mut means: Vec<Tensor> = vec![codes[rng.index(n)].clone()];
    let mut min_sq: Vec<f64> = codes
        .iter()
        .map(|c| squared_distance(c.data(), means[0].data()))
        .collect();
    while means.len() < k {
        let total: f64 = min_sq.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, &w) in min_sq.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.index(n)
        };
        means.push(codes[pick].clone());
        for (m, c) in min_sq.iter_mut().zip(codes) {
            let dist = squared_distance(c.data(), means.last().unwrap().data());
            if dist < *m {
                *m = dist;
            }
        }
    }
    means
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// EM fit from seeded initialization. Returns the mixture and the
/// log-likelihood trace, which is monotone non-decreasing up to ridge
/// effects. An empty cluster is reseeded once; a second occurrence aborts.
pub fn em_fit(
    codes: &[Tensor],
    k: usize,
    rng: &mut SplitRng,
    max_iters: usize,
    tol: f64,
) -> Result<(GaussianMixture, Vec<f64>)> {
    let d = check_codes(codes)?;
    let n = codes.len();
    if n < k {
        return Err(Error::Length {
            context: format!("em_fit with K={k}"),
            required: k,
            got: n,
        });
    }
    if k == 0 {
        return Err(Error::Config("em_fit needs K >= 1".into()));
    }

    let ridge = ridge_of(codes, d);
    let base_cov = global_covariance(codes, d, ridge);
    let mut gmm = GaussianMixture {
        weights: vec![1.0 / k as f64; k],
        means: seed_means(codes, k, rng),
        covariances: vec![base_cov.clone(); k],
    };

    let mut trace = Vec::new();
    let mut reseeds = 0usize;
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..max_iters {
        let (resp, loglik) = e_step_with_loglik(codes, &gmm)?;
        trace.push(loglik);
        match m_step(codes, &resp) {
            Ok(next) => gmm = next,
            Err(Error::EmptyCluster { k: dead, mass }) => {
                reseeds += 1;
                if reseeds > 1 {
                    return Err(Error::EmptyCluster { k: dead, mass });
                }
                gmm.means[dead] = codes[rng.index(n)].clone();
                gmm.covariances[dead] = base_cov.clone();
                let w = 1.0 / k as f64;
                let scale: f64 = 1.0 - w;
                let old_rest: f64 = gmm
                    .weights
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != dead)
                    .map(|(_, &v)| v)
                    .sum();
                for (i, wv) in gmm.weights.iter_mut().enumerate() {
                    *wv = if i == dead { w } else { *wv / old_rest * scale };
                }
                continue;
            }
            Err(e) => return Err(e),
        }
        if prev.is_finite() && (loglik - prev) < tol {
            break;
        }
        prev = loglik;
    }
    gmm.validate()?;
    Ok((gmm, trace))
}

/// Mean silhouette of the hard assignment implied by `resp`.
///
/// Requires at least two populated clusters; singleton points score 0.
pub fn silhouette_score(codes: &[Tensor], resp: &Responsibilities) -> Result<f64> {
    check_codes(codes)?;
    let n = codes.len();
    if resp.n() != n {
        return Err(Error::dim("silhouette_score", format!("{n} rows"), format!("{}", resp.n())));
    }
    let labels = resp.argmax_labels();
    let k = resp.k();
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::UndefinedMetric(
            "silhouette needs at least two populated clusters".into(),
        ));
    }

    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if counts[own] == 1 {
            continue; // singleton scores 0
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i == j {
                continue;
            }
            sums[labels[j]] += squared_distance(codes[i].data(), codes[j].data()).sqrt();
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Monte-Carlo Jensen-Shannon score between mixture components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsScore {
    /// Mean over component pairs of the pairwise JS divergence (base-2 logs,
    /// so each pairwise value lies in [0, 1]).
    pub value: f64,
    /// Standard error of the Monte-Carlo estimate.
    pub std_err: f64,
}

/// Mean pairwise Jensen-Shannon divergence between the component Gaussians,
/// estimated with `samples_per_pair` draws per side; deterministic per seed.
pub fn jensen_shannon_score(gmm: &GaussianMixture, rng: &mut SplitRng, samples_per_pair: usize) -> Result<JsScore> {
    let k = gmm.k();
    if k < 2 {
        return Err(Error::UndefinedMetric(
            "Jensen-Shannon score needs at least two components".into(),
        ));
    }
    if samples_per_pair == 0 {
        return Err(Error::Config("samples_per_pair must be >= 1".into()));
    }
    let comps = (0..k)
        .map(|j| ComponentDensity::new(&gmm.means[j], &gmm.covariances[j]))
        .collect::<Result<Vec<_>>>()?;

    let ln2 = std::f64::consts::LN_2;
    let mut sum = 0.0;
    let mut var_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            // Half-terms E_P[0.5 log2 (p/m)] and E_Q[0.5 log2 (q/m)].
            let mut half = |from: usize| -> (f64, f64) {
                let mut mean = 0.0;
                let mut m2 = 0.0;
                for s in 0..samples_per_pair {
                    let x = comps[from].sample(rng);
                    let lp = comps[i].log_density(&x);
                    let lq = comps[j].log_density(&x);
                    let l_own = if from == i { lp } else { lq };
                    let lm = log_sum_exp(&[lp, lq]) - ln2;
                    let v = 0.5 * (l_own - lm) / ln2;
                    let delta = v - mean;
                    mean += delta / (s + 1) as f64;
                    m2 += delta * (v - mean);
                }
                (mean, m2 / samples_per_pair as f64)
            };
            let (mp, vp) = half(i);
            let (mq, vq) = half(j);
            let js = (mp + mq).clamp(0.0, 1.0);
            sum += js;
            var_sum += (vp + vq) / samples_per_pair as f64;
            pairs += 1;
        }
    }
    Ok(JsScore {
        value: sum / pairs as f64,
        std_err: var_sum.sqrt() / pairs as f64,
    })
}

/// One row of the cluster-count selection table.
#[derive(Debug, Clone)]
pub struct KScoreRow {
    pub k: usize,
    pub silhouette: Option<f64>,
    pub jensen_shannon: Option<f64>,
    pub loglik: Option<f64>,
    pub restarts: usize,
    /// Failure description when this K could not be scored.
    pub note: Option<String>,
}

/// Result of scanning a K range.
#[derive(Debug, Clone)]
pub struct KSelection {
    pub rows: Vec<KScoreRow>,
    /// K maximizing `silhouette - jensen_shannon` among scored rows.
    pub chosen: usize,
}

impl KSelection {
    /// CSV table `K,silhouette,jensen_shannon,loglik,restarts`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("K,silhouette,jensen_shannon,loglik,restarts\n");
        for row in &self.rows {
            let fmt = |v: &Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.k,
                fmt(&row.silhouette),
                fmt(&row.jensen_shannon),
                fmt(&row.loglik),
                row.restarts
            ));
        }
        out
    }
}

/// Options for [`select_k`].
#[derive(Debug, Clone, Copy)]
pub struct SelectKOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub samples_per_pair: usize,
}

impl Default for SelectKOptions {
    fn default() -> Self {
        SelectKOptions {
            restarts: 4,
            max_iters: 200,
            tol: 1e-7,
            samples_per_pair: 10_000,
        }
    }
}

/// Fits every K in `k_range` (best of `restarts` by likelihood), scores each
/// with Silhouette and Jensen-Shannon, and picks the K maximizing
/// `silhouette - jensen_shannon`. Per-K failures are recorded in the table
/// while other K values continue.
pub fn select_k(
    codes: &[Tensor],
    k_range: std::ops::RangeInclusive<usize>,
    rng: &mut SplitRng,
    opts: &SelectKOptions,
) -> Result<(KSelection, Vec<(usize, GaussianMixture)>)> {
    let n = codes.len();
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo < 2 || hi > n || lo > hi {
        return Err(Error::Config(format!(
            "k range {lo}..={hi} must lie within [2, {n}]"
        )));
    }

    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for k in lo..=hi {
        let mut best: Option<(GaussianMixture, f64)> = None;
        let mut failure = None;
        for r in 0..opts.restarts {
            let mut run_rng = rng.derive((k as u64) << 32 | r as u64);
            match em_fit(codes, k, &mut run_rng, opts.max_iters, opts.tol) {
                Ok((gmm, trace)) => {
                    let ll = trace.last().copied().unwrap_or(f64::NEG_INFINITY);
                    if best.as_ref().map_or(true, |(_, b)| ll > *b) {
                        best = Some((gmm, ll));
                    }
                }
                Err(e) => failure = Some(e.to_string()),
            }
        }
        match best {
            Some((gmm, ll)) => {
                let resp = e_step(codes, &gmm)?;
                let sil = silhouette_score(codes, &resp);
                let mut js_rng = rng.derive(0x6a73 ^ (k as u64)); // "js" stream
                let js = jensen_shannon_score(&gmm, &mut js_rng, opts.samples_per_pair);
                match (sil, js) {
                    (Ok(s), Ok(j)) => {
                        rows.push(KScoreRow {
                            k,
                            silhouette: Some(s),
                            jensen_shannon: Some(j.value),
                            loglik: Some(ll),
                            restarts: opts.restarts,
                            note: None,
                        });
                        fits.push((k, gmm));
                    }
                    (s, j) => {
                        let note = [s.err(), j.err()]
                            .into_iter()
                            .flatten()
                            .map(|e| e.to_string())
                            .collect::<Vec<_>>()
                            .join("; ");
                        rows.push(KScoreRow {
                            k,
                            silhouette: None,
                            jensen_shannon: None,
                            loglik: Some(ll),
                            restarts: opts.restarts,
                            note: Some(note),
                        });
                    }
                }
            }
            None => rows.push(KScoreRow {
                k,
                silhouette: None,
                jensen_shannon: None,
                loglik: None,
                restarts: opts.restarts,
                note: failure,
            }),
        }
    }

    let chosen = rows
        .iter()
        .filter_map(|r| match (r.silhouette, r.jensen_shannon) {
            (Some(s), Some(j)) => Some((r.k, s - j)),
            _ => None,
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .ok_or_else(|| Error::UndefinedMetric("no K in the range could be scored".into()))?;

    Ok((KSelection { rows, chosen }, fits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard_normal_2d() -> GaussianMixture {
        GaussianMixture {
            weights: vec![1.0],
            means: vec![Tensor::zeros(vec![2])],
            covariances: vec![Tensor::identity(2)],
        }
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let gmm = standard_normal_2d();
        let ld = log_density(&Tensor::zeros(vec![2]), &gmm).unwrap();
        let expected = -(2.0 * std::f64::consts::PI).ln(); // log(1/(2*pi))
        assert!((ld - expected).abs() < 1e-12);
        assert!((expected + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn log_density_matches_naive_direct_space_sum() {
        let mut rng = SplitRng::new(4);
        for _ in 0..20 {
            // Random small mixture: d in {1,2,3}, K in {1,2,3}
            let d = 1 + rng.index(3);
            let k = 1 + rng.index(3);
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.1).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let means: Vec<Tensor> = (0..k)
                .map(|_| Tensor::from_fn(vec![d], |_| rng.normal()))
                .collect();
            let covariances: Vec<Tensor> = (0..k)
                .map(|_| {
                    // A A^T + I is symmetric positive definite.
                    let a = Tensor::from_fn(vec![d, d], |_| rng.normal() * 0.5);
                    let mut c = vec![0.0; d * d];
                    for p in 0..d {
                        for q in 0..d {
                            let mut acc = if p == q { 1.0 } else { 0.0 };
                            for r in 0..d {
                                acc += a.at(p, r) * a.at(q, r);
                            }
                            c[p * d + q] = acc;
                        }
                    }
                    Tensor::new_unchecked(vec![d, d], c)
                })
                .collect();
            let gmm = GaussianMixture {
                weights: weights.clone(),
                means,
                covariances,
            };
            gmm.validate().unwrap();
            let z = Tensor::from_fn(vec![d], |_| rng.normal());

            // Naive direct-space evaluation with explicit inverse via solves.
            let mut direct = 0.0;
            for j in 0..k {
                let comp = ComponentDensity::new(&gmm.means[j], &gmm.covariances[j]).unwrap();
                direct += weights[j] * comp.log_density(z.data()).exp();
            }
            let ld = log_density(&z, &gmm).unwrap();
            assert!(
                (ld - direct.ln()).abs() < 1e-10,
                "lse {ld} vs direct {}",
                direct.ln()
            );

            // Mixture density dominates each weighted component density.
            for j in 0..k {
                let comp = ComponentDensity::new(&gmm.means[j], &gmm.covariances[j]).unwrap();
                let term = weights[j].ln() + comp.log_density(z.data());
                assert!(ld >= term - 1e-12);
            }
        }
    }

    #[test]
    fn non_pd_covariance_is_a_factorization_error() {
        let gmm = GaussianMixture {
            weights: vec![1.0],
            means: vec![Tensor::zeros(vec![2])],
            covariances: vec![Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap()],
        };
        assert!(matches!(gmm.validate(), Err(Error::Factorization(_))));
    }

    #[test]
    fn e_step_single_component_gives_unit_responsibility() {
        let gmm = standard_normal_2d();
        let codes: Vec<Tensor> = (0..5).map(|i| Tensor::vector(vec![i as f64, -(i as f64)])).collect();
        let resp = e_step(&codes, &gmm).unwrap();
        for i in 0..5 {
            assert_eq!(resp.row(i), &[1.0]);
        }
    }

    #[test]
    fn e_step_separated_components_concentrate() {
        let gmm = GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![Tensor::vector(vec![0.0, 0.0]), Tensor::vector(vec![20.0, 0.0])],
            covariances: vec![Tensor::identity(2), Tensor::identity(2)],
        };
        let resp = e_step(&[Tensor::vector(vec![0.0, 0.0])], &gmm).unwrap();
        assert!(resp.row(0)[0] > 0.999);
        let sum: f64 = resp.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn m_step_uniform_responsibilities_give_sample_statistics() {
        let mut rng = SplitRng::new(12);
        let codes: Vec<Tensor> = (0..40).map(|_| Tensor::from_fn(vec![2], |_| rng.normal())).collect();
        let rows = vec![vec![1.0]; codes.len()];
        let resp = Responsibilities::from_rows(rows).unwrap();
        let gmm = m_step(&codes, &resp).unwrap();
        assert_eq!(gmm.weights, vec![1.0]);

        let n = codes.len() as f64;
        let mean0: f64 = codes.iter().map(|c| c.data()[0]).sum::<f64>() / n;
        assert!((gmm.means[0].data()[0] - mean0).abs() < 1e-12);

        let var0: f64 = codes.iter().map(|c| (c.data()[0] - mean0).powi(2)).sum::<f64>() / n;
        let ridge = ridge_of(&codes, 2);
        assert!((gmm.covariances[0].at(0, 0) - var0 - ridge).abs() < 1e-12);
    }

    #[test]
    fn m_step_one_hot_responsibilities_partition_statistics() {
        let codes = vec![
            Tensor::vector(vec![0.0, 0.0]),
            Tensor::vector(vec![2.0, 0.0]),
            Tensor::vector(vec![10.0, 1.0]),
            Tensor::vector(vec![12.0, 1.0]),
        ];
        let rows = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let resp = Responsibilities::from_rows(rows).unwrap();
        let gmm = m_step(&codes, &resp).unwrap();
        assert_eq!(gmm.weights, vec![0.5, 0.5]);
        assert_eq!(gmm.means[0].data(), &[1.0, 0.0]);
        assert_eq!(gmm.means[1].data(), &[11.0, 1.0]);
        let sum: f64 = gmm.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn m_step_empty_cluster_names_the_component() {
        let codes = vec![Tensor::vector(vec![0.0]), Tensor::vector(vec![1.0])];
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let resp = Responsibilities::from_rows(rows).unwrap();
        match m_step(&codes, &resp) {
            Err(Error::EmptyCluster { k, .. }) => assert_eq!(k, 1),
            other => panic!("expected empty-cluster error, got {other:?}"),
        }
    }

    fn three_cluster_data(rng: &mut SplitRng, per_cluster: usize) -> (Vec<Tensor>, Vec<Tensor>) {
        // Separation ~10 sigma with sigma=1.
        let centers = vec![
            Tensor::vector(vec![0.0, 0.0, 0.0, 0.0]),
            Tensor::vector(vec![10.0, 0.0, 0.0, 0.0]),
            Tensor::vector(vec![0.0, 10.0, 0.0, 0.0]),
        ];
        let mut codes = Vec::new();
        for c in &centers {
            for _ in 0..per_cluster {
                codes.push(Tensor::from_fn(vec![4], |i| c.data()[i] + rng.normal()));
            }
        }
        (codes, centers)
    }

    #[test]
    fn em_recovers_separated_mixture_means() {
        let mut rng = SplitRng::new(42);
        let (codes, centers) = three_cluster_data(&mut rng, 60);
        let (gmm, trace) = em_fit(&codes, 3, &mut rng, 200, 1e-8).unwrap();

        // Monotone log-likelihood.
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trace not monotone: {} -> {}", w[0], w[1]);
        }

        // Greedy matching is fine at 10-sigma separation.
        for c in &centers {
            let best = gmm
                .means
                .iter()
                .map(|m| squared_distance(m.data(), c.data()).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.5, "no recovered mean near {:?} (best {best})", c.data());
        }
    }

    #[test]
    fn em_k1_is_the_single_gaussian_mle() {
        let mut rng = SplitRng::new(3);
        let codes: Vec<Tensor> = (0..50).map(|_| Tensor::from_fn(vec![3], |_| rng.normal())).collect();
        let (gmm, _) = em_fit(&codes, 1, &mut rng, 50, 1e-10).unwrap();
        let n = codes.len() as f64;
        for j in 0..3 {
            let mean: f64 = codes.iter().map(|c| c.data()[j]).sum::<f64>() / n;
            assert!((gmm.means[0].data()[j] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn em_is_deterministic_per_seed() {
        let mut data_rng = SplitRng::new(8);
        let (codes, _) = three_cluster_data(&mut data_rng, 20);
        let (a, _) = em_fit(&codes, 3, &mut SplitRng::new(99), 100, 1e-8).unwrap();
        let (b, _) = em_fit(&codes, 3, &mut SplitRng::new(99), 100, 1e-8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn silhouette_of_two_tight_far_clusters_is_high() {
        let mut rng = SplitRng::new(15);
        let mut codes = Vec::new();
        let mut rows = Vec::new();
        for _ in 0..30 {
            codes.push(Tensor::from_fn(vec![2], |_| rng.normal() * 0.05));
            rows.push(vec![1.0, 0.0]);
        }
        for _ in 0..30 {
            codes.push(Tensor::from_fn(vec![2], |i| 50.0 * (1 - i) as f64 + rng.normal() * 0.05));
            rows.push(vec![0.0, 1.0]);
        }
        let resp = Responsibilities::from_rows(rows).unwrap();
        let s = silhouette_score(&codes, &resp).unwrap();
        assert!(s > 0.9, "silhouette {s}");
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn silhouette_single_cluster_is_undefined() {
        let codes = vec![Tensor::vector(vec![0.0]), Tensor::vector(vec![1.0])];
        let resp = Responsibilities::from_rows(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            silhouette_score(&codes, &resp),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn js_identical_components_score_near_zero() {
        let gmm = GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![Tensor::zeros(vec![2]), Tensor::zeros(vec![2])],
            covariances: vec![Tensor::identity(2), Tensor::identity(2)],
        };
        let js = jensen_shannon_score(&gmm, &mut SplitRng::new(7), 10_000).unwrap();
        assert!(js.value.abs() < 0.01, "js {}", js.value);
    }

    #[test]
    fn js_far_separated_components_score_near_one() {
        let gmm = GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![Tensor::zeros(vec![2]), Tensor::vector(vec![20.0, 0.0])],
            covariances: vec![Tensor::identity(2), Tensor::identity(2)],
        };
        let js = jensen_shannon_score(&gmm, &mut SplitRng::new(7), 10_000).unwrap();
        assert!(js.value > 0.99, "js {}", js.value);
        assert!(js.value <= 1.0);
    }

    #[test]
    fn js_needs_two_components() {
        let gmm = standard_normal_2d();
        assert!(matches!(
            jensen_shannon_score(&gmm, &mut SplitRng::new(1), 100),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn select_k_single_k_table() {
        let mut rng = SplitRng::new(30);
        let (codes, _) = three_cluster_data(&mut rng, 15);
        let opts = SelectKOptions {
            restarts: 2,
            max_iters: 100,
            tol: 1e-7,
            samples_per_pair: 500,
        };
        let (sel, fits) = select_k(&codes, 2..=2, &mut SplitRng::new(31), &opts).unwrap();
        assert_eq!(sel.rows.len(), 1);
        assert_eq!(sel.chosen, 2);
        assert_eq!(fits.len(), 1);
        let csv = sel.to_csv();
        assert!(csv.starts_with("K,silhouette,jensen_shannon,loglik,restarts\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn select_k_finds_three_regimes() {
        let mut rng = SplitRng::new(5);
        let (codes, _) = three_cluster_data(&mut rng, 40);
        let opts = SelectKOptions {
            restarts: 3,
            max_iters: 150,
            tol: 1e-7,
            samples_per_pair: 2000,
        };
        let (sel, _) = select_k(&codes, 2..=5, &mut SplitRng::new(6), &opts).unwrap();
        assert_eq!(sel.rows.len(), 4);
        assert_eq!(sel.chosen, 3, "table:\n{}", sel.to_csv());
    }
}
