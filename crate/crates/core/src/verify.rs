//! Experiments behind the analysis claims: sparse-mean/dense-noise LASSO
//! gradients, Top-K support overlap, Hessian spectra and gradient-norm
//! critical-regime tracing.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::compressor::{topk_count, topk_indices};
use crate::error::{Error, Result};
use crate::linalg::{self, derive_seed, seeded_rng, top_eigs_deflated};
use crate::model::{self, sign, Dataset, Model};

/// Parameters of the two-Gaussian LASSO setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaParams {
    /// Class mean, `k1`-sparse.
    pub mu: Vec<f64>,
    /// Model point, `k2`-sparse.
    pub w: Vec<f64>,
    pub lambda: f64,
    pub sigma: f64,
    /// Deviation threshold; defaults to the smallest non-zero magnitude of
    /// the mean gradient.
    pub gamma_min: Option<f64>,
    /// Samples per trial.
    pub n: usize,
    /// Number of independent trials.
    pub trials: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl LemmaParams {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn k1(&self) -> usize {
        nnz(&self.mu)
    }

    pub fn k2(&self) -> usize {
        nnz(&self.w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.w.len() {
            return Err(Error::Shape(format!(
                "μ has {} entries, w has {}",
                self.mu.len(),
                self.w.len()
            )));
        }
        if !(self.sigma > 0.0) || self.lambda < 0.0 {
            return Err(Error::Config("need σ > 0 and λ ≥ 0".into()));
        }
        if self.n == 0 || self.trials == 0 {
            return Err(Error::Config("need at least one sample and one trial".into()));
        }
        Ok(())
    }

    /// Random `k1`-sparse μ and `k2`-sparse w in dimension `d`.
    pub fn random(d: usize, k1: usize, k2: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut sparse = |k: usize| {
            let mut v = vec![0.0; d];
            for j in rand::seq::index::sample(&mut rng, d, k.min(d)) {
                let mag: f64 = rng.random_range(0.5..2.0);
                v[j] = if rng.random_bool(0.5) { mag } else { -mag };
            }
            v
        };
        let mu = sparse(k1);
        let w = sparse(k2);
        Self {
            mu,
            w,
            lambda: 0.1,
            sigma,
            gamma_min: None,
            n: 1000,
            trials: 100,
            epsilon: 0.1,
            seed,
        }
    }
}

pub fn nnz(v: &[f64]) -> usize {
    v.iter().filter(|&&x| x != 0.0).count()
}

pub fn support(v: &[f64]) -> BTreeSet<usize> {
    v.iter()
        .enumerate()
        .filter(|(_, &x)| x != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Per-sample LASSO gradient `x(xᵀw) − x·y + λ·sign(w)`.
pub fn lasso_gradient(w: &[f64], x: &[f64], y: f64, lambda: f64) -> Vec<f64> {
    let xw = linalg::dot(x, w);
    x.iter()
        .zip(w)
        .map(|(xi, wi)| xi * xw - xi * y + lambda * sign(*wi))
        .collect()
}

/// Closed form `w + λ·sign(w) + μ(μᵀw)`, i.e. `(I + μμᵀ)w + λ·sign(w)`.
pub fn expected_lasso_grad(p: &LemmaParams) -> Vec<f64> {
    let mw = linalg::dot(&p.mu, &p.w);
    p.w.iter()
        .zip(&p.mu)
        .map(|(wi, mi)| wi + p.lambda * sign(*wi) + mi * mw)
        .collect()
}

/// Exact mean of [`lasso_gradient`] when `x = yμ + σz`, `y = ±1` equally
/// likely: `σ²w + μ(μᵀw) − μ + λ·sign(w)`.
pub fn lasso_mean_grad(p: &LemmaParams) -> Vec<f64> {
    let mw = linalg::dot(&p.mu, &p.w);
    let s2 = p.sigma * p.sigma;
    p.w.iter()
        .zip(&p.mu)
        .map(|(wi, mi)| s2 * wi + mi * mw - mi + p.lambda * sign(*wi))
        .collect()
}

/// Exact per-coordinate variance of the per-sample gradient.
pub fn lasso_grad_variance(p: &LemmaParams) -> Vec<f64> {
    let a = linalg::dot(&p.mu, &p.w);
    let w2 = linalg::dot(&p.w, &p.w);
    let (s2, s4) = (p.sigma * p.sigma, p.sigma.powi(4));
    p.w.iter()
        .zip(&p.mu)
        .map(|(wj, mj)| {
            s2 * (mj * mj * w2 + 2.0 * mj * (a - 1.0) * wj + (a - 1.0) * (a - 1.0)) + s4 * (w2 + 2.0 * wj * wj)
        })
        .collect()
}

/// `(σ⁴ + 2‖μ‖²_max σ²)‖w‖² + σ²`.
pub fn variance_bound(p: &LemmaParams) -> f64 {
    let mu_max = p.mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let w2 = linalg::dot(&p.w, &p.w);
    let s2 = p.sigma * p.sigma;
    (s2 * s2 + 2.0 * mu_max * mu_max * s2) * w2 + s2
}

/// Draws one stochastic sample `(x, y)`.
fn draw<R: Rng>(rng: &mut R, mu: &[f64], sigma: f64) -> (Vec<f64>, f64) {
    let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let x = mu
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            y * m + sigma * z
        })
        .collect();
    (x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaReport {
    pub dim: usize,
    pub k1: usize,
    pub k2: usize,
    /// `nnz` of the closed-form expected gradient.
    pub support_size: usize,
    /// `nnz` of the exact sampling mean.
    pub mean_support_size: usize,
    pub gamma_min: f64,
    /// Fraction of trials where some sample deviates by `≥ γ` in some coordinate.
    pub empirical_tail: f64,
    /// `n·d·V/γ²` with the closed-form variance bound `V`.
    pub chebyshev_bound: f64,
    /// Same bound with the exact per-coordinate variance.
    pub exact_chebyshev_bound: f64,
    /// Largest per-coordinate, per-sample exceedance frequency.
    pub coordinate_tail_max: f64,
    /// `max_j Var_j / γ²`.
    pub coordinate_bound: f64,
}

/// Monte-Carlo check of the sparse-mean / small-noise claim.
pub fn lemma_montecarlo(p: &LemmaParams) -> Result<LemmaReport> {
    p.validate()?;
    let d = p.dim();
    let mean = lasso_mean_grad(p);
    let gamma = p.gamma_min.unwrap_or_else(|| {
        mean.iter()
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    });
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config("mean gradient has no non-zero entry; γ undefined".into()));
    }

    let (failures, coord_hits): (usize, Vec<u64>) = (0..p.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded_rng(derive_seed(p.seed, t as u64));
            let mut hits = vec![0u64; d];
            let mut failed = false;
            for _ in 0..p.n {
                let (x, y) = draw(&mut rng, &p.mu, p.sigma);
                let g = lasso_gradient(&p.w, &x, y, p.lambda);
                for (j, (gj, mj)) in g.iter().zip(&mean).enumerate() {
                    if (gj - mj).abs() >= gamma {
                        hits[j] += 1;
                        failed = true;
                    }
                }
            }
            (usize::from(failed), hits)
        })
        .reduce(
            || (0, vec![0u64; d]),
            |(fa, mut ha), (fb, hb)| {
                ha.iter_mut().zip(hb).for_each(|(a, b)| *a += b);
                (fa + fb, ha)
            },
        );

    let samples = (p.trials * p.n) as f64;
    let exact_var = lasso_grad_variance(p);
    let max_var = exact_var.iter().fold(0.0f64, |m, v| m.max(*v));
    let nd = (p.n * d) as f64;
    Ok(LemmaReport {
        dim: d,
        k1: p.k1(),
        k2: p.k2(),
        support_size: nnz(&expected_lasso_grad(p)),
        mean_support_size: nnz(&mean),
        gamma_min: gamma,
        empirical_tail: failures as f64 / p.trials as f64,
        chebyshev_bound: nd * variance_bound(p) / (gamma * gamma),
        exact_chebyshev_bound: nd * max_var / (gamma * gamma),
        coordinate_tail_max: coord_hits.iter().map(|&h| h as f64 / samples).fold(0.0, f64::max),
        coordinate_bound: max_var / (gamma * gamma),
    })
}

/// `count` per-sample LASSO gradients on two-Gaussian data.
pub fn stochastic_lasso_grads(p: &LemmaParams, count: usize) -> Result<Vec<Vec<f64>>> {
    let data = model::gen_two_gaussian(&p.mu, p.sigma, count, p.seed)?;
    Ok(data
        .features
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| lasso_gradient(&p.w, x, y, p.lambda))
        .collect())
}

const MAX_OVERLAP_PAIRS: usize = 10_000;

fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Mean pairwise `|supp_K(u) ∩ supp_K(v)| / ⌈K·d⌉`, over at most 10⁴ pairs
/// (sampled with `seed` when there are more).
pub fn topk_overlap(grads: &[Vec<f64>], fraction: f64, seed: u64) -> Result<f64> {
    if grads.len() < 2 {
        return Err(Error::Config("overlap needs at least two gradients".into()));
    }
    let d = grads[0].len();
    if grads.iter().any(|g| g.len() != d) {
        return Err(Error::Shape("gradients differ in dimension".into()));
    }
    let k = topk_count(fraction, d);
    let supports: Vec<Vec<usize>> = grads.iter().map(|g| topk_indices(g, k)).collect();
    let n = grads.len();
    let total_pairs = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if total_pairs <= MAX_OVERLAP_PAIRS {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = seeded_rng(seed);
        (0..MAX_OVERLAP_PAIRS)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i.min(j), i.max(j))
            })
            .collect()
    };
    let sum: f64 = pairs
        .iter()
        .map(|&(i, j)| sorted_intersection(&supports[i], &supports[j]) as f64 / k as f64)
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// Hessian-vector product by central differences of the full-batch
/// gradient, step `h = 1e-4·‖w‖/‖v‖`.
pub fn hvp(model: &Model, data: &Dataset, batch: &[usize], v: &[f64]) -> Result<Vec<f64>> {
    let w = model.params();
    let vn = linalg::norm2(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = 1e-4 * linalg::norm2(&w).max(1.0) / vn;
    let mut probe = model.clone();
    let shifted = |sgn: f64, probe: &mut Model| -> Result<Vec<f64>> {
        let p: Vec<f64> = w.iter().zip(v).map(|(wi, vi)| wi + sgn * h * vi).collect();
        probe.set_params(&p)?;
        Ok(model::loss_and_grad(probe, data, batch)?.1.flatten())
    };
    let up = shifted(1.0, &mut probe)?;
    let down = shifted(-1.0, &mut probe)?;
    Ok(up.iter().zip(down).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Largest `|uᵀHv − vᵀHu| / max(‖Hu‖, ‖Hv‖)` over `pairs` random unit
/// vector pairs; zero for an exactly symmetric operator.
pub fn hvp_symmetry_error(model: &Model, data: &Dataset, batch: &[usize], pairs: usize, seed: u64) -> Result<f64> {
    let dim = model.num_params();
    let mut rng = seeded_rng(seed);
    let mut unit = || {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = linalg::norm2(&v);
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (u, v) = (unit(), unit());
        let hu = hvp(model, data, batch, &u)?;
        let hv = hvp(model, data, batch, &v)?;
        let scale = linalg::norm2(&hu).max(linalg::norm2(&hv));
        if scale > 0.0 {
            worst = worst.max((linalg::dot(&u, &hv) - linalg::dot(&v, &hu)).abs() / scale);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianReport {
    pub eigenvalues: Vec<f64>,
    pub converged: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct EigenSettings {
    pub iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for EigenSettings {
    fn default() -> Self {
        Self {
            iters: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Top-`k` Hessian eigenvalues (by magnitude, with deflation) at every checkpoint.
pub fn hessian_top_eigs(
    data: &Dataset,
    batch: &[usize],
    k: usize,
    checkpoints: &[Model],
    settings: EigenSettings,
) -> Result<Vec<HessianReport>> {
    if k == 0 || k > 10 {
        return Err(Error::Config(format!("k = {k} outside 1..=10")));
    }
    checkpoints
        .par_iter()
        .map(|model| {
            if model.num_params() > 1000 {
                return Err(Error::Config(format!(
                    "{} parameters is too many for explicit Hessian probing",
                    model.num_params()
                )));
            }
            let failure = std::sync::Mutex::new(None);
            let matvec = |x: &[f64]| match hvp(model, data, batch, x) {
                Ok(y) => y,
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                    vec![0.0; x.len()]
                }
            };
            let pairs = top_eigs_deflated(
                matvec,
                model.num_params(),
                k,
                settings.iters,
                settings.tol,
                settings.seed,
            );
            if let Some(e) = failure.into_inner().unwrap() {
                return Err(e);
            }
            for (i, p) in pairs.iter().enumerate() {
                if !p.converged {
                    log::warn!("Hessian eigenvalue {i} did not converge in {} iterations", p.iterations);
                }
            }
            Ok(HessianReport {
                eigenvalues: pairs.iter().map(|p| p.value).collect(),
                converged: pairs.iter().map(|p| p.converged).collect(),
            })
        })
        .collect()
}

/// Flags every epoch of each window `[e, e + window]` whose endpoints differ
/// by at least `eta` relative to the starting value. Windows are clipped at the
/// end of the run; a zero start counts as changed only if the end is nonzero.
pub fn critical_trace(signal: &[f64], window: usize, eta: f64) -> BTreeSet<usize> {
    let mut flagged = BTreeSet::new();
    let window = window.max(1);
    for e in 0..signal.len().saturating_sub(1) {
        let end = (e + window).min(signal.len() - 1);
        let (start, last) = (signal[e], signal[end]);
        let changed = if start == 0.0 {
            last != 0.0
        } else {
            (start - last).abs() / start.abs() >= eta
        };
        if changed {
            flagged.extend(e..=end);
        }
    }
    flagged
}

/// Whether every epoch in `lo..=hi` (clipped to the run) is flagged.
pub fn covers(flags: &BTreeSet<usize>, lo: usize, hi: usize, epochs: usize) -> bool {
    (lo..=hi.min(epochs.saturating_sub(1))).all(|e| flags.contains(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(mu: Vec<f64>, w: Vec<f64>, lambda: f64) -> LemmaParams {
        LemmaParams {
            mu,
            w,
            lambda,
            sigma: 1.0,
            gamma_min: None,
            n: 1000,
            trials: 10,
            epsilon: 0.1,
            seed: 0,
        }
    }

    #[test]
    fn closed_form_example() {
        let p = params(vec![0.0, 1.0], vec![1.0, 0.0], 0.1);
        let g = expected_lasso_grad(&p);
        assert!((g[0] - 1.1).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
        assert!(nnz(&g) <= p.k1() + p.k2());
    }

    #[test]
    fn zero_model_point() {
        let p = params(vec![0.0, 1.0, -2.0], vec![0.0; 3], 0.3);
        assert!(expected_lasso_grad(&p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn support_inclusion() {
        for seed in 0..50 {
            let p = LemmaParams::random(30, 4, 3, 0.5, seed);
            let allowed: BTreeSet<usize> = support(&p.w).union(&support(&p.mu)).copied().collect();
            assert!(support(&expected_lasso_grad(&p)).is_subset(&allowed));
            assert!(support(&lasso_mean_grad(&p)).is_subset(&allowed));
        }
    }

    #[test]
    fn overlap_fixtures() {
        let g = vec![vec![3.0, -1.0, 0.0, 5.0]; 3];
        assert_eq!(topk_overlap(&g, 0.5, 0).unwrap(), 1.0);
        let disjoint = vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]];
        assert_eq!(topk_overlap(&disjoint, 0.5, 0).unwrap(), 0.0);
        assert!(topk_overlap(&g[..1], 0.5, 0).is_err());
    }

    #[test]
    fn trace_examples() {
        assert!(critical_trace(&[2.0; 10], 3, 0.5).is_empty());
        let halving: Vec<f64> = (0..8).map(|e| 0.5f64.powi(e)).collect();
        assert_eq!(critical_trace(&halving, 3, 0.5), (0..8).collect());
        // a jump at epoch 3 is seen by every window straddling it
        let step = [1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0];
        assert_eq!(critical_trace(&step, 2, 0.5), (1..=4).collect());
        // slow drift only registers once the window is wide enough
        let drift: Vec<f64> = (0..10).map(|e| 1.0 - 0.2 * e as f64 / 10.0 * 2.0).collect();
        assert!(critical_trace(&drift, 1, 0.5).is_empty());
        assert!(!critical_trace(&drift, 9, 0.2).is_empty());
    }

    #[test]
    fn quadratic_hessian() {
        // ½(3w₁² + w₂²) as a least-squares loss
        let data = Dataset::new(vec![vec![6f64.sqrt(), 0.0], vec![0.0, 2f64.sqrt()]], vec![0.0, 0.0], 0).unwrap();
        let mut m = Model::least_squares(2);
        m.set_params(&[0.3, -0.7]).unwrap();
        let settings = EigenSettings {
            iters: 2000,
            tol: 1e-12,
            seed: 1,
        };
        let r = hessian_top_eigs(&data, &[0, 1], 2, &[m], settings).unwrap();
        assert!((r[0].eigenvalues[0] - 3.0).abs() < 1e-4);
        assert!((r[0].eigenvalues[1] - 1.0).abs() < 1e-4);
    }
}
