//! `verify` subcommand: runs one analysis experiment and checks its claims.

use serde::Serialize;
use serde_json::json;

use accordion_core::verify::{
    self, critical_trace, hessian_top_eigs, hvp_symmetry_error, lemma_montecarlo, stochastic_lasso_grads, topk_overlap,
    EigenSettings, LemmaParams,
};
use accordion_core::{linalg, Dataset, Model};

use crate::config::{ConfigError, Fixture, RunSpec};
use crate::{train, CliError};

/// Largest tolerated HVP asymmetry.
pub const SYMMETRY_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Which {
    Overlap,
    Lemma,
    Hessian,
    Trace,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Overlap => "overlap",
            Which::Lemma => "lemma",
            Which::Hessian => "hessian",
            Which::Trace => "trace",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub which: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub data: serde_json::Value,
}

impl VerifyReport {
    fn new(which: Which, checks: Vec<Check>, data: serde_json::Value) -> Self {
        Self {
            which: which.name().into(),
            passed: checks.iter().all(|c| c.passed),
            checks,
            data,
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn run(which: Which, spec: &RunSpec, threads: usize) -> Result<VerifyReport, CliError> {
    match which {
        Which::Lemma => lemma(spec),
        Which::Overlap => overlap(spec),
        Which::Hessian => hessian(spec, threads),
        Which::Trace => trace(spec, threads),
    }
}

fn lemma_params(spec: &RunSpec) -> Result<LemmaParams, CliError> {
    let mut p = match spec.verify_fixture {
        Fixture::Toy => LemmaParams {
            mu: vec![1.0, 0.0, 0.0, 0.0],
            w: vec![0.0, 1.0, 0.0, 0.0],
            sigma: 0.01,
            ..LemmaParams::random(4, 1, 1, 0.01, spec.seed)
        },
        Fixture::Spec => {
            if spec.mu_nonzeros > spec.dim || spec.verify_k2 > spec.dim {
                return Err(ConfigError::Invalid("sparsity levels exceed data.dim".into()).into());
            }
            let mut p = LemmaParams::random(spec.dim, spec.mu_nonzeros, spec.verify_k2, spec.sigma, spec.seed);
            p.mu.iter_mut().for_each(|m| *m *= spec.mu_scale);
            p
        }
    };
    p.lambda = spec.lambda;
    p.n = spec.verify_samples;
    p.trials = spec.verify_trials;
    p.validate()?;
    Ok(p)
}

fn lemma(spec: &RunSpec) -> Result<VerifyReport, CliError> {
    let p = lemma_params(spec)?;
    let r = lemma_montecarlo(&p)?;
    let k = r.k1 + r.k2;
    let checks = vec![
        Check::new(
            "expected_gradient_sparse",
            r.support_size <= k,
            format!("nnz = {} ≤ k1 + k2 = {k}", r.support_size),
        ),
        Check::new(
            "sampling_mean_sparse",
            r.mean_support_size <= k,
            format!("nnz = {} ≤ k1 + k2 = {k}", r.mean_support_size),
        ),
        Check::new(
            "tail_within_chebyshev",
            r.empirical_tail <= r.exact_chebyshev_bound.min(1.0),
            format!("tail {} vs bound {}", r.empirical_tail, r.exact_chebyshev_bound),
        ),
    ];
    Ok(VerifyReport::new(Which::Lemma, checks, json!(r)))
}

fn overlap(spec: &RunSpec) -> Result<VerifyReport, CliError> {
    let p = lemma_params(spec)?;
    let count = spec.verify_gradients.max(2);
    let (grads, lemma_regime) = match spec.verify_fixture {
        Fixture::Toy => {
            let g = stochastic_lasso_grads(&p, 1)?.remove(0);
            (vec![g; count], false)
        }
        Fixture::Spec => (
            stochastic_lasso_grads(&p, count)?,
            p.sigma <= 0.05 * linalg::norm2(&p.mu),
        ),
    };
    let value = topk_overlap(&grads, spec.verify_fraction, spec.seed)?;
    let mut checks = vec![Check::new(
        "overlap_in_unit_interval",
        (0.0..=1.0).contains(&value),
        format!("{value}"),
    )];
    match spec.verify_fixture {
        Fixture::Toy => checks.push(Check::new(
            "identical_gradients_overlap_fully",
            value == 1.0,
            format!("{value}"),
        )),
        Fixture::Spec if lemma_regime => checks.push(Check::new(
            "lemma_regime_overlap_at_least_0.9",
            value >= 0.9,
            format!("{value}"),
        )),
        Fixture::Spec => {}
    }
    Ok(VerifyReport::new(
        Which::Overlap,
        checks,
        json!({ "overlap": value, "gradients": count, "fraction": spec.verify_fraction, "lemma_regime": lemma_regime }),
    ))
}

fn probe_batch(spec: &RunSpec, data: &Dataset) -> Vec<usize> {
    (0..spec.verify_hessian_samples.clamp(1, data.len())).collect()
}

fn eigen_settings(spec: &RunSpec) -> EigenSettings {
    EigenSettings {
        seed: spec.seed,
        ..EigenSettings::default()
    }
}

fn hessian(spec: &RunSpec, threads: usize) -> Result<VerifyReport, CliError> {
    if spec.verify_fixture == Fixture::Toy {
        // ½(3w₁² + w₂²) written as a least-squares loss over two samples
        let data = Dataset::new(vec![vec![6f64.sqrt(), 0.0], vec![0.0, 2f64.sqrt()]], vec![0.0, 0.0], 0)?;
        let mut model = Model::least_squares(2);
        model.set_params(&[0.3, -0.7])?;
        let settings = EigenSettings {
            iters: 2000,
            tol: 1e-12,
            seed: spec.seed,
        };
        let eigs = hessian_top_eigs(&data, &[0, 1], 2, &[model], settings)?.remove(0);
        let ok = (eigs.eigenvalues[0] - 3.0).abs() <= 1e-4 && (eigs.eigenvalues[1] - 1.0).abs() <= 1e-4;
        let checks = vec![Check::new("eigenvalues_3_and_1", ok, format!("{:?}", eigs.eigenvalues))];
        return Ok(VerifyReport::new(Which::Hessian, checks, json!(eigs)));
    }

    let data = spec.dataset()?;
    let out = train(spec, threads, false)?;
    let batch = probe_batch(spec, &data);
    let model = &out.result.model;
    let eigs = hessian_top_eigs(
        &data,
        &batch,
        spec.verify_eigs,
        std::slice::from_ref(model),
        eigen_settings(spec),
    )?
    .remove(0);
    let symmetry = hvp_symmetry_error(model, &data, &batch, 5, spec.seed)?;
    let checks = vec![
        Check::new(
            "hvp_symmetric",
            symmetry <= SYMMETRY_TOL,
            format!("{symmetry:e} ≤ {SYMMETRY_TOL:e}"),
        ),
        Check::new(
            "eigensolver_converged",
            eigs.converged.iter().all(|&c| c),
            format!("{:?}", eigs.converged),
        ),
    ];
    Ok(VerifyReport::new(
        Which::Hessian,
        checks,
        json!({ "eigenvalues": eigs.eigenvalues, "symmetry_error": symmetry }),
    ))
}

/// Windows a trace must cover: warmup, then every decay plus the window.
pub fn required_windows(spec: &RunSpec) -> Vec<(usize, usize)> {
    std::iter::once((0, spec.warmup))
        .chain(spec.decay_epochs.iter().map(|&d| (d, d + spec.verify_window)))
        .collect()
}

fn trace(spec: &RunSpec, threads: usize) -> Result<VerifyReport, CliError> {
    if spec.verify_fixture == Fixture::Toy {
        return Err(ConfigError::Invalid("verify trace has no toy fixture".into()).into());
    }
    let data = spec.dataset()?;
    let out = train(spec, threads, true)?;
    let batch = probe_batch(spec, &data);
    let checkpoints = &out.result.checkpoints;
    let hess: Vec<f64> = hessian_top_eigs(&data, &batch, 1, checkpoints, eigen_settings(spec))?
        .iter()
        .map(|r| r.eigenvalues[0])
        .collect();
    let grad = &out.result.delta_norms;
    let symmetry = checkpoints
        .iter()
        .map(|m| hvp_symmetry_error(m, &data, &batch, 2, spec.seed))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0f64, f64::max);

    let hess_flags = critical_trace(&hess, spec.verify_window, spec.eta);
    let grad_flags = critical_trace(grad, spec.verify_window, spec.eta);
    let epochs = spec.epochs;
    let mut checks = Vec::new();
    for (signal, flags) in [("hessian", &hess_flags), ("gradient_norm", &grad_flags)] {
        for (lo, hi) in required_windows(spec) {
            let missing: Vec<usize> = (lo..=hi.min(epochs - 1)).filter(|e| !flags.contains(e)).collect();
            checks.push(Check::new(
                format!("{signal}_flags_{lo}_to_{hi}"),
                verify::covers(flags, lo, hi, epochs),
                if missing.is_empty() {
                    "covered".to_string()
                } else {
                    format!("unflagged epochs {missing:?}")
                },
            ));
        }
    }
    checks.push(Check::new(
        "hvp_symmetric",
        symmetry <= SYMMETRY_TOL,
        format!("{symmetry:e} ≤ {SYMMETRY_TOL:e}"),
    ));
    Ok(VerifyReport::new(
        Which::Trace,
        checks,
        json!({
            "hessian_top": hess,
            "gradient_norm": grad,
            "hessian_flags": hess_flags,
            "gradient_norm_flags": grad_flags,
            "symmetry_error": symmetry,
        }),
    ))
}
