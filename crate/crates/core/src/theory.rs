//! The numerical verification suite: every closed-form claim the library
//! relies on, checked against an independent computation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::losses::{self, LossSpec, LossVariant};
use crate::matrix::Matrix;
use crate::prototypes::{self, PrototypeSet, ProtoGenConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub group: String,
    pub name: String,
    pub pass: bool,
    /// The measured quantity, compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(group: &str, name: String, value: f64, tolerance: f64, pass: bool) -> Self {
        CheckResult {
            group: group.into(),
            name,
            pass,
            value,
            tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn from_checks(checks: Vec<CheckResult>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        VerifyReport { checks, pass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub closed_form_grid: Vec<(usize, usize)>,
    pub optimized_grid: Vec<(usize, usize)>,
    pub grad_instances: usize,
    pub symmetry_points: usize,
    pub lipschitz_k: Vec<usize>,
    pub lipschitz_b: Vec<f64>,
    pub empirical_b: Vec<f64>,
    pub empirical_samples: usize,
    pub etas: Vec<f64>,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            closed_form_grid: vec![(2, 2), (3, 2), (4, 8), (10, 9), (10, 64), (64, 100)],
            optimized_grid: vec![(2, 2), (3, 2), (4, 8), (10, 9)],
            grad_instances: 10,
            symmetry_points: 1000,
            lipschitz_k: vec![2, 3, 10, 64],
            lipschitz_b: vec![0.1, 1.0, 10.0],
            empirical_b: vec![0.5, 1.0, 2.0],
            empirical_samples: 20_000,
            etas: vec![0.0, 0.2, 0.4],
            seed: 0,
        }
    }
}

pub const CLOSED_FORM_TOL: f64 = 1e-10;
pub const OPTIMIZED_TOL: f64 = 1e-3;
pub const NORM_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;
pub const SYMMETRY_TOL: f64 = 1e-9;
pub const CONSISTENCY_TOL: f64 = 1e-12;

/// Signature of [`analysis::empirical_lipschitz`], so callers can swap in a
/// parallel implementation.
pub type LipschitzEstimator<'a> = &'a dyn Fn(&LossSpec, &Matrix, f64, usize, u64) -> crate::Result<f64>;

/// Run every group; `extra` prototype sets are checked against their own
/// recorded tolerance.
pub fn run_suite(cfg: &VerifyConfig, extra: &[PrototypeSet]) -> VerifyReport {
    run_suite_with(cfg, extra, &analysis::empirical_lipschitz)
}

pub fn run_suite_with(cfg: &VerifyConfig, extra: &[PrototypeSet], estimator: LipschitzEstimator) -> VerifyReport {
    let mut checks = Vec::new();
    checks.extend(equiangularity(cfg));
    for (i, p) in extra.iter().enumerate() {
        let rep = prototypes::verify_equiangular(p, p.tolerance());
        checks.push(CheckResult::new(
            "equiangularity",
            format!("supplied set {i} (k={}, d={})", p.k(), p.d()),
            rep.max_gram_dev.max(rep.max_norm_dev),
            p.tolerance(),
            rep.pass,
        ));
    }
    checks.extend(gradient_checks(cfg.grad_instances, cfg.seed));
    checks.extend(symmetry(cfg.symmetry_points, cfg.seed));
    checks.extend(lipschitz_with(cfg, estimator));
    checks.extend(bound_consistency(cfg));
    checks.extend(ldam_threshold());
    VerifyReport::from_checks(checks)
}

pub fn equiangularity(cfg: &VerifyConfig) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for &(k, d) in &cfg.closed_form_grid {
        let name = format!("closed form k={k} d={d}");
        match prototypes::generate_closed_form(k, d) {
            Ok(p) => {
                let rep = prototypes::verify_equiangular(&p, CLOSED_FORM_TOL);
                out.push(CheckResult::new("equiangularity", name, rep.max_gram_dev, CLOSED_FORM_TOL, rep.pass));
            }
            Err(_) => out.push(CheckResult::new("equiangularity", name, f64::INFINITY, CLOSED_FORM_TOL, false)),
        }
    }
    for &(k, d) in &cfg.optimized_grid {
        let gen_cfg = ProtoGenConfig {
            seed: cfg.seed,
            ..ProtoGenConfig::default()
        };
        let name = format!("optimized k={k} d={d}");
        match prototypes::generate_optimized(k, d, &gen_cfg) {
            Ok(p) => {
                let rep = prototypes::verify_equiangular(&p, OPTIMIZED_TOL);
                let pass = rep.max_gram_dev <= OPTIMIZED_TOL && rep.max_norm_dev <= NORM_TOL;
                out.push(CheckResult::new("equiangularity", name.clone(), rep.max_gram_dev, OPTIMIZED_TOL, pass));
                let dev = gram_oracle_deviation(&p);
                out.push(CheckResult::new(
                    "equiangularity",
                    format!("{name} gram vs closed form"),
                    dev,
                    OPTIMIZED_TOL,
                    dev <= OPTIMIZED_TOL,
                ));
            }
            Err(_) => out.push(CheckResult::new("equiangularity", name, f64::INFINITY, OPTIMIZED_TOL, false)),
        }
    }
    out
}

/// Largest entrywise gap between the Gram matrix of `p` and that of the
/// closed-form frame with the same `k`, `d`.
pub fn gram_oracle_deviation(p: &PrototypeSet) -> f64 {
    let Ok(reference) = prototypes::generate_closed_form(p.k(), p.d()) else {
        return f64::INFINITY;
    };
    let a = prototypes::gram_matrix(p);
    let b = prototypes::gram_matrix(&reference);
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Loss specs covered by the gradient checks, one per variant plus a second
/// parameter for the variants that have one.
pub fn gradient_check_specs(k: usize) -> Vec<LossSpec> {
    let margins: Vec<f64> = (0..k).map(|i| 0.1 * (i % 4) as f64).collect();
    let counts: Vec<usize> = (0..k).map(|i| 100 >> (i % 5)).collect();
    vec![
        LossSpec::softmax(),
        LossSpec::margin(margins),
        LossSpec::ldam(losses::ldam_margins(&counts, 0.5).expect("positive counts")),
        LossSpec::nsl(),
        LossSpec::gce(0.7),
        LossSpec::gce(0.2),
        LossSpec::focal(2.0),
        LossSpec::focal(0.5),
    ]
}

/// Worst relative error per (variant, normalization, anchoring) cell over
/// `instances` random batches.
pub fn gradient_checks(instances: usize, seed: u64) -> Vec<CheckResult> {
    let (k, d, n) = (5usize, 6usize, 4usize);
    let etf = prototypes::generate_closed_form(k, d).expect("k <= d + 1").into_matrix();
    let mut r = rng::seeded(rng::derive(seed, 0x4752));
    let mut out = Vec::new();
    for base in gradient_check_specs(k) {
        for normalize in [false, true] {
            for anchored in [true, false] {
                if base.variant == LossVariant::Nsl && !anchored {
                    continue;
                }
                let spec = base.clone().with_scale(1.5).normalized(normalize).anchored(anchored);
                let mut worst: f64 = 0.0;
                for _ in 0..instances {
                    let z = gaussian(n, d, &mut r);
                    let w = if anchored { etf.clone() } else { gaussian(k, d, &mut r) };
                    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
                    worst = worst.max(match losses::grad_check(&spec, &z, &labels, &w, 1e-5) {
                        Ok(rep) => rep.max_rel_err,
                        Err(_) => f64::INFINITY,
                    });
                }
                let name = format!(
                    "{}{} normalized={normalize} anchored={anchored}",
                    base.variant.name(),
                    param_suffix(&base)
                );
                out.push(CheckResult::new("gradients", name, worst, GRAD_TOL, worst <= GRAD_TOL));
            }
        }
    }
    out
}

fn param_suffix(spec: &LossSpec) -> String {
    match (spec.q, spec.focal_gamma) {
        (Some(q), _) => format!(" q={q}"),
        (_, Some(g)) => format!(" gamma={g}"),
        _ => String::new(),
    }
}

fn gaussian(rows: usize, cols: usize, r: &mut rng::Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *r)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// `max |sum_j L_NSL(z, j)|` over random features, with the ETF at k=10.
pub fn nsl_symmetry_max(points: usize, seed: u64) -> f64 {
    let w = prototypes::generate_closed_form(10, 9).expect("k <= d + 1").into_matrix();
    let mut r = rng::seeded(rng::derive(seed, 0x4e53));
    let spec = LossSpec::nsl();
    (0..points)
        .map(|_| {
            let z: Vec<f64> = (0..9).map(|_| StandardNormal.sample(&mut r)).collect();
            losses::loss_symmetry_sum(&spec, &z, &w).map_or(f64::INFINITY, f64::abs)
        })
        .fold(0.0, f64::max)
}

pub fn symmetry(points: usize, seed: u64) -> Vec<CheckResult> {
    let worst = nsl_symmetry_max(points, seed);
    vec![CheckResult::new(
        "symmetry",
        format!("NSL class sum over {points} features"),
        worst,
        SYMMETRY_TOL,
        worst <= SYMMETRY_TOL,
    )]
}

pub fn lipschitz(cfg: &VerifyConfig) -> Vec<CheckResult> {
    lipschitz_with(cfg, &analysis::empirical_lipschitz)
}

pub fn lipschitz_with(cfg: &VerifyConfig, estimator: LipschitzEstimator) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for &k in &cfg.lipschitz_k {
        for &b in &cfg.lipschitz_b {
            let Ok(u) = analysis::lipschitz_unanchored_lower_bounds(k, b) else {
                out.push(CheckResult::new("lipschitz", format!("bounds k={k} B={b}"), f64::NAN, 0.0, false));
                continue;
            };
            if k == 2 {
                // the unanchored worst case is itself an anchored frame here
                let gap = (u.normalized_both - u.pal).abs();
                out.push(CheckResult::new(
                    "lipschitz",
                    format!("k=2 B={b}: normalized-both equals PAL"),
                    gap,
                    CONSISTENCY_TOL,
                    gap <= CONSISTENCY_TOL && u.pal < u.normalized_w_only,
                ));
            } else {
                let slack = u.normalized_w_only.min(u.normalized_both) - u.pal;
                out.push(CheckResult::new(
                    "lipschitz",
                    format!("k={k} B={b}: PAL below both unanchored bounds"),
                    slack,
                    0.0,
                    u.pal_is_tighter,
                ));
            }
        }
    }
    let etf = prototypes::generate_closed_form(10, 9).expect("k <= d + 1").into_matrix();
    let spec = LossSpec::softmax().fnpal(1.0);
    for &b in &cfg.empirical_b {
        let lam = analysis::lipschitz_pal(10, b).unwrap_or(f64::NAN);
        let est = estimator(&spec, &etf, b, cfg.empirical_samples, cfg.seed).unwrap_or(f64::NAN);
        let ratio = est / lam;
        out.push(CheckResult::new(
            "lipschitz",
            format!("empirical CE k=10 B={b} within [0.5, 1.001] of PAL"),
            ratio,
            1.001,
            (0.5..=1.001).contains(&ratio),
        ));
    }
    let nsl = estimator(&LossSpec::nsl(), &etf, 1.0, cfg.empirical_samples.min(2000), cfg.seed)
        .unwrap_or(f64::NAN);
    out.push(CheckResult::new("lipschitz", "empirical NSL k=10 B=1 vanishes".into(), nsl, SYMMETRY_TOL, nsl <= SYMMETRY_TOL));
    out
}

pub fn bound_consistency(cfg: &VerifyConfig) -> Vec<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut ok = true;
    for &k in &cfg.lipschitz_k {
        for &b in &cfg.lipschitz_b {
            for &eta in &cfg.etas {
                if eta >= (k as f64 - 1.0) / k as f64 {
                    continue;
                }
                let (Ok(ce), Ok(lam)) = (analysis::risk_bound_ce(eta, b, k), analysis::lipschitz_pal(k, b)) else {
                    ok = false;
                    continue;
                };
                let Ok(general) = analysis::risk_bound_general(eta, lam, b, k) else {
                    ok = false;
                    continue;
                };
                worst = worst.max((ce.bound - general).abs() / ce.bound.abs().max(1.0));
                count += 1;
            }
        }
    }
    let zero_eta = analysis::risk_bound_ce(0.0, 1.0, 10).map_or(f64::NAN, |r| r.bound);
    let zero_lambda = analysis::risk_bound_general(0.4, 0.0, 1.0, 10).unwrap_or(f64::NAN);
    vec![
        CheckResult::new(
            "bounds",
            format!("CE form equals general form at PAL constant ({count} points)"),
            worst,
            CONSISTENCY_TOL,
            ok && worst <= CONSISTENCY_TOL,
        ),
        CheckResult::new("bounds", "zero at eta = 0".into(), zero_eta, 0.0, zero_eta == 0.0),
        CheckResult::new("bounds", "zero at lambda = 0".into(), zero_lambda, 0.0, zero_lambda == 0.0),
    ]
}

/// Nonnegative margins on a 0.25 grid over [0, 5].
fn margin_grid() -> impl Iterator<Item = f64> + Clone {
    (0..=20).map(|i| i as f64 * 0.25)
}

pub fn ldam_threshold() -> Vec<CheckResult> {
    let mut equal_worst: f64 = 0.0;
    for a in margin_grid() {
        for r in [0.5, 1.0, 2.0, 4.0] {
            let t = analysis::ldam_bayes_threshold(a, a, r).unwrap_or(f64::NAN);
            equal_worst = equal_worst.max((t - 0.5).abs());
        }
    }
    let mut min_dev = f64::INFINITY;
    let mut flips = true;
    for ap in margin_grid() {
        for am in margin_grid() {
            let Ok(t) = analysis::ldam_bayes_threshold(ap, am, 2.0) else {
                min_dev = f64::NAN;
                continue;
            };
            if (ap - am).abs() >= 1.0 {
                min_dev = min_dev.min((t - 0.5).abs());
            }
            flips &= analysis::ldam_optimal_sign((t + 1e-6).min(1.0), ap, am, 2.0) == 1
                && analysis::ldam_optimal_sign((t - 1e-6).max(0.0), ap, am, 2.0) == -1;
        }
    }
    vec![
        CheckResult::new("ldam", "equal margins give exactly 1/2".into(), equal_worst, 0.0, equal_worst == 0.0),
        CheckResult::new(
            "ldam",
            "margin gap >= 1 at r=2 moves threshold by >= 0.01".into(),
            min_dev,
            0.01,
            min_dev >= 0.01,
        ),
        CheckResult::new("ldam", "optimal sign flips at the threshold".into(), f64::from(u8::from(flips)), 1.0, flips),
    ]
}
