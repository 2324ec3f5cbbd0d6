//! Diagnostics and closed-form theory quantities.
//!
//! Margins, calibration bins and norm statistics summarize a trained model.
//! The Lipschitz constants, risk bounds and the LDAM threshold are closed
//! forms checked against sampling or against each other in the tests and in
//! the verification suite.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossSpec};
use crate::matrix::{dot, norm, Matrix};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub per_sample: Vec<f64>,
    /// Smallest margin within each class; `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub min_margin: f64,
}

/// `s * (w_y . z - max_{j != y} w_j . z)` for every sample.
pub fn sample_margins(features: &Matrix, labels: &[usize], protos: &Matrix, scale: f64) -> Result<MarginReport> {
    let k = protos.rows();
    if features.cols() != protos.cols() || labels.len() != features.rows() {
        return Err(Error::shape("features, labels and prototypes disagree in shape"));
    }
    if k < 2 || labels.is_empty() {
        return Err(Error::shape("margins need at least two classes and one sample"));
    }
    let mut per_sample = Vec::with_capacity(labels.len());
    let mut per_class: Vec<Option<f64>> = vec![None; k];
    for (z, &y) in features.iter_rows().zip(labels) {
        if y >= k {
            return Err(Error::Label { label: y, k });
        }
        let mut other = f64::NEG_INFINITY;
        let mut own = 0.0;
        for j in 0..k {
            let v = dot(protos.row(j), z);
            if j == y {
                own = v;
            } else {
                other = other.max(v);
            }
        }
        let g = scale * (own - other);
        per_sample.push(g);
        let slot = &mut per_class[y];
        *slot = Some(slot.map_or(g, |m: f64| m.min(g)));
    }
    let min_margin = per_sample.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MarginReport {
        per_sample,
        per_class,
        min_margin,
    })
}

/// Smallest angle between two prototype rows, in degrees.
pub fn min_prototype_angle(w: &Matrix) -> Result<f64> {
    if w.rows() < 2 {
        return Err(Error::shape("need at least two prototypes"));
    }
    if let Some(row) = w.iter_rows().position(|r| norm(r) == 0.0) {
        return Err(Error::ZeroVector { row });
    }
    Ok(crate::prototypes::min_angle_deg(w).expect("rows are nonzero"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub confidence_mean: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bin_count: usize,
    pub n: usize,
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

pub const DEFAULT_ECE_BINS: usize = 15;

/// Expected calibration error over equal-width confidence bins.
///
/// Confidence is the largest probability of a row and the prediction its
/// first argmax. Bin `b` covers `(b/B, (b+1)/B]`; a confidence of exactly 0
/// falls into the first bin.
pub fn ece(probabilities: &Matrix, labels: &[usize], bin_count: usize) -> Result<CalibrationReport> {
    if bin_count == 0 {
        return Err(Error::Domain("bin count must be at least 1".into()));
    }
    if labels.len() != probabilities.rows() {
        return Err(Error::shape("one label per probability row required"));
    }
    let n = labels.len();
    let mut count = vec![0usize; bin_count];
    let mut conf_sum = vec![0.0; bin_count];
    let mut correct = vec![0usize; bin_count];
    for (row_idx, (row, &y)) in probabilities.iter_rows().zip(labels).enumerate() {
        let sum: f64 = row.iter().sum();
        if !(sum - 1.0).abs().le(&1e-6) || row.iter().any(|p| !p.is_finite() || *p < -1e-12) {
            return Err(Error::Probability { row: row_idx, sum });
        }
        let (pred, conf) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, p)| if p > best.1 { (j, p) } else { best });
        let b = bin_of(conf, bin_count);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let mut bins = Vec::with_capacity(bin_count);
    let mut ece = 0.0;
    for b in 0..bin_count {
        let (cm, acc) = if count[b] > 0 {
            let c = count[b] as f64;
            (Some(conf_sum[b] / c), Some(correct[b] as f64 / c))
        } else {
            (None, None)
        };
        if let (Some(cm), Some(acc)) = (cm, acc) {
            ece += count[b] as f64 / n as f64 * (acc - cm).abs();
        }
        bins.push(CalibrationBin {
            lower: b as f64 / bin_count as f64,
            upper: (b + 1) as f64 / bin_count as f64,
            count: count[b],
            confidence_mean: cm,
            accuracy: acc,
        });
    }
    let total_correct: usize = correct.iter().sum();
    let nf = n.max(1) as f64;
    Ok(CalibrationReport {
        bin_count,
        n,
        bins,
        ece,
        accuracy: total_correct as f64 / nf,
        mean_confidence: conf_sum.iter().sum::<f64>() / nf,
    })
}

fn bin_of(conf: f64, bins: usize) -> usize {
    let b = libm::ceil(conf * bins as f64) as isize - 1;
    b.clamp(0, bins as isize - 1) as usize
}

fn check_k_b(k: usize, b: f64) -> Result<()> {
    if k < 2 {
        return Err(Error::Domain(alloc::format!("need k >= 2, got {k}")));
    }
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Domain(alloc::format!("feature norm bound must be positive, got {b}")));
    }
    Ok(())
}

/// Lipschitz constant of `z -> sum_i CE(W^T z, i)` for an anchored simplex
/// frame and `|z| <= B`: `k (1 - t) / (1 + (k-1) t)` with `t = exp(-kB/(k-1))`.
pub fn lipschitz_pal(k: usize, b: f64) -> Result<f64> {
    check_k_b(k, b)?;
    let kf = k as f64;
    let t = libm::exp(-kf * b / (kf - 1.0));
    Ok(kf * (1.0 - t) / (1.0 + (kf - 1.0) * t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnanchoredBounds {
    pub k: usize,
    pub b: f64,
    /// Unit prototypes, free features: the constant is at least `k`.
    pub normalized_w_only: f64,
    /// Unit prototypes, features of norm `B`, one prototype along `z` and
    /// the rest opposite: `2 (e^{2B} - 1) / (e^{2B}/(k-1) + 1)`.
    pub normalized_both: f64,
    pub pal: f64,
    /// Both unanchored values strictly exceed the anchored constant.
    pub pal_is_tighter: bool,
}

/// Lower bounds on the CE Lipschitz constant when prototypes are not anchored.
///
/// At `k = 2` the antipodal pair is already the simplex frame, so
/// `normalized_both` coincides with the anchored constant there.
pub fn lipschitz_unanchored_lower_bounds(k: usize, b: f64) -> Result<UnanchoredBounds> {
    let pal = lipschitz_pal(k, b)?;
    let kf = k as f64;
    // divided through by e^{2B} so large B does not overflow
    let u = libm::exp(-2.0 * b);
    let normalized_both = 2.0 * (1.0 - u) / (1.0 / (kf - 1.0) + u);
    let normalized_w_only = kf;
    Ok(UnanchoredBounds {
        k,
        b,
        normalized_w_only,
        normalized_both,
        pal,
        pal_is_tighter: pal < normalized_w_only && pal < normalized_both,
    })
}

/// Number of independent sampling shards used by [`empirical_lipschitz`].
pub const LIPSCHITZ_SHARDS: u64 = 16;

/// Largest sampled `|grad_z sum_i L(W^T z, i)|` over `|z| <= B`.
///
/// Half the samples are uniform in the ball, half on its surface. The loss
/// sees `z` directly: feature normalization in `spec` is ignored so that `B`
/// is the feature norm, while `spec.scale` still multiplies the logits.
pub fn empirical_lipschitz(spec: &LossSpec, protos: &Matrix, b: f64, samples: usize, seed: u64) -> Result<f64> {
    let mut best: f64 = 0.0;
    for shard in 0..LIPSCHITZ_SHARDS {
        best = best.max(empirical_lipschitz_shard(spec, protos, b, samples, seed, shard)?);
    }
    Ok(best)
}

/// One shard of [`empirical_lipschitz`]; the maximum over all shards is the
/// full estimate whatever order they are evaluated in.
pub fn empirical_lipschitz_shard(
    spec: &LossSpec,
    protos: &Matrix,
    b: f64,
    samples: usize,
    seed: u64,
    shard: u64,
) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Domain(alloc::format!("feature norm bound must be positive, got {b}")));
    }
    let spec = LossSpec {
        feature_normalize: false,
        anchored: true,
        ..spec.clone()
    };
    spec.validate()?;
    let per = samples as u64 / LIPSCHITZ_SHARDS + u64::from(shard < samples as u64 % LIPSCHITZ_SHARDS);
    let k = protos.rows();
    let d = protos.cols();
    let mut r = rng::shard(seed, shard);
    let labels: Vec<usize> = (0..CHUNK * k).map(|i| i % k).collect();
    let mut best: f64 = 0.0;
    let mut done = 0u64;
    let mut idx = 0u64;
    while done < per {
        let chunk = (per - done).min(CHUNK as u64) as usize;
        let mut batch = Matrix::zeros(chunk * k, d);
        for c in 0..chunk {
            let z = sample_point(&mut r, d, b, idx % 2 == 1);
            idx += 1;
            for i in 0..k {
                batch.row_mut(c * k + i).copy_from_slice(&z);
            }
        }
        let out = losses::evaluate(&spec, &batch, &labels[..chunk * k], protos)?;
        // the loss is a batch mean; undo it to get the class sum per point
        let n = (chunk * k) as f64;
        for c in 0..chunk {
            let mut g = vec![0.0; d];
            for i in 0..k {
                crate::matrix::axpy(n, out.grad_features.row(c * k + i), &mut g);
            }
            best = best.max(norm(&g));
        }
        done += chunk as u64;
    }
    Ok(best)
}

const CHUNK: usize = 256;

fn sample_point(r: &mut rng::Rng, d: usize, b: f64, surface: bool) -> Vec<f64> {
    let mut z: Vec<f64> = loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *r)).collect();
        if norm(&v) > 0.0 {
            break v;
        }
    };
    let radius = if surface {
        b
    } else {
        b * libm::pow(r.random::<f64>(), 1.0 / d as f64)
    };
    let scale = radius / norm(&z);
    z.iter_mut().for_each(|v| *v *= scale);
    z
}

fn check_eta(eta: f64, k: usize) -> Result<()> {
    let limit = (k as f64 - 1.0) / k as f64;
    if !(eta >= 0.0 && eta < limit) {
        return Err(Error::Rate(eta));
    }
    Ok(())
}

/// `2 eta lambda B / ((1 - eta) k - 1)`: excess clean risk of the noisy-risk
/// minimizer under symmetric noise for a `lambda`-Lipschitz class-sum loss.
pub fn risk_bound_general(eta: f64, lambda: f64, b: f64, k: usize) -> Result<f64> {
    check_k_b(k, b)?;
    check_eta(eta, k)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(alloc::format!("Lipschitz constant must be nonnegative, got {lambda}")));
    }
    Ok(2.0 * eta * lambda * b / ((1.0 - eta) * k as f64 - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub variant: alloc::string::String,
    pub eta: f64,
    pub k: usize,
    pub b: f64,
    pub lambda: f64,
    pub c: f64,
    pub t: f64,
    pub bound: f64,
}

/// Closed-form bound for CE with feature-normalized anchored prototypes:
/// `2 c eta k (1 - t) B / (k - 1 + t (k-1)^2)`.
pub fn risk_bound_ce(eta: f64, b: f64, k: usize) -> Result<BoundReport> {
    check_k_b(k, b)?;
    check_eta(eta, k)?;
    let kf = k as f64;
    let c = (kf - 1.0) / ((1.0 - eta) * kf - 1.0);
    let t = libm::exp(-kf * b / (kf - 1.0));
    let bound = 2.0 * c * eta * kf * (1.0 - t) * b / (kf - 1.0 + t * (kf - 1.0) * (kf - 1.0));
    Ok(BoundReport {
        variant: "ce_fnpal".into(),
        eta,
        k,
        b,
        lambda: lipschitz_pal(k, b)?,
        c,
        t,
        bound,
    })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

/// `log[(1 + e^{r-a}) / (1 + e^{-r-a})]`
fn ldam_log_ratio(r: f64, a: f64) -> f64 {
    softplus(r - a) - softplus(-r - a)
}

/// Posterior `eta_x` at which the binary LDAM minimizer changes sign.
///
/// Equals 1/2 exactly when the two margins agree; unequal margins move it
/// away from the Bayes threshold.
pub fn ldam_bayes_threshold(alpha_plus: f64, alpha_minus: f64, r: f64) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(alloc::format!("r must be positive, got {r}")));
    }
    if !(alpha_plus.is_finite() && alpha_minus.is_finite()) {
        return Err(Error::Domain("margins must be finite".into()));
    }
    let minus = ldam_log_ratio(r, alpha_minus);
    let plus = ldam_log_ratio(r, alpha_plus);
    Ok(minus / (plus + minus))
}

/// Sign of the LDAM minimizer `t in {-1, +1}` at posterior `eta_x`, found by
/// comparing the conditional risk at both candidates. Ties return 0.
pub fn ldam_optimal_sign(eta_x: f64, alpha_plus: f64, alpha_minus: f64, r: f64) -> i8 {
    let g = |t: f64| {
        eta_x * libm::log1p(libm::exp(-t * r - alpha_plus)) + (1.0 - eta_x) * libm::log1p(libm::exp(t * r - alpha_minus))
    };
    let diff = g(-1.0) - g(1.0);
    if diff > 0.0 {
        1
    } else if diff < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Fixed-width bins over `[lo, hi]`; values outside are clamped into the
    /// end bins.
    pub fn fixed(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
        let bins = bins.max(1);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = libm::floor((v - lo) / width) as isize;
            counts[b.clamp(0, bins as isize - 1) as usize] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub per_class_prototype_norms: Vec<f64>,
    pub mean_prototype_norm: f64,
    pub mean_feature_norm: f64,
    pub feature_norm_histogram: Histogram,
}

/// Prototype norms plus a histogram of feature norms. Without an explicit
/// range the histogram spans `[0, max feature norm]`.
pub fn norm_stats(w: &Matrix, features: &Matrix, bins: usize, range: Option<(f64, f64)>) -> NormStats {
    let proto: Vec<f64> = w.iter_rows().map(norm).collect();
    let feats: Vec<f64> = features.iter_rows().map(norm).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (lo, hi) = range.unwrap_or_else(|| (0.0, feats.iter().copied().fold(0.0, f64::max)));
    NormStats {
        mean_prototype_norm: mean(&proto),
        mean_feature_norm: mean(&feats),
        feature_norm_histogram: Histogram::fixed(&feats, bins, lo, hi),
        per_class_prototype_norms: proto,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::generate_closed_form;
    use proptest::prelude::*;

    fn etf(k: usize, d: usize) -> Matrix {
        generate_closed_form(k, d).unwrap().into_matrix()
    }

    #[test]
    fn margin_at_prototype_is_k_over_k_minus_1() {
        let w = etf(10, 12);
        let labels: Vec<usize> = (0..10).collect();
        let rep = sample_margins(&w, &labels, &w, 1.0).unwrap();
        for g in &rep.per_sample {
            assert!((g - 10.0 / 9.0).abs() < 1e-12);
        }
        let tied = Matrix::from_rows(&[vec![0.0; 12]]).unwrap();
        assert_eq!(sample_margins(&tied, &[3], &w, 1.0).unwrap().min_margin, 0.0);
    }

    #[test]
    fn margin_minima_agree() {
        let mut r = rng::seeded(3);
        let w = etf(4, 5);
        let z = Matrix::from_vec(40, 5, (0..200).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let rep = sample_margins(&z, &labels, &w, 2.0).unwrap();
        let per_class_min = rep.per_class.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(rep.min_margin, per_class_min);
        assert_eq!(rep.min_margin, rep.per_sample.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn angles() {
        let deg = min_prototype_angle(&etf(10, 9)).unwrap();
        assert!((deg - libm::acos(-1.0 / 9.0).to_degrees()).abs() < 1e-9);
        assert!((deg - 96.379).abs() < 1e-3);
        let twin = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(min_prototype_angle(&twin).unwrap().abs() < 1e-6);
        assert!((min_prototype_angle(&etf(2, 3)).unwrap() - 180.0).abs() < 1e-9);
        let zero = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(min_prototype_angle(&zero).unwrap_err(), Error::ZeroVector { row: 1 });
    }

    #[test]
    fn ece_examples() {
        let onehot = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(ece(&onehot, &[0, 1, 0], 15).unwrap().ece, 0.0);

        let coin = Matrix::from_rows(&vec![vec![0.5, 0.5]; 4]).unwrap();
        assert_eq!(ece(&coin, &[0, 1, 0, 1], 15).unwrap().ece, 0.0);

        let sure = Matrix::from_rows(&vec![vec![1.0, 0.0, 0.0]; 10]).unwrap();
        let labels = [0, 0, 0, 0, 0, 0, 0, 0, 1, 2];
        let rep = ece(&sure, &labels, 15).unwrap();
        assert!((rep.ece - 0.2).abs() < 1e-12);
        assert_eq!(rep.bins[14].count, 10);
        assert_eq!(rep.bins.iter().map(|b| b.count).sum::<usize>(), 10);

        let bad = Matrix::from_rows(&[vec![0.7, 0.7]]).unwrap();
        assert!(matches!(ece(&bad, &[0], 15), Err(Error::Probability { row: 0, .. })));
    }

    #[test]
    fn ece_of_calibrated_predictor_is_small() {
        let mut r = rng::seeded(77);
        let n = 20_000;
        let mut probs = Matrix::zeros(n, 2);
        let mut labels = vec![0; n];
        for i in 0..n {
            let c: f64 = 0.5 + 0.5 * r.random::<f64>();
            probs[(i, 0)] = c;
            probs[(i, 1)] = 1.0 - c;
            labels[i] = if r.random::<f64>() < c { 0 } else { 1 };
        }
        let rep = ece(&probs, &labels, 15).unwrap();
        assert!(rep.ece <= 1.0 / libm::sqrt(n as f64), "{}", rep.ece);
    }

    #[test]
    fn lipschitz_pal_values() {
        let l = lipschitz_pal(10, 1.0).unwrap();
        let t = libm::exp(-10.0 / 9.0);
        assert!((t - 0.32919).abs() < 1e-5);
        assert!((l - 1.6928).abs() < 1e-4);
        assert!(lipschitz_pal(10, 1e-9).unwrap() < 1e-7);
        assert!((lipschitz_pal(10, 100.0).unwrap() - 10.0).abs() < 1e-6);
        assert!(lipschitz_pal(1, 1.0).is_err());
        assert!(lipschitz_pal(3, 0.0).is_err());
    }

    #[test]
    fn unanchored_bounds() {
        let u = lipschitz_unanchored_lower_bounds(10, 1.0).unwrap();
        assert_eq!(u.normalized_w_only, 10.0);
        let e2 = libm::exp(2.0);
        assert!((u.normalized_both - 2.0 * (e2 - 1.0) / (e2 / 9.0 + 1.0)).abs() < 1e-12);
        assert!((u.normalized_both - 7.017).abs() < 1e-3);
        for k in 3..=64 {
            for b in [0.1, 0.3, 1.0, 3.0, 10.0] {
                assert!(lipschitz_unanchored_lower_bounds(k, b).unwrap().pal_is_tighter, "k={k} B={b}");
            }
        }
        // k = 2: the configuration is the anchored frame, so the two coincide
        for b in [0.1, 1.0, 10.0] {
            let u = lipschitz_unanchored_lower_bounds(2, b).unwrap();
            assert!((u.normalized_both - u.pal).abs() < 1e-12);
            assert!(u.pal < u.normalized_w_only);
        }
    }

    /// Brute-force version of the lower-bound configuration: prototype 1
    /// along z, the others opposite, gradient by central differences.
    #[test]
    fn normalized_both_matches_its_configuration() {
        for k in [2usize, 3, 7] {
            for b in [0.2, 1.0, 2.5] {
                let d = 3;
                let mut w = Matrix::zeros(k, d);
                w[(0, 0)] = 1.0;
                for i in 1..k {
                    w[(i, 0)] = -1.0;
                }
                let f = |z: &[f64]| {
                    let zm = Matrix::from_vec(1, d, z.to_vec()).unwrap();
                    (0..k)
                        .map(|i| losses::evaluate(&LossSpec::softmax(), &zm, &[i], &w).unwrap().loss)
                        .sum::<f64>()
                };
                let z = [b, 0.0, 0.0];
                let h = 1e-6;
                let mut g2 = 0.0;
                for c in 0..d {
                    let mut up = z;
                    up[c] += h;
                    let mut dn = z;
                    dn[c] -= h;
                    let g = (f(&up) - f(&dn)) / (2.0 * h);
                    g2 += g * g;
                }
                let want = lipschitz_unanchored_lower_bounds(k, b).unwrap().normalized_both;
                assert!((libm::sqrt(g2) - want).abs() < 1e-6, "k={k} b={b}");
            }
        }
    }

    #[test]
    fn empirical_lipschitz_under_the_bound() {
        let w = etf(10, 9);
        let spec = LossSpec::softmax();
        let lam = lipschitz_pal(10, 1.0).unwrap();
        let est = empirical_lipschitz(&spec, &w, 1.0, 20_000, 1).unwrap();
        assert!(est <= lam * (1.0 + 1e-3), "{est} vs {lam}");
        assert!(est >= 0.5 * lam);
        let est2 = empirical_lipschitz(&spec, &w, 2.0, 20_000, 1).unwrap();
        assert!(est2 >= est);
        let nsl = empirical_lipschitz(&LossSpec::nsl(), &w, 1.0, 2_000, 1).unwrap();
        assert!(nsl <= 1e-9);
    }

    #[test]
    fn empirical_lipschitz_bounded_for_gce_and_focal() {
        let w = etf(5, 6);
        for spec in [LossSpec::gce(0.7), LossSpec::focal(2.0)] {
            let est = empirical_lipschitz(&spec, &w, 3.0, 4000, 2).unwrap();
            assert!(est.is_finite() && est > 0.0);
        }
    }

    #[test]
    fn risk_bounds() {
        assert_eq!(risk_bound_general(0.4, 0.0, 1.0, 10).unwrap(), 0.0);
        assert_eq!(risk_bound_general(0.0, 1.7, 1.0, 10).unwrap(), 0.0);
        let g = risk_bound_general(0.4, 1.6928, 1.0, 10).unwrap();
        assert!((g - 0.2709).abs() < 1e-4);
        let ce = risk_bound_ce(0.4, 1.0, 10).unwrap();
        let direct = risk_bound_general(0.4, lipschitz_pal(10, 1.0).unwrap(), 1.0, 10).unwrap();
        assert!((ce.bound - direct).abs() <= 1e-12);
        assert!((ce.bound - 0.2709).abs() < 1e-4);
        assert_eq!(risk_bound_ce(0.0, 1.0, 10).unwrap().bound, 0.0);
        assert!(matches!(risk_bound_ce(0.9, 1.0, 10), Err(Error::Rate(_))));
        let mut last = -1.0;
        for i in 0..90 {
            let eta = i as f64 * 0.01;
            let b = risk_bound_ce(eta, 1.0, 10).unwrap().bound;
            assert!(b > last);
            last = b;
        }
    }

    #[test]
    fn ldam_threshold() {
        assert_eq!(ldam_bayes_threshold(0.7, 0.7, 1.3).unwrap(), 0.5);
        let t = ldam_bayes_threshold(2.0, 0.5, 2.0).unwrap();
        assert!((t - 0.5).abs() > 0.01);
        assert!(matches!(ldam_bayes_threshold(1.0, 1.0, 0.0), Err(Error::Domain(_))));
        // the minimizer flips on either side of the threshold
        for (ap, am, r) in [(2.0, 0.5, 2.0), (0.1, 1.5, 0.7), (0.0, 3.0, 4.0)] {
            let t = ldam_bayes_threshold(ap, am, r).unwrap();
            assert_eq!(ldam_optimal_sign(t + 1e-6, ap, am, r), 1);
            assert_eq!(ldam_optimal_sign(t - 1e-6, ap, am, r), -1);
        }
    }

    proptest! {
        #[test]
        fn ldam_threshold_in_unit_interval(ap in -20.0f64..20.0, am in -20.0f64..20.0, r in 1e-3f64..20.0) {
            let t = ldam_bayes_threshold(ap, am, r).unwrap();
            prop_assert!(t > 0.0 && t < 1.0);
        }

        #[test]
        fn ce_bound_consistent(eta in 0.0f64..0.85, b in 0.05f64..10.0, k in 2usize..80) {
            prop_assume!(eta < (k as f64 - 1.0) / k as f64 - 1e-3);
            let ce = risk_bound_ce(eta, b, k).unwrap().bound;
            let g = risk_bound_general(eta, lipschitz_pal(k, b).unwrap(), b, k).unwrap();
            prop_assert!((ce - g).abs() <= 1e-12 * ce.abs().max(1.0));
        }
    }

    #[test]
    fn norm_statistics() {
        let w = etf(4, 4);
        let mut r = rng::seeded(2);
        let f = Matrix::from_vec(30, 4, (0..120).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
        let a = norm_stats(&w, &f, 10, None);
        assert!(a.per_class_prototype_norms.iter().all(|n| (n - 1.0).abs() < 1e-12));
        assert_eq!(a.feature_norm_histogram.counts.iter().sum::<usize>(), 30);
        let mut f2 = f.clone();
        f2.scale(2.0);
        let b = norm_stats(&w, &f2, 10, None);
        assert!((b.mean_feature_norm - 2.0 * a.mean_feature_norm).abs() < 1e-12);
    }
}
