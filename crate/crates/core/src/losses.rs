//! Classification losses over the logits `s * W z` with analytic gradients.
//!
//! All variants share one pipeline: optional l2 normalization of the
//! features, logits `o_j = s * w_j . z`, an additive margin on the true-class
//! logit for the margin variants, then a per-sample loss of the logits. The
//! batch loss is the arithmetic mean. Gradients flow back to the raw features
//! and, unless the loss is anchored, to the prototypes.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    Softmax,
    MarginSoftmax,
    #[serde(rename = "LDAM")]
    Ldam,
    #[serde(rename = "NSL")]
    Nsl,
    #[serde(rename = "GCE")]
    Gce,
    Focal,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::Softmax,
        LossVariant::MarginSoftmax,
        LossVariant::Ldam,
        LossVariant::Nsl,
        LossVariant::Gce,
        LossVariant::Focal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Softmax => "Softmax",
            LossVariant::MarginSoftmax => "MarginSoftmax",
            LossVariant::Ldam => "LDAM",
            LossVariant::Nsl => "NSL",
            LossVariant::Gce => "GCE",
            LossVariant::Focal => "Focal",
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

/// Which loss to evaluate and with which hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub variant: LossVariant,
    /// Inverse temperature applied to every logit.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Per-class additive margins (MarginSoftmax and LDAM).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<Vec<f64>>,
    /// GCE exponent in (0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_gamma: Option<f64>,
    #[serde(default)]
    pub feature_normalize: bool,
    #[serde(default)]
    pub anchored: bool,
}

impl LossSpec {
    fn plain(variant: LossVariant) -> Self {
        LossSpec {
            variant,
            scale: 1.0,
            margins: None,
            q: None,
            focal_gamma: None,
            feature_normalize: false,
            anchored: false,
        }
    }

    pub fn softmax() -> Self {
        Self::plain(LossVariant::Softmax)
    }

    pub fn margin(margins: Vec<f64>) -> Self {
        LossSpec {
            margins: Some(margins),
            ..Self::plain(LossVariant::MarginSoftmax)
        }
    }

    pub fn ldam(margins: Vec<f64>) -> Self {
        LossSpec {
            margins: Some(margins),
            ..Self::plain(LossVariant::Ldam)
        }
    }

    /// NSL is only meaningful against anchored prototypes, so this starts anchored.
    pub fn nsl() -> Self {
        LossSpec {
            anchored: true,
            ..Self::plain(LossVariant::Nsl)
        }
    }

    pub fn gce(q: f64) -> Self {
        LossSpec {
            q: Some(q),
            ..Self::plain(LossVariant::Gce)
        }
    }

    pub fn focal(gamma: f64) -> Self {
        LossSpec {
            focal_gamma: Some(gamma),
            ..Self::plain(LossVariant::Focal)
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn normalized(mut self, on: bool) -> Self {
        self.feature_normalize = on;
        self
    }

    pub fn anchored(mut self, on: bool) -> Self {
        self.anchored = on;
        self
    }

    /// Feature-normalized, anchored wrapper around this loss.
    pub fn fnpal(self, scale: f64) -> Self {
        self.with_scale(scale).normalized(true).anchored(true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::config("scale must be positive"));
        }
        let has_margins = matches!(self.variant, LossVariant::MarginSoftmax | LossVariant::Ldam);
        match (&self.margins, has_margins) {
            (Some(m), true) => {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("margins must be finite"));
                }
            }
            (None, true) => return Err(Error::config("margin variants need `margins`")),
            (Some(_), false) => return Err(Error::config("`margins` only applies to MarginSoftmax/LDAM")),
            (None, false) => {}
        }
        match (self.q, self.variant == LossVariant::Gce) {
            (Some(q), true) if !(q > 0.0 && q <= 1.0) => return Err(Error::config("q must lie in (0, 1]")),
            (None, true) => return Err(Error::config("GCE needs `q`")),
            (Some(_), false) => return Err(Error::config("`q` only applies to GCE")),
            _ => {}
        }
        match (self.focal_gamma, self.variant == LossVariant::Focal) {
            (Some(g), true) if !(g >= 0.0 && g.is_finite()) => {
                return Err(Error::config("focal_gamma must be nonnegative"))
            }
            (None, true) => return Err(Error::config("Focal needs `focal_gamma`")),
            (Some(_), false) => return Err(Error::config("`focal_gamma` only applies to Focal")),
            _ => {}
        }
        if self.variant == LossVariant::Nsl && !self.anchored {
            return Err(Error::Anchoring);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Batch mean.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grad_features: Matrix,
    /// All zeros when the loss is anchored.
    pub grad_prototypes: Matrix,
}

/// Evaluate whatever variant `spec` names.
pub fn evaluate(spec: &LossSpec, features: &Matrix, labels: &[usize], protos: &Matrix) -> Result<LossOutput> {
    spec.validate()?;
    check_shapes(spec, features, labels, protos)?;
    let n = features.rows();
    let k = protos.rows();
    let d = protos.cols();
    let s = spec.scale;

    let (unit, radii) = prepare_features(spec, features)?;
    let mut grad_features = Matrix::zeros(n, d);
    let mut grad_prototypes = Matrix::zeros(k, d);
    let mut per_sample = Vec::with_capacity(n);
    let mut logits = vec![0.0; k];
    let mut dlogits = vec![0.0; k];
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };

    for i in 0..n {
        let z = unit.row(i);
        let y = labels[i];
        for (j, o) in logits.iter_mut().enumerate() {
            *o = s * dot(protos.row(j), z);
        }
        if let Some(m) = &spec.margins {
            logits[y] += m[y];
        }
        let l = sample_loss(spec, &logits, y, &mut dlogits);
        per_sample.push(l);

        let gz = grad_features.row_mut(i);
        for j in 0..k {
            let c = dlogits[j] * s * inv_n;
            if c != 0.0 {
                axpy(c, protos.row(j), gz);
            }
        }
        if !spec.anchored {
            for j in 0..k {
                let c = dlogits[j] * s * inv_n;
                if c != 0.0 {
                    axpy(c, z, grad_prototypes.row_mut(j));
                }
            }
        }
    }
    if let Some(radii) = radii {
        crate::prototypes::project_normalize_grad(&mut grad_features, &unit, &radii);
    }
    let loss = per_sample.iter().sum::<f64>() * inv_n;
    Ok(LossOutput {
        loss,
        per_sample,
        grad_features,
        grad_prototypes,
    })
}

fn check_shapes(spec: &LossSpec, features: &Matrix, labels: &[usize], protos: &Matrix) -> Result<()> {
    if features.cols() != protos.cols() {
        return Err(Error::shape(alloc::format!(
            "features have {} columns but prototypes have {}",
            features.cols(),
            protos.cols()
        )));
    }
    if labels.len() != features.rows() {
        return Err(Error::shape(alloc::format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let k = protos.rows();
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, k });
    }
    if let Some(m) = &spec.margins {
        if m.len() != k {
            return Err(Error::shape(alloc::format!("{} margins for {k} classes", m.len())));
        }
    }
    Ok(())
}

/// Features as fed to the classifier, plus the radii needed to backpropagate
/// through the normalization when it is on.
fn prepare_features(spec: &LossSpec, features: &Matrix) -> Result<(Matrix, Option<Vec<f64>>)> {
    if !spec.feature_normalize {
        return Ok((features.clone(), None));
    }
    let mut unit = features.clone();
    let mut radii = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let r = norm(features.row(i));
        if r == 0.0 || !r.is_finite() {
            return Err(Error::Normalization { row: i });
        }
        unit.row_mut(i).iter_mut().for_each(|v| *v /= r);
        radii.push(r);
    }
    Ok((unit, Some(radii)))
}

/// Per-sample loss of one logit vector; writes `dloss/dlogits` into `grad`.
fn sample_loss(spec: &LossSpec, logits: &[f64], y: usize, grad: &mut [f64]) -> f64 {
    if spec.variant == LossVariant::Nsl {
        grad.iter_mut().for_each(|g| *g = 0.0);
        grad[y] = -1.0;
        return -logits[y];
    }
    // softmax probabilities into grad, log p_y and 1 - p_y without cancellation
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (g, o) in grad.iter_mut().zip(logits) {
        *g = libm::exp(o - mx);
        sum += *g;
    }
    let lse = mx + libm::log(sum);
    let mut rest = 0.0;
    for (j, g) in grad.iter_mut().enumerate() {
        *g /= sum;
        if j != y {
            rest += *g;
        }
    }
    let log_py = logits[y] - lse;

    match spec.variant {
        LossVariant::Softmax | LossVariant::MarginSoftmax | LossVariant::Ldam => {
            grad[y] -= 1.0;
            lse - logits[y]
        }
        LossVariant::Gce => {
            let q = spec.q.unwrap_or(1.0);
            let pq = libm::exp(q * log_py);
            // d/do_j of -p_y^q / q is -p_y^q (delta_jy - p_j)
            for (j, g) in grad.iter_mut().enumerate() {
                *g = if j == y { -pq * rest } else { pq * *g };
            }
            (1.0 - pq) / q
        }
        LossVariant::Focal => {
            let gamma = spec.focal_gamma.unwrap_or(0.0);
            if gamma == 0.0 {
                grad[y] -= 1.0;
                return lse - logits[y];
            }
            let weight = libm::pow(rest, gamma);
            // c = p_y * dloss/dp_y, and dloss/do_j = c (delta_jy - p_j)
            let c = if rest == 0.0 {
                0.0
            } else {
                let py = libm::exp(log_py);
                gamma * libm::pow(rest, gamma - 1.0) * py * log_py - weight
            };
            for (j, g) in grad.iter_mut().enumerate() {
                *g = if j == y { c * rest } else { -c * *g };
            }
            -weight * log_py
        }
        LossVariant::Nsl => unreachable!(),
    }
}

fn require(spec: &LossSpec, allowed: &[LossVariant]) -> Result<()> {
    if allowed.contains(&spec.variant) {
        Ok(())
    } else {
        Err(Error::IncompatibleSpec(alloc::format!(
            "{} spec passed to a loss expecting {:?}",
            spec.variant.name(),
            allowed
        )))
    }
}

pub fn softmax_loss(features: &Matrix, labels: &[usize], protos: &Matrix, spec: &LossSpec) -> Result<LossOutput> {
    require(spec, &[LossVariant::Softmax])?;
    evaluate(spec, features, labels, protos)
}

/// Softmax with `alpha_y` added to the true-class logit.
pub fn margin_loss(features: &Matrix, labels: &[usize], protos: &Matrix, spec: &LossSpec) -> Result<LossOutput> {
    require(spec, &[LossVariant::MarginSoftmax, LossVariant::Ldam])?;
    evaluate(spec, features, labels, protos)
}

pub fn nsl_loss(features: &Matrix, labels: &[usize], protos: &Matrix, spec: &LossSpec) -> Result<LossOutput> {
    require(spec, &[LossVariant::Nsl])?;
    evaluate(spec, features, labels, protos)
}

pub fn gce_loss(features: &Matrix, labels: &[usize], protos: &Matrix, spec: &LossSpec) -> Result<LossOutput> {
    require(spec, &[LossVariant::Gce])?;
    evaluate(spec, features, labels, protos)
}

pub fn focal_loss(features: &Matrix, labels: &[usize], protos: &Matrix, spec: &LossSpec) -> Result<LossOutput> {
    require(spec, &[LossVariant::Focal])?;
    evaluate(spec, features, labels, protos)
}

/// Class-dependent margins `alpha_j = C * n_j^(-1/4)`.
pub fn ldam_margins(class_counts: &[usize], constant: f64) -> Result<Vec<f64>> {
    if !(constant.is_finite() && constant > 0.0) {
        return Err(Error::Domain(alloc::format!("margin constant must be positive, got {constant}")));
    }
    class_counts
        .iter()
        .enumerate()
        .map(|(class, &n)| {
            if n == 0 {
                Err(Error::Count { class })
            } else {
                Ok(constant * libm::pow(n as f64, -0.25))
            }
        })
        .collect()
}

/// `sum_i L(f(x), i)` for a single feature vector.
pub fn loss_symmetry_sum(spec: &LossSpec, feature: &[f64], protos: &Matrix) -> Result<f64> {
    let k = protos.rows();
    let mut batch = Matrix::zeros(k, feature.len());
    for i in 0..k {
        batch.row_mut(i).copy_from_slice(feature);
    }
    let labels: Vec<usize> = (0..k).collect();
    let out = evaluate(spec, &batch, &labels, protos)?;
    Ok(out.per_sample.iter().sum())
}

/// Noise-aware inverse temperature `s = 0.25 / (0.05 + eta)`.
pub fn noise_aware_scale(eta: f64) -> Result<f64> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Rate(eta));
    }
    Ok(0.25 / (0.05 + eta))
}

/// Logits used for prediction: normalization and scale applied, no margins.
pub fn prediction_logits(spec: &LossSpec, features: &Matrix, protos: &Matrix) -> Result<Matrix> {
    if features.cols() != protos.cols() {
        return Err(Error::shape("feature and prototype dimensions differ"));
    }
    let (unit, _) = prepare_features(spec, features)?;
    let mut out = unit.mul_transpose(protos);
    out.scale(spec.scale);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Relative error of the feature gradient block.
    pub features_rel_err: f64,
    /// Relative error of the prototype block; `None` when anchored.
    pub prototypes_rel_err: Option<f64>,
    /// Largest analytic prototype-gradient entry (exactly 0 when anchored).
    pub prototype_grad_max_abs: f64,
    pub max_rel_err: f64,
}

/// `|a - b| / max(|a|, |b|, 1e-8)` over a whole gradient block.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    let diff = libm::sqrt(diff);
    let scale = norm(analytic).max(norm(numeric)).max(1e-8);
    diff / scale
}

/// Central finite differences of the batch loss against the analytic gradients.
pub fn grad_check(
    spec: &LossSpec,
    features: &Matrix,
    labels: &[usize],
    protos: &Matrix,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Domain(alloc::format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    let analytic = evaluate(spec, features, labels, protos)?;

    let mut f = features.clone();
    let mut numeric = vec![0.0; f.as_slice().len()];
    for (idx, slot) in numeric.iter_mut().enumerate() {
        let orig = f.as_slice()[idx];
        f.as_mut_slice()[idx] = orig + step;
        let up = evaluate(spec, &f, labels, protos)?.loss;
        f.as_mut_slice()[idx] = orig - step;
        let down = evaluate(spec, &f, labels, protos)?.loss;
        f.as_mut_slice()[idx] = orig;
        *slot = (up - down) / (2.0 * step);
    }
    let features_rel_err = relative_error(analytic.grad_features.as_slice(), &numeric);

    let prototypes_rel_err = if spec.anchored {
        None
    } else {
        let mut w = protos.clone();
        let mut numeric = vec![0.0; w.as_slice().len()];
        for (idx, slot) in numeric.iter_mut().enumerate() {
            let orig = w.as_slice()[idx];
            w.as_mut_slice()[idx] = orig + step;
            let up = evaluate(spec, features, labels, &w)?.loss;
            w.as_mut_slice()[idx] = orig - step;
            let down = evaluate(spec, features, labels, &w)?.loss;
            w.as_mut_slice()[idx] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        Some(relative_error(analytic.grad_prototypes.as_slice(), &numeric))
    };
    let max_rel_err = features_rel_err.max(prototypes_rel_err.unwrap_or(0.0));
    Ok(GradCheckReport {
        features_rel_err,
        prototypes_rel_err,
        prototype_grad_max_abs: analytic.grad_prototypes.max_abs(),
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::generate_closed_form;
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn etf(k: usize, d: usize) -> Matrix {
        generate_closed_form(k, d).unwrap().into_matrix()
    }

    fn gaussian(rows: usize, cols: usize, r: &mut rng::Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *r)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn softmax_at_prototype() {
        for k in [2usize, 5, 10] {
            let w = etf(k, k);
            let z = Matrix::from_vec(1, k, w.row(0).to_vec()).unwrap();
            let spec = LossSpec::softmax().normalized(true);
            let out = softmax_loss(&z, &[0], &w, &spec).unwrap();
            let kf = k as f64;
            let e = core::f64::consts::E;
            let expected = -libm::log(e / (e + (kf - 1.0) * libm::exp(-1.0 / (kf - 1.0))));
            assert!((out.loss - expected).abs() < 1e-12);
            if k == 2 {
                assert!((out.loss - 0.126928).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_orthogonal_is_log2() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let z = Matrix::from_rows(&[vec![0.0, 3.0]]).unwrap();
        let out = softmax_loss(&z, &[1], &w, &LossSpec::softmax()).unwrap();
        assert!((out.loss - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_and_label_errors() {
        let w = etf(3, 2);
        let z = Matrix::zeros(2, 3);
        assert!(matches!(softmax_loss(&z, &[0, 1], &w, &LossSpec::softmax()), Err(Error::Shape(_))));
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            softmax_loss(&z, &[3], &w, &LossSpec::softmax()).unwrap_err(),
            Error::Label { label: 3, k: 3 }
        );
        assert!(matches!(
            gce_loss(&z, &[0], &w, &LossSpec::softmax()),
            Err(Error::IncompatibleSpec(_))
        ));
    }

    #[test]
    fn zero_margin_reduces_to_softmax() {
        let mut r = rng::seeded(11);
        let w = etf(6, 8);
        let z = gaussian(20, 8, &mut r);
        let labels: Vec<usize> = (0..20).map(|i| i % 6).collect();
        for s in [1.0, 4.0] {
            let a = softmax_loss(&z, &labels, &w, &LossSpec::softmax().with_scale(s).normalized(true)).unwrap();
            let b = margin_loss(&z, &labels, &w, &LossSpec::margin(vec![0.0; 6]).with_scale(s).normalized(true)).unwrap();
            assert!((a.loss - b.loss).abs() <= 1e-12);
            let c = focal_loss(&z, &labels, &w, &LossSpec::focal(0.0).with_scale(s).normalized(true)).unwrap();
            assert!((a.loss - c.loss).abs() <= 1e-12);
        }
    }

    #[test]
    fn margin_example_k2() {
        let w = etf(2, 2);
        let z = Matrix::from_vec(1, 2, w.row(1).to_vec()).unwrap();
        let spec = LossSpec::margin(vec![0.0, 0.5]).normalized(true);
        let out = margin_loss(&z, &[1], &w, &spec).unwrap();
        let e15 = libm::exp(1.5);
        let expected = -libm::log(e15 / (e15 + libm::exp(-1.0)));
        assert!((out.loss - expected).abs() < 1e-14);
    }

    #[test]
    fn margin_loss_lower_bound() {
        let mut r = rng::seeded(5);
        let k = 5;
        let w = etf(k, 6);
        let margins: Vec<f64> = (0..k).map(|j| 0.1 * j as f64).collect();
        let s = 3.0;
        let spec = LossSpec::margin(margins.clone()).with_scale(s).normalized(true).anchored(true);
        let kf = k as f64;
        let bound = |y: usize| libm::log(1.0 + (kf - 1.0) * libm::exp(-s * kf / (kf - 1.0) - margins[y]));
        let z = gaussian(500, 6, &mut r);
        let labels: Vec<usize> = (0..500).map(|_| r.random_range(0..k)).collect();
        let out = margin_loss(&z, &labels, &w, &spec).unwrap();
        for (l, &y) in out.per_sample.iter().zip(&labels) {
            assert!(*l >= bound(y) - 1e-12);
            assert!(*l > bound(y) + 1e-9, "equality only at z = w_y");
        }
        for y in 0..k {
            let at = Matrix::from_vec(1, 6, w.row(y).to_vec()).unwrap();
            let out = margin_loss(&at, &[y], &w, &spec).unwrap();
            assert!((out.loss - bound(y)).abs() < 1e-12);
        }
    }

    #[test]
    fn ldam_margin_values() {
        let a = ldam_margins(&[1000, 10], 1.0).unwrap();
        assert!((a[1] / a[0] - 3.16227766).abs() < 1e-6);
        let b = ldam_margins(&[50, 50, 50], 0.7).unwrap();
        assert!(b.iter().all(|v| *v == b[0]));
        let c = ldam_margins(&[16, 1], 2.0).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15 && (c[1] - 2.0).abs() < 1e-15);
        assert_eq!(ldam_margins(&[4, 0], 1.0).unwrap_err(), Error::Count { class: 1 });
    }

    #[test]
    fn nsl_values_and_anchoring() {
        let w = etf(4, 3);
        let z = Matrix::from_vec(1, 3, w.row(2).to_vec()).unwrap();
        let out = nsl_loss(&z, &[2], &w, &LossSpec::nsl()).unwrap();
        assert!((out.loss + 1.0).abs() < 1e-15);
        assert_eq!(out.grad_prototypes.max_abs(), 0.0);

        let w2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let z2 = Matrix::from_rows(&[vec![0.0, 2.0]]).unwrap();
        assert_eq!(nsl_loss(&z2, &[0], &w2, &LossSpec::nsl()).unwrap().loss, 0.0);

        let free = LossSpec::nsl().anchored(false);
        assert_eq!(nsl_loss(&z, &[2], &w, &free).unwrap_err(), Error::Anchoring);
    }

    /// Two prototypes (1,0),(-1,0) and z = (a, 0) give p_0 = sigmoid(2a).
    fn binary_with_py(a: f64) -> (Matrix, Matrix) {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let z = Matrix::from_rows(&[vec![a, 0.0]]).unwrap();
        (w, z)
    }

    #[test]
    fn gce_values() {
        let (w, z) = binary_with_py(libm::log(3.0) / 2.0);
        let out = gce_loss(&z, &[0], &w, &LossSpec::gce(1.0)).unwrap();
        assert!((out.loss - 0.25).abs() < 1e-14);
        let (w, z) = binary_with_py(400.0);
        for q in [0.1, 0.7, 1.0] {
            assert_eq!(gce_loss(&z, &[0], &w, &LossSpec::gce(q)).unwrap().loss, 0.0);
        }
        assert!(LossSpec::gce(0.0).validate().is_err());
        assert!(LossSpec::gce(1.2).validate().is_err());
    }

    #[test]
    fn focal_values() {
        let (w, z) = binary_with_py(400.0);
        for g in [0.0, 0.5, 2.0] {
            let out = focal_loss(&z, &[0], &w, &LossSpec::focal(g)).unwrap();
            assert_eq!(out.loss, 0.0);
            assert!(out.grad_features.is_finite());
        }
    }

    fn all_specs() -> Vec<LossSpec> {
        let margins = vec![0.3, 0.0, 0.5, 0.1, 0.2];
        vec![
            LossSpec::softmax(),
            LossSpec::margin(margins.clone()),
            LossSpec::ldam(ldam_margins(&[100, 50, 20, 10, 5], 0.5).unwrap()),
            LossSpec::nsl(),
            LossSpec::gce(0.7),
            LossSpec::gce(0.2),
            LossSpec::focal(2.0),
            LossSpec::focal(0.5),
        ]
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let k = 5;
        let d = 6;
        let mut r = rng::seeded(2024);
        for base in all_specs() {
            for normalize in [false, true] {
                for anchored in [true, false] {
                    if base.variant == LossVariant::Nsl && !anchored {
                        continue;
                    }
                    let spec = base.clone().with_scale(1.5).normalized(normalize).anchored(anchored);
                    for _ in 0..25 {
                        let z = gaussian(4, d, &mut r);
                        let w = if anchored { etf(k, d) } else { gaussian(k, d, &mut r) };
                        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..k)).collect();
                        let rep = grad_check(&spec, &z, &labels, &w, 1e-5).unwrap();
                        assert!(rep.max_rel_err <= 1e-5, "{spec:?}: {rep:?}");
                        if anchored {
                            assert_eq!(rep.prototype_grad_max_abs, 0.0);
                            assert!(rep.prototypes_rel_err.is_none());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_feature_with_normalization_is_an_error() {
        let w = etf(3, 3);
        let z = Matrix::zeros(1, 3);
        let spec = LossSpec::softmax().normalized(true);
        assert_eq!(
            grad_check(&spec, &z, &[0], &w, 1e-5).unwrap_err(),
            Error::Normalization { row: 0 }
        );
        assert!(grad_check(&LossSpec::softmax(), &z, &[0], &w, 0.1).is_err());
    }

    #[test]
    fn nsl_symmetry_sum() {
        let k = 10;
        let w = etf(k, 16);
        let mut r = rng::seeded(9);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut r)).collect();
            let spec = LossSpec::nsl().normalized(true);
            assert!(loss_symmetry_sum(&spec, &z, &w).unwrap().abs() <= 1e-9);
        }
        let mut bent = w.clone();
        bent[(0, 0)] += 0.3;
        let z = vec![1.0; 16];
        assert!(loss_symmetry_sum(&LossSpec::nsl(), &z, &bent).unwrap().abs() > 1e-3);
    }

    #[test]
    fn softmax_sum_is_not_constant() {
        let w = etf(4, 4);
        let a = loss_symmetry_sum(&LossSpec::softmax(), &[0.0; 4], &w).unwrap();
        let b = loss_symmetry_sum(&LossSpec::softmax(), &[2.0, -1.0, 0.5, 0.0], &w).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn noise_aware_scale_values() {
        assert!((noise_aware_scale(0.0).unwrap() - 5.0).abs() < 1e-15);
        assert!((noise_aware_scale(0.2).unwrap() - 1.0).abs() < 1e-15);
        assert!((noise_aware_scale(0.45).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(noise_aware_scale(-0.1).unwrap_err(), Error::Rate(-0.1));
    }

    #[test]
    fn anchored_prototypes_untouched() {
        let w = etf(5, 5);
        let before = w.to_le_bytes();
        let mut r = rng::seeded(1);
        for _ in 0..10 {
            let z = gaussian(3, 5, &mut r);
            evaluate(&LossSpec::softmax().anchored(true), &z, &[0, 1, 2], &w).unwrap();
        }
        assert_eq!(before, w.to_le_bytes());
    }

    #[test]
    fn spec_json_field_names() {
        let spec = LossSpec::gce(0.7).fnpal(2.0);
        let json = serde_json_like(&spec);
        assert!(json.contains("\"variant\":\"GCE\""));
        let back: LossSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    fn serde_json_like(spec: &LossSpec) -> alloc::string::String {
        serde_json::to_string(spec).unwrap()
    }
}
