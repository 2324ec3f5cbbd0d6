//! Anchored prototype sets.
//!
//! A prototype set is a `k x d` matrix whose rows are the classifier weights.
//! The optimum for the minimal sample margin is a simplex equiangular frame:
//! unit rows with every pairwise dot product equal to `-1/(k-1)`. Two
//! generators produce it:
//!
//! - [`generate_closed_form`] builds the frame analytically from a Helmert
//!   basis of the sum-zero subspace of `R^k`.
//! - [`generate_optimized`] jointly optimizes `k` surrogate features and `k`
//!   prototypes on the sphere under a scaled softmax loss with labels
//!   `y_i = i`, using SGD with momentum, weight decay and cosine annealing.
//!
//! The closed form doubles as the oracle for the optimized route.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    ClosedForm,
    Optimized,
    /// Loaded from elsewhere (a file, a checkpoint) without a known recipe.
    External,
}

/// `k` prototypes in `d` dimensions, stored as the rows of a matrix.
///
/// Values are immutable once built. The equiangularity invariants are not
/// enforced at construction so that perturbed sets can still be inspected
/// with [`verify_equiangular`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    vectors: Matrix,
    generator: Generator,
    seed: Option<u64>,
    tolerance: f64,
}

impl PrototypeSet {
    /// Wrap a `k x d` matrix. Only the class-count condition is checked.
    pub fn from_matrix(vectors: Matrix, generator: Generator, seed: Option<u64>, tolerance: f64) -> Result<Self> {
        check_dims(vectors.rows(), vectors.cols())?;
        if !vectors.is_finite() {
            return Err(Error::shape("prototype matrix contains non-finite values"));
        }
        Ok(PrototypeSet {
            vectors,
            generator,
            seed,
            tolerance,
        })
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn d(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn generator(&self) -> Generator {
        self.generator
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Tolerance the generator promised for the Gram deviation.
    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn into_matrix(self) -> Matrix {
        self.vectors
    }
}

fn check_dims(k: usize, d: usize) -> Result<()> {
    if k < 2 || k > d + 1 {
        return Err(Error::Dimension { k, d });
    }
    Ok(())
}

/// Settings of the optimization-based generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoGenConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    /// `T_max` of the cosine schedule.
    pub cosine_period: u64,
    /// Inverse temperature of the surrogate softmax loss.
    pub scale: f64,
    pub seed: u64,
    /// Required max Gram deviation of the result.
    pub tolerance: f64,
    /// Pass the surrogate features through a ReLU before normalizing.
    pub use_relu: bool,
    /// Test the Gram deviation every this many epochs and stop once it is
    /// within tolerance. Zero runs all epochs.
    pub check_interval: u64,
}

impl Default for ProtoGenConfig {
    fn default() -> Self {
        ProtoGenConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 100_000,
            cosine_period: 20_000,
            scale: 5.0,
            seed: 0,
            tolerance: 1e-4,
            use_relu: false,
            check_interval: 100,
        }
    }
}

impl ProtoGenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) || !positive(self.scale) || !positive(self.tolerance) {
            return Err(Error::config("learning_rate, scale and tolerance must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if self.epochs == 0 || self.cosine_period == 0 {
            return Err(Error::config("epochs and cosine_period must be at least 1"));
        }
        Ok(())
    }
}

/// Simplex equiangular frame of `k` unit vectors embedded in `R^d`.
///
/// Row `i` holds `sqrt(k/(k-1))` times the coordinates of `e_i - 1/k` in the
/// Helmert basis of the sum-zero hyperplane; coordinates past `k-1` are zero.
pub fn generate_closed_form(k: usize, d: usize) -> Result<PrototypeSet> {
    check_dims(k, d)?;
    let kf = k as f64;
    let lift = libm::sqrt(kf / (kf - 1.0));
    let mut m = Matrix::zeros(k, d);
    for j in 1..k {
        let jf = j as f64;
        let inv = 1.0 / libm::sqrt(jf * (jf + 1.0));
        for i in 0..j {
            m[(i, j - 1)] = lift * inv;
        }
        m[(j, j - 1)] = -lift * jf * inv;
    }
    for i in 0..k {
        normalize_in_place(m.row_mut(i));
    }
    PrototypeSet::from_matrix(m, Generator::ClosedForm, None, 1e-10)
}

fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Gradient-based generator following the surrogate balanced-softmax recipe.
///
/// Returns [`Error::Convergence`] carrying the achieved deviation when the
/// epoch budget runs out before the Gram deviation reaches `cfg.tolerance`.
pub fn generate_optimized(k: usize, d: usize, cfg: &ProtoGenConfig) -> Result<PrototypeSet> {
    check_dims(k, d)?;
    cfg.validate()?;
    let mut gen = SurrogateProblem::new(k, d, cfg);
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, epoch, cfg.cosine_period);
        gen.step(lr);
        epochs_run = epoch + 1;
        if cfg.check_interval > 0 && epochs_run % cfg.check_interval == 0 && gen.gram_deviation() <= cfg.tolerance {
            break;
        }
    }
    let achieved = gen.gram_deviation();
    if achieved > cfg.tolerance {
        return Err(Error::Convergence {
            epochs: epochs_run,
            achieved,
            tolerance: cfg.tolerance,
        });
    }
    let w = gen.normalized_prototypes();
    PrototypeSet::from_matrix(w, Generator::Optimized, Some(cfg.seed), cfg.tolerance)
}

/// `lr * (1 + cos(pi * t / t_max)) / 2`; continues periodically past `t_max`.
pub fn cosine_lr(base: f64, t: u64, t_max: u64) -> f64 {
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * t as f64 / t_max as f64))
}

// Matches the epsilon of the reference normalize: x / max(|x|, 1e-12).
const NORMALIZE_EPS: f64 = 1e-12;

struct SurrogateProblem<'a> {
    k: usize,
    cfg: &'a ProtoGenConfig,
    z: Matrix,
    w: Matrix,
    z_buf: Matrix,
    w_buf: Matrix,
}

impl<'a> SurrogateProblem<'a> {
    fn new(k: usize, d: usize, cfg: &'a ProtoGenConfig) -> Self {
        let mut rng = rng::seeded(cfg.seed);
        let mut z = Matrix::zeros(k, d);
        for v in z.as_mut_slice() {
            *v = StandardNormal.sample(&mut rng);
        }
        // kaiming normal, fan_in = d, gain sqrt(2)
        let std = libm::sqrt(2.0 / d as f64);
        let mut w = Matrix::zeros(k, d);
        for v in w.as_mut_slice() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = std * g;
        }
        SurrogateProblem {
            k,
            cfg,
            z,
            w,
            z_buf: Matrix::zeros(k, d),
            w_buf: Matrix::zeros(k, d),
        }
    }

    fn step(&mut self, lr: f64) {
        let k = self.k;
        let d = self.z.cols();
        let s = self.cfg.scale;

        let act = if self.cfg.use_relu {
            let mut a = self.z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            a
        } else {
            self.z.clone()
        };
        let (zn, zr) = normalize_rows_eps(&act);
        let (wn, wr) = normalize_rows_eps(&self.w);

        // dL/dlogits for mean cross entropy with labels y_i = i
        let mut g = zn.mul_transpose(&wn);
        for i in 0..k {
            let row = g.row_mut(i);
            row.iter_mut().for_each(|v| *v *= s);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - mx);
                sum += *v;
            }
            for (j, v) in row.iter_mut().enumerate() {
                *v /= sum;
                if i == j {
                    *v -= 1.0;
                }
                *v *= s / k as f64;
            }
        }

        let mut gz = Matrix::zeros(k, d);
        let mut gw = Matrix::zeros(k, d);
        for i in 0..k {
            for j in 0..k {
                let c = g[(i, j)];
                crate::matrix::axpy(c, wn.row(j), gz.row_mut(i));
                crate::matrix::axpy(c, zn.row(i), gw.row_mut(j));
            }
        }
        project_normalize_grad(&mut gz, &zn, &zr);
        project_normalize_grad(&mut gw, &wn, &wr);
        if self.cfg.use_relu {
            for (gv, zv) in gz.as_mut_slice().iter_mut().zip(self.z.as_slice()) {
                if *zv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }

        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        sgd_update(self.z.as_mut_slice(), gz.as_slice(), self.z_buf.as_mut_slice(), lr, mu, wd);
        sgd_update(self.w.as_mut_slice(), gw.as_slice(), self.w_buf.as_mut_slice(), lr, mu, wd);
    }

    fn normalized_prototypes(&self) -> Matrix {
        let mut w = self.w.clone();
        for i in 0..w.rows() {
            normalize_in_place(w.row_mut(i));
        }
        w
    }

    fn gram_deviation(&self) -> f64 {
        max_offdiag_deviation(&self.normalized_prototypes())
    }
}

fn normalize_rows_eps(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut radii = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let r = norm(m.row(i)).max(NORMALIZE_EPS);
        out.row_mut(i).iter_mut().for_each(|v| *v /= r);
        radii.push(r);
    }
    (out, radii)
}

/// Chain rule through `x -> x / |x|`: `(g - u (u.g)) / |x|`.
pub(crate) fn project_normalize_grad(grad: &mut Matrix, unit: &Matrix, radii: &[f64]) {
    for i in 0..grad.rows() {
        let u = unit.row(i);
        let proj = dot(grad.row(i), u);
        for (g, uv) in grad.row_mut(i).iter_mut().zip(u) {
            *g = (*g - proj * uv) / radii[i];
        }
    }
}

/// Heavy-ball SGD with coupled weight decay: `buf = mu*buf + (g + wd*p)`, `p -= lr*buf`.
pub(crate) fn sgd_update(params: &mut [f64], grad: &[f64], buf: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((p, g), b) in params.iter_mut().zip(grad).zip(buf.iter_mut()) {
        let step = g + wd * *p;
        *b = mu * *b + step;
        *p -= lr * *b;
    }
}

fn max_offdiag_deviation(w: &Matrix) -> f64 {
    let k = w.rows();
    let target = -1.0 / (k as f64 - 1.0);
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            worst = worst.max((dot(w.row(i), w.row(j)) - target).abs());
        }
    }
    worst
}

/// All pairwise dot products of the prototype rows.
pub fn gram_matrix(p: &PrototypeSet) -> Matrix {
    let w = p.vectors();
    let k = w.rows();
    let mut g = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(w.row(i), w.row(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquiangularReport {
    pub k: usize,
    pub d: usize,
    pub tolerance: f64,
    pub max_norm_dev: f64,
    pub max_gram_dev: f64,
    pub min_angle_deg: f64,
    pub zero_sum_norm: f64,
    pub pass: bool,
}

/// Compare a prototype set with the ideal frame.
///
/// `max_gram_dev` uses the raw rows, so a mis-scaled row shows up in both
/// deviations.
pub fn verify_equiangular(p: &PrototypeSet, tol: f64) -> EquiangularReport {
    let w = p.vectors();
    let max_norm_dev = w.iter_rows().map(|r| (norm(r) - 1.0).abs()).fold(0.0, f64::max);
    let max_gram_dev = max_offdiag_deviation(w);
    let min_angle_deg = min_angle_deg(w).unwrap_or(f64::NAN);
    let mut sum = vec![0.0; p.d()];
    for r in w.iter_rows() {
        crate::matrix::axpy(1.0, r, &mut sum);
    }
    EquiangularReport {
        k: p.k(),
        d: p.d(),
        tolerance: tol,
        max_norm_dev,
        max_gram_dev,
        min_angle_deg,
        zero_sum_norm: norm(&sum),
        pass: max_norm_dev <= tol && max_gram_dev <= tol,
    }
}

/// Smallest pairwise angle in degrees; `None` when a row is zero.
pub(crate) fn min_angle_deg(w: &Matrix) -> Option<f64> {
    let norms: Vec<f64> = w.iter_rows().map(norm).collect();
    if norms.contains(&0.0) {
        return None;
    }
    let mut best = f64::INFINITY;
    for i in 0..w.rows() {
        for j in (i + 1)..w.rows() {
            // half-angle form stays accurate near 0 and 180 degrees
            let (mut diff, mut sum) = (0.0, 0.0);
            for (a, b) in w.row(i).iter().zip(w.row(j)) {
                let (u, v) = (a / norms[i], b / norms[j]);
                diff += (u - v) * (u - v);
                sum += (u + v) * (u + v);
            }
            best = best.min(2.0 * libm::atan2(libm::sqrt(diff), libm::sqrt(sum)));
        }
    }
    Some(best.to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn etf_angle(k: usize) -> f64 {
        libm::acos(-1.0 / (k as f64 - 1.0)).to_degrees()
    }

    #[test]
    fn closed_form_k2_is_antipodal() {
        let p = generate_closed_form(2, 1).unwrap();
        assert_eq!(p.vectors().as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn closed_form_k3_in_plane() {
        let p = generate_closed_form(3, 2).unwrap();
        let g = gram_matrix(&p);
        for i in 0..3 {
            assert!((g[(i, i)] - 1.0).abs() < 1e-15);
            for j in 0..3 {
                if i != j {
                    assert!((g[(i, j)] + 0.5).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn closed_form_k10_d64() {
        let p = generate_closed_form(10, 64).unwrap();
        let g = gram_matrix(&p);
        let mut pairs = 0;
        for i in 0..10 {
            for j in (i + 1)..10 {
                assert!((g[(i, j)] + 1.0 / 9.0).abs() <= 1e-10);
                pairs += 1;
            }
        }
        assert_eq!(pairs, 45);
        let r = verify_equiangular(&p, 1e-6);
        assert!(r.pass);
        assert!(r.zero_sum_norm <= 1e-8);
    }

    #[test]
    fn dimension_errors() {
        assert_eq!(generate_closed_form(10, 5).unwrap_err(), Error::Dimension { k: 10, d: 5 });
        assert!(matches!(generate_closed_form(1, 5), Err(Error::Dimension { .. })));
        assert!(matches!(
            generate_optimized(10, 5, &ProtoGenConfig::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn scaled_row_fails_verification() {
        let p = generate_closed_form(4, 3).unwrap();
        let mut m = p.vectors().clone();
        m.row_mut(1).iter_mut().for_each(|v| *v *= 2.0);
        let bad = PrototypeSet::from_matrix(m, Generator::External, None, 0.0).unwrap();
        let r = verify_equiangular(&bad, 1e-6);
        assert!(!r.pass);
        assert!((r.max_norm_dev - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let cfg = ProtoGenConfig {
            seed: 3,
            ..Default::default()
        };
        let p = generate_optimized(5, 7, &cfg).unwrap();
        let g = gram_matrix(&p);
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn optimized_k4_d8_matches_closed_form() {
        let p = generate_optimized(4, 8, &ProtoGenConfig::default()).unwrap();
        let oracle = gram_matrix(&generate_closed_form(4, 8).unwrap());
        let g = gram_matrix(&p);
        for (a, b) in g.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn optimized_k2_antipodal() {
        let p = generate_optimized(2, 2, &ProtoGenConfig::default()).unwrap();
        let w = p.vectors();
        assert!((dot(w.row(0), w.row(1)) + 1.0).abs() <= 1e-4);
    }

    #[test]
    fn optimized_k10_d9_angle() {
        let p = generate_optimized(10, 9, &ProtoGenConfig::default()).unwrap();
        let r = verify_equiangular(&p, 1e-4);
        assert!(r.pass, "{r:?}");
        assert!((r.min_angle_deg - etf_angle(10)).abs() <= 0.1);
        assert!((etf_angle(10) - 96.379).abs() < 1e-3);
    }

    #[test]
    #[ignore = "about a minute in release; run with --ignored"]
    fn optimized_k100_d128_angle() {
        let p = generate_optimized(100, 128, &ProtoGenConfig::default()).unwrap();
        let r = verify_equiangular(&p, 1e-4);
        assert!((r.min_angle_deg - etf_angle(100)).abs() <= 0.1, "{r:?}");
        assert!((etf_angle(100) - 90.579).abs() < 1e-3);
    }

    #[test]
    fn optimized_is_deterministic() {
        let cfg = ProtoGenConfig {
            seed: 7,
            ..Default::default()
        };
        let a = generate_optimized(6, 10, &cfg).unwrap();
        let b = generate_optimized(6, 10, &cfg).unwrap();
        assert_eq!(a.vectors().to_le_bytes(), b.vectors().to_le_bytes());
    }

    #[test]
    fn relu_variant_also_converges() {
        let cfg = ProtoGenConfig {
            use_relu: true,
            seed: 1,
            ..Default::default()
        };
        let p = generate_optimized(4, 8, &cfg).unwrap();
        assert!(verify_equiangular(&p, 1e-4).pass);
    }

    #[test]
    fn exhausted_budget_reports_deviation() {
        let cfg = ProtoGenConfig {
            epochs: 3,
            check_interval: 0,
            tolerance: 1e-9,
            ..Default::default()
        };
        match generate_optimized(6, 8, &cfg) {
            Err(Error::Convergence { epochs, achieved, .. }) => {
                assert_eq!(epochs, 3);
                assert!(achieved > 1e-9);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-17);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
    }

    // Random orthogonal matrix from Gram-Schmidt on a Gaussian draw.
    fn orthogonal(d: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        let mut q = Matrix::zeros(d, d);
        for i in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            for j in 0..i {
                let c = dot(&v, q.row(j));
                crate::matrix::axpy(-c, q.row(j), &mut v);
            }
            normalize_in_place(&mut v);
            q.row_mut(i).copy_from_slice(&v);
        }
        q
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn closed_form_exact_and_rotation_invariant(k in 2usize..40, extra in 0usize..12, seed in any::<u64>()) {
            let d = k - 1 + extra;
            let d = d.max(1);
            let p = generate_closed_form(k, d).unwrap();
            let g = gram_matrix(&p);
            let target = -1.0 / (k as f64 - 1.0);
            for i in 0..k {
                prop_assert!((g[(i, i)] - 1.0).abs() <= 1e-10);
                for j in 0..k {
                    if i != j {
                        prop_assert!((g[(i, j)] - target).abs() <= 1e-10);
                    }
                }
            }
            let q = orthogonal(d, seed);
            // rows of W Q^T are rotated prototypes
            let rotated = p.vectors().mul_transpose(&q);
            let rp = PrototypeSet::from_matrix(rotated, Generator::External, None, 0.0).unwrap();
            let gr = gram_matrix(&rp);
            for (a, b) in gr.as_slice().iter().zip(g.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
            prop_assert!(verify_equiangular(&p, 1e-10).zero_sum_norm <= 1e-8);
        }
    }
}
