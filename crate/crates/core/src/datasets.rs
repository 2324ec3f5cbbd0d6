//! Labeled datasets: Gaussian blob synthesis, class imbalance and label noise.
//!
//! Every operation is a pure function of its inputs and seed. Imbalance only
//! removes samples and noise only rewrites labels; features are never touched.
//! Each transform appends a [`Transform`] record to the dataset provenance.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    clean_labels: Option<Vec<usize>>,
    k: usize,
    provenance: Vec<Transform>,
}

/// One applied step in the history of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Blobs {
        spec: BlobSpec,
        split: String,
    },
    LongTail {
        rho: f64,
        seed: u64,
        counts: Vec<usize>,
    },
    Step {
        rho: f64,
        minority_fraction: f64,
        seed: u64,
        counts: Vec<usize>,
    },
    SymmetricNoise {
        eta: f64,
        seed: u64,
        sampling: NoiseSampling,
    },
    AsymmetricNoise {
        eta: f64,
        class_map: Vec<(usize, usize)>,
        seed: u64,
        sampling: NoiseSampling,
    },
    Loaded {
        format: String,
        source: String,
    },
}

impl LabeledDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        clean_labels: Option<Vec<usize>>,
        k: usize,
        provenance: Vec<Transform>,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape(alloc::format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label, k });
        }
        if let Some(clean) = &clean_labels {
            if clean.len() != labels.len() {
                return Err(Error::shape("clean_labels and labels differ in length"));
            }
            if let Some(&label) = clean.iter().find(|&&l| l >= k) {
                return Err(Error::Label { label, k });
            }
        }
        Ok(LabeledDataset {
            features,
            labels,
            clean_labels,
            k,
            provenance,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Observed (possibly noisy) labels.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clean_labels(&self) -> Option<&[usize]> {
        self.clean_labels.as_deref()
    }

    /// Clean labels when known, otherwise the observed ones.
    pub fn true_labels(&self) -> &[usize] {
        self.clean_labels.as_deref().unwrap_or(&self.labels)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn provenance(&self) -> &[Transform] {
        &self.provenance
    }

    /// Per-class counts of the observed labels.
    pub fn class_counts(&self) -> Vec<usize> {
        counts_of(&self.labels, self.k)
    }

    /// Counts by clean label.
    pub fn clean_class_counts(&self) -> Vec<usize> {
        counts_of(self.true_labels(), self.k)
    }

    /// Rows `idx` in the given order, provenance kept.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            clean_labels: self
                .clean_labels
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
            k: self.k,
            provenance: self.provenance.clone(),
        }
    }

    fn with_transform(mut self, t: Transform) -> Self {
        self.provenance.push(t);
        self
    }
}

fn counts_of(labels: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &l in labels {
        c[l] += 1;
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub k: usize,
    pub m: usize,
    pub per_class: usize,
    /// Radius of the sphere the class means are drawn from.
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.per_class == 0 {
            return Err(Error::config("blob k, m and per_class must be at least 1"));
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return Err(Error::config("center_scale must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// `k` isotropic Gaussian clusters, class-major order, clean labels attached.
pub fn synth_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    Ok(synth_blobs_split(spec, 0)?.0)
}

/// Training blobs plus a balanced held-out draw of `holdout_per_class`
/// samples per class around the same means. The training part equals
/// [`synth_blobs`] of the same spec.
pub fn synth_blobs_split(spec: &BlobSpec, holdout_per_class: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let mut centers = Matrix::zeros(spec.k, spec.m);
    for c in 0..spec.k {
        let row = centers.row_mut(c);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut r);
            }
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v *= spec.center_scale / n);
                break;
            }
        }
    }
    let mut draw = |per_class: usize, split: &str| {
        let mut features = Matrix::zeros(spec.k * per_class, spec.m);
        let mut labels = Vec::with_capacity(spec.k * per_class);
        for c in 0..spec.k {
            for i in 0..per_class {
                let row = features.row_mut(c * per_class + i);
                for (v, mu) in row.iter_mut().zip(centers.row(c)) {
                    let g: f64 = StandardNormal.sample(&mut r);
                    *v = mu + spec.noise_sigma * g;
                }
                labels.push(c);
            }
        }
        LabeledDataset {
            features,
            clean_labels: Some(labels.clone()),
            labels,
            k: spec.k,
            provenance: vec![Transform::Blobs {
                spec: spec.clone(),
                split: split.into(),
            }],
        }
    };
    let train = draw(spec.per_class, "train");
    let test = draw(holdout_per_class, "holdout");
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceKind {
    LongTailed,
    Step,
}

fn default_minority_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub kind: ImbalanceKind,
    /// Largest over smallest class count.
    pub rho: f64,
    #[serde(default = "default_minority_fraction")]
    pub minority_fraction: f64,
}

pub fn apply_imbalance(d: &LabeledDataset, spec: &ImbalanceSpec, seed: u64) -> Result<LabeledDataset> {
    match spec.kind {
        ImbalanceKind::LongTailed => apply_longtail(d, spec.rho, seed),
        ImbalanceKind::Step => apply_step(d, spec.rho, spec.minority_fraction, seed),
    }
}

fn balanced_size(d: &LabeledDataset, rho: f64) -> Result<usize> {
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(Error::Domain(alloc::format!("imbalance ratio must be >= 1, got {rho}")));
    }
    let counts = d.class_counts();
    let n_max = counts.first().copied().unwrap_or(0);
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    if counts.iter().any(|&c| c != n_max) {
        return Err(Error::Domain("imbalance expects a balanced input dataset".into()));
    }
    Ok(n_max)
}

/// Keep `targets[c]` samples of class `c`, chosen uniformly without
/// replacement; kept rows stay in their original order.
fn subsample(d: &LabeledDataset, targets: &[usize], seed: u64) -> Result<LabeledDataset> {
    if let Some(class) = targets.iter().position(|&t| t == 0) {
        return Err(Error::EmptyClass { class });
    }
    let mut r = rng::seeded(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.k];
    for (i, &l) in d.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keep = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        let picked = index::sample(&mut r, members.len(), targets[c].min(members.len()));
        keep.extend(picked.into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    Ok(d.subset(&keep))
}

/// Exponential decay `n_i = round(n_max * rho^(-i/(k-1)))` over class index `i`.
pub fn longtail_counts(n_max: usize, k: usize, rho: f64) -> Vec<usize> {
    (0..k)
        .map(|i| {
            let exponent = if k > 1 { -(i as f64) / (k as f64 - 1.0) } else { 0.0 };
            libm::round(n_max as f64 * libm::pow(rho, exponent)) as usize
        })
        .collect()
}

pub fn apply_longtail(d: &LabeledDataset, rho: f64, seed: u64) -> Result<LabeledDataset> {
    let n_max = balanced_size(d, rho)?;
    let counts = longtail_counts(n_max, d.k, rho);
    let out = subsample(d, &counts, seed)?;
    Ok(out.with_transform(Transform::LongTail { rho, seed, counts }))
}

/// The last `ceil(minority_fraction * k)` classes keep `round(n_max / rho)`.
pub fn step_counts(n_max: usize, k: usize, rho: f64, minority_fraction: f64) -> Vec<usize> {
    let minority = libm::ceil(minority_fraction * k as f64) as usize;
    let small = libm::round(n_max as f64 / rho) as usize;
    (0..k).map(|i| if i + minority >= k { small } else { n_max }).collect()
}

pub fn apply_step(d: &LabeledDataset, rho: f64, minority_fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(minority_fraction > 0.0 && minority_fraction < 1.0) {
        return Err(Error::Domain(alloc::format!(
            "minority fraction must lie in (0, 1), got {minority_fraction}"
        )));
    }
    let n_max = balanced_size(d, rho)?;
    let counts = step_counts(n_max, d.k, rho, minority_fraction);
    let out = subsample(d, &counts, seed)?;
    Ok(out.with_transform(Transform::Step {
        rho,
        minority_fraction,
        seed,
        counts,
    }))
}

/// Largest over smallest class count.
pub fn imbalance_ratio(d: &LabeledDataset) -> Result<f64> {
    let counts = d.class_counts();
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    if min == 0 {
        return Err(Error::EmptyClass { class: 0 });
    }
    Ok(max as f64 / min as f64)
}

/// How flips are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSampling {
    /// Within each class exactly `round(eta * n_c)` uniformly chosen samples
    /// flip, and flip targets are spread evenly over the candidate classes.
    #[default]
    PerClassExact,
    /// Every sample flips independently with probability `eta`.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_map: Option<Vec<(usize, usize)>>,
    pub seed: u64,
    #[serde(default)]
    pub sampling: NoiseSampling,
}

pub fn apply_noise(d: &LabeledDataset, spec: &NoiseSpec) -> Result<LabeledDataset> {
    match spec.kind {
        NoiseKind::Symmetric => apply_symmetric_noise_with(d, spec.eta, spec.seed, spec.sampling),
        NoiseKind::Asymmetric => {
            let map = spec
                .class_map
                .as_deref()
                .ok_or_else(|| Error::Map("asymmetric noise needs a class map".into()))?;
            apply_asymmetric_noise_with(d, spec.eta, map, spec.seed, spec.sampling)
        }
    }
}

/// The MNIST flip map: 7 -> 1, 2 -> 7, 5 <-> 6, 3 -> 8.
pub fn mnist_asymmetric_map() -> Vec<(usize, usize)> {
    vec![(7, 1), (2, 7), (5, 6), (6, 5), (3, 8)]
}

fn check_rate(eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Rate(eta));
    }
    Ok(())
}

pub fn apply_symmetric_noise(d: &LabeledDataset, eta: f64, seed: u64) -> Result<LabeledDataset> {
    apply_symmetric_noise_with(d, eta, seed, NoiseSampling::default())
}

/// Flip labels to a uniformly chosen *other* class with probability `eta`.
pub fn apply_symmetric_noise_with(
    d: &LabeledDataset,
    eta: f64,
    seed: u64,
    sampling: NoiseSampling,
) -> Result<LabeledDataset> {
    check_rate(eta)?;
    let k = d.k;
    let mut r = rng::seeded(seed);
    let clean = d.labels.clone();
    let mut noisy = clean.clone();
    if k >= 2 && eta > 0.0 {
        match sampling {
            NoiseSampling::Independent => {
                for l in noisy.iter_mut() {
                    if r.random::<f64>() < eta {
                        let t = r.random_range(0..k - 1);
                        *l = if t < *l { t } else { t + 1 };
                    }
                }
            }
            NoiseSampling::PerClassExact => {
                for (c, members) in members_by_class(&clean, k).iter().enumerate() {
                    let others: Vec<usize> = (0..k).filter(|&j| j != c).collect();
                    flip_exact(&mut noisy, members, &others, eta, &mut r);
                }
            }
        }
    }
    let out = LabeledDataset {
        labels: noisy,
        clean_labels: Some(d.clean_labels.clone().unwrap_or(clean)),
        ..d.clone()
    };
    Ok(out.with_transform(Transform::SymmetricNoise { eta, seed, sampling }))
}

fn members_by_class(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

fn flip_exact(labels: &mut [usize], members: &[usize], targets: &[usize], eta: f64, r: &mut rng::Rng) {
    let flips = libm::round(eta * members.len() as f64) as usize;
    if flips == 0 || targets.is_empty() {
        return;
    }
    let chosen = index::sample(r, members.len(), flips);
    let offset = r.random_range(0..targets.len());
    let mut assigned: Vec<usize> = (0..flips).map(|t| targets[(offset + t) % targets.len()]).collect();
    assigned.shuffle(r);
    for (j, t) in chosen.into_iter().zip(assigned) {
        labels[members[j]] = t;
    }
}

pub fn apply_asymmetric_noise(
    d: &LabeledDataset,
    eta: f64,
    class_map: &[(usize, usize)],
    seed: u64,
) -> Result<LabeledDataset> {
    apply_asymmetric_noise_with(d, eta, class_map, seed, NoiseSampling::default())
}

/// Samples whose label is a map source move to the mapped target with
/// probability `eta`; all other samples keep their label.
pub fn apply_asymmetric_noise_with(
    d: &LabeledDataset,
    eta: f64,
    class_map: &[(usize, usize)],
    seed: u64,
    sampling: NoiseSampling,
) -> Result<LabeledDataset> {
    check_rate(eta)?;
    let map = validate_map(class_map, d.k)?;
    let mut r = rng::seeded(seed);
    let clean = d.labels.clone();
    let mut noisy = clean.clone();
    if eta > 0.0 {
        match sampling {
            NoiseSampling::Independent => {
                for l in noisy.iter_mut() {
                    if let Some(&t) = map.get(l) {
                        if r.random::<f64>() < eta {
                            *l = t;
                        }
                    }
                }
            }
            NoiseSampling::PerClassExact => {
                let by_class = members_by_class(&clean, d.k);
                for (&src, &dst) in &map {
                    flip_exact(&mut noisy, &by_class[src], &[dst], eta, &mut r);
                }
            }
        }
    }
    let out = LabeledDataset {
        labels: noisy,
        clean_labels: Some(d.clean_labels.clone().unwrap_or(clean)),
        ..d.clone()
    };
    Ok(out.with_transform(Transform::AsymmetricNoise {
        eta,
        class_map: class_map.to_vec(),
        seed,
        sampling,
    }))
}

fn validate_map(class_map: &[(usize, usize)], k: usize) -> Result<BTreeMap<usize, usize>> {
    if class_map.is_empty() {
        return Err(Error::Map("class map is empty".into()));
    }
    let mut map = BTreeMap::new();
    for &(src, dst) in class_map {
        if src >= k || dst >= k {
            return Err(Error::Map(alloc::format!("pair {src} -> {dst} out of range for {k} classes")));
        }
        if src == dst {
            return Err(Error::Map(alloc::format!("self-loop on class {src}")));
        }
        if map.insert(src, dst).is_some() {
            return Err(Error::Map(alloc::format!("class {src} mapped twice")));
        }
    }
    Ok(map)
}

/// Row-stochastic estimate of `P(observed = j | clean = i)`; `None` without
/// clean labels. Rows of classes with no samples stay zero.
pub fn noise_transition_matrix(d: &LabeledDataset) -> Option<Matrix> {
    let clean = d.clean_labels.as_ref()?;
    let mut t = Matrix::zeros(d.k, d.k);
    for (&c, &o) in clean.iter().zip(&d.labels) {
        t[(c, o)] += 1.0;
    }
    for i in 0..d.k {
        let total: f64 = t.row(i).iter().sum();
        if total > 0.0 {
            t.row_mut(i).iter_mut().for_each(|v| *v /= total);
        }
    }
    Some(t)
}
