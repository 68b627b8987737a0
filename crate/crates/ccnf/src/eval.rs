//! Objective evaluation: equal error rate over cosine-scored trials, linear
//! attribute probes, and the severity-sweep report combining both.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{AttrStats, AttributeVector, EmbeddingVector, FlowModel};
use crate::io::Dataset;
use crate::linalg::{self, DenseMatrix};

/// Default number of imposters paired against each edited embedding.
pub const DEFAULT_IMPOSTERS_PER_TRIAL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Positive,
    Negative,
}

/// Scored verification trials: pairs of embeddings with a same/different
/// label.
#[derive(Debug, Clone)]
pub struct TrialSet {
    trials: Vec<(EmbeddingVector, EmbeddingVector, TrialLabel)>,
}

impl TrialSet {
    pub fn new(trials: Vec<(EmbeddingVector, EmbeddingVector, TrialLabel)>) -> Result<Self> {
        let pos = trials
            .iter()
            .filter(|(_, _, l)| *l == TrialLabel::Positive)
            .count();
        if pos == 0 || pos == trials.len() {
            return Err(Error::InvalidInput(
                "trial set needs at least one positive and one negative".into(),
            ));
        }
        let d = trials[0].0.dim();
        if trials.iter().any(|(a, b, _)| a.dim() != d || b.dim() != d) {
            return Err(Error::InvalidInput(
                "all trial embeddings must share one dimension".into(),
            ));
        }
        Ok(Self { trials })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn trials(&self) -> &[(EmbeddingVector, EmbeddingVector, TrialLabel)] {
        &self.trials
    }
}

/// Cosine similarity in [−1, 1]; rejects zero vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "cosine pair",
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = linalg::norm2(u);
    let nv = linalg::norm2(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidInput(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((linalg::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Equal error rate from raw scores (higher = more similar), sweeping every
/// distinct score as a threshold candidate. At a candidate τ, ties sit at
/// the threshold itself: false accepts are negatives strictly above τ and
/// false rejects positives strictly below τ. The crossing of the two rates
/// is interpolated linearly between adjacent candidates. Returns
/// `(eer, threshold)`.
pub fn eer_from_scores(pos: &[f64], neg: &[f64]) -> Result<(f64, f64)> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidInput(
            "eer needs both positive and negative scores".into(),
        ));
    }
    let mut candidates: Vec<f64> = pos.iter().chain(neg).copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    candidates.dedup();

    let rates = |tau: f64| -> (f64, f64) {
        let fa = neg.iter().filter(|s| **s > tau).count() as f64 / neg.len() as f64;
        let fr = pos.iter().filter(|s| **s < tau).count() as f64 / pos.len() as f64;
        (fa, fr)
    };

    let mut prev: Option<(f64, f64, f64)> = None; // (tau, far, frr)
    for &tau in &candidates {
        let (far, frr) = rates(tau);
        let diff = far - frr;
        if diff <= 0.0 {
            return Ok(match prev {
                // The first candidate already has FRR ≥ FAR.
                None => ((far + frr) / 2.0, tau),
                Some((t1, far1, frr1)) => {
                    let d1 = far1 - frr1;
                    let d2 = diff;
                    if d1 == d2 {
                        ((far + frr) / 2.0, tau)
                    } else {
                        let w = d1 / (d1 - d2);
                        let eer = frr1 + w * (frr - frr1);
                        (eer, t1 + w * (tau - t1))
                    }
                }
            });
        }
        prev = Some((tau, far, frr));
    }
    // FAR stayed above FRR everywhere (all thresholds accept too much).
    let (tau, far, frr) = prev.expect("non-empty candidates");
    Ok(((far + frr) / 2.0, tau))
}

/// Cosine-scores a trial set and locates the equal-error operating point.
pub fn compute_eer(trials: &TrialSet) -> Result<(f64, f64)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (a, b, label) in trials.trials() {
        let s = cosine_similarity(a.values(), b.values())?;
        match label {
            TrialLabel::Positive => pos.push(s),
            TrialLabel::Negative => neg.push(s),
        }
    }
    eer_from_scores(&pos, &neg)
}

/// Builds verification trials: positives pair each edited embedding with its
/// unedited counterpart; negatives pair it with `per_trial` sampled
/// imposters (skipping the aligned index when the pools have equal length).
pub fn build_trials(
    originals: &[EmbeddingVector],
    edited: &[EmbeddingVector],
    imposters: &[EmbeddingVector],
    per_trial: usize,
    seed: u64,
) -> Result<TrialSet> {
    if originals.len() != edited.len() {
        return Err(Error::DimensionMismatch {
            what: "originals vs edited",
            expected: originals.len(),
            got: edited.len(),
        });
    }
    if originals.is_empty() {
        return Err(Error::InvalidInput("no trial embeddings".into()));
    }
    if imposters.is_empty() {
        return Err(Error::InvalidInput("empty imposter list".into()));
    }
    if per_trial == 0 {
        return Err(Error::InvalidInput("per_trial must be >= 1".into()));
    }
    let aligned = imposters.len() == originals.len();
    if aligned && imposters.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two imposters to avoid self-pairing".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(originals.len() * (1 + per_trial));
    for (i, (orig, ed)) in originals.iter().zip(edited).enumerate() {
        trials.push((ed.clone(), orig.clone(), TrialLabel::Positive));
        for _ in 0..per_trial {
            let j = loop {
                let j = rng.gen_range(0..imposters.len());
                if !(aligned && j == i) {
                    break j;
                }
            };
            trials.push((ed.clone(), imposters[j].clone(), TrialLabel::Negative));
        }
    }
    TrialSet::new(trials)
}

/// Per-axis ridge regression from embeddings to raw attribute values.
/// Features are standardized internally, so predictions are invariant under
/// a positive rescaling of all embeddings (with refit).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAttributeProbe {
    feat_mean: Vec<f64>,
    feat_scale: Vec<f64>,
    /// One weight row per attribute axis.
    weights: Vec<Vec<f64>>,
    intercepts: Vec<f64>,
    pub lambda: f64,
}

impl LinearAttributeProbe {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.feat_mean.len() {
            return Err(Error::DimensionMismatch {
                what: "probe input",
                expected: self.feat_mean.len(),
                got: s.len(),
            });
        }
        let z: Vec<f64> = s
            .iter()
            .zip(self.feat_mean.iter().zip(&self.feat_scale))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect();
        Ok(self
            .weights
            .iter()
            .zip(&self.intercepts)
            .map(|(w, b)| linalg::dot(w, &z) + b)
            .collect())
    }
}

/// Closed-form ridge fit on a dataset (embeddings → raw attributes).
pub fn fit_probe(dataset: &Dataset, lambda: f64) -> Result<LinearAttributeProbe> {
    let n = dataset.len();
    let d = dataset.d;
    if n <= d {
        return Err(Error::InvalidInput(format!(
            "probe needs more samples than dimensions (n={n}, d={d})"
        )));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInput("lambda must be non-negative".into()));
    }
    for axis in 0..dataset.k {
        let first = dataset.attributes[0][axis];
        if dataset.attributes.iter().all(|a| a[axis] == first) {
            return Err(Error::DegenerateDimension { axis });
        }
    }

    // Standardize features.
    let mut mean = vec![0.0; d];
    for e in &dataset.embeddings {
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut scale = vec![0.0; d];
    for e in &dataset.embeddings {
        for ((sc, x), m) in scale.iter_mut().zip(e).zip(&mean) {
            *sc += (x - m) * (x - m);
        }
    }
    for sc in scale.iter_mut() {
        *sc = (*sc / n as f64).sqrt();
        if *sc == 0.0 {
            *sc = 1.0;
        }
    }
    let feats: Vec<Vec<f64>> = dataset
        .embeddings
        .iter()
        .map(|e| {
            e.iter()
                .zip(mean.iter().zip(&scale))
                .map(|(x, (m, sd))| (x - m) / sd)
                .collect()
        })
        .collect();

    // Gram matrix ZᵀZ + λI (shared across axes).
    let mut gram = DenseMatrix::zeros(d, d);
    for z in &feats {
        for i in 0..d {
            for j in i..d {
                let v = gram.get(i, j) + z[i] * z[j];
                gram.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram.set(i, j, gram.get(j, i));
        }
        gram.set(i, i, gram.get(i, i) + lambda);
    }

    let mut weights = Vec::with_capacity(dataset.k);
    let mut intercepts = Vec::with_capacity(dataset.k);
    for axis in 0..dataset.k {
        let ys: Vec<f64> = dataset.attributes.iter().map(|a| a[axis]).collect();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let mut rhs = vec![0.0; d];
        for (z, y) in feats.iter().zip(&ys) {
            for (r, zi) in rhs.iter_mut().zip(z) {
                *r += zi * (y - y_mean);
            }
        }
        let w = linalg::solve_spd(&gram, &rhs).map_err(|_| {
            Error::InvalidInput("singular normal equations; raise the ridge regularization".into())
        })?;
        weights.push(w);
        intercepts.push(y_mean);
    }

    Ok(LinearAttributeProbe {
        feat_mean: mean,
        feat_scale: scale,
        weights,
        intercepts,
        lambda,
    })
}

/// One requested manipulation strength in a sweep: an absolute raw level or
/// "keep each sample's own value".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepLevel {
    Identity,
    Raw(f64),
}

impl std::fmt::Display for SweepLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::Raw(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub level: SweepLevel,
    pub mean_pred: f64,
    pub std_pred: f64,
    pub eer: f64,
    /// Samples whose requested level was clamped into the axis range.
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Machine-readable form: `level,mean_pred,std_pred,eer` per row.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("level,mean_pred,std_pred,eer\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.level, r.mean_pred, r.std_pred, r.eer);
        }
        out
    }

    /// Human-readable table.
    pub fn to_table_string(&self) -> String {
        let mut out = format!("severity sweep, axis {}\n", self.axis);
        let _ = writeln!(
            out,
            "{:>10}  {:>12}  {:>12}  {:>8}",
            "level", "mean_pred", "std_pred", "eer"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>10}  {:>12.4}  {:>12.4}  {:>8.4}",
                r.level.to_string(),
                r.mean_pred,
                r.std_pred,
                r.eer
            );
        }
        out
    }
}

/// Edits every test record along one axis at each requested level, probes
/// the edited embeddings for the attained attribute value, and scores
/// edited-vs-original verification trials.
pub fn severity_sweep_report(
    model: &FlowModel,
    probe: &LinearAttributeProbe,
    test: &Dataset,
    axis: usize,
    levels: &[SweepLevel],
    imposters_per_trial: usize,
    seed: u64,
) -> Result<SweepReport> {
    if axis >= model.k() {
        return Err(Error::InvalidInput(format!(
            "axis {axis} out of range (k = {})",
            model.k()
        )));
    }
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let stats: &AttrStats = model.attr_stats();
    let originals: Vec<EmbeddingVector> = test
        .embeddings
        .iter()
        .map(|e| EmbeddingVector::new(e.clone()))
        .collect::<Result<_>>()?;
    let normalized: Vec<AttributeVector> = test
        .attributes
        .iter()
        .map(|raw| Ok(stats.normalize(raw)?.0))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(levels.len());
    for (li, level) in levels.iter().enumerate() {
        let mut edited = Vec::with_capacity(originals.len());
        let mut clamped = 0usize;
        for ((s, a), raw) in originals.iter().zip(&normalized).zip(&test.attributes) {
            let out = match level {
                SweepLevel::Identity => model.edit_single_axis(s, a, axis, raw[axis])?,
                SweepLevel::Raw(v) => model.edit_single_axis(s, a, axis, *v)?,
            };
            clamped += out.clamped as usize;
            edited.push(out.embedding);
        }
        let preds: Vec<f64> = edited
            .iter()
            .map(|e| Ok(probe.predict(e.values())?[axis]))
            .collect::<Result<Vec<f64>>>()?;
        let n = preds.len() as f64;
        let mean = preds.iter().sum::<f64>() / n;
        let var = preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let trials = build_trials(
            &originals,
            &edited,
            &originals,
            imposters_per_trial,
            seed.wrapping_add(li as u64),
        )?;
        let (eer, _) = compute_eer(&trials)?;
        rows.push(SweepRow {
            level: *level,
            mean_pred: mean,
            std_pred: var.sqrt(),
            eer,
            clamped,
        });
    }
    Ok(SweepReport { axis, rows })
}
