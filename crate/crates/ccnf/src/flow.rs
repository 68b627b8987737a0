//! The conditional continuous normalizing flow: log-likelihood by the
//! instantaneous change of variables, conditional sampling, and the two-pass
//! attribute manipulation block.
//!
//! Convention: data lives at `t₁ = 1`, the standard-normal base at `t₀ = 0`.
//! Densities integrate the state from `t₁` to `t₀`; sampling and the second
//! editing pass integrate from `t₀` to `t₁`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::field::{Field, FieldKind, LinearField, MlpField, EXACT_TRACE_CAP};
use crate::io::{self, KvDoc};
use crate::linalg::{self, DenseMatrix};
use crate::solver::{integrate, AugmentedState, Method, SolverConfig, TraceMode};

/// Base-distribution end of the flow.
pub const T0: f64 = 0.0;
/// Data end of the flow.
pub const T1: f64 = 1.0;

const CHECKPOINT_MAGIC: &str = "ccnf-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// A point in the flow's data space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !linalg::all_finite(&values) {
            return Err(Error::NonFinite { what: "embedding" });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A conditioning vector with every component normalized into [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector {
    values: Vec<f64>,
}

impl AttributeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !linalg::all_finite(&values) {
            return Err(Error::NonFinite { what: "attributes" });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "attribute components must lie in [0,1]; normalize first".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Replaces one component (already normalized).
    pub fn with_component(&self, axis: usize, value: f64) -> Result<Self> {
        let mut values = self.values.clone();
        if axis >= values.len() {
            return Err(Error::InvalidInput(format!(
                "axis {axis} out of range (k = {})",
                values.len()
            )));
        }
        values[axis] = value;
        Self::new(values)
    }
}

/// Per-dimension raw ranges mapping raw attribute values onto [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AttrStats {
    ranges: Vec<(f64, f64)>,
}

impl AttrStats {
    pub fn from_ranges(ranges: Vec<(f64, f64)>) -> Result<Self> {
        for (axis, (lo, hi)) in ranges.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::DegenerateDimension { axis });
            }
        }
        Ok(Self { ranges })
    }

    /// Observed min/max per dimension across a list of raw vectors.
    pub fn from_data(raw: &[Vec<f64>]) -> Result<Self> {
        let k = raw
            .first()
            .ok_or_else(|| Error::InvalidInput("empty attribute list".into()))?
            .len();
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); k];
        for row in raw {
            if row.len() != k {
                return Err(Error::DimensionMismatch {
                    what: "attribute row",
                    expected: k,
                    got: row.len(),
                });
            }
            for (r, v) in ranges.iter_mut().zip(row) {
                r.0 = r.0.min(*v);
                r.1 = r.1.max(*v);
            }
        }
        for (axis, (lo, hi)) in ranges.iter().enumerate() {
            if lo >= hi {
                return Err(Error::DegenerateDimension { axis });
            }
        }
        Ok(Self { ranges })
    }

    pub fn k(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    /// Normalizes one raw component, clamping into [0, 1]; the flag reports
    /// whether clamping occurred.
    pub fn normalize_component(&self, axis: usize, raw: f64) -> Result<(f64, bool)> {
        let (lo, hi) = *self.ranges.get(axis).ok_or_else(|| {
            Error::InvalidInput(format!("axis {axis} out of range (k = {})", self.k()))
        })?;
        if !raw.is_finite() {
            return Err(Error::NonFinite { what: "attribute" });
        }
        let v = (raw - lo) / (hi - lo);
        let clamped = !(0.0..=1.0).contains(&v);
        Ok((v.clamp(0.0, 1.0), clamped))
    }

    /// Normalizes a raw vector; the flag reports whether any component was
    /// clamped into [0, 1].
    pub fn normalize(&self, raw: &[f64]) -> Result<(AttributeVector, bool)> {
        if raw.len() != self.k() {
            return Err(Error::DimensionMismatch {
                what: "raw attributes",
                expected: self.k(),
                got: raw.len(),
            });
        }
        let mut values = Vec::with_capacity(raw.len());
        let mut any_clamped = false;
        for (axis, v) in raw.iter().enumerate() {
            let (nv, c) = self.normalize_component(axis, *v)?;
            values.push(nv);
            any_clamped |= c;
        }
        Ok((AttributeVector { values }, any_clamped))
    }

    pub fn denormalize_component(&self, axis: usize, value: f64) -> f64 {
        let (lo, hi) = self.ranges[axis];
        lo + value * (hi - lo)
    }
}

/// Outcome of a single-axis edit, reporting whether the requested level had
/// to be clamped into the axis's range.
#[derive(Debug, Clone)]
pub struct SingleAxisEdit {
    pub embedding: EmbeddingVector,
    pub clamped: bool,
}

/// Vector-field parameters plus the attribute normalization statistics and
/// solver configuration; the serializable checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    field: FieldKind,
    solver: SolverConfig,
    attr_stats: AttrStats,
}

impl FlowModel {
    pub fn new(field: FieldKind, solver: SolverConfig, attr_stats: AttrStats) -> Result<Self> {
        solver.validate()?;
        if field.cond_dim() != attr_stats.k() {
            return Err(Error::DimensionMismatch {
                what: "attribute statistics",
                expected: field.cond_dim(),
                got: attr_stats.k(),
            });
        }
        Ok(Self {
            field,
            solver,
            attr_stats,
        })
    }

    pub fn d(&self) -> usize {
        self.field.dim()
    }

    pub fn k(&self) -> usize {
        self.field.cond_dim()
    }

    pub fn field(&self) -> &FieldKind {
        &self.field
    }

    pub fn field_mut(&mut self) -> &mut FieldKind {
        &mut self.field
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn solver_mut(&mut self) -> &mut SolverConfig {
        &mut self.solver
    }

    pub fn attr_stats(&self) -> &AttrStats {
        &self.attr_stats
    }

    /// Default trace mode: exact while the dimension allows it, otherwise a
    /// single Hutchinson probe.
    fn default_trace(&self) -> TraceMode {
        if self.d() <= EXACT_TRACE_CAP {
            TraceMode::Exact
        } else {
            TraceMode::Hutchinson { probes: 1, seed: 0 }
        }
    }

    fn check_pair(&self, s: &EmbeddingVector, a: &AttributeVector) -> Result<()> {
        if s.dim() != self.d() {
            return Err(Error::DimensionMismatch {
                what: "embedding",
                expected: self.d(),
                got: s.dim(),
            });
        }
        if a.dim() != self.k() {
            return Err(Error::DimensionMismatch {
                what: "attributes",
                expected: self.k(),
                got: a.dim(),
            });
        }
        Ok(())
    }

    /// Transforms a data-space point to the base space, integrating from
    /// `t₁` to `t₀`, and returns the accumulated trace integral alongside.
    pub fn forward_to_base(
        &self,
        s: &EmbeddingVector,
        a: &AttributeVector,
    ) -> Result<(Vec<f64>, f64)> {
        self.forward_to_base_with(s, a, &self.default_trace())
    }

    pub fn forward_to_base_with(
        &self,
        s: &EmbeddingVector,
        a: &AttributeVector,
        trace: &TraceMode,
    ) -> Result<(Vec<f64>, f64)> {
        self.check_pair(s, a)?;
        let state0 = AugmentedState::new(s.values().to_vec());
        let out = integrate(
            &self.field,
            &state0,
            T1,
            T0,
            a.values(),
            &self.solver,
            trace,
        )?;
        Ok((out.z, out.delta_logp))
    }

    /// `log p(s | a; θ)` with a standard-normal base distribution.
    pub fn log_likelihood(&self, s: &EmbeddingVector, a: &AttributeVector) -> Result<f64> {
        self.log_likelihood_with(s, a, &self.default_trace())
    }

    pub fn log_likelihood_with(
        &self,
        s: &EmbeddingVector,
        a: &AttributeVector,
        trace: &TraceMode,
    ) -> Result<f64> {
        let (z0, delta) = self.forward_to_base_with(s, a, trace)?;
        Ok(standard_normal_logpdf(&z0) - delta)
    }

    /// Draws `z(t₀) ~ N(0, I)` and integrates it to the data space under `a`.
    pub fn sample(&self, a: &AttributeVector, rng: &mut ChaCha8Rng) -> Result<EmbeddingVector> {
        if a.dim() != self.k() {
            return Err(Error::DimensionMismatch {
                what: "attributes",
                expected: self.k(),
                got: a.dim(),
            });
        }
        let z0: Vec<f64> = (0..self.d()).map(|_| StandardNormal.sample(rng)).collect();
        let out = integrate(
            &self.field,
            &AugmentedState::new(z0),
            T0,
            T1,
            a.values(),
            &self.solver,
            &TraceMode::Off,
        )?;
        EmbeddingVector::new(out.z)
    }

    /// The two-pass manipulation block: integrate `s` to the base point under
    /// its original attributes, then back to the data space under the target
    /// attributes. The base point always comes from transforming `s`, never
    /// from resampling, so residual identity is preserved.
    pub fn edit(
        &self,
        s: &EmbeddingVector,
        a: &AttributeVector,
        a_target: &AttributeVector,
    ) -> Result<EmbeddingVector> {
        self.check_pair(s, a)?;
        if a_target.dim() != self.k() {
            return Err(Error::DimensionMismatch {
                what: "target attributes",
                expected: self.k(),
                got: a_target.dim(),
            });
        }
        let to_base = integrate(
            &self.field,
            &AugmentedState::new(s.values().to_vec()),
            T1,
            T0,
            a.values(),
            &self.solver,
            &TraceMode::Off,
        )?;
        let back = integrate(
            &self.field,
            &to_base,
            T0,
            T1,
            a_target.values(),
            &self.solver,
            &TraceMode::Off,
        )?;
        EmbeddingVector::new(back.z)
    }

    /// Single-axis manipulation: replaces one attribute with the normalized
    /// `level` (raw units) while keeping the others fixed, then edits.
    pub fn edit_single_axis(
        &self,
        s: &EmbeddingVector,
        a: &AttributeVector,
        axis: usize,
        level: f64,
    ) -> Result<SingleAxisEdit> {
        if axis >= self.k() {
            return Err(Error::InvalidInput(format!(
                "axis {axis} out of range (k = {})",
                self.k()
            )));
        }
        let (value, clamped) = self.attr_stats.normalize_component(axis, level)?;
        let a_target = a.with_component(axis, value)?;
        let embedding = self.edit(s, a, &a_target)?;
        Ok(SingleAxisEdit { embedding, clamped })
    }

    // ── checkpoint serialization ────────────────────────────────────────

    pub fn to_document(&self) -> KvDoc {
        let mut doc = KvDoc::new(CHECKPOINT_MAGIC);
        doc.push("version", CHECKPOINT_VERSION);
        doc.push("d", self.d());
        doc.push("k", self.k());
        match &self.field {
            FieldKind::Mlp(f) => {
                doc.push("field", "mlp");
                doc.push("hidden", f.hidden());
            }
            FieldKind::Linear(_) => {
                doc.push("field", "linear");
            }
        }
        doc.push(
            "solver.method",
            match self.solver.method {
                Method::Rk4Fixed => "rk4",
                Method::Dopri5Adaptive => "dopri5",
            },
        );
        doc.push("solver.steps", self.solver.steps);
        doc.push("solver.rtol", self.solver.rtol);
        doc.push("solver.atol", self.solver.atol);
        doc.push("solver.max_steps", self.solver.max_steps);
        for (i, (lo, hi)) in self.attr_stats.ranges().iter().enumerate() {
            doc.push(&format!("attr.{i}.min"), lo);
            doc.push(&format!("attr.{i}.max"), hi);
        }
        doc.push(
            "params",
            io::floats_to_base64(&self.field.params().flatten()),
        );
        doc
    }

    pub fn from_document(doc: &KvDoc) -> Result<Self> {
        let version: u32 = doc.parse("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let d: usize = doc.parse("d")?;
        let k: usize = doc.parse("k")?;
        let flat = io::base64_to_floats(doc.req("params")?)?;
        let field = match doc.req("field")? {
            "mlp" => {
                let hidden: usize = doc.parse("hidden")?;
                FieldKind::Mlp(MlpField::from_params(d, k, hidden, &flat)?)
            }
            "linear" => {
                if flat.len() != d * d {
                    return Err(Error::Format("linear field payload size mismatch".into()));
                }
                let m = DenseMatrix::new(d, d, flat)
                    .map_err(|e| Error::Format(format!("linear field payload: {e}")))?;
                FieldKind::Linear(LinearField::new(m, k)?)
            }
            other => return Err(Error::Format(format!("unknown field kind `{other}`"))),
        };
        let solver = SolverConfig {
            method: match doc.req("solver.method")? {
                "rk4" => Method::Rk4Fixed,
                "dopri5" => Method::Dopri5Adaptive,
                other => return Err(Error::Format(format!("unknown solver method `{other}`"))),
            },
            steps: doc.parse("solver.steps")?,
            rtol: doc.parse("solver.rtol")?,
            atol: doc.parse("solver.atol")?,
            max_steps: doc.parse("solver.max_steps")?,
        };
        let mut ranges = Vec::with_capacity(k);
        for i in 0..k {
            ranges.push((
                doc.parse(&format!("attr.{i}.min"))?,
                doc.parse(&format!("attr.{i}.max"))?,
            ));
        }
        Self::new(field, solver, AttrStats::from_ranges(ranges)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_document().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_document(&KvDoc::read(path, CHECKPOINT_MAGIC)?)
    }
}

/// `log N(z; 0, I) = −(d/2)·log 2π − |z|²/2`
pub fn standard_normal_logpdf(z: &[f64]) -> f64 {
    let d = z.len() as f64;
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * linalg::dot(z, z)
}
