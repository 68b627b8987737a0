//! Attribute-conditioned Gaussian data with closed-form densities and a
//! closed-form ideal edit, standing in for real embeddings.
//!
//! Samples follow `s ~ N(M·u + m0, Σ)` with diagonal `Σ` shared across
//! conditions and `u ∈ [0,1]^k` the normalized attribute vector. Shared
//! covariance makes the optimal transport between two conditions a pure mean
//! shift, so "correct edit" is well defined: `s ↦ s + M·(u' − u)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flow::AttrStats;
use crate::io::{Dataset, KvDoc};
use crate::linalg::{self, DenseMatrix};

const SPEC_MAGIC: &str = "ccnf-generator";

/// Attribute sampling law (on the normalized [0,1] scale).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrSampler {
    Uniform,
    /// Beta(2,5) per axis: mass concentrated at low severities, mimicking
    /// label skew toward the low end of a severity scale.
    SkewLow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussianGenerator {
    d: usize,
    k: usize,
    mean_map: DenseMatrix,
    offset: Vec<f64>,
    variances: Vec<f64>,
    /// Raw units per attribute axis; dataset files carry raw values.
    ranges: Vec<(f64, f64)>,
    sampler: AttrSampler,
    seed: u64,
}

impl ConditionalGaussianGenerator {
    pub fn new(
        mean_map: DenseMatrix,
        offset: Vec<f64>,
        variances: Vec<f64>,
        ranges: Vec<(f64, f64)>,
        sampler: AttrSampler,
        seed: u64,
    ) -> Result<Self> {
        let d = mean_map.rows();
        let k = mean_map.cols();
        if offset.len() != d {
            return Err(Error::DimensionMismatch {
                what: "generator offset",
                expected: d,
                got: offset.len(),
            });
        }
        if variances.len() != d {
            return Err(Error::DimensionMismatch {
                what: "generator variances",
                expected: d,
                got: variances.len(),
            });
        }
        if variances.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("variances must be positive".into()));
        }
        if ranges.len() != k {
            return Err(Error::DimensionMismatch {
                what: "generator ranges",
                expected: k,
                got: ranges.len(),
            });
        }
        for (axis, (lo, hi)) in ranges.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::DegenerateDimension { axis });
            }
        }
        Ok(Self {
            d,
            k,
            mean_map,
            offset,
            variances,
            ranges,
            sampler,
            seed,
        })
    }

    /// A random but reproducible generator: mean-map entries in ±1, small
    /// offsets, moderate noise, unit attribute ranges.
    pub fn random(d: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        let m_data: Vec<f64> = (0..d * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let offset: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let variances: Vec<f64> = (0..d).map(|_| rng.gen_range(0.09..0.36)).collect();
        Self::new(
            DenseMatrix::new(d, k, m_data).expect("finite map"),
            offset,
            variances,
            vec![(0.0, 1.0); k],
            AttrSampler::Uniform,
            seed,
        )
        .expect("valid construction")
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mean_map(&self) -> &DenseMatrix {
        &self.mean_map
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn with_sampler(mut self, sampler: AttrSampler) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_ranges(mut self, ranges: Vec<(f64, f64)>) -> Result<Self> {
        if ranges.len() != self.k {
            return Err(Error::DimensionMismatch {
                what: "generator ranges",
                expected: self.k,
                got: ranges.len(),
            });
        }
        self.ranges = ranges;
        Ok(self)
    }

    /// Normalization statistics matching this generator's raw ranges.
    pub fn attr_stats(&self) -> AttrStats {
        AttrStats::from_ranges(self.ranges.clone()).expect("validated at construction")
    }

    /// Conditional mean `M·u + m0` at a normalized attribute vector.
    pub fn conditional_mean(&self, u: &[f64]) -> Vec<f64> {
        let mut m = linalg::matvec_unchecked(&self.mean_map, u);
        for (mi, oi) in m.iter_mut().zip(&self.offset) {
            *mi += oi;
        }
        m
    }

    /// Differential entropy of the conditional law: the expected NLL of a
    /// perfect model, `½·Σ log(2πe·σᵢ²)`.
    pub fn conditional_entropy(&self) -> f64 {
        let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        0.5 * self
            .variances
            .iter()
            .map(|v| (two_pi_e * v).ln())
            .sum::<f64>()
    }

    fn sample_attr(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self.sampler {
            AttrSampler::Uniform => (0..self.k).map(|_| rng.gen_range(0.0..1.0)).collect(),
            AttrSampler::SkewLow => {
                let beta = Beta::new(2.0, 5.0).expect("valid shape");
                (0..self.k).map(|_| beta.sample(rng)).collect()
            }
        }
    }

    /// `n` pairs `(s, raw attributes)`; reproducible under the stored seed.
    pub fn generate_dataset(&self, n: usize) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidInput("dataset size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut ds = Dataset::new(self.d, self.k);
        for _ in 0..n {
            let u = self.sample_attr(&mut rng);
            let mut s = self.conditional_mean(&u);
            for (si, var) in s.iter_mut().zip(&self.variances) {
                let g: f64 = StandardNormal.sample(&mut rng);
                *si += var.sqrt() * g;
            }
            let raw: Vec<f64> = u
                .iter()
                .zip(&self.ranges)
                .map(|(ui, (lo, hi))| lo + ui * (hi - lo))
                .collect();
            ds.push(s, raw);
        }
        Ok(ds)
    }

    /// Exact conditional Gaussian log-density at a normalized attribute
    /// vector.
    pub fn true_log_density(&self, s: &[f64], u: &[f64]) -> Result<f64> {
        if s.len() != self.d {
            return Err(Error::DimensionMismatch {
                what: "sample",
                expected: self.d,
                got: s.len(),
            });
        }
        if u.len() != self.k {
            return Err(Error::DimensionMismatch {
                what: "attributes",
                expected: self.k,
                got: u.len(),
            });
        }
        let mean = self.conditional_mean(u);
        let mut lp = 0.0;
        for ((si, mi), var) in s.iter().zip(&mean).zip(&self.variances) {
            let r = si - mi;
            lp += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r * r / var;
        }
        Ok(lp)
    }

    /// The ideal conditional edit: optimal transport between the source and
    /// target conditionals (shared Σ) is the mean shift `s + M·(u' − u)`.
    pub fn oracle_edit(&self, s: &[f64], u: &[f64], u_target: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.d || u.len() != self.k || u_target.len() != self.k {
            return Err(Error::DimensionMismatch {
                what: "oracle edit input",
                expected: self.d,
                got: s.len(),
            });
        }
        let du: Vec<f64> = u_target.iter().zip(u).map(|(t, c)| t - c).collect();
        let shift = linalg::matvec_unchecked(&self.mean_map, &du);
        Ok(s.iter().zip(&shift).map(|(si, di)| si + di).collect())
    }

    // ── spec persistence ────────────────────────────────────────────────

    pub fn to_document(&self) -> KvDoc {
        let mut doc = KvDoc::new(SPEC_MAGIC);
        doc.push("d", self.d);
        doc.push("k", self.k);
        doc.push("seed", self.seed);
        doc.push(
            "sampler",
            match self.sampler {
                AttrSampler::Uniform => "uniform",
                AttrSampler::SkewLow => "skew-low",
            },
        );
        for (i, (lo, hi)) in self.ranges.iter().enumerate() {
            doc.push(&format!("range.{i}.min"), lo);
            doc.push(&format!("range.{i}.max"), hi);
        }
        doc.push(
            "mean_map",
            crate::io::floats_to_base64(self.mean_map.data()),
        );
        doc.push("offset", crate::io::floats_to_base64(&self.offset));
        doc.push("variances", crate::io::floats_to_base64(&self.variances));
        doc
    }

    pub fn from_document(doc: &KvDoc) -> Result<Self> {
        let d: usize = doc.parse("d")?;
        let k: usize = doc.parse("k")?;
        let seed: u64 = doc.parse("seed")?;
        let sampler = match doc.req("sampler")? {
            "uniform" => AttrSampler::Uniform,
            "skew-low" => AttrSampler::SkewLow,
            other => return Err(Error::Format(format!("unknown sampler `{other}`"))),
        };
        let mut ranges = Vec::with_capacity(k);
        for i in 0..k {
            ranges.push((
                doc.parse(&format!("range.{i}.min"))?,
                doc.parse(&format!("range.{i}.max"))?,
            ));
        }
        let m = crate::io::base64_to_floats(doc.req("mean_map")?)?;
        if m.len() != d * k {
            return Err(Error::Format("mean_map payload size mismatch".into()));
        }
        let mean_map =
            DenseMatrix::new(d, k, m).map_err(|e| Error::Format(format!("mean_map: {e}")))?;
        let offset = crate::io::base64_to_floats(doc.req("offset")?)?;
        let variances = crate::io::base64_to_floats(doc.req("variances")?)?;
        Self::new(mean_map, offset, variances, ranges, sampler, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_document().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_document(&KvDoc::read(path, SPEC_MAGIC)?)
    }
}
