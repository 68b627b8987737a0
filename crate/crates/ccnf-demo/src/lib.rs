//! Browser bindings around a 2-D conditional flow on synthetic data.
//!
//! Exposes three interactive operations to the page: stepping the trainer,
//! evaluating model/true densities on a grid for a chosen attribute value,
//! and editing points from one attribute value to another (with the
//! closed-form transport target for comparison).

use wasm_bindgen::prelude::*;

use ccnf::field::{FieldKind, MlpField};
use ccnf::flow::{AttributeVector, EmbeddingVector, FlowModel};
use ccnf::linalg::DenseMatrix;
use ccnf::solver::SolverConfig;
use ccnf::synth::{AttrSampler, ConditionalGaussianGenerator};
use ccnf::train::{apply_stats, TraceChoice, TrainConfig, Trainer};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const D: usize = 2;
const K: usize = 1;
const HIDDEN: usize = 24;
const N_TRAIN: usize = 600;

fn demo_generator(seed: u64) -> ConditionalGaussianGenerator {
    // A mean path that sweeps diagonally as the attribute grows, with
    // anisotropic noise so the density is visibly non-circular.
    ConditionalGaussianGenerator::new(
        DenseMatrix::new(2, 1, vec![2.4, 1.2]).expect("finite"),
        vec![-1.2, -0.6],
        vec![0.16, 0.05],
        vec![(0.0, 1.0)],
        AttrSampler::Uniform,
        seed,
    )
    .expect("valid generator")
}

#[wasm_bindgen]
pub struct FlowDemo {
    generator: ConditionalGaussianGenerator,
    trainer: Trainer,
    nll_history: Vec<f64>,
}

#[wasm_bindgen]
impl FlowDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<FlowDemo, JsValue> {
        let generator = demo_generator(seed);
        let ds = generator.generate_dataset(N_TRAIN).map_err(err_js)?;
        let stats = generator.attr_stats();
        let normalized = apply_stats(&stats, &ds.attributes).map_err(err_js)?;
        let data: Vec<(EmbeddingVector, AttributeVector)> = ds
            .embeddings
            .iter()
            .zip(normalized)
            .map(|(e, a)| Ok((EmbeddingVector::new(e.clone()).map_err(err_js)?, a)))
            .collect::<Result<_, JsValue>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let model = FlowModel::new(
            FieldKind::Mlp(MlpField::new(D, K, HIDDEN, &mut rng)),
            SolverConfig::default(),
            stats,
        )
        .map_err(err_js)?;
        let cfg = TrainConfig {
            batch_size: 200,
            lr0: 4e-3,
            decay: 0.98,
            decay_every: 100,
            epochs: 0,
            trace: TraceChoice::Exact,
            seed,
        };
        let trainer = Trainer::new(model, data, cfg).map_err(err_js)?;
        Ok(FlowDemo {
            generator,
            trainer,
            nll_history: Vec::new(),
        })
    }

    /// Runs `n` training epochs; returns the latest mean NLL.
    pub fn train_epochs(&mut self, n: usize) -> Result<f64, JsValue> {
        let mut last = f64::NAN;
        for _ in 0..n {
            last = self.trainer.run_epoch().map_err(err_js)?;
            self.nll_history.push(last);
        }
        Ok(last)
    }

    pub fn epoch(&self) -> usize {
        self.trainer.epoch()
    }

    pub fn nll_history(&self) -> Vec<f64> {
        self.nll_history.clone()
    }

    /// Expected NLL of a perfect model (the generator's conditional entropy).
    pub fn ideal_nll(&self) -> f64 {
        self.generator.conditional_entropy()
    }

    /// Training points as `[x, y, attr]` triples.
    pub fn dataset_points(&self) -> Result<Vec<f64>, JsValue> {
        let ds = self.generator.generate_dataset(N_TRAIN).map_err(err_js)?;
        let mut out = Vec::with_capacity(ds.len() * 3);
        for (e, a) in ds.embeddings.iter().zip(&ds.attributes) {
            out.extend_from_slice(&[e[0], e[1], a[0]]);
        }
        Ok(out)
    }

    /// Model density on an `nx × ny` grid over `[x0,x1] × [y0,y1]`, scanned
    /// row-major from `y0`.
    #[allow(clippy::too_many_arguments)]
    pub fn model_density_grid(
        &self,
        attr: f64,
        nx: usize,
        ny: usize,
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
    ) -> Result<Vec<f64>, JsValue> {
        let a = AttributeVector::new(vec![attr.clamp(0.0, 1.0)]).map_err(err_js)?;
        let model = self.trainer.model();
        let mut out = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            let y = y0 + (y1 - y0) * (iy as f64 + 0.5) / ny as f64;
            for ix in 0..nx {
                let x = x0 + (x1 - x0) * (ix as f64 + 0.5) / nx as f64;
                let s = EmbeddingVector::new(vec![x, y]).map_err(err_js)?;
                let ll = model.log_likelihood(&s, &a).map_err(err_js)?;
                out.push(ll.exp());
            }
        }
        Ok(out)
    }

    /// Generator truth on the same grid layout.
    #[allow(clippy::too_many_arguments)]
    pub fn true_density_grid(
        &self,
        attr: f64,
        nx: usize,
        ny: usize,
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
    ) -> Result<Vec<f64>, JsValue> {
        let u = [attr.clamp(0.0, 1.0)];
        let mut out = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            let y = y0 + (y1 - y0) * (iy as f64 + 0.5) / ny as f64;
            for ix in 0..nx {
                let x = x0 + (x1 - x0) * (ix as f64 + 0.5) / nx as f64;
                let lp = self
                    .generator
                    .true_log_density(&[x, y], &u)
                    .map_err(err_js)?;
                out.push(lp.exp());
            }
        }
        Ok(out)
    }

    /// Draws `n` samples from the trained flow at the given attribute value,
    /// as `[x, y]` pairs.
    pub fn sample_points(&self, attr: f64, n: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
        let a = AttributeVector::new(vec![attr.clamp(0.0, 1.0)]).map_err(err_js)?;
        let model = self.trainer.model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let s = model.sample(&a, &mut rng).map_err(err_js)?;
            out.extend_from_slice(s.values());
        }
        Ok(out)
    }

    /// Edits `n` generator samples from `attr_from` to `attr_to`. Returns
    /// `[sx, sy, ex, ey, ox, oy]` per point: source, flow edit, and the
    /// closed-form transport target.
    pub fn edit_points(
        &self,
        attr_from: f64,
        attr_to: f64,
        n: usize,
        seed: u64,
    ) -> Result<Vec<f64>, JsValue> {
        let from = attr_from.clamp(0.0, 1.0);
        let to = attr_to.clamp(0.0, 1.0);
        let model = self.trainer.model();
        let a = AttributeVector::new(vec![from]).map_err(err_js)?;
        let a_t = AttributeVector::new(vec![to]).map_err(err_js)?;

        // Fixed-attribute samples: shift dataset residuals onto the source
        // condition so the cloud is reproducible per seed.
        let ds = self
            .generator
            .clone()
            .with_seed(seed.wrapping_add(7))
            .generate_dataset(n)
            .map_err(err_js)?;
        let mut out = Vec::with_capacity(n * 6);
        let mean_from = self.generator.conditional_mean(&[from]);
        for (e, raw) in ds.embeddings.iter().zip(&ds.attributes) {
            let mean = self.generator.conditional_mean(raw);
            let s: Vec<f64> = e
                .iter()
                .zip(&mean)
                .zip(&mean_from)
                .map(|((x, m), mf)| x - m + mf)
                .collect();
            let sv = EmbeddingVector::new(s.clone()).map_err(err_js)?;
            let edited = model.edit(&sv, &a, &a_t).map_err(err_js)?;
            let oracle = self
                .generator
                .oracle_edit(&s, &[from], &[to])
                .map_err(err_js)?;
            out.extend_from_slice(&[
                s[0],
                s[1],
                edited.values()[0],
                edited.values()[1],
                oracle[0],
                oracle[1],
            ]);
        }
        Ok(out)
    }
}

fn err_js(e: ccnf::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}
