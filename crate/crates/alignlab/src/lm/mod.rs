//! Decoder-only transformer language model with exact analytic gradients.
//!
//! Pre-norm blocks, learned positional embeddings, causal attention, GELU
//! feed-forward, untied output head without bias. Parameters are 32-bit
//! floats; loss and weight-gradient accumulators are 64-bit. The whole model
//! is generic over the scalar so a 64-bit instantiation can serve as a
//! verification path for the gradients.

mod adam;
mod backward;
mod checkpoint;
mod forward;
pub mod gradcheck;

pub use adam::{train_step, AdamState, OptimizerSettings};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint,
    CheckpointError, LoadedCheckpoint, RngState, CHECKPOINT_MAGIC,
};
pub use forward::nll_from_logits;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::batch::TokenBatch;
use crate::rng::rng_from_seed;
use crate::tensor::{Mat, Real};
use crate::tokenizer::VOCAB_SIZE;

/// Standard deviation of the seeded normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("batch does not fit the model: {0}")]
    InvalidBatch(String),
    #[error("numerical divergence in tensor {tensor}")]
    NumericalDivergence { tensor: String },
}

/// Architecture and seed for a model instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            context_len: 128,
            vocab_size: VOCAB_SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.vocab_size == 0 {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be at least 1".into(),
            ));
        }
        if self.context_len < 2 {
            return Err(ModelError::InvalidConfig("context_len must be >= 2".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// Closed-form parameter count for this architecture.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        let v = self.vocab_size;
        let per_layer = 12 * d * d + 13 * d;
        v * d + self.context_len * d + self.layers * per_layer + 2 * d + d * v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams<F> {
    pub gain: Vec<F>,
    pub bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<F> {
    pub wq: Mat<F>,
    pub bq: Vec<F>,
    pub wk: Mat<F>,
    pub bk: Vec<F>,
    pub wv: Mat<F>,
    pub bv: Vec<F>,
    pub wo: Mat<F>,
    pub bo: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F> {
    pub w_up: Mat<F>,
    pub b_up: Vec<F>,
    pub w_down: Mat<F>,
    pub b_down: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1: LnParams<F>,
    pub attn: AttnParams<F>,
    pub ln2: LnParams<F>,
    pub mlp: MlpParams<F>,
}

/// All model parameters. The tensor visitors below fix the declared order
/// used by checkpoints, the optimizer, and Fisher embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub tok_emb: Mat<F>,
    pub pos_emb: Mat<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln: LnParams<F>,
    pub head: Mat<F>,
}

impl<F: Real> Params<F> {
    /// All-zero parameters with the config's shapes (gradient and optimizer
    /// state buffers).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let m = cfg.mlp_dim();
        let ln = || LnParams {
            gain: vec![F::zero(); d],
            bias: vec![F::zero(); d],
        };
        Params {
            tok_emb: Mat::zeros(cfg.vocab_size, d),
            pos_emb: Mat::zeros(cfg.context_len, d),
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    ln1: ln(),
                    attn: AttnParams {
                        wq: Mat::zeros(d, d),
                        bq: vec![F::zero(); d],
                        wk: Mat::zeros(d, d),
                        bk: vec![F::zero(); d],
                        wv: Mat::zeros(d, d),
                        bv: vec![F::zero(); d],
                        wo: Mat::zeros(d, d),
                        bo: vec![F::zero(); d],
                    },
                    ln2: ln(),
                    mlp: MlpParams {
                        w_up: Mat::zeros(d, m),
                        b_up: vec![F::zero(); m],
                        w_down: Mat::zeros(m, d),
                        b_down: vec![F::zero(); d],
                    },
                })
                .collect(),
            final_ln: ln(),
            head: Mat::zeros(d, cfg.vocab_size),
        }
    }

    /// Flat views of every tensor as `(name, shape, data)` in declared order.
    pub fn tensors(&self) -> Vec<(String, (usize, usize), &[F])> {
        let mut out: Vec<(String, (usize, usize), &[F])> = Vec::new();
        out.push((
            "tok_emb".into(),
            (self.tok_emb.rows(), self.tok_emb.cols()),
            self.tok_emb.as_slice(),
        ));
        out.push((
            "pos_emb".into(),
            (self.pos_emb.rows(), self.pos_emb.cols()),
            self.pos_emb.as_slice(),
        ));
        for (i, layer) in self.layers.iter().enumerate() {
            let a = &layer.attn;
            let mlp = &layer.mlp;
            out.push((format!("layer{i}.ln1.gain"), (1, layer.ln1.gain.len()), &layer.ln1.gain));
            out.push((format!("layer{i}.ln1.bias"), (1, layer.ln1.bias.len()), &layer.ln1.bias));
            out.push((format!("layer{i}.attn.wq"), (a.wq.rows(), a.wq.cols()), a.wq.as_slice()));
            out.push((format!("layer{i}.attn.bq"), (1, a.bq.len()), &a.bq));
            out.push((format!("layer{i}.attn.wk"), (a.wk.rows(), a.wk.cols()), a.wk.as_slice()));
            out.push((format!("layer{i}.attn.bk"), (1, a.bk.len()), &a.bk));
            out.push((format!("layer{i}.attn.wv"), (a.wv.rows(), a.wv.cols()), a.wv.as_slice()));
            out.push((format!("layer{i}.attn.bv"), (1, a.bv.len()), &a.bv));
            out.push((format!("layer{i}.attn.wo"), (a.wo.rows(), a.wo.cols()), a.wo.as_slice()));
            out.push((format!("layer{i}.attn.bo"), (1, a.bo.len()), &a.bo));
            out.push((format!("layer{i}.ln2.gain"), (1, layer.ln2.gain.len()), &layer.ln2.gain));
            out.push((format!("layer{i}.ln2.bias"), (1, layer.ln2.bias.len()), &layer.ln2.bias));
            out.push((format!("layer{i}.mlp.w_up"), (mlp.w_up.rows(), mlp.w_up.cols()), mlp.w_up.as_slice()));
            out.push((format!("layer{i}.mlp.b_up"), (1, mlp.b_up.len()), &mlp.b_up));
            out.push((format!("layer{i}.mlp.w_down"), (mlp.w_down.rows(), mlp.w_down.cols()), mlp.w_down.as_slice()));
            out.push((format!("layer{i}.mlp.b_down"), (1, mlp.b_down.len()), &mlp.b_down));
        }
        out.push(("final_ln.gain".into(), (1, self.final_ln.gain.len()), &self.final_ln.gain));
        out.push(("final_ln.bias".into(), (1, self.final_ln.bias.len()), &self.final_ln.bias));
        out.push(("head".into(), (self.head.rows(), self.head.cols()), self.head.as_slice()));
        out
    }

    /// Visit every tensor as `(name, shape, data)` in declared order.
    pub fn for_each_tensor(&self, f: &mut impl FnMut(&str, (usize, usize), &[F])) {
        f("tok_emb", (self.tok_emb.rows(), self.tok_emb.cols()), self.tok_emb.as_slice());
        f("pos_emb", (self.pos_emb.rows(), self.pos_emb.cols()), self.pos_emb.as_slice());
        for (i, layer) in self.layers.iter().enumerate() {
            let mat = |m: &'_ Mat<F>| (m.rows(), m.cols());
            let a = &layer.attn;
            let mlp = &layer.mlp;
            f(&format!("layer{i}.ln1.gain"), (1, layer.ln1.gain.len()), &layer.ln1.gain);
            f(&format!("layer{i}.ln1.bias"), (1, layer.ln1.bias.len()), &layer.ln1.bias);
            f(&format!("layer{i}.attn.wq"), mat(&a.wq), a.wq.as_slice());
            f(&format!("layer{i}.attn.bq"), (1, a.bq.len()), &a.bq);
            f(&format!("layer{i}.attn.wk"), mat(&a.wk), a.wk.as_slice());
            f(&format!("layer{i}.attn.bk"), (1, a.bk.len()), &a.bk);
            f(&format!("layer{i}.attn.wv"), mat(&a.wv), a.wv.as_slice());
            f(&format!("layer{i}.attn.bv"), (1, a.bv.len()), &a.bv);
            f(&format!("layer{i}.attn.wo"), mat(&a.wo), a.wo.as_slice());
            f(&format!("layer{i}.attn.bo"), (1, a.bo.len()), &a.bo);
            f(&format!("layer{i}.ln2.gain"), (1, layer.ln2.gain.len()), &layer.ln2.gain);
            f(&format!("layer{i}.ln2.bias"), (1, layer.ln2.bias.len()), &layer.ln2.bias);
            f(&format!("layer{i}.mlp.w_up"), mat(&mlp.w_up), mlp.w_up.as_slice());
            f(&format!("layer{i}.mlp.b_up"), (1, mlp.b_up.len()), &mlp.b_up);
            f(&format!("layer{i}.mlp.w_down"), mat(&mlp.w_down), mlp.w_down.as_slice());
            f(&format!("layer{i}.mlp.b_down"), (1, mlp.b_down.len()), &mlp.b_down);
        }
        f("final_ln.gain", (1, self.final_ln.gain.len()), &self.final_ln.gain);
        f("final_ln.bias", (1, self.final_ln.bias.len()), &self.final_ln.bias);
        f("head", (self.head.rows(), self.head.cols()), self.head.as_slice());
    }

    /// Mutable flat views of every tensor, in the same order and with the
    /// same names as [`Params::for_each_tensor`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb.as_mut_slice()));
        out.push(("pos_emb".into(), self.pos_emb.as_mut_slice()));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let a = &mut layer.attn;
            out.push((format!("layer{i}.ln1.gain"), layer.ln1.gain.as_mut_slice()));
            out.push((format!("layer{i}.ln1.bias"), layer.ln1.bias.as_mut_slice()));
            out.push((format!("layer{i}.attn.wq"), a.wq.as_mut_slice()));
            out.push((format!("layer{i}.attn.bq"), a.bq.as_mut_slice()));
            out.push((format!("layer{i}.attn.wk"), a.wk.as_mut_slice()));
            out.push((format!("layer{i}.attn.bk"), a.bk.as_mut_slice()));
            out.push((format!("layer{i}.attn.wv"), a.wv.as_mut_slice()));
            out.push((format!("layer{i}.attn.bv"), a.bv.as_mut_slice()));
            out.push((format!("layer{i}.attn.wo"), a.wo.as_mut_slice()));
            out.push((format!("layer{i}.attn.bo"), a.bo.as_mut_slice()));
            out.push((format!("layer{i}.ln2.gain"), layer.ln2.gain.as_mut_slice()));
            out.push((format!("layer{i}.ln2.bias"), layer.ln2.bias.as_mut_slice()));
            out.push((format!("layer{i}.mlp.w_up"), layer.mlp.w_up.as_mut_slice()));
            out.push((format!("layer{i}.mlp.b_up"), layer.mlp.b_up.as_mut_slice()));
            out.push((format!("layer{i}.mlp.w_down"), layer.mlp.w_down.as_mut_slice()));
            out.push((format!("layer{i}.mlp.b_down"), layer.mlp.b_down.as_mut_slice()));
        }
        out.push(("final_ln.gain".into(), self.final_ln.gain.as_mut_slice()));
        out.push(("final_ln.bias".into(), self.final_ln.bias.as_mut_slice()));
        out.push(("head".into(), self.head.as_mut_slice()));
        out
    }

    /// Mutable visitor; same order and names as [`Params::for_each_tensor`].
    pub fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(&str, &mut [F])) {
        for (name, data) in self.tensors_mut() {
            f(&name, data);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, _, data| n += data.len());
        n
    }

    /// Name of the first tensor containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut found = None;
        self.for_each_tensor(&mut |name, _, data| {
            if found.is_none() && data.iter().any(|x| !x.is_finite()) {
                found = Some(name.to_string());
            }
        });
        found
    }

    pub fn zero(&mut self) {
        self.for_each_tensor_mut(&mut |_, data| data.iter_mut().for_each(|x| *x = F::zero()));
    }

    pub fn map_to<G: Real>(&self) -> Params<G> {
        let conv_vec = |v: &Vec<F>| v.iter().map(|x| G::from_f64(x.as_f64())).collect();
        Params {
            tok_emb: self.tok_emb.map_to(),
            pos_emb: self.pos_emb.map_to(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1: LnParams {
                        gain: conv_vec(&l.ln1.gain),
                        bias: conv_vec(&l.ln1.bias),
                    },
                    attn: AttnParams {
                        wq: l.attn.wq.map_to(),
                        bq: conv_vec(&l.attn.bq),
                        wk: l.attn.wk.map_to(),
                        bk: conv_vec(&l.attn.bk),
                        wv: l.attn.wv.map_to(),
                        bv: conv_vec(&l.attn.bv),
                        wo: l.attn.wo.map_to(),
                        bo: conv_vec(&l.attn.bo),
                    },
                    ln2: LnParams {
                        gain: conv_vec(&l.ln2.gain),
                        bias: conv_vec(&l.ln2.bias),
                    },
                    mlp: MlpParams {
                        w_up: l.mlp.w_up.map_to(),
                        b_up: conv_vec(&l.mlp.b_up),
                        w_down: l.mlp.w_down.map_to(),
                        b_down: conv_vec(&l.mlp.b_down),
                    },
                })
                .collect(),
            final_ln: LnParams {
                gain: conv_vec(&self.final_ln.gain),
                bias: conv_vec(&self.final_ln.bias),
            },
            head: self.head.map_to(),
        }
    }
}

/// A model: config plus parameters, generic over the scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelT<F: Real> {
    cfg: ModelConfig,
    params: Params<F>,
}

/// The production 32-bit model.
pub type Model = ModelT<f32>;

impl<F: Real> ModelT<F> {
    /// Initialize parameters from the config's seed: weights from a seeded
    /// normal with standard deviation 0.02, biases and layer-norm offsets
    /// zero, layer-norm gains one.
    pub fn init(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = rng_from_seed(cfg.seed);
        let mut params = Params::<F>::zeros(&cfg);
        let is_bias = |name: &str| {
            [".bias", ".bq", ".bk", ".bv", ".bo", ".b_up", ".b_down"]
                .iter()
                .any(|suffix| name.ends_with(suffix))
        };
        params.for_each_tensor_mut(&mut |name, data| {
            if name.ends_with(".gain") {
                data.iter_mut().for_each(|x| *x = F::one());
            } else if is_bias(name) {
                // Biases and layer-norm offsets stay zero.
            } else {
                for x in data.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x = F::from_f64(z * INIT_STD);
                }
            }
        });
        Ok(ModelT { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: Params<F>) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(ModelT { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn map_to<G: Real>(&self) -> ModelT<G> {
        ModelT {
            cfg: self.cfg.clone(),
            params: self.params.map_to(),
        }
    }

    pub(crate) fn validate_batch(&self, batch: &TokenBatch) -> Result<(), ModelError> {
        if batch.rows.is_empty() {
            return Err(ModelError::InvalidBatch("batch has no rows".into()));
        }
        let len = batch.rows[0].len();
        for row in &batch.rows {
            if row.len() != len {
                return Err(ModelError::InvalidBatch("rows have unequal lengths".into()));
            }
            if row.len() > self.cfg.context_len {
                return Err(ModelError::InvalidBatch(format!(
                    "sequence length {} exceeds context_len {}",
                    row.len(),
                    self.cfg.context_len
                )));
            }
            if let Some(&bad) = row.iter().find(|&&t| usize::from(t) >= self.cfg.vocab_size) {
                return Err(ModelError::InvalidBatch(format!(
                    "token id {bad} out of range for vocab {}",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }
}

impl Model {
    /// Content hash of the frozen model (config plus parameter bytes).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        self.params.for_each_tensor(&mut |name, _, data| {
            hasher.update(name.as_bytes());
            for x in data {
                hasher.update(x.to_le_bytes());
            }
        });
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_bytes(m: &Model) -> Vec<u8> {
        let mut out = Vec::new();
        m.params().for_each_tensor(&mut |_, _, data| {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        });
        out
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let cfg = ModelConfig {
            seed: 7,
            ..ModelConfig::default()
        };
        let a = Model::init(cfg.clone()).unwrap();
        let b = Model::init(cfg).unwrap();
        assert_eq!(param_bytes(&a), param_bytes(&b));
        let c = Model::init(ModelConfig {
            seed: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(param_bytes(&a), param_bytes(&c));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // By hand for layers=2, d=64, heads=4, vocab=258, context=128:
        //   embeddings: 258*64 + 128*64           = 24704
        //   per layer:  2*64 + 4*(64*64+64) + 2*64
        //             + (64*256+256) + (256*64+64) = 49984
        //   final ln:   2*64                       = 128
        //   head:       64*258                     = 16512
        //   total:      24704 + 2*49984 + 128 + 16512 = 141312
        let cfg = ModelConfig::default();
        let m = Model::init(cfg.clone()).unwrap();
        assert_eq!(m.param_count(), 141_312);
        assert_eq!(cfg.param_count(), 141_312);
        assert_eq!(m.param_count(), cfg.param_count());
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let cfg = ModelConfig {
            model_dim: 63,
            heads: 4,
            ..ModelConfig::default()
        };
        match Model::init(cfg) {
            Err(ModelError::InvalidConfig(_)) => {}
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn init_sets_gains_to_one_and_biases_to_zero() {
        let m = Model::init(ModelConfig::default()).unwrap();
        assert!(m.params().layers[0].ln1.gain.iter().all(|&g| g == 1.0));
        assert!(m.params().layers[0].ln1.bias.iter().all(|&b| b == 0.0));
        assert!(m.params().layers[0].attn.bq.iter().all(|&b| b == 0.0));
        assert!(m.params().layers[0].mlp.b_up.iter().all(|&b| b == 0.0));
        // Weights are actually randomized.
        assert!(m.params().layers[0].attn.wq.as_slice().iter().any(|&w| w != 0.0));
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = Model::init(ModelConfig::default()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.params_mut().head.as_mut_slice()[0] += 1.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
