//! Adam-style optimizer with decoupled weight decay.
//!
//! Moment buffers are stored in the model's scalar type (so checkpoints hold
//! 32-bit blobs); the update arithmetic itself runs in f64 and is written
//! back, which keeps steps deterministic and stable.

use serde::{Deserialize, Serialize};

use crate::batch::TokenBatch;
use crate::tensor::Real;

use super::{ModelError, ModelT, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real> {
    pub m: Params<F>,
    pub v: Params<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(cfg: &super::ModelConfig) -> Self {
        AdamState {
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
            step: 0,
        }
    }
}

/// One optimizer step: analytic gradients of the batch loss, then an Adam
/// update of every non-frozen tensor. Returns the pre-update loss.
///
/// `freeze` holds tensor-name prefixes excluded from the update (empty in
/// the default full-parameter fine-tuning setup).
pub fn train_step<F: Real>(
    model: &mut ModelT<F>,
    batch: &TokenBatch,
    opt: &OptimizerSettings,
    state: &mut AdamState<F>,
    freeze: &[String],
) -> Result<f64, ModelError> {
    let (loss, grads) = model.loss_and_grads(batch)?;
    if !loss.is_finite() {
        return Err(ModelError::NumericalDivergence {
            tensor: "loss".into(),
        });
    }
    if let Some(tensor) = grads.first_non_finite() {
        return Err(ModelError::NumericalDivergence { tensor });
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - opt.beta1.powi(t);
    let bias2 = 1.0 - opt.beta2.powi(t);

    let grad_slices = grads.tensors();
    let params = model.params_mut().tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();

    for (((theta, g), m), v) in params.into_iter().zip(&grad_slices).zip(ms).zip(vs) {
        debug_assert_eq!(theta.0, g.0);
        let frozen = freeze.iter().any(|prefix| theta.0.starts_with(prefix.as_str()));
        if frozen {
            continue;
        }
        for i in 0..theta.1.len() {
            let gi = g.2[i];
            let mi = opt.beta1 * m.1[i].as_f64() + (1.0 - opt.beta1) * gi;
            let vi = opt.beta2 * v.1[i].as_f64() + (1.0 - opt.beta2) * gi * gi;
            m.1[i] = F::from_f64(mi);
            v.1[i] = F::from_f64(vi);
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            let x = theta.1[i].as_f64();
            let update = opt.learning_rate * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * x);
            theta.1[i] = F::from_f64(x - update);
        }
    }

    if let Some(tensor) = model.params().first_non_finite() {
        return Err(ModelError::NumericalDivergence { tensor });
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{Model, ModelConfig};
    use crate::rng::rng_from_seed;
    use crate::tokenizer::BOS;
    use rand::Rng;

    fn batch(cfg: &ModelConfig, rows: usize, len: usize, seed: u64) -> TokenBatch {
        let mut rng = rng_from_seed(seed);
        TokenBatch {
            rows: (0..rows)
                .map(|_| {
                    let mut row = vec![BOS];
                    row.extend((1..len).map(|_| rng.gen_range(0u16..255)));
                    row
                })
                .collect(),
            corpus_id: "t".into(),
            seed,
        }
    }

    fn param_bytes(m: &Model) -> Vec<u8> {
        let mut out = Vec::new();
        m.params().for_each_tensor(&mut |_, _, d| {
            for x in d {
                out.extend_from_slice(&x.to_le_bytes());
            }
        });
        out
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let cfg = ModelConfig::default();
        let mut m = Model::init(cfg.clone()).unwrap();
        let before = param_bytes(&m);
        let opt = OptimizerSettings {
            learning_rate: 0.0,
            ..OptimizerSettings::default()
        };
        let mut state = AdamState::new(&cfg);
        let b = batch(&cfg, 2, 16, 1);
        train_step(&mut m, &b, &opt, &mut state, &[]).unwrap();
        assert_eq!(param_bytes(&m), before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn repeated_batch_overfits() {
        let cfg = ModelConfig::default();
        let mut m = Model::init(cfg.clone()).unwrap();
        let opt = OptimizerSettings::default();
        let mut state = AdamState::new(&cfg);
        let b = batch(&cfg, 2, 32, 2);
        let initial = m.forward_loss(&b).unwrap();
        let mut last = initial;
        for _ in 0..200 {
            last = train_step(&mut m, &b, &opt, &mut state, &[]).unwrap();
        }
        let final_loss = m.forward_loss(&b).unwrap();
        assert!(
            final_loss < initial * 0.5,
            "expected >= 50% reduction: initial {initial}, final {final_loss} (last step {last})"
        );
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let cfg = ModelConfig::default();
        let mut m = Model::init(cfg.clone()).unwrap();
        let head_before = m.params().head.clone();
        let emb_before = m.params().tok_emb.clone();
        let opt = OptimizerSettings::default();
        let mut state = AdamState::new(&cfg);
        let b = batch(&cfg, 2, 16, 3);
        train_step(&mut m, &b, &opt, &mut state, &["head".to_string()]).unwrap();
        assert_eq!(m.params().head, head_before);
        assert_ne!(m.params().tok_emb, emb_before);
    }

    #[test]
    fn divergence_reports_a_tensor_name() {
        let cfg = ModelConfig::default();
        let mut m = Model::init(cfg.clone()).unwrap();
        m.params_mut().head.as_mut_slice()[0] = f32::NAN;
        let opt = OptimizerSettings::default();
        let mut state = AdamState::new(&cfg);
        let b = batch(&cfg, 1, 8, 4);
        match train_step(&mut m, &b, &opt, &mut state, &[]) {
            Err(ModelError::NumericalDivergence { .. }) => {}
            other => panic!("expected NumericalDivergence, got {other:?}"),
        }
    }
}
