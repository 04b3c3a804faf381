//! Controlled pre-training and fine-tuning loops.
//!
//! A run is fully determined by (start state, corpus, config): the batch
//! schedule is seeded window sampling over the corpus, and every training
//! arm of an experiment must share a byte-identical serialized config so the
//! corpus stays the only varying factor.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{sample_batch, TokenizedCorpus};
use crate::corpus::Corpus;
use crate::lm::{
    train_step, AdamState, Model, ModelConfig, ModelError, OptimizerSettings,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training mode {mode} does not match the provided start state")]
    ModeMismatch { mode: String },
    #[error("numerical divergence at step {step}: {source}")]
    Divergence {
        step: u64,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write history {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    Pretrain,
    Finetune,
}

/// Hyperparameters of one training run. Serialized form is the unit of the
/// controlled-experiment check: arms of one experiment must match byte for
/// byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_rows: usize,
    pub sequence_len: usize,
    pub optimizer: OptimizerSettings,
    /// Evaluate every this many steps on the run's eval corpus; 0 disables.
    pub eval_every: u64,
    pub seed: u64,
    pub mode: TrainingMode,
    /// Tensor-name prefixes excluded from updates (empty: train everything).
    #[serde(default)]
    pub freeze: Vec<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 300,
            batch_rows: 8,
            sequence_len: 64,
            optimizer: OptimizerSettings::default(),
            eval_every: 0,
            seed: 0,
            mode: TrainingMode::Pretrain,
            freeze: Vec::new(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_rows == 0 {
            return Err(TrainError::InvalidConfig("batch_rows must be >= 1".into()));
        }
        if self.sequence_len < 2 || self.sequence_len > model.context_len {
            return Err(TrainError::InvalidConfig(format!(
                "sequence_len must be in 2..={}",
                model.context_len
            )));
        }
        Ok(())
    }

    /// Canonical serialized form used by the controlled-experiment check.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("training config serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub millis: u64,
}

/// Per-step losses and timings for one run.
#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub entries: Vec<StepRecord>,
}

impl TrainingHistory {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.train_loss)
    }

    /// CSV with columns step, train_loss, eval_loss (empty when the step was
    /// not evaluated), millis.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,eval_loss,millis\n");
        for e in &self.entries {
            let eval = e.eval_loss.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!("{},{},{},{}\n", e.step, e.train_loss, eval, e.millis));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Where a run starts from: a fresh seeded init (pretrain) or an existing
/// model (finetune).
#[derive(Debug, Clone)]
pub enum TrainStart {
    Pretrain(ModelConfig),
    Finetune(Model),
}

/// Run one training loop. The batch schedule is drawn from a ChaCha stream
/// seeded by `cfg.seed`, so identical inputs give bit-identical models.
pub fn run_training(
    start: TrainStart,
    corpus: &Corpus,
    eval_corpus: Option<&Corpus>,
    cfg: &TrainingConfig,
) -> Result<(Model, TrainingHistory), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut model = match (&cfg.mode, start) {
        (TrainingMode::Pretrain, TrainStart::Pretrain(mc)) => Model::init(mc)?,
        (TrainingMode::Finetune, TrainStart::Finetune(m)) => m,
        (mode, _) => {
            return Err(TrainError::ModeMismatch {
                mode: format!("{mode:?}").to_lowercase(),
            })
        }
    };
    cfg.validate(model.config())?;

    let tokenizer = Tokenizer::new();
    let tokens = TokenizedCorpus::new(corpus, &tokenizer);
    let mut state = AdamState::new(model.config());
    let schedule_seed = derive_seed(cfg.seed, &["train-schedule", corpus.id()]);
    let mut rng = rng_from_seed(schedule_seed);
    let mut history = TrainingHistory::default();

    for step in 1..=cfg.steps {
        let started = Instant::now();
        let batch = sample_batch(
            &tokens,
            cfg.batch_rows,
            cfg.sequence_len,
            schedule_seed,
            &mut rng,
        );
        let loss = train_step(&mut model, &batch, &cfg.optimizer, &mut state, &cfg.freeze)
            .map_err(|source| TrainError::Divergence { step, source })?;
        let eval_loss = match eval_corpus {
            Some(ec) if cfg.eval_every > 0 && step % cfg.eval_every == 0 => {
                Some(crate::eval::evaluate(&model, ec, &tokenizer, cfg.sequence_len)?.cross_entropy)
            }
            _ => None,
        };
        history.entries.push(StepRecord {
            step,
            train_loss: loss,
            eval_loss,
            millis: started.elapsed().as_millis() as u64,
        });
    }
    Ok((model, history))
}

/// Hard check that all arms of an experiment share one training config.
pub fn enforce_shared_config(configs: &[(&str, &TrainingConfig)]) -> Result<(), TrainError> {
    if let Some(((first_id, first), rest)) = configs.split_first() {
        for (id, cfg) in rest {
            if cfg.canonical_bytes() != first.canonical_bytes() {
                return Err(TrainError::InvalidConfig(format!(
                    "training config of arm {id} differs from arm {first_id}"
                )));
            }
        }
    }
    Ok(())
}
