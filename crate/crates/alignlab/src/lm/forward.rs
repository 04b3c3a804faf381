//! Forward pass with activation caching for the backward pass.
//!
//! Rows of a batch are independent; each row is processed on its own and the
//! loss is reduced over rows in a fixed order with 64-bit accumulation.

use crate::batch::TokenBatch;
use crate::tensor::{dot, matmul_acc, Mat, Real};
use crate::tokenizer::{TokenId, BOS, PAD};

use super::{LnParams, ModelError, ModelT, LN_EPS};

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (F::one() + inner.tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Layer-norm cache: normalized values (pre gain/bias), reciprocal standard
/// deviations, and the affine output.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<F> {
    pub xhat: Mat<F>,
    pub rstd: Vec<F>,
    pub out: Mat<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<F> {
    pub ln1: NormCache<F>,
    pub q: Mat<F>,
    pub k: Mat<F>,
    pub v: Mat<F>,
    /// Per-head causal attention probabilities, each [T x T].
    pub probs: Vec<Mat<F>>,
    /// Concatenated per-head context vectors, [T x d].
    pub ctx: Mat<F>,
    pub ln2: NormCache<F>,
    /// MLP pre-activation, [T x 4d].
    pub u: Mat<F>,
    /// MLP activation gelu(u), [T x 4d].
    pub a: Mat<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct RowCache<F> {
    pub layers: Vec<LayerCache<F>>,
    pub final_ln: NormCache<F>,
    pub logits: Mat<F>,
}

pub(crate) fn layer_norm<F: Real>(x: &Mat<F>, ln: &LnParams<F>) -> NormCache<F> {
    let t = x.rows();
    let d = x.cols();
    let mut xhat = Mat::zeros(t, d);
    let mut out = Mat::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let inv_d = F::from_f64(1.0 / d as f64);
    let eps = F::from_f64(LN_EPS);
    for p in 0..t {
        let row = x.row(p);
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = F::zero();
        for &v in row {
            let dv = v - mean;
            var += dv * dv;
        }
        var *= inv_d;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        let xh = xhat.row_mut(p);
        for (i, &v) in row.iter().enumerate() {
            xh[i] = (v - mean) * r;
        }
        let o = out.row_mut(p);
        for i in 0..d {
            o[i] = ln.gain[i] * xhat[(p, i)] + ln.bias[i];
        }
    }
    NormCache { xhat, rstd, out }
}

fn linear<F: Real>(x: &Mat<F>, w: &Mat<F>, b: &[F]) -> Mat<F> {
    let t = x.rows();
    let n = w.cols();
    let mut out = Mat::zeros(t, n);
    for p in 0..t {
        out.row_mut(p).copy_from_slice(b);
    }
    matmul_acc(out.as_mut_slice(), x.as_slice(), w.as_slice(), t, x.cols(), n);
    out
}

impl<F: Real> ModelT<F> {
    /// Run one row through the model, caching everything backward needs.
    pub(crate) fn forward_row(&self, ids: &[TokenId]) -> RowCache<F> {
        let cfg = &self.cfg;
        let p = &self.params;
        let t = ids.len();
        let d = cfg.model_dim;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let mut x = Mat::zeros(t, d);
        for (pos, &id) in ids.iter().enumerate() {
            let tok = p.tok_emb.row(usize::from(id));
            let pe = p.pos_emb.row(pos);
            let row = x.row_mut(pos);
            for i in 0..d {
                row[i] = tok[i] + pe[i];
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for layer in &p.layers {
            let ln1 = layer_norm(&x, &layer.ln1);
            let q = linear(&ln1.out, &layer.attn.wq, &layer.attn.bq);
            let k = linear(&ln1.out, &layer.attn.wk, &layer.attn.bk);
            let v = linear(&ln1.out, &layer.attn.wv, &layer.attn.bv);

            let mut probs = Vec::with_capacity(heads);
            let mut ctx = Mat::zeros(t, d);
            for h in 0..heads {
                let off = h * dh;
                let mut ph = Mat::zeros(t, t);
                for i in 0..t {
                    // Causal scores over j <= i, with a max-subtracted softmax.
                    let qi = &q.row(i)[off..off + dh];
                    let mut max = F::neg_infinity();
                    for j in 0..=i {
                        let kj = &k.row(j)[off..off + dh];
                        let s = dot(qi, kj) * scale;
                        ph[(i, j)] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut denom = F::zero();
                    for j in 0..=i {
                        let e = (ph[(i, j)] - max).exp();
                        ph[(i, j)] = e;
                        denom += e;
                    }
                    let inv = denom.recip();
                    for j in 0..=i {
                        ph[(i, j)] *= inv;
                    }
                    // Context for this head and position.
                    let mut acc = vec![F::zero(); dh];
                    for j in 0..=i {
                        let w = ph[(i, j)];
                        let vj = &v.row(j)[off..off + dh];
                        for (aa, &vv) in acc.iter_mut().zip(vj) {
                            *aa += w * vv;
                        }
                    }
                    ctx.row_mut(i)[off..off + dh].copy_from_slice(&acc);
                }
                probs.push(ph);
            }

            let attn_out = linear(&ctx, &layer.attn.wo, &layer.attn.bo);
            for (xv, &av) in x.as_mut_slice().iter_mut().zip(attn_out.as_slice()) {
                *xv += av;
            }

            let ln2 = layer_norm(&x, &layer.ln2);
            let u = linear(&ln2.out, &layer.mlp.w_up, &layer.mlp.b_up);
            let mut a = Mat::zeros(t, cfg.mlp_dim());
            for (av, &uv) in a.as_mut_slice().iter_mut().zip(u.as_slice()) {
                *av = gelu(uv);
            }
            let mlp_out = linear(&a, &layer.mlp.w_down, &layer.mlp.b_down);
            for (xv, &mv) in x.as_mut_slice().iter_mut().zip(mlp_out.as_slice()) {
                *xv += mv;
            }

            layers.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                u,
                a,
            });
        }

        let final_ln = layer_norm(&x, &p.final_ln);
        let mut logits = Mat::zeros(t, cfg.vocab_size);
        matmul_acc(
            logits.as_mut_slice(),
            final_ln.out.as_slice(),
            p.head.as_slice(),
            t,
            d,
            cfg.vocab_size,
        );

        RowCache {
            layers,
            final_ln,
            logits,
        }
    }

    /// Mean next-token negative log-likelihood over all target positions in
    /// the batch, in nats per token with 64-bit accumulation.
    pub fn forward_loss(&self, batch: &TokenBatch) -> Result<f64, ModelError> {
        self.validate_batch(batch)?;
        let mut nll_sum = 0.0f64;
        let mut targets = 0usize;
        for row in &batch.rows {
            let cache = self.forward_row(row);
            for p in target_logit_positions(row) {
                nll_sum += nll_from_logits(cache.logits.row(p), row[p + 1]);
                targets += 1;
            }
        }
        if targets == 0 {
            return Err(ModelError::InvalidBatch(
                "batch has no target positions".into(),
            ));
        }
        let loss = nll_sum / targets as f64;
        if !loss.is_finite() {
            return Err(ModelError::NumericalDivergence {
                tensor: "logits".into(),
            });
        }
        Ok(loss)
    }

    /// Per-target log-probabilities for one window (no padding): for each
    /// position p in `0..len-1`, the log-probability of `window[p+1]`.
    pub fn window_log_probs(&self, window: &[TokenId]) -> Vec<f64> {
        let cache = self.forward_row(window);
        (0..window.len().saturating_sub(1))
            .map(|p| -nll_from_logits(cache.logits.row(p), window[p + 1]))
            .collect()
    }
}

/// Logit positions that are scored: position p predicts `ids[p+1]`, which
/// must exist and be an ordinary token (not BOS, not PAD).
pub(crate) fn target_logit_positions(ids: &[TokenId]) -> impl Iterator<Item = usize> + '_ {
    (0..ids.len().saturating_sub(1))
        .filter(move |&p| ids[p] != PAD && ids[p + 1] != PAD && ids[p + 1] != BOS)
}

/// Negative log-likelihood of `target` under a softmax over `logits`,
/// computed in f64 via a max-subtracted log-sum-exp.
pub fn nll_from_logits<F: Real>(logits: &[F], target: TokenId) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        let l = l.as_f64();
        if l > max {
            max = l;
        }
    }
    let mut sum = 0.0f64;
    for &l in logits {
        sum += (l.as_f64() - max).exp();
    }
    sum.ln() + max - logits[usize::from(target)].as_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{Model, ModelConfig};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    pub(crate) fn test_batch(cfg: &ModelConfig, rows: usize, len: usize, seed: u64) -> TokenBatch {
        let mut rng = rng_from_seed(seed);
        let rows = (0..rows)
            .map(|_| {
                let mut row = vec![BOS];
                row.extend((1..len).map(|_| rng.gen_range(0..cfg.vocab_size as u16 - 2)));
                row
            })
            .collect();
        TokenBatch {
            rows,
            corpus_id: "test".into(),
            seed,
        }
    }

    #[test]
    fn zeroed_head_gives_uniform_loss() {
        let cfg = ModelConfig::default();
        let mut m = Model::init(cfg.clone()).unwrap();
        m.params_mut().head.fill(0.0);
        let batch = test_batch(&cfg, 2, 24, 3);
        let loss = m.forward_loss(&batch).unwrap();
        let expect = (cfg.vocab_size as f64).ln();
        assert!(
            (loss - expect).abs() < 1e-6,
            "loss {loss} should be ln(vocab) = {expect}"
        );
    }

    #[test]
    fn hand_set_logits_match_softmax_nll() {
        // Two-way softmax with logits (2, 0) and target 0: ln(1 + e^-2).
        let nll = nll_from_logits(&[2.0f64, 0.0], 0);
        assert!((nll - 0.126_928_011_042_972_6).abs() < 1e-12, "nll = {nll}");
    }

    #[test]
    fn forward_loss_is_pure() {
        let cfg = ModelConfig::default();
        let m = Model::init(cfg.clone()).unwrap();
        let batch = test_batch(&cfg, 2, 16, 5);
        let a = m.forward_loss(&batch).unwrap();
        let b = m.forward_loss(&batch).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn loss_is_permutation_equivariant_across_rows() {
        let cfg = ModelConfig::default();
        let m = Model::init(cfg.clone()).unwrap();
        let batch = test_batch(&cfg, 4, 20, 11);
        let mut shuffled = batch.clone();
        shuffled.rows.reverse();
        let a = m.forward_loss(&batch).unwrap();
        let b = m.forward_loss(&shuffled).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn oversized_sequences_and_bad_tokens_are_rejected() {
        let cfg = ModelConfig::default();
        let m = Model::init(cfg.clone()).unwrap();
        let long = TokenBatch {
            rows: vec![vec![BOS; cfg.context_len + 1]],
            corpus_id: "x".into(),
            seed: 0,
        };
        assert!(matches!(
            m.forward_loss(&long),
            Err(ModelError::InvalidBatch(_))
        ));
        let bad = TokenBatch {
            rows: vec![vec![BOS, 999]],
            corpus_id: "x".into(),
            seed: 0,
        };
        assert!(matches!(
            m.forward_loss(&bad),
            Err(ModelError::InvalidBatch(_))
        ));
    }

    #[test]
    fn pad_positions_are_not_scored() {
        let ids = vec![BOS, 10, 11, PAD, PAD];
        let positions: Vec<usize> = target_logit_positions(&ids).collect();
        assert_eq!(positions, vec![0, 1]);
    }
}
