//! Analytic backward pass.
//!
//! Gradients with respect to weights accumulate in 64-bit buffers; the
//! backpropagated activation signals stay in the model's scalar type. The
//! pass takes a `limit` logit position: with causal attention nothing after
//! `limit` can influence the scored logits, so all loops clip to it. That
//! makes per-token score gradients (for Fisher embeddings) affordable.

use crate::batch::TokenBatch;
use crate::tensor::{dot, matmul_a_bt_acc, matmul_at_b_acc_f64, Mat, Real};
use crate::tokenizer::TokenId;

use super::forward::{gelu_grad, target_logit_positions, NormCache, RowCache};
use super::{LnParams, ModelError, ModelT, Params};

/// dx += layer-norm backward of dy (first `n` rows); dgain/dbias accumulate.
fn ln_backward<F: Real>(
    dy: &Mat<F>,
    n: usize,
    cache: &NormCache<F>,
    ln: &LnParams<F>,
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut Mat<F>,
) {
    let d = dy.cols();
    let inv_d = F::from_f64(1.0 / d as f64);
    for p in 0..n {
        let dy_row = dy.row(p);
        let xhat_row = cache.xhat.row(p);
        let rstd = cache.rstd[p];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        // dxhat = dy * gain; m1 = mean(dxhat); m2 = mean(dxhat * xhat)
        for i in 0..d {
            let dxh = dy_row[i] * ln.gain[i];
            m1 += dxh;
            m2 += dxh * xhat_row[i];
            dgain[i] += dy_row[i].as_f64() * xhat_row[i].as_f64();
            dbias[i] += dy_row[i].as_f64();
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dx_row = dx.row_mut(p);
        for i in 0..d {
            let dxh = dy_row[i] * ln.gain[i];
            dx_row[i] += rstd * (dxh - m1 - xhat_row[i] * m2);
        }
    }
}

fn add_bias_grad<F: Real>(db: &mut [f64], dy: &Mat<F>, n: usize) {
    for p in 0..n {
        for (acc, &g) in db.iter_mut().zip(dy.row(p)) {
            *acc += g.as_f64();
        }
    }
}

impl<F: Real> ModelT<F> {
    /// Backpropagate `dlogits` (nonzero only in rows `0..=limit`) through the
    /// cached row, accumulating weight gradients into `grads`.
    pub(crate) fn backward_row(
        &self,
        ids: &[TokenId],
        cache: &RowCache<F>,
        dlogits: &Mat<F>,
        limit: usize,
        grads: &mut Params<f64>,
    ) {
        let cfg = &self.cfg;
        let p = &self.params;
        let d = cfg.model_dim;
        let v = cfg.vocab_size;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let t = ids.len();
        let n = limit + 1;
        debug_assert!(n <= t);

        // Output head: logits = final_ln.out * head.
        matmul_at_b_acc_f64(
            grads.head.as_mut_slice(),
            &cache.final_ln.out.as_slice()[..n * d],
            &dlogits.as_slice()[..n * v],
            n,
            d,
            v,
        );
        let mut dnf = Mat::zeros(t, d);
        matmul_a_bt_acc(
            &mut dnf.as_mut_slice()[..n * d],
            &dlogits.as_slice()[..n * v],
            p.head.as_slice(),
            n,
            v,
            d,
        );

        // Final layer norm.
        let mut dx = Mat::zeros(t, d);
        ln_backward(
            &dnf,
            n,
            &cache.final_ln,
            &p.final_ln,
            &mut grads.final_ln.gain,
            &mut grads.final_ln.bias,
            &mut dx,
        );

        for (li, layer) in p.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            let lg = &mut grads.layers[li];
            let mlp_dim = cfg.mlp_dim();

            // ---- MLP block: x_out = x_mid + w_down(gelu(w_up(ln2(x_mid)))).
            let dmlp_out = &dx; // gradient w.r.t. x_out feeds both branches
            matmul_at_b_acc_f64(
                lg.mlp.w_down.as_mut_slice(),
                &lc.a.as_slice()[..n * mlp_dim],
                &dmlp_out.as_slice()[..n * d],
                n,
                mlp_dim,
                d,
            );
            add_bias_grad(&mut lg.mlp.b_down, dmlp_out, n);
            let mut da = Mat::zeros(t, mlp_dim);
            matmul_a_bt_acc(
                &mut da.as_mut_slice()[..n * mlp_dim],
                &dmlp_out.as_slice()[..n * d],
                layer.mlp.w_down.as_slice(),
                n,
                d,
                mlp_dim,
            );
            // du = da * gelu'(u)
            let mut du = da;
            for (g, &uu) in du.as_mut_slice()[..n * mlp_dim]
                .iter_mut()
                .zip(&lc.u.as_slice()[..n * mlp_dim])
            {
                *g = *g * gelu_grad(uu);
            }
            matmul_at_b_acc_f64(
                lg.mlp.w_up.as_mut_slice(),
                &lc.ln2.out.as_slice()[..n * d],
                &du.as_slice()[..n * mlp_dim],
                n,
                d,
                mlp_dim,
            );
            add_bias_grad(&mut lg.mlp.b_up, &du, n);
            let mut dn2 = Mat::zeros(t, d);
            matmul_a_bt_acc(
                &mut dn2.as_mut_slice()[..n * d],
                &du.as_slice()[..n * mlp_dim],
                layer.mlp.w_up.as_slice(),
                n,
                mlp_dim,
                d,
            );
            // dx now becomes the gradient w.r.t. x_mid: identity branch plus
            // the layer-norm branch.
            ln_backward(
                &dn2,
                n,
                &lc.ln2,
                &layer.ln2,
                &mut lg.ln2.gain,
                &mut lg.ln2.bias,
                &mut dx,
            );

            // ---- Attention block: x_mid = x_in + wo(attend(q, k, v)).
            let dattn_out = &dx;
            matmul_at_b_acc_f64(
                lg.attn.wo.as_mut_slice(),
                &lc.ctx.as_slice()[..n * d],
                &dattn_out.as_slice()[..n * d],
                n,
                d,
                d,
            );
            add_bias_grad(&mut lg.attn.bo, dattn_out, n);
            let mut dctx = Mat::zeros(t, d);
            matmul_a_bt_acc(
                &mut dctx.as_mut_slice()[..n * d],
                &dattn_out.as_slice()[..n * d],
                layer.attn.wo.as_slice(),
                n,
                d,
                d,
            );

            let mut dq = Mat::zeros(t, d);
            let mut dk = Mat::zeros(t, d);
            let mut dv = Mat::zeros(t, d);
            let mut dp_buf = vec![F::zero(); t];
            for h in 0..heads {
                let off = h * dh;
                let probs = &lc.probs[h];
                for i in 0..n {
                    let dctx_i = &dctx.row(i)[off..off + dh];
                    // dp_j = dctx_i . v_j ; softmax backward over the row.
                    let mut sum = F::zero();
                    for j in 0..=i {
                        let dpj = dot(dctx_i, &lc.v.row(j)[off..off + dh]);
                        dp_buf[j] = dpj;
                        sum += probs[(i, j)] * dpj;
                    }
                    for j in 0..=i {
                        let ds = probs[(i, j)] * (dp_buf[j] - sum) * scale;
                        // dq_i += ds * k_j ; dk_j += ds * q_i
                        let kj = &lc.k.row(j)[off..off + dh];
                        let dq_i = &mut dq.row_mut(i)[off..off + dh];
                        for (g, &kv) in dq_i.iter_mut().zip(kj) {
                            *g += ds * kv;
                        }
                        let qi = &lc.q.row(i)[off..off + dh];
                        let dk_j = &mut dk.row_mut(j)[off..off + dh];
                        for (g, &qv) in dk_j.iter_mut().zip(qi) {
                            *g += ds * qv;
                        }
                        // dv_j += p_ij * dctx_i
                        let pij = probs[(i, j)];
                        let dv_j = &mut dv.row_mut(j)[off..off + dh];
                        for (g, &cv) in dv_j.iter_mut().zip(dctx_i) {
                            *g += pij * cv;
                        }
                    }
                }
            }

            matmul_at_b_acc_f64(
                lg.attn.wq.as_mut_slice(),
                &lc.ln1.out.as_slice()[..n * d],
                &dq.as_slice()[..n * d],
                n,
                d,
                d,
            );
            add_bias_grad(&mut lg.attn.bq, &dq, n);
            matmul_at_b_acc_f64(
                lg.attn.wk.as_mut_slice(),
                &lc.ln1.out.as_slice()[..n * d],
                &dk.as_slice()[..n * d],
                n,
                d,
                d,
            );
            add_bias_grad(&mut lg.attn.bk, &dk, n);
            matmul_at_b_acc_f64(
                lg.attn.wv.as_mut_slice(),
                &lc.ln1.out.as_slice()[..n * d],
                &dv.as_slice()[..n * d],
                n,
                d,
                d,
            );
            add_bias_grad(&mut lg.attn.bv, &dv, n);

            let mut dn1 = Mat::zeros(t, d);
            matmul_a_bt_acc(
                &mut dn1.as_mut_slice()[..n * d],
                &dq.as_slice()[..n * d],
                layer.attn.wq.as_slice(),
                n,
                d,
                d,
            );
            matmul_a_bt_acc(
                &mut dn1.as_mut_slice()[..n * d],
                &dk.as_slice()[..n * d],
                layer.attn.wk.as_slice(),
                n,
                d,
                d,
            );
            matmul_a_bt_acc(
                &mut dn1.as_mut_slice()[..n * d],
                &dv.as_slice()[..n * d],
                layer.attn.wv.as_slice(),
                n,
                d,
                d,
            );
            ln_backward(
                &dn1,
                n,
                &lc.ln1,
                &layer.ln1,
                &mut lg.ln1.gain,
                &mut lg.ln1.bias,
                &mut dx,
            );
        }

        // Embeddings.
        for pos in 0..n {
            let g = dx.row(pos);
            let te = grads.tok_emb.row_mut(usize::from(ids[pos]));
            for (acc, &gg) in te.iter_mut().zip(g) {
                *acc += gg.as_f64();
            }
            let pe = grads.pos_emb.row_mut(pos);
            for (acc, &gg) in pe.iter_mut().zip(g) {
                *acc += gg.as_f64();
            }
        }
    }

    /// Softmax gradient of the mean-NLL loss for one cached row: rows of the
    /// result are `(softmax(logits) - onehot(target)) * weight` at scored
    /// positions. Returns the highest scored logit position.
    pub(crate) fn seed_dlogits(
        &self,
        ids: &[TokenId],
        cache: &RowCache<F>,
        weight: f64,
        dlogits: &mut Mat<F>,
    ) -> Option<usize> {
        let w = F::from_f64(weight);
        let mut limit = None;
        for pos in target_logit_positions(ids) {
            let logits = cache.logits.row(pos);
            let out = dlogits.row_mut(pos);
            softmax_into(logits, out);
            for o in out.iter_mut() {
                *o = *o * w;
            }
            out[usize::from(ids[pos + 1])] -= w;
            limit = Some(pos);
        }
        limit
    }

    /// Batch loss and gradients of the mean next-token NLL.
    pub fn loss_and_grads(&self, batch: &TokenBatch) -> Result<(f64, Params<f64>), ModelError> {
        self.validate_batch(batch)?;
        let caches: Vec<RowCache<F>> = batch.rows.iter().map(|r| self.forward_row(r)).collect();
        let mut nll_sum = 0.0f64;
        let mut targets = 0usize;
        for (row, cache) in batch.rows.iter().zip(&caches) {
            for p in target_logit_positions(row) {
                nll_sum += super::forward::nll_from_logits(cache.logits.row(p), row[p + 1]);
                targets += 1;
            }
        }
        if targets == 0 {
            return Err(ModelError::InvalidBatch(
                "batch has no target positions".into(),
            ));
        }
        let loss = nll_sum / targets as f64;
        let mut grads = Params::<f64>::zeros(&self.cfg);
        let weight = 1.0 / targets as f64;
        for (row, cache) in batch.rows.iter().zip(&caches) {
            let mut dlogits = Mat::zeros(row.len(), self.cfg.vocab_size);
            if let Some(limit) = self.seed_dlogits(row, cache, weight, &mut dlogits) {
                self.backward_row(row, cache, &dlogits, limit, &mut grads);
            }
        }
        Ok((loss, grads))
    }
}

impl super::Model {
    /// Per-token squared score gradients for the non-embedding parameters.
    ///
    /// For every target token the gradient of that single token's
    /// log-likelihood is backpropagated on its own, squared elementwise, and
    /// added into `acc` (declared tensor order, embeddings excluded).
    /// `scratch` must be shaped for this model's config. Returns the number
    /// of target tokens processed.
    pub fn accumulate_squared_score_grads(
        &self,
        ids: &[TokenId],
        acc: &mut [f64],
        scratch: &mut Params<f64>,
    ) -> Result<usize, ModelError> {
        if ids.is_empty() || ids.len() > self.cfg.context_len {
            return Err(ModelError::InvalidBatch(format!(
                "row length {} outside 1..={}",
                ids.len(),
                self.cfg.context_len
            )));
        }
        if ids.iter().any(|&t| usize::from(t) >= self.cfg.vocab_size) {
            return Err(ModelError::InvalidBatch("token id out of range".into()));
        }
        let cache = self.forward_row(ids);
        let mut dlogits: Mat<f32> = Mat::zeros(ids.len(), self.cfg.vocab_size);
        let mut count = 0usize;
        let mut prev_pos: Option<usize> = None;
        for pos in target_logit_positions(ids) {
            if let Some(prev) = prev_pos {
                dlogits.row_mut(prev).iter_mut().for_each(|x| *x = 0.0);
            }
            let out = dlogits.row_mut(pos);
            softmax_into(cache.logits.row(pos), out);
            out[usize::from(ids[pos + 1])] -= 1.0;
            scratch.zero();
            self.backward_row(ids, &cache, &dlogits, pos, scratch);
            let mut k = 0usize;
            scratch.for_each_tensor(&mut |name, _, data| {
                if name == "tok_emb" || name == "pos_emb" {
                    return;
                }
                for &g in data {
                    acc[k] += g * g;
                    k += 1;
                }
            });
            debug_assert_eq!(k, acc.len());
            if !acc.iter().all(|x| x.is_finite()) {
                // Report before the caller averages over tokens.
                return Err(ModelError::NumericalDivergence {
                    tensor: "score gradients".into(),
                });
            }
            count += 1;
            prev_pos = Some(pos);
        }
        Ok(count)
    }

    /// Number of non-embedding parameters (the Fisher embedding dimension).
    pub fn non_embedding_param_count(&self) -> usize {
        let cfg = &self.cfg;
        cfg.param_count() - (cfg.vocab_size + cfg.context_len) * cfg.model_dim
    }
}

fn softmax_into<F: Real>(logits: &[F], out: &mut [F]) {
    let mut max = F::neg_infinity();
    for &l in logits {
        if l > max {
            max = l;
        }
    }
    let mut sum = F::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Model, ModelConfig};
    use crate::batch::TokenBatch;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            model_dim: 16,
            heads: 2,
            context_len: 16,
            vocab_size: 11,
            seed: 5,
        }
    }

    fn batch_for(cfg: &ModelConfig, rows: usize, len: usize, seed: u64) -> TokenBatch {
        let mut rng = rng_from_seed(seed);
        TokenBatch {
            rows: (0..rows)
                .map(|_| (0..len).map(|_| rng.gen_range(0..cfg.vocab_size as u16)).collect())
                .collect(),
            corpus_id: "t".into(),
            seed,
        }
    }

    #[test]
    fn gradients_are_finite_and_mostly_nonzero() {
        let cfg = small_cfg();
        let m = Model::init(cfg.clone()).unwrap();
        let batch = batch_for(&cfg, 2, 10, 1);
        let (loss, grads) = m.loss_and_grads(&batch).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(grads.first_non_finite().is_none());
        let mut nonzero = 0usize;
        let mut total = 0usize;
        grads.for_each_tensor(&mut |_, _, data| {
            nonzero += data.iter().filter(|&&g| g != 0.0).count();
            total += data.len();
        });
        assert!(nonzero * 2 > total, "only {nonzero}/{total} grads nonzero");
    }

    #[test]
    fn per_token_squares_sum_like_a_fisher_diagonal() {
        let cfg = small_cfg();
        let m = Model::init(cfg.clone()).unwrap();
        let ids = vec![0, 3, 1, 4, 1, 5];
        let dim = m.non_embedding_param_count();
        let mut acc = vec![0.0f64; dim];
        let mut scratch = super::super::Params::<f64>::zeros(&cfg);
        let count = m
            .accumulate_squared_score_grads(&ids, &mut acc, &mut scratch)
            .unwrap();
        assert_eq!(count, 5);
        assert!(acc.iter().all(|&x| x >= 0.0 && x.is_finite()));
        assert!(acc.iter().any(|&x| x > 0.0));
    }
}
