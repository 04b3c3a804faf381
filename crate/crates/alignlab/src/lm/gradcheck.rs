//! Finite-difference verification of the analytic gradients.
//!
//! Two modes: the production 32-bit gradients are checked against central
//! differences of the loss evaluated in f64 at f32-quantized parameter
//! values (the difference step is taken between actually-representable f32
//! points, so the quotient is exact in the step); the 64-bit verification
//! mode casts the model up and checks the f64 gradients the same way.

use rand::Rng;

use crate::batch::TokenBatch;
use crate::rng::rng_from_seed;
use crate::tensor::Real;

use super::{ModelError, ModelT, Params};

/// Tensor classes reported separately by the check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorClass {
    Embeddings,
    Attention,
    FeedForward,
    LayerNorm,
    OutputHead,
}

pub const ALL_CLASSES: [TensorClass; 5] = [
    TensorClass::Embeddings,
    TensorClass::Attention,
    TensorClass::FeedForward,
    TensorClass::LayerNorm,
    TensorClass::OutputHead,
];

impl TensorClass {
    pub fn of(name: &str) -> TensorClass {
        if name.starts_with("tok_emb") || name.starts_with("pos_emb") {
            TensorClass::Embeddings
        } else if name.contains(".attn.") {
            TensorClass::Attention
        } else if name.contains(".mlp.") {
            TensorClass::FeedForward
        } else if name.contains("ln") {
            TensorClass::LayerNorm
        } else {
            TensorClass::OutputHead
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TensorClass::Embeddings => "embeddings",
            TensorClass::Attention => "attention",
            TensorClass::FeedForward => "feed-forward",
            TensorClass::LayerNorm => "layer-norm",
            TensorClass::OutputHead => "output-head",
        }
    }
}

/// Worst relative error seen per tensor class.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_class: Vec<(TensorClass, f64)>,
    pub samples_per_class: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_class.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

struct FlatEntry {
    tensor_index: usize,
    offset: usize,
    class: TensorClass,
}

fn index_space<F: Real>(params: &Params<F>) -> Vec<FlatEntry> {
    let mut entries = Vec::new();
    let mut tensor_index = 0usize;
    params.for_each_tensor(&mut |name, _, data| {
        let class = TensorClass::of(name);
        for offset in 0..data.len() {
            entries.push(FlatEntry {
                tensor_index,
                offset,
                class,
            });
        }
        tensor_index += 1;
    });
    entries
}

fn get_entry<F: Real>(params: &mut Params<F>, e: &FlatEntry) -> F {
    params.tensors_mut()[e.tensor_index].1[e.offset]
}

fn set_entry<F: Real>(params: &mut Params<F>, e: &FlatEntry, v: F) {
    params.tensors_mut()[e.tensor_index].1[e.offset] = v;
}

fn grad_entry(grads: &Params<f64>, e: &FlatEntry) -> f64 {
    let mut tensor_index = 0usize;
    let mut value = 0.0;
    grads.for_each_tensor(&mut |_, _, data| {
        if tensor_index == e.tensor_index {
            value = data[e.offset];
        }
        tensor_index += 1;
    });
    value
}

/// Check `samples_per_class` random parameters per tensor class against
/// central finite differences. `F` is the scalar the check runs in: f32 is
/// the production path (loss evaluated in f64 at f32 grid points), f64 is
/// the verification mode.
pub fn finite_diff_check<F: Real>(
    model: &ModelT<F>,
    batch: &TokenBatch,
    samples_per_class: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let mut work = model.clone();
    let entries = index_space(work.params());
    let mut rng = rng_from_seed(seed);

    // f32 runs tolerate a larger step (the analytic side carries f32
    // rounding noise); f64 runs balance truncation against rounding in the
    // difference quotient. The floor guards the relative error against the
    // noise floor of the difference quotient itself: below it, agreement is
    // asserted absolutely (|a - fd| <= tol * floor).
    let is_f32 = std::mem::size_of::<F>() == 4;
    let (step, floor) = if is_f32 { (1e-3, 1e-4) } else { (1e-5, 1e-4) };

    let mut per_class = Vec::new();
    for class in ALL_CLASSES {
        let class_entries: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i].class == class)
            .collect();
        assert!(
            class_entries.len() >= samples_per_class,
            "class {} has only {} parameters",
            class.label(),
            class_entries.len()
        );
        let mut worst = 0.0f64;
        for _ in 0..samples_per_class {
            let e = &entries[class_entries[rng.gen_range(0..class_entries.len())]];
            let x = get_entry(work.params_mut(), e);
            let eps = F::from_f64(step * x.as_f64().abs().max(0.5));
            let x_plus = x + eps;
            let x_minus = x - eps;
            // The actual representable step, exact in f64.
            let h = x_plus.as_f64() - x_minus.as_f64();

            set_entry(work.params_mut(), e, x_plus);
            let loss_plus = work.map_to::<f64>().forward_loss(batch)?;
            set_entry(work.params_mut(), e, x_minus);
            let loss_minus = work.map_to::<f64>().forward_loss(batch)?;
            set_entry(work.params_mut(), e, x);

            let fd = (loss_plus - loss_minus) / h;
            let analytic = grad_entry(&grads, e);
            let err = rel_err(analytic, fd, floor);
            if err > worst {
                worst = err;
            }
        }
        per_class.push((class, worst));
    }
    Ok(GradCheckReport {
        per_class,
        samples_per_class,
    })
}
