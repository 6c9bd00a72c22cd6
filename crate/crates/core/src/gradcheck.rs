//! Reverse-mode gradients against central finite differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flow::{fm_loss, fm_loss_and_grads, AttentionMode, PreparedTask, TrainBatch, TrainItem};
use crate::masks::{AttnMask, LayerSchedule};
use crate::model::{ModelConfig, ModelState, TrainMode};
use crate::numerics::{Tape, Tensor, Var};
use crate::partition::BoxSpec;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Projects the op output onto fixed random weights so every output entry matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let dims = tape.value(y).dims().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(&dims, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Largest relative error over the inputs of one tape op.
pub fn op_error(inputs: &[Tensor], op: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = op(&mut tape, &vars)?;
        let l = project(&mut tape, y, 99)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = op(&mut tape, &vars)?;
    let l = project(&mut tape, y, 99)?;
    let grads = tape.backward(l)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            *slot = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(grads.wrt(vars[k]).data(), &numeric));
    }
    Ok(worst)
}

fn rand(dims: &[usize], seed: u64) -> Tensor {
    Tensor::randn(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Relative error of every differentiable tape primitive.
pub fn primitive_errors() -> Result<Vec<(&'static str, f64)>> {
    let (a, b) = (rand(&[3, 4], 10), rand(&[3, 4], 11));
    let x = rand(&[4, 6], 50);
    let r = rand(&[4, 3], 20);
    let mask = Arc::new(AttnMask::from_fn(5, |i, j| (i + j) % 3 != 1 || i == j));
    let ab = [a.clone(), b.clone()];
    let a1 = [a.clone()];
    Ok(vec![
        ("matmul", op_error(&[rand(&[3, 4], 1), rand(&[4, 5], 2)], |t, v| t.matmul(v[0], v[1]))?),
        ("matmul_t", op_error(&[rand(&[3, 4], 3), rand(&[5, 4], 4)], |t, v| t.matmul_t(v[0], v[1]))?),
        (
            "linear",
            op_error(&[rand(&[3, 4], 5), rand(&[2, 4], 6), rand(&[1, 2], 7)], |t, v| {
                t.linear(v[0], v[1], Some(v[2]))
            })?,
        ),
        ("add", op_error(&ab, |t, v| t.add(v[0], v[1]))?),
        ("sub", op_error(&ab, |t, v| t.sub(v[0], v[1]))?),
        ("mul", op_error(&ab, |t, v| t.mul(v[0], v[1]))?),
        ("scale", op_error(&a1, |t, v| t.scale(v[0], -1.7))?),
        ("silu", op_error(&a1, |t, v| t.silu(v[0]))?),
        ("gelu", op_error(&a1, |t, v| t.gelu(v[0]))?),
        ("square", op_error(&a1, |t, v| t.square(v[0]))?),
        ("sum", op_error(&a1, |t, v| t.sum(v[0]))?),
        ("mean", op_error(&a1, |t, v| t.mean(v[0]))?),
        ("add_row", op_error(&[r.clone(), rand(&[1, 3], 21)], |t, v| t.add_row(v[0], v[1]))?),
        ("mul_row", op_error(&[r.clone(), rand(&[1, 3], 22)], |t, v| t.mul_row(v[0], v[1]))?),
        (
            "modulate",
            op_error(&[r, rand(&[1, 3], 23), rand(&[1, 3], 24)], |t, v| t.modulate(v[0], v[1], v[2]))?,
        ),
        ("layer_norm", op_error(&[rand(&[4, 6], 30)], |t, v| t.layer_norm(v[0]))?),
        ("softmax", op_error(&[rand(&[5, 5], 40)], |t, v| t.masked_softmax(v[0], None))?),
        (
            "masked_softmax",
            op_error(&[rand(&[5, 5], 41)], |t, v| t.masked_softmax(v[0], Some(&mask)))?,
        ),
        ("slice_cols", op_error(&[x.clone()], |t, v| t.slice_cols(v[0], 2, 3))?),
        ("slice_rows", op_error(&[x.clone()], |t, v| t.slice_rows(v[0], 1, 2))?),
        (
            "concat_cols",
            op_error(&[x.clone(), rand(&[4, 2], 51)], |t, v| t.concat_cols(&[v[0], v[1], v[0]]))?,
        ),
        (
            "concat_rows",
            op_error(&[x.clone(), rand(&[1, 6], 52)], |t, v| t.concat_rows(&[v[1], v[0]]))?,
        ),
        ("gather_rows", op_error(&[x], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]))?),
    ])
}

/// Two layers, `d_model = 8`, an 8×8 image.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_h: 8,
        image_w: 8,
        channels: 3,
        patch: 4,
        d_model: 8,
        heads: 2,
        num_layers: 2,
        early_count: 0,
        late_count: 1,
        embed_dim: 4,
        time_dim: 4,
        ff_mult: 2,
        utility_len: 2,
        max_str_len: 3,
        context_pos_offset: false,
        segment_text_positions: false,
    }
}

/// One two-instance item with fixed time and random images.
pub fn tiny_batch(cfg: &ModelConfig) -> Result<TrainBatch> {
    let boxes = [BoxSpec::new(0, 0, 4, 4).with_text("A", "BC"), BoxSpec::new(4, 4, 4, 4).with_text("D", "E")];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = cfg.image_len();
    let mut draw = || (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    Ok(TrainBatch {
        items: vec![TrainItem {
            task: PreparedTask::new(cfg, &boxes)?,
            reference: draw(),
            target: draw(),
            noise: draw(),
            t: 0.37,
        }],
    })
}

/// Relative error of the loss gradient for every trainable tensor.
pub fn model_errors(model: &ModelState, mode: TrainMode, attention: &AttentionMode) -> Result<Vec<(String, f64)>> {
    let batch = tiny_batch(&model.config)?;
    let (_, grads) = fm_loss_and_grads(model, &batch, attention, mode)?;
    let ids = model.trainable(mode);
    let mut out = Vec::with_capacity(ids.len());
    for (id, g) in ids.iter().zip(&grads) {
        let mut numeric = vec![0.0; g.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.tensors_mut(&[*id])[0].data_mut()[i] += STEP;
            let mut minus = model.clone();
            minus.tensors_mut(&[*id])[0].data_mut()[i] -= STEP;
            *slot = (fm_loss(&plus, &batch, attention)? - fm_loss(&minus, &batch, attention)?) / (2.0 * STEP);
        }
        out.push((model.param_name(*id), rel_err(g.data(), &numeric)));
    }
    Ok(out)
}

/// Every primitive plus the tiny model under the default schedule, unmasked
/// attention, and with LoRA adapters; returns the worst case.
pub fn full_check() -> Result<(String, f64)> {
    let mut all: Vec<(String, f64)> = primitive_errors()?
        .into_iter()
        .map(|(n, e)| (n.to_owned(), e))
        .collect();
    let cfg = tiny_config();
    let model = ModelState::random(cfg.clone(), 7)?;
    let schedule = LayerSchedule::parse("default", cfg.num_layers, cfg.early_count, cfg.late_count)?;
    all.extend(model_errors(&model, TrainMode::Full, &AttentionMode::IdAttn(schedule))?);
    all.extend(model_errors(&model, TrainMode::Full, &AttentionMode::Unmasked)?);
    all.extend(model_errors(&lora_model()?, TrainMode::Lora { train_embeddings: true }, &AttentionMode::Unmasked)?);
    Ok(all
        .into_iter()
        .fold((String::new(), 0.0), |w, (n, e)| if e > w.1 { (n, e) } else { w }))
}

/// The tiny model with rank-2 adapters whose B factors are nonzero.
pub fn lora_model() -> Result<ModelState> {
    let mut model = ModelState::random(tiny_config(), 8)?;
    model.lora_attach_all(2, 3.0, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for ad in &mut model.adapters {
        ad.b = Tensor::randn(ad.b.dims(), 0.5, &mut rng);
    }
    Ok(model)
}
