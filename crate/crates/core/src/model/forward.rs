use std::sync::Arc;

use super::{Binding, ModelState, ParamId, MODALITIES};
use crate::encoder::PromptBundle;
use crate::error::{Error, Result};
use crate::image::{patchify, unpatchify};
use crate::masks::{build_dis, build_har, AttnMask, LayerSchedule, Regime};
use crate::numerics::{Tape, Tensor, Var};
use crate::partition::PartitionLayout;

/// Both masks of one layout, built once and shared by every layer and step.
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub dis: Arc<AttnMask>,
    pub har: Arc<AttnMask>,
}

impl MaskSet {
    pub fn new(layout: &PartitionLayout) -> Self {
        Self {
            dis: Arc::new(build_dis(layout)),
            har: Arc::new(build_har(layout)),
        }
    }

    pub fn for_schedule(&self, schedule: &LayerSchedule) -> LayerMasks {
        LayerMasks(
            schedule
                .regimes
                .iter()
                .map(|r| {
                    Some(match r {
                        Regime::Dis => Arc::clone(&self.dis),
                        Regime::Har => Arc::clone(&self.har),
                    })
                })
                .collect(),
        )
    }
}

/// The mask each layer applies; `None` is plain joint attention.
#[derive(Clone, Debug)]
pub struct LayerMasks(pub Vec<Option<Arc<AttnMask>>>);

impl LayerMasks {
    pub fn unmasked(num_layers: usize) -> Self {
        Self(vec![None; num_layers])
    }
}

/// Everything except the noisy image that the velocity depends on.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub bundle: &'a PromptBundle,
    pub layout: &'a PartitionLayout,
    /// Reference image in [−1, 1], HWC.
    pub reference: &'a [f64],
}

fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for k in 0..half {
        let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
        v[k] = (pos * freq).sin();
        v[half + k] = (pos * freq).cos();
    }
    v
}

/// Each token's position code: 1-D for text, 2-D for patches.
fn position_codes(model: &ModelState, bundle: &PromptBundle, layout: &PartitionLayout) -> Result<(Tensor, Tensor, Tensor)> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let positions = if cfg.segment_text_positions {
        bundle.segment_positions()
    } else {
        bundle.positions()
    };
    let text: Vec<f64> = positions
        .into_iter()
        .flat_map(|p| sinusoid(p as f64, d))
        .collect();
    let grid = |row_offset: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(layout.num_patches() * d);
        for r in 0..layout.grid_h {
            for c in 0..layout.grid_w {
                out.extend(sinusoid((r + row_offset) as f64, d / 2));
                out.extend(sinusoid(c as f64, d / 2));
            }
        }
        out
    };
    let offset = if cfg.context_pos_offset { layout.grid_h } else { 0 };
    Ok((
        Tensor::new(vec![bundle.total_len(), d], text)?,
        Tensor::new(vec![layout.num_patches(), d], grid(0))?,
        Tensor::new(vec![layout.num_patches(), d], grid(offset))?,
    ))
}

/// Per-block handles into a [`Binding`].
struct Ctx<'m> {
    model: &'m ModelState,
    binding: &'m Binding,
}

impl Ctx<'_> {
    fn param(&self, name: &str) -> Result<Var> {
        let i = self
            .model
            .params
            .position(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))?;
        Ok(self.binding.var(ParamId::Base(i)))
    }

    /// `x·Wᵀ + b`, plus the low-rank term when an adapter targets `W`.
    fn linear(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let wname = format!("{prefix}.w");
        let w = self.param(&wname)?;
        let b = self.param(&format!("{prefix}.b"))?;
        let mut y = tape.linear(x, w, Some(b))?;
        if let Some(k) = self.model.adapters.iter().position(|a| a.target == wname) {
            let ad = &self.model.adapters[k];
            let a = self.binding.var(ParamId::LoraA(k));
            let bv = self.binding.var(ParamId::LoraB(k));
            let xa = tape.matmul_t(x, a)?;
            let xab = tape.matmul_t(xa, bv)?;
            let scaled = tape.scale(xab, ad.scaling())?;
            y = tape.add(y, scaled)?;
        }
        Ok(y)
    }

    fn modality_row(&self, tape: &mut Tape, table: Var, m: usize) -> Result<Var> {
        tape.slice_rows(table, m, 1)
    }
}

impl ModelState {
    fn check_inputs(&self, x_t: &[f64], cond: &Conditioning<'_>) -> Result<()> {
        let cfg = &self.config;
        let l = cond.layout;
        if x_t.len() != cfg.image_len() || cond.reference.len() != cfg.image_len() {
            return Err(Error::Shape(format!(
                "images must hold {} values, got {} and {}",
                cfg.image_len(),
                x_t.len(),
                cond.reference.len()
            )));
        }
        if l.grid_h != cfg.grid_h() || l.grid_w != cfg.grid_w() || l.patch != cfg.patch {
            return Err(Error::Shape("layout grid does not match model config".into()));
        }
        if l.text_len() != cond.bundle.total_len()
            || l.t_g.len() != cond.bundle.global_len
            || l.t_inst.iter().map(|r| r.len()).ne(cond.bundle.inst_lens.iter().copied())
        {
            return Err(Error::Shape("layout segments do not match the prompt bundle".into()));
        }
        Ok(())
    }

    /// Token states and the time-conditioning vector on a tape.
    fn embed_on_tape(&self, tape: &mut Tape, ctx: &Ctx<'_>, x_t: &[f64], cond: &Conditioning<'_>, t: f64) -> Result<(Var, Var)> {
        let cfg = &self.config;
        self.check_inputs(x_t, cond)?;
        let (pos_text, pos_lat, pos_ctx) = position_codes(self, cond.bundle, cond.layout)?;
        let modality = ctx.param("modality")?;

        let table = ctx.param("tok_embed")?;
        let tok = tape.gather_rows(table, &cond.bundle.token_ids)?;
        let text = ctx.linear(tape, "text_in", tok)?;

        let (w, h, c, p) = (cfg.image_w, cfg.image_h, cfg.channels, cfg.patch);
        let pd = cfg.patch_dim();
        let lat_in = tape.constant(Tensor::new(vec![cfg.num_patches(), pd], patchify(x_t, w, h, c, p))?);
        let ctx_in = tape.constant(Tensor::new(
            vec![cfg.num_patches(), pd],
            patchify(cond.reference, w, h, c, p),
        )?);
        let lat = ctx.linear(tape, "latent_in", lat_in)?;
        let con = ctx.linear(tape, "context_in", ctx_in)?;

        let mut blocks = Vec::with_capacity(3);
        for (m, (x, pos)) in [(text, pos_text), (lat, pos_lat), (con, pos_ctx)].into_iter().enumerate() {
            let pos = tape.constant(pos);
            let x = tape.add(x, pos)?;
            let row = ctx.modality_row(tape, modality, m)?;
            blocks.push(tape.add_row(x, row)?);
        }
        let hstate = tape.concat_rows(&blocks)?;

        let feats = tape.constant(Tensor::new(vec![1, cfg.time_dim], sinusoid(t * 1000.0, cfg.time_dim))?);
        let t1 = ctx.linear(tape, "time.l1", feats)?;
        let t1 = tape.silu(t1)?;
        let temb = ctx.linear(tape, "time.l2", t1)?;
        Ok((hstate, temb))
    }

    fn block_on_tape(
        &self,
        tape: &mut Tape,
        ctx: &Ctx<'_>,
        layer: usize,
        h: Var,
        temb_act: Var,
        mask: Option<&Arc<AttnMask>>,
        text_len: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let p = format!("blocks.{layer}");
        let patches = cfg.num_patches();

        let m = ctx.linear(tape, &format!("{p}.mod"), temb_act)?;
        let mut chunk = Vec::with_capacity(6);
        for k in 0..6 {
            chunk.push(tape.slice_cols(m, k * d, d)?);
        }
        let (shift_a, scale_a, gate_a, shift_f, scale_f, gate_f) = (chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5]);

        let normed = tape.layer_norm(h)?;
        let x = tape.modulate(normed, shift_a, scale_a)?;
        let spans = [(0, text_len), (text_len, patches), (text_len + patches, patches)];
        let mut qkv_parts = Vec::with_capacity(3);
        for (mi, &(start, len)) in spans.iter().enumerate() {
            let rows = tape.slice_rows(x, start, len)?;
            qkv_parts.push(ctx.linear(tape, &format!("{p}.qkv_{}", MODALITIES[mi]), rows)?);
        }
        let qkv = tape.concat_rows(&qkv_parts)?;

        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = tape.slice_cols(qkv, head * hd, hd)?;
            let k = tape.slice_cols(qkv, d + head * hd, hd)?;
            let v = tape.slice_cols(qkv, 2 * d + head * hd, hd)?;
            let logits = tape.matmul_t(q, k)?;
            let logits = tape.scale(logits, inv_sqrt)?;
            let weights = tape.masked_softmax(logits, mask)?;
            heads.push(tape.matmul(weights, v)?);
        }
        let attn = tape.concat_cols(&heads)?;
        let attn = ctx.linear(tape, &format!("{p}.out"), attn)?;
        let attn = tape.mul_row(attn, gate_a)?;
        let h = tape.add(h, attn)?;

        let normed = tape.layer_norm(h)?;
        let x = tape.modulate(normed, shift_f, scale_f)?;
        let f = ctx.linear(tape, &format!("{p}.ff1"), x)?;
        let f = tape.gelu(f)?;
        let f = ctx.linear(tape, &format!("{p}.ff2"), f)?;
        let f = tape.mul_row(f, gate_f)?;
        tape.add(h, f)
    }

    /// Velocity in patch layout (`patches × patch_dim`) as a tape node.
    pub fn velocity_on_tape(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x_t: &[f64],
        cond: &Conditioning<'_>,
        t: f64,
        masks: &LayerMasks,
    ) -> Result<Var> {
        let cfg = &self.config;
        if masks.0.len() != cfg.num_layers {
            return Err(Error::Model(format!(
                "{} layer masks for {} layers",
                masks.0.len(),
                cfg.num_layers
            )));
        }
        if let Some(Some(m)) = masks.0.iter().find(|m| m.as_ref().is_some_and(|m| m.seq_len() != cond.layout.seq_len)) {
            return Err(Error::Shape(format!(
                "mask covers {} tokens, sequence has {}",
                m.seq_len(),
                cond.layout.seq_len
            )));
        }
        let ctx = Ctx { model: self, binding };
        let (mut h, temb) = self.embed_on_tape(tape, &ctx, x_t, cond, t)?;
        let temb_act = tape.silu(temb)?;
        let text_len = cond.layout.text_len();
        for (layer, mask) in masks.0.iter().enumerate() {
            h = self.block_on_tape(tape, &ctx, layer, h, temb_act, mask.as_ref(), text_len)?;
        }
        let lat = tape.slice_rows(h, text_len, cfg.num_patches())?;
        let fm = ctx.linear(tape, "final.mod", temb_act)?;
        let shift = tape.slice_cols(fm, 0, cfg.d_model)?;
        let scale = tape.slice_cols(fm, cfg.d_model, cfg.d_model)?;
        let normed = tape.layer_norm(lat)?;
        let x = tape.modulate(normed, shift, scale)?;
        ctx.linear(tape, "head", x)
    }

    /// Token states `seq_len × d_model` and the time vector `1 × time_dim`.
    pub fn embed(&self, x_t: &[f64], cond: &Conditioning<'_>, t: f64) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, None);
        let ctx = Ctx { model: self, binding: &binding };
        let (h, temb) = self.embed_on_tape(&mut tape, &ctx, x_t, cond, t)?;
        Ok((tape.value(h).clone(), tape.value(temb).clone()))
    }

    /// One transformer block applied to token states `h`.
    pub fn block_forward(
        &self,
        layer: usize,
        h: &Tensor,
        temb: &Tensor,
        mask: Option<&Arc<AttnMask>>,
        layout: &PartitionLayout,
    ) -> Result<Tensor> {
        if layer >= self.config.num_layers {
            return Err(Error::Model(format!("no layer {layer}")));
        }
        if h.rows() != layout.seq_len || h.cols() != self.config.d_model {
            return Err(Error::Shape(format!("token states {:?}", h.dims())));
        }
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, None);
        let ctx = Ctx { model: self, binding: &binding };
        let hv = tape.constant(h.clone());
        let tv = tape.constant(temb.clone());
        let act = tape.silu(tv)?;
        let out = self.block_on_tape(&mut tape, &ctx, layer, hv, act, mask, layout.text_len())?;
        Ok(tape.value(out).clone())
    }

    /// Velocity field as an `image_h × image_w × channels` tensor.
    pub fn forward_velocity(&self, x_t: &[f64], cond: &Conditioning<'_>, t: f64, masks: &LayerMasks) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, None);
        let v = self.velocity_on_tape(&mut tape, &binding, x_t, cond, t, masks)?;
        let cfg = &self.config;
        let img = unpatchify(tape.value(v).data(), cfg.image_w, cfg.image_h, cfg.channels, cfg.patch);
        Tensor::new(vec![cfg.image_h, cfg.image_w, cfg.channels], img)
    }
}
