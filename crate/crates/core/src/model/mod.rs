//! Toy multimodal diffusion transformer predicting a velocity field.
//!
//! Tokens are `[prompt | latent patches | context patches]`. Each modality
//! has its own QKV projection; attention is joint over the whole sequence
//! and masked per layer. Time enters only through per-layer scale, shift
//! and gate vectors shared by all tokens.

mod forward;
mod lora;
mod params;

pub use forward::{Conditioning, LayerMasks, MaskSet};
pub use lora::LoraAdapter;
pub use params::ParamSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const MODALITIES: [&str; 3] = ["text", "latent", "context"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub num_layers: usize,
    pub early_count: usize,
    pub late_count: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
    pub utility_len: usize,
    pub max_str_len: usize,
    /// Give context tokens row positions offset by the grid height instead of
    /// sharing the latent positions.
    pub context_pos_offset: bool,
    /// Restart text positions at every prompt segment instead of counting
    /// through the whole text block.
    pub segment_text_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 48,
            image_w: 48,
            channels: 3,
            patch: 4,
            d_model: 64,
            heads: 4,
            num_layers: 8,
            early_count: 2,
            late_count: 2,
            embed_dim: 32,
            time_dim: 32,
            ff_mult: 2,
            utility_len: 8,
            max_str_len: 6,
            context_pos_offset: false,
            segment_text_positions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_model % 4 != 0 {
            return bad("d_model must be a multiple of 4 for 2-D positions".into());
        }
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return bad(format!(
                "image {}x{} not divisible by patch {}",
                self.image_w, self.image_h, self.patch
            ));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 || self.embed_dim == 0 {
            return bad("time_dim must be even and embed_dim positive".into());
        }
        if self.num_layers == 0 || self.early_count + self.late_count > self.num_layers {
            return bad("layer group counts exceed num_layers".into());
        }
        if self.channels == 0 || self.ff_mult == 0 || self.utility_len == 0 {
            return bad("channels, ff_mult and utility_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Values per patch row.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }

    /// Every parameter name with its shape, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let td = self.time_dim;
        let hidden = self.ff_mult * d;
        let pd = self.patch_dim();
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("tok_embed".into(), vec![VOCAB_SIZE, self.embed_dim]),
            ("text_in.w".into(), vec![d, self.embed_dim]),
            ("text_in.b".into(), vec![d]),
            ("latent_in.w".into(), vec![d, pd]),
            ("latent_in.b".into(), vec![d]),
            ("context_in.w".into(), vec![d, pd]),
            ("context_in.b".into(), vec![d]),
            ("modality".into(), vec![3, d]),
            ("time.l1.w".into(), vec![td, td]),
            ("time.l1.b".into(), vec![td]),
            ("time.l2.w".into(), vec![td, td]),
            ("time.l2.b".into(), vec![td]),
        ];
        for l in 0..self.num_layers {
            let p = format!("blocks.{l}");
            out.push((format!("{p}.mod.w"), vec![6 * d, td]));
            out.push((format!("{p}.mod.b"), vec![6 * d]));
            for m in MODALITIES {
                out.push((format!("{p}.qkv_{m}.w"), vec![3 * d, d]));
                out.push((format!("{p}.qkv_{m}.b"), vec![3 * d]));
            }
            out.push((format!("{p}.out.w"), vec![d, d]));
            out.push((format!("{p}.out.b"), vec![d]));
            out.push((format!("{p}.ff1.w"), vec![hidden, d]));
            out.push((format!("{p}.ff1.b"), vec![hidden]));
            out.push((format!("{p}.ff2.w"), vec![d, hidden]));
            out.push((format!("{p}.ff2.b"), vec![d]));
        }
        out.push(("final.mod.w".into(), vec![2 * d, td]));
        out.push(("final.mod.b".into(), vec![2 * d]));
        out.push(("head.w".into(), vec![pd, d]));
        out.push(("head.b".into(), vec![pd]));
        out
    }

    /// Names of the linear weights inside block `layer` that accept adapters.
    pub fn adaptable_weights(&self, layer: usize) -> Vec<String> {
        let p = format!("blocks.{layer}");
        let mut v: Vec<String> = MODALITIES.iter().map(|m| format!("{p}.qkv_{m}.w")).collect();
        v.extend(["out", "ff1", "ff2"].iter().map(|s| format!("{p}.{s}.w")));
        v
    }
}

/// Which parameters an optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    /// Adapters only, optionally with the token embedding table.
    Lora { train_embeddings: bool },
}

/// Identifies one trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamId {
    Base(usize),
    LoraA(usize),
    LoraB(usize),
}

/// Model weights plus configuration and attached adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub adapters: Vec<LoraAdapter>,
}

/// Tape handles for every parameter of one forward pass.
pub struct Binding {
    base: Vec<Var>,
    lora: Vec<(Var, Var)>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        match id {
            ParamId::Base(i) => self.base[i],
            ParamId::LoraA(i) => self.lora[i].0,
            ParamId::LoraB(i) => self.lora[i].1,
        }
    }
}

fn is_zero_init(name: &str) -> bool {
    name.ends_with(".b") || name.contains(".mod.") || name.starts_with("head.")
}

impl ModelState {
    /// Training initialisation: scaled-normal weights, zero biases, and zero
    /// modulation and head weights so every block starts as the identity.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// Every tensor, including modulation and head, drawn at random. Used to
    /// exercise all paths in tests.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    fn build(config: ModelConfig, seed: u64, all_random: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, dims) in config.param_shapes() {
            let t = if name == "tok_embed" || name == "modality" {
                Tensor::randn(&dims, if all_random { 1.0 } else { 0.02 }, &mut rng)
            } else if !all_random && is_zero_init(&name) {
                Tensor::zeros(&dims)
            } else {
                let fan_in = *dims.last().unwrap_or(&1) as f64;
                Tensor::randn(&dims, 1.0 / fan_in.sqrt(), &mut rng)
            };
            params.insert(name, t)?;
        }
        Ok(Self {
            config,
            params,
            adapters: Vec::new(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
            + self
                .adapters
                .iter()
                .map(|a| a.a.len() + a.b.len())
                .sum::<usize>()
    }

    pub fn trainable(&self, mode: TrainMode) -> Vec<ParamId> {
        match mode {
            TrainMode::Full => (0..self.params.len()).map(ParamId::Base).collect(),
            TrainMode::Lora { train_embeddings } => {
                let mut ids = Vec::new();
                if train_embeddings {
                    if let Some(i) = self.params.position("tok_embed") {
                        ids.push(ParamId::Base(i));
                    }
                }
                for i in 0..self.adapters.len() {
                    ids.push(ParamId::LoraA(i));
                    ids.push(ParamId::LoraB(i));
                }
                ids
            }
        }
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::Base(i) => self.params.at(i),
            ParamId::LoraA(i) => &self.adapters[i].a,
            ParamId::LoraB(i) => &self.adapters[i].b,
        }
    }

    /// Mutable access to several distinct tensors at once, in `ids` order.
    pub fn tensors_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut base: Vec<Option<&mut Tensor>> = self.params.tensors_mut().map(Some).collect();
        let mut a: Vec<Option<&mut Tensor>> = Vec::new();
        let mut b: Vec<Option<&mut Tensor>> = Vec::new();
        for ad in self.adapters.iter_mut() {
            a.push(Some(&mut ad.a));
            b.push(Some(&mut ad.b));
        }
        ids.iter()
            .map(|id| {
                let slot = match *id {
                    ParamId::Base(i) => &mut base[i],
                    ParamId::LoraA(i) => &mut a[i],
                    ParamId::LoraB(i) => &mut b[i],
                };
                slot.take().expect("parameter ids are distinct")
            })
            .collect()
    }

    pub fn param_name(&self, id: ParamId) -> String {
        match id {
            ParamId::Base(i) => self.params.name_at(i).to_owned(),
            ParamId::LoraA(i) => format!("lora.{}.a", self.adapters[i].target),
            ParamId::LoraB(i) => format!("lora.{}.b", self.adapters[i].target),
        }
    }

    /// Places every parameter on `tape`; only those in `mode` (if any)
    /// become differentiable leaves.
    pub fn bind(&self, tape: &mut Tape, mode: Option<TrainMode>) -> Binding {
        let trainable = mode.map(|m| self.trainable(m)).unwrap_or_default();
        let base = self
            .params
            .tensors()
            .enumerate()
            .map(|(i, t)| {
                if trainable.contains(&ParamId::Base(i)) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let lora = self
            .adapters
            .iter()
            .enumerate()
            .map(|(i, ad)| {
                let mk = |tape: &mut Tape, id: ParamId, t: &Tensor| {
                    if trainable.contains(&id) {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                };
                let a = mk(tape, ParamId::LoraA(i), &ad.a);
                let b = mk(tape, ParamId::LoraB(i), &ad.b);
                (a, b)
            })
            .collect();
        Binding { base, lora }
    }
}
