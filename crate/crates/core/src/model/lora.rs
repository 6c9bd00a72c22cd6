use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelState;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Low-rank update `W + (alpha / rank) · B·A` of one linear weight `W: out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// `rank × in`
    pub a: Tensor,
    /// `out × rank`, zero at attach time.
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The dense update `(alpha / rank) · B·A`.
    pub fn delta(&self) -> Result<Tensor> {
        let mut d = self.b.matmul(&self.a)?;
        let s = self.scaling();
        d.data_mut().iter_mut().for_each(|v| *v *= s);
        Ok(d)
    }
}

impl ModelState {
    /// Attaches a fresh adapter to every adaptable weight of the given blocks.
    pub fn lora_attach(&mut self, layers: &[usize], rank: usize, alpha: f64, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(Error::Model("LoRA rank must be at least 1".into()));
        }
        let mut targets = Vec::new();
        for &l in layers {
            if l >= self.config.num_layers {
                return Err(Error::Model(format!("no layer {l} to adapt")));
            }
            targets.extend(self.config.adaptable_weights(l));
        }
        for t in &targets {
            if self.adapters.iter().any(|a| &a.target == t) {
                return Err(Error::DuplicateAdapter(t.clone()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for target in targets {
            let w = self.params.get(&target)?;
            let (out, inp) = (w.rows(), w.cols());
            let bound = 1.0 / (inp as f64).sqrt();
            self.adapters.push(LoraAdapter {
                a: Tensor::uniform(&[rank, inp], bound, &mut rng),
                b: Tensor::zeros(&[out, rank]),
                target,
                rank,
                alpha,
            });
        }
        Ok(())
    }

    /// Adapters on every block.
    pub fn lora_attach_all(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        let layers: Vec<usize> = (0..self.config.num_layers).collect();
        self.lora_attach(&layers, rank, alpha, seed)
    }

    /// Folds every adapter into its base weight and removes it.
    pub fn lora_merge(&mut self) -> Result<()> {
        for ad in std::mem::take(&mut self.adapters) {
            let delta = ad.delta()?;
            let w = self.params.get_mut(&ad.target)?;
            if !w.same_shape(&delta) {
                return Err(Error::Shape(format!("adapter for {} has wrong shape", ad.target)));
            }
            w.axpy(1.0, &delta);
        }
        Ok(())
    }
}
