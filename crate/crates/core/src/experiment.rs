//! Training loop, evaluation runs and the probes behind the mechanism's claims.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{gaussian_noise, sample_edit, AttentionMode, PreparedTask, SamplerConfig, TrainBatch, Trainer};
use crate::image::{patchify, RgbImage};
use crate::masks::{build_mask, oracle_mask, LayerSchedule, Regime, ABLATION_ROWS};
use crate::metrics::{region_mae_mse, score_sample, EvalReport};
use crate::model::{Conditioning, LayerMasks, ModelConfig, ModelState, TrainMode};
use crate::numerics::AdamConfig;
use crate::partition::{build_layout, BoxSpec};
use crate::seed::derive;
use crate::synth::dataset::{sample_id, sample_seed};
use crate::synth::{render_sample, EditSample, GlyphFont, Split, StoredSample, SynthConfig};

/// Runs optimizer steps until `trainer` has taken `until` steps in total.
///
/// Step `s` draws its batch, times and noise from `derive(seed, [s])` alone,
/// so a run resumed from a checkpoint continues exactly as an unbroken one.
pub fn train_model(
    model: &mut ModelState,
    trainer: &mut Trainer,
    data: &[EditSample],
    until: u64,
    batch: usize,
    seed: u64,
    mut on_step: impl FnMut(&ModelState, &Trainer, u64, f64) -> Result<()>,
) -> Result<()> {
    if data.is_empty() || batch == 0 {
        return Err(Error::Training {
            step: trainer.adam.step_count,
            reason: "no training data".into(),
        });
    }
    while trainer.adam.step_count < until {
        let step = trainer.adam.step_count;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[step]));
        let picks: Vec<&EditSample> = (0..batch).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let examples: Vec<(&RgbImage, &RgbImage, &[BoxSpec])> =
            picks.iter().map(|s| (&s.reference, &s.target, &s.boxes[..])).collect();
        let b = TrainBatch::draw(&model.config, &examples, &mut rng)?;
        let loss = trainer.step(model, &b)?;
        on_step(model, trainer, step + 1, loss)?;
    }
    Ok(())
}

/// Edits every sample and scores it. Without a model the ground-truth
/// targets stand in for the edits.
pub fn evaluate(
    model: Option<&ModelState>,
    samples: &[StoredSample],
    sampler: &SamplerConfig,
    seed: u64,
    label: &str,
) -> Result<EvalReport> {
    let font = GlyphFont::default();
    let mut scores = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let e = &s.sample;
        let edited = match model {
            Some(m) => sample_edit(m, &e.reference, &e.boxes, sampler, derive(seed, &[i as u64]))?,
            None => e.target.clone(),
        };
        scores.push(score_sample(&s.id, &e.reference, &edited, &e.target, &e.boxes, &font)?);
    }
    Ok(EvalReport::new(label, scores))
}

/// Mean absolute change (0–255) outside the first two boxes when their
/// target strings are exchanged, sampling both runs from the same noise.
/// `None` when the sample has fewer than two boxes or equal targets.
pub fn swap_leakage(model: &ModelState, sample: &EditSample, sampler: &SamplerConfig, seed: u64) -> Result<Option<f64>> {
    if sample.boxes.len() < 2 || sample.boxes[0].tgt == sample.boxes[1].tgt {
        return Ok(None);
    }
    let mut swapped = sample.boxes.clone();
    let t0 = std::mem::take(&mut swapped[0].tgt);
    swapped[0].tgt = std::mem::replace(&mut swapped[1].tgt, t0);
    let a = sample_edit(model, &sample.reference, &sample.boxes, sampler, seed)?;
    let b = sample_edit(model, &sample.reference, &swapped, sampler, seed)?;
    Ok(Some(region_mae_mse(&a, &b, &sample.boxes[..2])?.0))
}

/// One labelled schedule row per assignment of the layer-scheduling ablation.
pub fn ablation_schedules(cfg: &ModelConfig) -> Result<Vec<LayerSchedule>> {
    ABLATION_ROWS
        .iter()
        .map(|g| LayerSchedule::from_groups(cfg.num_layers, cfg.early_count, cfg.late_count, *g))
        .collect()
}

/// Evaluates the same model under all eight schedule assignments.
pub fn schedule_ablation(model: &ModelState, samples: &[StoredSample], steps: usize, seed: u64) -> Result<Vec<EvalReport>> {
    ablation_schedules(&model.config)?
        .into_iter()
        .map(|s| {
            let label = s.label();
            let sampler = SamplerConfig {
                steps,
                attention: AttentionMode::IdAttn(s),
            };
            evaluate(Some(model), samples, &sampler, seed, &label)
        })
        .collect()
}

/// Renders `n` samples of one split in memory.
pub fn synth_split(cfg: &SynthConfig, split: Split, n: usize, seed: u64) -> Result<Vec<StoredSample>> {
    (0..n)
        .map(|i| {
            Ok(StoredSample {
                id: sample_id(split, i),
                sample: render_sample(sample_seed(seed, split, i), cfg)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub adam: AdamConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub steps: u64,
    pub batch: usize,
    pub sampler_steps: usize,
    pub seed: u64,
}

impl Default for AbConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            adam: AdamConfig::default(),
            n_train: 2000,
            n_test: 100,
            steps: 5000,
            batch: 16,
            sampler_steps: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbArm {
    pub label: String,
    pub final_loss: f64,
    pub mae_b: f64,
    /// Mean over the samples that admit a swap.
    pub leakage: f64,
    pub probes: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub config: AbConfig,
    pub idattn: AbArm,
    pub unmasked: AbArm,
}

impl AbReport {
    pub fn lower_mae_b(&self) -> bool {
        self.idattn.mae_b < self.unmasked.mae_b
    }

    pub fn lower_leakage(&self) -> bool {
        self.idattn.leakage < self.unmasked.leakage
    }
}

fn ab_arm(
    cfg: &AbConfig,
    attention: AttentionMode,
    train: &[EditSample],
    test: &[StoredSample],
    progress: &mut dyn FnMut(&str),
) -> Result<AbArm> {
    let label = attention.label();
    let mut model = ModelState::init(cfg.model.clone(), derive(cfg.seed, &[1]))?;
    let mut trainer = Trainer::new(&model, TrainMode::Full, attention.clone(), cfg.adam);
    let mut last = f64::NAN;
    let every = (cfg.steps / 10).max(1);
    train_model(&mut model, &mut trainer, train, cfg.steps, cfg.batch, derive(cfg.seed, &[2]), |_, _, step, loss| {
        last = loss;
        if step % every == 0 {
            progress(&format!("{label}: step {step} loss {loss:.4}"));
        }
        Ok(())
    })?;
    let sampler = SamplerConfig {
        steps: cfg.sampler_steps,
        attention,
    };
    let eval_seed = derive(cfg.seed, &[3]);
    let report = evaluate(Some(&model), test, &sampler, eval_seed, &label)?;
    let mut total = 0.0;
    let mut probes = 0;
    for (i, s) in test.iter().enumerate() {
        if let Some(l) = swap_leakage(&model, &s.sample, &sampler, derive(eval_seed, &[i as u64]))? {
            total += l;
            probes += 1;
        }
    }
    if probes == 0 {
        return Err(Error::UndefinedScore("no test sample admits a prompt swap".into()));
    }
    Ok(AbArm {
        label,
        final_loss: last,
        mae_b: report.aggregate.mae_b,
        leakage: total / probes as f64,
        probes,
        report,
    })
}

/// Trains an instance-masked and an unmasked model on identical data and
/// compares background preservation and cross-instance leakage.
pub fn ab_experiment(cfg: &AbConfig, mut progress: impl FnMut(&str)) -> Result<AbReport> {
    let train: Vec<EditSample> = synth_split(&cfg.synth, Split::Train, cfg.n_train, cfg.seed)?
        .into_iter()
        .map(|s| s.sample)
        .collect();
    let test = synth_split(&cfg.synth, Split::Test, cfg.n_test, cfg.seed)?;
    let idattn = ab_arm(cfg, AttentionMode::default_for(&cfg.model), &train, &test, &mut progress)?;
    let unmasked = ab_arm(cfg, AttentionMode::Unmasked, &train, &test, &mut progress)?;
    Ok(AbReport {
        config: cfg.clone(),
        idattn,
        unmasked,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub layouts: usize,
    pub mismatches: usize,
    pub with_overlap: usize,
    pub max_seq_len: usize,
}

/// Compares both mask builders with the predicate oracle on random layouts
/// (up to four instances, overlapping boxes allowed).
pub fn mask_oracle_agreement(layouts: usize, seed: u64) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleCheck {
        layouts,
        mismatches: 0,
        with_overlap: 0,
        max_seq_len: 0,
    };
    for _ in 0..layouts {
        let patch = [1, 2, 4][rng.random_range(0..3)];
        let (gh, gw) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (w, h) = (gw * patch, gh * patch);
        let n = rng.random_range(0..=4);
        let global = rng.random_range(1..=8);
        let lens: Vec<usize> = (0..n).map(|_| rng.random_range(1..=8)).collect();
        let boxes: Vec<BoxSpec> = (0..n)
            .map(|_| {
                let x = rng.random_range(0..w);
                let y = rng.random_range(0..h);
                BoxSpec::new(x, y, rng.random_range(1..=w - x), rng.random_range(1..=h - y))
            })
            .collect();
        let layout = build_layout(global, &lens, &boxes, patch, gh, gw)?;
        out.max_seq_len = out.max_seq_len.max(layout.seq_len);
        let mut seen = vec![0usize; layout.num_patches()];
        for k in 0..n {
            for p in layout.instance_patches(k) {
                seen[p] += 1;
            }
        }
        if seen.iter().any(|&c| c > 1) {
            out.with_overlap += 1;
        }
        for regime in [Regime::Dis, Regime::Har] {
            if build_mask(&layout, regime) != oracle_mask(&layout, regime) {
                out.mismatches += 1;
            }
        }
    }
    Ok(out)
}

fn random_unit(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Number of draws where a zero-instance forward pass under the default
/// schedule differs in any bit from plain joint attention.
pub fn vanilla_degeneracy(cfg: &ModelConfig, draws: usize, seed: u64) -> Result<usize> {
    let task = PreparedTask::new(cfg, &[])?;
    let schedule = AttentionMode::default_for(cfg);
    let mut mismatches = 0;
    for d in 0..draws {
        let model = ModelState::random(cfg.clone(), derive(seed, &[d as u64, 0]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[d as u64, 1]));
        let x = gaussian_noise(cfg.image_len(), &mut rng);
        let reference = random_unit(cfg.image_len(), &mut rng);
        let t: f64 = rng.random();
        let cond = Conditioning {
            bundle: &task.bundle,
            layout: &task.layout,
            reference: &reference,
        };
        let masked = model.forward_velocity(&x, &cond, t, &schedule.layer_masks(&task, cfg.num_layers))?;
        let plain = model.forward_velocity(&x, &cond, t, &LayerMasks::unmasked(cfg.num_layers))?;
        if masked.data().iter().zip(plain.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationStats {
    pub trials: usize,
    /// Largest change on the probed instance's patches under all-dis.
    pub dis_max_change: f64,
    pub dis_changed_trials: usize,
    pub default_max_change: f64,
    pub default_changed_trials: usize,
}

/// Perturbs every token of the other instances (their prompt tokens and the
/// latent and context values of their patches) and measures the change of
/// the velocity on instance 0's patches.
pub fn isolation_probe(cfg: &ModelConfig, trials: usize, seed: u64) -> Result<IsolationStats> {
    let synth = SynthConfig {
        width: cfg.image_w,
        height: cfg.image_h,
        patch: cfg.patch,
        max_str_len: cfg.max_str_len,
        p_overlap: 0.0,
        ..SynthConfig::default()
    };
    let font = GlyphFont::default();
    let alphabet = font.alphabet().to_vec();
    let schedules = [
        AttentionMode::IdAttn(LayerSchedule::parse("all-dis", cfg.num_layers, cfg.early_count, cfg.late_count)?),
        AttentionMode::default_for(cfg),
    ];
    let mut stats = IsolationStats {
        trials,
        dis_max_change: 0.0,
        dis_changed_trials: 0,
        default_max_change: 0.0,
        default_changed_trials: 0,
    };
    let mut k = 0u64;
    for trial in 0..trials {
        let sample = loop {
            let r = render_sample(derive(seed, &[trial as u64, k]), &synth);
            k += 1;
            match r {
                Ok(s) if s.boxes.len() >= 2 => break s,
                Ok(_) | Err(Error::Generation(_)) => {}
                Err(e) => return Err(e),
            }
        };
        let model = ModelState::random(cfg.clone(), derive(seed, &[trial as u64, 1 << 32]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[trial as u64, 1 << 33]));
        let x = gaussian_noise(cfg.image_len(), &mut rng);
        let reference = sample.reference.to_unit();
        let t: f64 = rng.random();

        let mut boxes2 = sample.boxes.clone();
        for b in boxes2.iter_mut().skip(1) {
            let len = b.tgt.chars().count();
            let mut s = b.tgt.clone();
            while s == b.tgt {
                s = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
            }
            b.tgt = s;
        }
        let task = PreparedTask::new(cfg, &sample.boxes)?;
        let task2 = PreparedTask::new(cfg, &boxes2)?;
        let (mut x2, mut ref2) = (x.clone(), reference.clone());
        let c = cfg.channels;
        for m in 1..sample.boxes.len() {
            for p in task.layout.instance_patches(m) {
                let (pr, pc) = (p / cfg.grid_w(), p % cfg.grid_w());
                for dy in 0..cfg.patch {
                    for dx in 0..cfg.patch {
                        let px = ((pr * cfg.patch + dy) * cfg.image_w + pc * cfg.patch + dx) * c;
                        for ch in 0..c {
                            x2[px + ch] = rng.sample::<f64, _>(rand_distr::StandardNormal);
                            ref2[px + ch] = rng.random_range(-1.0..1.0);
                        }
                    }
                }
            }
        }
        let own = task.layout.instance_patches(0);
        let pd = cfg.patch_dim();
        for (si, attention) in schedules.iter().enumerate() {
            let v1 = model.forward_velocity(
                &x,
                &Conditioning {
                    bundle: &task.bundle,
                    layout: &task.layout,
                    reference: &reference,
                },
                t,
                &attention.layer_masks(&task, cfg.num_layers),
            )?;
            let v2 = model.forward_velocity(
                &x2,
                &Conditioning {
                    bundle: &task2.bundle,
                    layout: &task2.layout,
                    reference: &ref2,
                },
                t,
                &attention.layer_masks(&task2, cfg.num_layers),
            )?;
            let p1 = patchify(v1.data(), cfg.image_w, cfg.image_h, c, cfg.patch);
            let p2 = patchify(v2.data(), cfg.image_w, cfg.image_h, c, cfg.patch);
            let change = own
                .iter()
                .flat_map(|&p| (p * pd..(p + 1) * pd).map(|i| (p1[i] - p2[i]).abs()))
                .fold(0.0, f64::max);
            let (max, count) = if si == 0 {
                (&mut stats.dis_max_change, &mut stats.dis_changed_trials)
            } else {
                (&mut stats.default_max_change, &mut stats.default_changed_trials)
            };
            *max = max.max(change);
            if change != 0.0 {
                *count += 1;
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agreement_small() {
        let r = mask_oracle_agreement(40, 1).unwrap();
        assert_eq!(r.mismatches, 0);
        assert!(r.with_overlap > 0);
    }

    #[test]
    fn ablation_has_eight_distinct_rows() {
        let s = ablation_schedules(&ModelConfig::default()).unwrap();
        assert_eq!(s.len(), 8);
        let labels: std::collections::BTreeSet<String> = s.iter().map(|x| x.label()).collect();
        assert_eq!(labels.len(), 8);
        assert_eq!(s[6].label(), "har-dis-har");
    }
}
