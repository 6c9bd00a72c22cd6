use idattn::experiment::{synth_split, train_model};
use idattn::flow::{fm_loss, fm_loss_and_grads, sample_edit, AttentionMode, SamplerConfig, TrainBatch, Trainer};
use idattn::io::Checkpoint;
use idattn::model::{ModelConfig, ModelState, TrainMode};
use idattn::numerics::AdamConfig;
use idattn::synth::{EditSample, Split, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        image_h: 24,
        image_w: 24,
        d_model: 16,
        heads: 2,
        num_layers: 2,
        early_count: 0,
        late_count: 1,
        embed_dim: 8,
        time_dim: 8,
        utility_len: 4,
        ..ModelConfig::default()
    }
}

fn data(n: usize) -> Vec<EditSample> {
    let synth = SynthConfig {
        width: 24,
        height: 24,
        max_boxes: 2,
        ..SynthConfig::default()
    };
    synth_split(&synth, Split::Train, n, 4).unwrap().into_iter().map(|s| s.sample).collect()
}

fn batch(model: &ModelState, d: &[EditSample], seed: u64) -> TrainBatch {
    let ex: Vec<_> = d.iter().map(|s| (&s.reference, &s.target, &s.boxes[..])).collect();
    TrainBatch::draw(&model.config, &ex, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let mut model = ModelState::init(small(), 1).unwrap();
    let d = data(4);
    let b = batch(&model, &d, 0);
    let att = AttentionMode::default_for(&model.config);
    let mut tr = Trainer::new(&model, TrainMode::Full, att.clone(), AdamConfig { lr: 3e-3, ..AdamConfig::default() });
    let first = fm_loss(&model, &b, &att).unwrap();
    for _ in 0..40 {
        tr.step(&mut model, &b).unwrap();
    }
    let last = fm_loss(&model, &b, &att).unwrap();
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn tape_loss_equals_forward_loss() {
    let model = ModelState::random(small(), 2).unwrap();
    let b = batch(&model, &data(3), 1);
    let att = AttentionMode::Unmasked;
    let (l, _) = fm_loss_and_grads(&model, &b, &att, TrainMode::Full).unwrap();
    assert!((l - fm_loss(&model, &b, &att).unwrap()).abs() < 1e-9 * l.abs().max(1.0));
}

#[test]
fn fresh_lora_reproduces_base_loss_and_freezes_base() {
    let base = ModelState::random(small(), 3).unwrap();
    let mut adapted = base.clone();
    adapted.lora_attach_all(4, 4.0, 9).unwrap();
    let b = batch(&base, &data(3), 2);
    let att = AttentionMode::default_for(&base.config);
    assert_eq!(fm_loss(&base, &b, &att).unwrap(), fm_loss(&adapted, &b, &att).unwrap());

    let mode = TrainMode::Lora { train_embeddings: false };
    let mut tr = Trainer::new(&adapted, mode, att.clone(), AdamConfig::default());
    for _ in 0..3 {
        tr.step(&mut adapted, &b).unwrap();
    }
    assert_eq!(adapted.params, base.params);
    assert!(adapted.adapters.iter().any(|a| a.b.sq_norm() > 0.0));

    let before = fm_loss(&adapted, &b, &att).unwrap();
    let mut merged = adapted.clone();
    merged.lora_merge().unwrap();
    assert!(merged.adapters.is_empty());
    assert!((fm_loss(&merged, &b, &att).unwrap() - before).abs() < 1e-9 * before);
}

#[test]
fn duplicate_adapters_rejected() {
    let mut m = ModelState::random(small(), 3).unwrap();
    m.lora_attach(&[0], 2, 2.0, 1).unwrap();
    assert!(m.lora_attach(&[0, 1], 2, 2.0, 1).is_err());
    assert!(m.lora_attach(&[1], 0, 2.0, 1).is_err());
}

#[test]
fn resumed_training_matches_unbroken_run() {
    let d = data(6);
    let att = AttentionMode::default_for(&small());
    let run = |stop: Option<u64>| {
        let mut model = ModelState::init(small(), 5).unwrap();
        let mut tr = Trainer::new(&model, TrainMode::Full, att.clone(), AdamConfig::default());
        let mut losses = Vec::new();
        if let Some(s) = stop {
            train_model(&mut model, &mut tr, &d, s, 2, 8, |_, _, _, l| {
                losses.push(l);
                Ok(())
            })
            .unwrap();
            let ck = Checkpoint::decode(&Checkpoint { model, trainer: Some(tr) }.encode()).unwrap();
            model = ck.model;
            tr = ck.trainer.unwrap();
        }
        train_model(&mut model, &mut tr, &d, 6, 2, 8, |_, _, _, l| {
            losses.push(l);
            Ok(())
        })
        .unwrap();
        (model, losses)
    };
    let (m1, l1) = run(None);
    let (m2, l2) = run(Some(3));
    assert_eq!(l1.len(), 6);
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
}

#[test]
fn sampling_is_seeded_and_handles_zero_instances() {
    let model = ModelState::random(small(), 6).unwrap();
    let d = data(1);
    let sampler = SamplerConfig {
        steps: 2,
        attention: AttentionMode::default_for(&model.config),
    };
    let a = sample_edit(&model, &d[0].reference, &d[0].boxes, &sampler, 4).unwrap();
    let b = sample_edit(&model, &d[0].reference, &d[0].boxes, &sampler, 4).unwrap();
    assert_eq!(a, b);
    sample_edit(&model, &d[0].reference, &[], &sampler, 4).unwrap();
}
