use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use idattn::experiment::{evaluate, schedule_ablation, train_model};
use idattn::flow::{sample_edit, AttentionMode, PreparedTask, SamplerConfig, Trainer};
use idattn::io::pnm::{read_ppm, write_pgm, write_ppm};
use idattn::io::{parse_attention, Checkpoint, Instructions, RunConfig};
use idattn::masks::mask_to_image;
use idattn::metrics::elo::{elo as rate, parse_jsonl, EloConfig};
use idattn::metrics::{comparison_csv, EvalReport};
use idattn::model::{ModelConfig, ModelState, TrainMode};
use idattn::partition::PartitionLayout;
use idattn::seed::derive;
use idattn::synth::{gen_dataset, load_split, EditSample, Split};
use serde_json::json;

use crate::{DumpMasksArgs, EditArgs, EloArgs, EvalArgs, GenDataArgs, TrainArgs};

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

/// A dataset root resolves to its `split` directory.
fn split_dir(path: &Path, split: Split) -> PathBuf {
    let sub = path.join(split.name());
    if sub.is_dir() {
        sub
    } else {
        path.to_owned()
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn check_image_dims(cfg: &ModelConfig, w: usize, h: usize, what: &str) -> Result<()> {
    if w != cfg.image_w || h != cfg.image_h {
        bail!(idattn::Error::Shape(format!(
            "{what} is {w}x{h}, the model expects {}x{}",
            cfg.image_w, cfg.image_h
        )));
    }
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut synth = load_config(a.config.as_deref())?.synth;
    if let Some(m) = a.max_boxes {
        synth.max_boxes = m;
    }
    let manifest = gen_dataset(&synth, a.n_train, a.n_test, a.seed, &a.out)?;
    println!(
        "wrote {} train and {} test samples to {}",
        manifest.train.len(),
        manifest.test.len(),
        a.out.display()
    );
    for split in [Split::Train, Split::Test] {
        let h = manifest.box_histogram(split);
        let cols: Vec<String> = h.iter().enumerate().map(|(i, c)| format!("{}:{c}", i + 1)).collect();
        println!("{} boxes per sample {}", split.name(), cols.join(" "));
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data_path = a
        .data
        .clone()
        .or_else(|| cfg.data.train.clone())
        .context("no training data: pass --data or set data.train")?;
    let data: Vec<EditSample> = load_split(&split_dir(&data_path, Split::Train))?
        .into_iter()
        .map(|s| s.sample)
        .collect();

    let (mut model, mut trainer) = if let Some(p) = &a.resume {
        let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
        let tr = ck
            .trainer
            .with_context(|| format!("{} holds no optimizer state to resume", p.display()))?;
        (ck.model, tr)
    } else if a.lora {
        let base = a.base.as_deref().expect("clap requires --base");
        let mut model = Checkpoint::load(base)
            .with_context(|| format!("loading base {}", base.display()))?
            .model;
        model.lora_attach_all(cfg.lora.rank, cfg.lora.alpha, derive(cfg.seed, &[3]))?;
        let attention = parse_attention(&cfg.schedule, &model.config)?;
        let mode = TrainMode::Lora {
            train_embeddings: cfg.lora.train_embeddings,
        };
        let tr = Trainer::new(&model, mode, attention, cfg.train.adam);
        (model, tr)
    } else {
        let model = ModelState::init(cfg.model.clone(), derive(cfg.seed, &[0]))?;
        let tr = Trainer::new(&model, TrainMode::Full, cfg.attention()?, cfg.train.adam);
        (model, tr)
    };
    for s in &data {
        check_image_dims(&model.config, s.reference.width(), s.reference.height(), "training image")?;
    }

    std::fs::create_dir_all(&a.out)?;
    let mut log = BufWriter::new(File::create(a.out.join("loss.csv"))?);
    writeln!(log, "step,loss")?;
    let steps = a.steps.unwrap_or(cfg.train.steps);
    let start = trainer.adam.step_count;
    let every = cfg.train.checkpoint_every;
    let progress = (steps.saturating_sub(start) / 20).max(1);
    eprintln!(
        "training {} parameters ({} trainable tensors) from step {start} to {steps}",
        model.num_parameters(),
        trainer.param_ids().len()
    );
    train_model(&mut model, &mut trainer, &data, steps, cfg.train.batch, derive(cfg.seed, &[1]), |m, tr, step, loss| {
        writeln!(log, "{step},{loss}")?;
        if (step - start) % progress == 0 {
            eprintln!("step {step} loss {loss:.5}");
        }
        if every > 0 && step % every == 0 && step < steps {
            Checkpoint {
                model: m.clone(),
                trainer: Some(tr.clone()),
            }
            .save(&a.out.join(format!("step-{step:06}.idfm")))?;
        }
        Ok(())
    })?;
    log.flush()?;

    let ck = if a.merge {
        model.lora_merge()?;
        Checkpoint { model, trainer: None }
    } else {
        Checkpoint {
            model,
            trainer: Some(trainer),
        }
    };
    let out = a.out.join("model.idfm");
    ck.save(&out)?;
    println!("saved {}", out.display());
    Ok(())
}

pub fn edit(a: EditArgs) -> Result<()> {
    let model = Checkpoint::load(&a.ckpt)
        .with_context(|| format!("loading {}", a.ckpt.display()))?
        .model;
    let ins = Instructions::load(&a.instructions)?;
    let image_path = a.image.clone().unwrap_or_else(|| {
        a.instructions
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&ins.image)
    });
    let reference = read_ppm(&image_path).with_context(|| format!("reading {}", image_path.display()))?;
    check_image_dims(&model.config, reference.width(), reference.height(), "reference image")?;
    ins.check_bounds(reference.width(), reference.height())?;
    let sampler = SamplerConfig {
        steps: a.steps,
        attention: parse_attention(&a.schedule, &model.config)?,
    };
    let edited = sample_edit(&model, &reference, &ins.boxes, &sampler, a.seed)?;
    write_ppm(&a.out, &edited)?;
    println!(
        "edited {} instance(s) with {} in {} steps -> {}",
        ins.boxes.len(),
        sampler.attention.label(),
        a.steps,
        a.out.display()
    );
    Ok(())
}

fn print_aggregate(r: &EvalReport) {
    let g = &r.aggregate;
    println!(
        "{:<12} n={:<4} cer={:.4} delta_cer={:.4} mae_b={:.4} mse_b={:.4} ssim_b={} ar={:.2}",
        r.label,
        g.count,
        g.cer,
        g.delta_cer,
        g.mae_b,
        g.mse_b,
        g.ssim_b.map_or("n/a".into(), |v| format!("{v:.4}")),
        g.attempt_rate
    );
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut samples = load_split(&split_dir(&a.data, Split::Test))?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let model = match &a.ckpt {
        Some(p) if !a.use_targets => Some(
            Checkpoint::load(p)
                .with_context(|| format!("loading {}", p.display()))?
                .model,
        ),
        _ => None,
    };
    if let Some(m) = &model {
        for s in &samples {
            check_image_dims(&m.config, s.sample.reference.width(), s.sample.reference.height(), "test image")?;
        }
    }

    if a.all_schedules {
        let m = model.as_ref().expect("clap requires --ckpt");
        let reports = schedule_ablation(m, &samples, a.steps, a.seed)?;
        std::fs::write(&a.report, serde_json::to_string_pretty(&json!({ "schedules": reports }))?)?;
        std::fs::write(with_suffix(&a.report, ".table.csv"), comparison_csv(&reports))?;
        for r in &reports {
            print_aggregate(r);
        }
        return Ok(());
    }

    let attention = match &model {
        Some(m) => parse_attention(&a.schedule, &m.config)?,
        None => AttentionMode::Unmasked,
    };
    let label = if model.is_some() { attention.label() } else { "targets".into() };
    let sampler = SamplerConfig {
        steps: a.steps,
        attention,
    };
    let report = evaluate(model.as_ref(), &samples, &sampler, a.seed, &label)?;
    std::fs::write(&a.report, report.to_json())?;
    std::fs::write(with_suffix(&a.report, ".samples.csv"), report.samples_csv())?;
    std::fs::write(with_suffix(&a.report, ".bins.csv"), report.bins_csv())?;
    print_aggregate(&report);
    for (n, b) in &report.bins {
        println!("  N={n:<2} n={:<4} cer={:.4} ar={:.2}", b.count, b.cer, b.attempt_rate);
    }
    Ok(())
}

fn layout_json(l: &PartitionLayout) -> serde_json::Value {
    let range = |r: &std::ops::Range<usize>| r.clone().collect::<Vec<usize>>();
    json!({
        "seq_len": l.seq_len,
        "grid_h": l.grid_h,
        "grid_w": l.grid_w,
        "patch": l.patch,
        "t_g": range(&l.t_g),
        "t_inst": l.t_inst.iter().map(range).collect::<Vec<_>>(),
        "l_u": l.l_u,
        "l_inst": l.l_inst,
        "c_u": l.c_u,
        "c_inst": l.c_inst,
    })
}

pub fn dump_masks(a: DumpMasksArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ins = Instructions::load(&a.instructions)?;
    ins.check_bounds(cfg.model.image_w, cfg.model.image_h)?;
    let task = PreparedTask::new(&cfg.model, &ins.boxes)?;
    let prefix = a.out_prefix.to_string_lossy().into_owned();
    write_pgm(Path::new(&format!("{prefix}.dis.pgm")), &mask_to_image(&task.masks.dis))?;
    write_pgm(Path::new(&format!("{prefix}.har.pgm")), &mask_to_image(&task.masks.har))?;
    std::fs::write(
        format!("{prefix}.layout.json"),
        serde_json::to_string_pretty(&layout_json(&task.layout))?,
    )?;
    println!(
        "{} instance(s), {} tokens: {prefix}.dis.pgm {prefix}.har.pgm {prefix}.layout.json",
        ins.boxes.len(),
        task.layout.seq_len
    );
    Ok(())
}

pub fn elo(a: EloArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.judgments).with_context(|| format!("reading {}", a.judgments.display()))?;
    let outcomes = parse_jsonl(&text)?;
    let cfg = EloConfig {
        k: a.k,
        init: a.init,
        epochs: a.epochs,
        seed: a.seed,
    };
    let ratings = rate(&outcomes, &cfg)?;
    let mut rows: Vec<(&String, &f64)> = ratings.iter().collect();
    rows.sort_by(|x, y| y.1.total_cmp(x.1).then_with(|| x.0.cmp(y.0)));
    println!("player\trating");
    for (p, r) in rows {
        println!("{p}\t{r:.4}");
    }
    Ok(())
}
