use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use serde::Serialize;

use maskdiff::evalkit::probe::{train_probe, PROBE_FIRST_ID};
use maskdiff::evalkit::{self, EvalEntry, PixelFeatures, Probe, PROBE_MIN_ACCURACY};
use maskdiff::imageio;
use maskdiff::maskops::precision_ladder;
use maskdiff::sampler::{sample_inpaint, SampleRequest};
use maskdiff::shapesdata::{read_dataset, read_spec, write_dataset, DatasetSpec};
use maskdiff::trainer::{export_weights, load_model, run_training, RunManifest};
use maskdiff::{LadderConfig, PrecisionMask, TrainConfig, Vocabulary};

use crate::config::{self, EvalConfig, ProbeRunConfig, SampleConfig, Split};
use crate::Command;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            common,
            count,
            split,
        } => {
            let mut spec: DatasetSpec = config::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            match split {
                Some(Split::HeldOut) => spec = spec.held_out(),
                Some(Split::Probe) => spec.first_id = PROBE_FIRST_ID,
                Some(Split::Train) | None => {}
            }
            if let Some(c) = count {
                spec.count = c;
            }
            gen_data(&spec, &common.out)
        }
        Command::Train {
            common,
            data,
            steps,
            batch_size,
            checkpoint_every,
        } => {
            let mut cfg: TrainConfig = config::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(d) = data {
                cfg.dataset = d.to_string_lossy().into_owned();
            }
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(c) = checkpoint_every {
                cfg.checkpoint_every = c;
            }
            train(&cfg, &common.out)
        }
        Command::Sample { common, args } => {
            let mut cfg: SampleConfig = config::load(common.config.as_deref())?;
            cfg.apply(&args, common.seed);
            sample(&cfg, &common.out)
        }
        Command::MaskLadder { common, mask } => {
            let mask = mask.context("--mask is required")?;
            let ladder = common
                .config
                .as_deref()
                .map(|p| config::load::<LadderConfig>(Some(p)))
                .transpose()?;
            mask_ladder(&mask, ladder, &common.out)
        }
        Command::Eval {
            common,
            samples,
            probe,
        } => {
            let mut cfg: EvalConfig = config::load(common.config.as_deref())?;
            if let Some(s) = samples {
                cfg.samples = s;
            }
            if probe.is_some() {
                cfg.probe = probe;
            }
            eval(&cfg, &common.out)
        }
        Command::TrainProbe {
            common,
            data,
            count,
            epochs,
        } => {
            let mut cfg: ProbeRunConfig = config::load(common.config.as_deref())?;
            if data.is_some() {
                cfg.data = data;
            }
            if let Some(s) = common.seed {
                cfg.probe.seed = s;
            }
            if let Some(c) = count {
                cfg.probe.train_count = c;
            }
            if let Some(e) = epochs {
                cfg.probe.epochs = e;
            }
            probe(&cfg, &common.out)
        }
    }
}

fn gen_data(spec: &DatasetSpec, out: &Path) -> Result<()> {
    config::echo(out, "gen-data.toml", spec)?;
    let records = write_dataset(spec, out)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    info!("wrote {} samples to {}", records.len(), out.display());
    Ok(())
}

fn train(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let data = read_dataset(Path::new(&cfg.dataset))
        .with_context(|| format!("reading dataset {}", cfg.dataset))?;
    let total = cfg.total_steps;
    let state = run_training(cfg, out, &data, |r| {
        if r.step % 100 == 0 || r.step == total {
            let dice = r
                .loss
                .dice
                .map_or_else(|| "-".into(), |d| format!("{d:.4}"));
            info!(
                "step {} seg {:.4} dice {dice} grad {:.3}",
                r.step, r.loss.seg, r.grad_norm
            );
        }
    })?;
    let weights = out.join("model.safetensors");
    export_weights(&state, &weights)?;
    info!(
        "trained to step {}; weights at {}",
        state.step,
        weights.display()
    );
    Ok(())
}

/// A checkpoint path, or a run directory resolved to its latest checkpoint.
fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    if !p.is_dir() {
        ensure!(p.exists(), "checkpoint {} does not exist", p.display());
        return Ok(p.to_path_buf());
    }
    let manifest =
        RunManifest::read(p)?.with_context(|| format!("{} has no manifest.json", p.display()))?;
    manifest
        .latest_checkpoint(p)
        .with_context(|| format!("{} lists no checkpoints", p.display()))
}

fn sample(cfg: &SampleConfig, out: &Path) -> Result<()> {
    for (what, p) in [
        ("checkpoint", &cfg.checkpoint),
        ("source", &cfg.source),
        ("mask", &cfg.mask),
    ] {
        ensure!(
            !p.as_os_str().is_empty(),
            "no {what} given (--{what} or `{what}` in the config)"
        );
    }
    config::echo(out, "sample.toml", cfg)?;
    let (model, train_cfg, step) = load_model(&resolve_checkpoint(&cfg.checkpoint)?)?;
    info!("model at training step {step}");
    let vocab = Vocabulary::default();
    ensure!(
        vocab.size() == model.config().vocab_size,
        "model vocabulary has {} tokens, the shapes vocabulary {}",
        model.config().vocab_size,
        vocab.size()
    );
    let condition = vocab.parse(&cfg.prompt)?;
    let source = imageio::load_rgb(&cfg.source)?;
    let mask = imageio::load_mask(&cfg.mask, false)?;
    let res = model.config().resolution;
    ensure!(
        source.shape() == [model.config().image_channels, res, res],
        "source is {:?}, the model expects {}x{}",
        source.shape(),
        res,
        res
    );
    ensure!(
        cfg.level <= model.config().levels,
        "level {} exceeds S = {}",
        cfg.level,
        model.config().levels
    );
    let sched = train_cfg.schedule.build()?;
    let req = SampleRequest {
        source,
        mask: PrecisionMask {
            mask,
            level: cfg.level,
        },
        condition,
        seed: cfg.seed,
        config: cfg.sampler.clone(),
    };
    let r = sample_inpaint(&model, &req, &sched)?;
    if !r.fallback_steps.is_empty() {
        warn!(
            "predicted mask was empty at {} steps; input mask used there",
            r.fallback_steps.len()
        );
    }
    imageio::save_rgb(&out.join("source.png"), &req.source)?;
    imageio::save_mask(&out.join("mask.png"), &req.mask.mask)?;
    imageio::save_rgb(&out.join("output.png"), &r.output)?;
    imageio::save_mask(&out.join("final_mask.png"), &r.final_mask)?;
    if let Some(trace) = &r.trace {
        let (h, w) = (res, res);
        let mut strip = vec![0f32; h * w * trace.len()];
        for (k, s) in trace.iter().enumerate() {
            let soft: Vec<f32> = s.soft_mask.iter().map(|&p| p as f32).collect();
            imageio::save_soft(
                &out.join(format!("trace/step_{:03}.png", s.index)),
                &soft,
                h,
                w,
            )?;
            for y in 0..h {
                strip[y * w * trace.len() + k * w..][..w]
                    .copy_from_slice(&soft[y * w..(y + 1) * w]);
            }
        }
        imageio::save_soft(&out.join("trace_strip.png"), &strip, h, w * trace.len())?;
    }
    let manifest = out.join(evalkit::EVAL_MANIFEST);
    if manifest.exists() {
        std::fs::remove_file(&manifest)
            .with_context(|| format!("replacing {}", manifest.display()))?;
    }
    evalkit::append_eval_entry(
        out,
        &EvalEntry {
            id: format!("seed{}", cfg.seed),
            prompt: cfg.prompt.clone(),
            source: "source.png".into(),
            mask: "mask.png".into(),
            output: "output.png".into(),
            final_mask: Some("final_mask.png".into()),
            object_mask: None,
        },
    )?;
    info!("wrote {}", out.join("output.png").display());
    Ok(())
}

#[derive(Serialize)]
struct LadderEcho<'a> {
    mask: &'a Path,
    ladder: &'a LadderConfig,
}

fn mask_ladder(mask_path: &Path, ladder: Option<LadderConfig>, out: &Path) -> Result<()> {
    let mask = imageio::load_mask(mask_path, false)?;
    let ladder =
        ladder.unwrap_or_else(|| LadderConfig::for_resolution(mask.height().max(mask.width())));
    config::echo(
        out,
        "mask-ladder.toml",
        &LadderEcho {
            mask: mask_path,
            ladder: &ladder,
        },
    )?;
    for pm in precision_ladder(&mask, &ladder)? {
        imageio::save_mask(&out.join(format!("level_{}.png", pm.level)), &pm.mask)?;
    }
    info!("wrote {} masks to {}", ladder.levels + 1, out.display());
    Ok(())
}

fn eval(cfg: &EvalConfig, out: &Path) -> Result<()> {
    ensure!(
        !cfg.samples.as_os_str().is_empty(),
        "no samples directory given (--samples)"
    );
    config::echo(out, "eval.toml", cfg)?;
    let samples = evalkit::read_eval_dir(&cfg.samples)?;
    ensure!(
        !samples.is_empty(),
        "{} lists no samples",
        cfg.samples.display()
    );
    let probe = cfg.probe.as_deref().map(Probe::load).transpose()?;
    let extractor = PixelFeatures {
        grid: cfg.feature_grid,
        channels: 3,
    };
    let echo = serde_json::to_value(cfg)?;
    let report = evalkit::evaluate(
        &samples,
        &Vocabulary::default(),
        probe.as_ref(),
        &extractor,
        echo,
    )?;
    report.write(out)?;
    print!("{}", report.summary_table());
    Ok(())
}

fn probe(cfg: &ProbeRunConfig, out: &Path) -> Result<()> {
    config::echo(out, "train-probe.toml", cfg)?;
    let spec = match &cfg.data {
        Some(d) => {
            read_spec(d).with_context(|| format!("reading dataset spec in {}", d.display()))?
        }
        None => DatasetSpec::default(),
    };
    let probe = train_probe(&spec, &cfg.probe)?;
    let path = out.join("probe.safetensors");
    probe.save(&path)?;
    let Some(acc) = probe.held_out_accuracy else {
        bail!("probe was not validated");
    };
    println!("held-out accuracy {acc:.4}");
    if acc < PROBE_MIN_ACCURACY {
        warn!("probe accuracy below {PROBE_MIN_ACCURACY}; eval will refuse it");
    }
    Ok(())
}
