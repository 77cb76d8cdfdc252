//! Run directory:
//!
//! ```text
//! <run>/config.toml                  config echo, written before training
//! <run>/metrics.tsv                  one row per step
//! <run>/manifest.json                config hash, latest step, checkpoints
//! <run>/checkpoints/step_NNNNNNN.safetensors
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
use super::{train_one, StepRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::shapesdata::Dataset;

const KEEP_CHECKPOINTS: usize = 3;

pub fn config_hash(cfg: &TrainConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config_hash: String,
    pub step: u64,
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Option<Self>> {
        let p = run_dir.join("manifest.json");
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|source| Error::Json {
                context: p.display().to_string(),
                source,
            })
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        let p = run_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "run manifest".into(),
            source,
        })?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn latest_checkpoint(&self, run_dir: &Path) -> Option<PathBuf> {
        self.checkpoints.last().map(|c| run_dir.join(c))
    }
}

/// Append-only tab-separated metrics log.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

pub const METRICS_HEADER: &str = "step\ttask\tseg\tdice\ttotal\tgrad_norm";

impl MetricsLog {
    /// Open the log, dropping rows at or beyond `from_step` (left over from
    /// an interrupted run) so a resumed run writes each step exactly once.
    pub fn open(path: &Path, from_step: u64) -> Result<Self> {
        let mut kept = vec![METRICS_HEADER.to_string()];
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(path, e))?;
                let step: Option<u64> = line.split('\t').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < from_step) {
                    kept.push(line);
                }
            }
        }
        std::fs::write(path, kept.join("\n") + "\n").map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let dice = r
            .loss
            .dice
            .map_or_else(|| "-".to_string(), |d| format!("{d:.6}"));
        writeln!(
            self.file,
            "{}\tinpainting={};text_to_image={}\t{:.6}\t{}\t{:.6}\t{:.4}",
            r.step, r.inpainting, r.text_to_image, r.loss.seg, dice, r.loss.total, r.grad_norm
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

/// Train (or resume) in `run_dir` until `config.total_steps`, checkpointing
/// every `checkpoint_every` steps and at the end. `progress` sees every
/// step record.
pub fn run_training(
    config: &TrainConfig,
    run_dir: &Path,
    data: &Dataset,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainState> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::config("dataset", "is empty"));
    }
    if data.spec.resolution != config.model.resolution {
        return Err(Error::config(
            "model.resolution",
            format!(
                "dataset is {}px, model expects {}px",
                data.spec.resolution, config.model.resolution
            ),
        ));
    }
    let vocab = data.spec.vocabulary()?;
    if vocab.size() != config.model.vocab_size {
        return Err(Error::config(
            "model.vocab_size",
            format!("dataset vocabulary has {} tokens", vocab.size()),
        ));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let echo = run_dir.join("config.toml");
    std::fs::write(&echo, config.to_toml()).map_err(|e| Error::io(&echo, e))?;

    let mut manifest = RunManifest {
        format: CHECKPOINT_FORMAT.into(),
        config_hash: config_hash(config),
        step: 0,
        checkpoints: Vec::new(),
    };
    let mut state = match RunManifest::read(run_dir)?
        .and_then(|m| m.latest_checkpoint(run_dir).map(|p| (m, p)))
    {
        Some((old, ckpt)) => {
            let mut s = load_checkpoint(&ckpt)?;
            let comparable = |c: &TrainConfig| TrainConfig {
                total_steps: 0,
                checkpoint_every: 0,
                ..c.clone()
            };
            if comparable(&s.config) != comparable(config) {
                return Err(Error::config(
                    "config",
                    format!(
                        "{} holds a run with a different configuration",
                        run_dir.display()
                    ),
                ));
            }
            log::info!("resuming from {} at step {}", ckpt.display(), s.step);
            s.config = config.clone();
            manifest.checkpoints = old.checkpoints;
            manifest.step = s.step;
            s
        }
        None => TrainState::new(config.clone())?,
    };
    let sched = state.schedule()?;
    let mut metrics = MetricsLog::open(&run_dir.join("metrics.tsv"), state.step)?;
    while state.step < config.total_steps {
        let rec = train_one(&mut state, &data.samples, &vocab, &sched)?;
        metrics.append(&rec)?;
        progress(&rec);
        let done = state.step == config.total_steps;
        if done || (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0) {
            let name = format!("checkpoints/step_{:07}.safetensors", state.step);
            save_checkpoint(&state, &run_dir.join(&name))?;
            manifest.checkpoints.retain(|c| c != &name);
            manifest.checkpoints.push(name);
            while manifest.checkpoints.len() > KEEP_CHECKPOINTS {
                let old = manifest.checkpoints.remove(0);
                let _ = std::fs::remove_file(run_dir.join(old));
            }
            manifest.step = state.step;
            manifest.write(run_dir)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{toy_config, toy_data};
    use super::*;

    fn rows(run: &Path) -> Vec<String> {
        std::fs::read_to_string(run.join("metrics.tsv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(String::from)
            .collect()
    }

    #[test]
    fn single_step_run_writes_one_row_and_one_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            total_steps: 1,
            ..toy_config()
        };
        run_training(&cfg, dir.path(), &toy_data(8), |_| {}).unwrap();
        assert_eq!(rows(dir.path()).len(), 1);
        let m = RunManifest::read(dir.path()).unwrap().unwrap();
        assert_eq!(m.checkpoints.len(), 1);
        assert_eq!(m.step, 1);
        assert_eq!(m.config_hash, config_hash(&cfg));
        assert!(dir.path().join("config.toml").exists());
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = toy_data(8);
        let full = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            total_steps: 4,
            checkpoint_every: 2,
            ..toy_config()
        };
        run_training(&cfg, full.path(), &data, |_| {}).unwrap();
        let split = tempfile::tempdir().unwrap();
        run_training(
            &TrainConfig {
                total_steps: 2,
                ..cfg.clone()
            },
            split.path(),
            &data,
            |_| {},
        )
        .unwrap();
        run_training(&cfg, split.path(), &data, |_| {}).unwrap();
        assert_eq!(rows(full.path()), rows(split.path()));
    }

    #[test]
    fn resume_with_different_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(8);
        let cfg = TrainConfig {
            total_steps: 1,
            ..toy_config()
        };
        run_training(&cfg, dir.path(), &data, |_| {}).unwrap();
        let other = TrainConfig { seed: 5, ..cfg };
        assert!(run_training(&other, dir.path(), &data, |_| {}).is_err());
    }
}
