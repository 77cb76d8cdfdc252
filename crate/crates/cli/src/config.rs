use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use maskdiff::evalkit::ProbeConfig;
use maskdiff::sampler::{SamplerConfig, SamplerKind};

/// Read a TOML config, or the type's defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Write the effective config into the output directory.
pub fn echo<T: Serialize>(dir: &Path, name: &str, cfg: &T) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    let text = toml::to_string(cfg).context("serializing config echo")?;
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    HeldOut,
    Probe,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SampleArgs {
    /// Checkpoint or weights file, or a run directory (latest checkpoint)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Source image (PNG)
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Input mask m_s (PNG, 0/255)
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Class label, "a <color> <class>" caption, or "" for unconditional
    #[arg(long)]
    pub prompt: Option<String>,
    /// Precision level s of the input mask
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Step index from which the predicted mask is used; 0 disables
    #[arg(long)]
    pub switch_step: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Write per-step predicted masks and a strip image
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Ancestral,
    DeterministicSkip,
}

impl From<SamplerArg> for SamplerKind {
    fn from(a: SamplerArg) -> Self {
        match a {
            SamplerArg::Ancestral => SamplerKind::Ancestral,
            SamplerArg::DeterministicSkip => SamplerKind::DeterministicSkip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub checkpoint: PathBuf,
    pub source: PathBuf,
    pub mask: PathBuf,
    pub prompt: String,
    pub level: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl SampleConfig {
    pub fn apply(&mut self, a: &SampleArgs, seed: Option<u64>) {
        let s = &mut self.sampler;
        if let Some(v) = &a.checkpoint {
            self.checkpoint = v.clone();
        }
        if let Some(v) = &a.source {
            self.source = v.clone();
        }
        if let Some(v) = &a.mask {
            self.mask = v.clone();
        }
        if let Some(v) = &a.prompt {
            self.prompt = v.clone();
        }
        if let Some(v) = a.level {
            self.level = v;
        }
        if let Some(v) = seed {
            self.seed = v;
        }
        if let Some(v) = a.steps {
            s.steps = v;
        }
        if let Some(v) = a.guidance {
            s.guidance_scale = v;
        }
        if let Some(v) = a.switch_step {
            s.mask_switch_step = v;
        }
        if let Some(v) = a.threshold {
            s.mask_switch_threshold = v;
        }
        if let Some(v) = a.sampler {
            s.kind = v.into();
        }
        if let Some(v) = a.eta {
            s.eta = v;
        }
        s.trace |= a.trace;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: PathBuf,
    pub probe: Option<PathBuf>,
    /// Pixel-feature pooling grid for FID.
    pub feature_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: PathBuf::new(),
            probe: None,
            feature_grid: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeRunConfig {
    /// Dataset directory whose spec defines the shapes; defaults if unset.
    pub data: Option<PathBuf>,
    pub probe: ProbeConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let mut cfg: SampleConfig =
            toml::from_str("prompt = \"circle\"\nlevel = 2\n[sampler]\nsteps = 20\n").unwrap();
        cfg.apply(
            &SampleArgs {
                level: Some(4),
                guidance: Some(3.0),
                ..SampleArgs::default()
            },
            Some(9),
        );
        assert_eq!(cfg.prompt, "circle");
        assert_eq!(cfg.level, 4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.sampler.steps, 20);
        assert_eq!(cfg.sampler.guidance_scale, 3.0);
    }

    #[test]
    fn parse_errors_name_line_and_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "prompt = \"circle\"\nlevle = 2\n").unwrap();
        let msg = format!("{:#}", load::<SampleConfig>(Some(&p)).unwrap_err());
        assert!(msg.contains("levle"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }
}
