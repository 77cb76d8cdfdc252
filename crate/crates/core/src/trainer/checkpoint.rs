//! Checkpoints are safetensors archives. Tensors are stored as
//! `param.<name>`, `adam.m.<name>` and `adam.v.<name>` (little-endian f32);
//! the header metadata carries the format tag, the training config, the step,
//! the optimizer step and the schedule. Weights-only exports omit the
//! `adam.*` tensors and can be sampled from but not resumed.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{TrainConfig, TrainState};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::schedule::ScheduleConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "maskdiff-ckpt/1";

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_archive(state, path, true)
}

/// Parameters, config and step only.
pub fn export_weights(state: &TrainState, path: &Path) -> Result<()> {
    write_archive(state, path, false)
}

fn write_archive(state: &TrainState, path: &Path, with_optimizer: bool) -> Result<()> {
    let params = state.model.params();
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(3 * params.len());
    for (i, (name, t)) in params.iter().enumerate() {
        blobs.push((format!("param.{name}"), t.shape().to_vec(), to_bytes(t)));
        if with_optimizer {
            blobs.push((
                format!("adam.m.{name}"),
                t.shape().to_vec(),
                to_bytes(&state.optimizer.m[i]),
            ));
            blobs.push((
                format!("adam.v.{name}"),
                t.shape().to_vec(),
                to_bytes(&state.optimizer.v[i]),
            ));
        }
    }
    let views = blobs
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::checkpoint(n.clone(), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let json = |v: serde_json::Result<String>, what: &str| {
        v.map_err(|source| Error::Json {
            context: what.into(),
            source,
        })
    };
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert(
        "config".to_string(),
        json(serde_json::to_string(&state.config), "config")?,
    );
    meta.insert(
        "schedule".to_string(),
        json(serde_json::to_string(&state.config.schedule), "schedule")?,
    );
    meta.insert("step".to_string(), state.step.to_string());
    meta.insert(
        "optimizer_step".to_string(),
        state.optimizer.step.to_string(),
    );
    meta.insert(
        "optimizer".to_string(),
        if with_optimizer { "adam" } else { "omitted" }.to_string(),
    );
    let bytes = safetensors::serialize(views, Some(meta))
        .map_err(|e| Error::checkpoint("archive", e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_tensor(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let view = st
        .tensor(name)
        .map_err(|e| Error::checkpoint(name, e.to_string()))?;
    if view.dtype() != Dtype::F32 {
        return Err(Error::checkpoint(
            name,
            format!("dtype {:?}, expected F32", view.dtype()),
        ));
    }
    if view.shape() != shape {
        return Err(Error::checkpoint(
            name,
            format!("shape {:?}, expected {shape:?}", view.shape()),
        ));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

struct Archive {
    state: TrainState,
    optimizer: bool,
}

fn read_archive(path: &Path, want_optimizer: bool) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::checkpoint("archive", e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::checkpoint("metadata", "missing"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| Error::checkpoint(k, "missing"));
    let format = field("format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::checkpoint(
            "format",
            format!("{format:?}, expected {CHECKPOINT_FORMAT:?}"),
        ));
    }
    let config: TrainConfig = serde_json::from_str(field("config")?)
        .map_err(|e| Error::checkpoint("config", e.to_string()))?;
    let schedule: ScheduleConfig = serde_json::from_str(field("schedule")?)
        .map_err(|e| Error::checkpoint("schedule", e.to_string()))?;
    if schedule != config.schedule {
        return Err(Error::checkpoint(
            "schedule",
            "disagrees with the stored config",
        ));
    }
    let parse_u64 = |k: &str| -> Result<u64> {
        field(k)?
            .parse()
            .map_err(|_| Error::checkpoint(k, "not an integer"))
    };
    let step = parse_u64("step")?;
    let opt_step = parse_u64("optimizer_step")?;
    let has_optimizer = meta.get("optimizer").is_none_or(|o| o == "adam");
    if want_optimizer && !has_optimizer {
        return Err(Error::checkpoint(
            "optimizer",
            "weights-only export cannot be resumed",
        ));
    }

    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::checkpoint("archive", e.to_string()))?;
    let mut state = TrainState::new(config)?;
    let names: Vec<(String, Vec<usize>)> = state
        .model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let expected = if has_optimizer { 3 } else { 1 } * names.len();
    if st.len() != expected {
        return Err(Error::checkpoint(
            "tensors",
            format!("{} tensors, expected {expected}", st.len()),
        ));
    }
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        let p = read_tensor(&st, &format!("param.{name}"), shape)?;
        state.model.params_mut().assign(name, p)?;
        if has_optimizer {
            m.push(read_tensor(&st, &format!("adam.m.{name}"), shape)?);
            v.push(read_tensor(&st, &format!("adam.v.{name}"), shape)?);
        }
    }
    if has_optimizer {
        state.optimizer = Adam {
            config: state.config.optimizer,
            step: opt_step,
            m,
            v,
        };
    }
    state.step = step;
    Ok(Archive {
        state,
        optimizer: has_optimizer,
    })
}

/// Full training state, for resuming.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    read_archive(path, true).map(|a| a.state)
}

/// Model, config and step from a checkpoint or a weights-only export.
pub fn load_model(path: &Path) -> Result<(Denoiser<f32>, TrainConfig, u64)> {
    let a = read_archive(path, false)?;
    log::debug!(
        "{}: optimizer state {}",
        path.display(),
        if a.optimizer { "present" } else { "absent" }
    );
    Ok((a.state.model, a.state.config, a.state.step))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{toy_config, toy_data};
    use super::super::{train_one, TrainState};
    use super::*;
    use crate::denoiser::Vocabulary;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(8);
        let vocab = Vocabulary::default();
        let mut state = TrainState::new(toy_config()).unwrap();
        let sched = state.schedule().unwrap();
        train_one(&mut state, &data.samples, &vocab, &sched).unwrap();
        let p = dir.path().join("c.safetensors");
        save_checkpoint(&state, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.step, 1);
        assert_eq!(back.config, state.config);
        assert_eq!(back.optimizer.step, state.optimizer.step);
        for (a, b) in back
            .model
            .params()
            .tensors()
            .iter()
            .zip(state.model.params().tensors())
        {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.optimizer.m, state.optimizer.m);
        assert_eq!(back.optimizer.v, state.optimizer.v);
        assert_eq!(back.schedule().unwrap(), sched);
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(8);
        let vocab = Vocabulary::default();
        let mut state = TrainState::new(toy_config()).unwrap();
        let sched = state.schedule().unwrap();
        for _ in 0..3 {
            train_one(&mut state, &data.samples, &vocab, &sched).unwrap();
        }
        let p = dir.path().join("c.safetensors");
        save_checkpoint(&state, &p).unwrap();
        let straight = train_one(&mut state, &data.samples, &vocab, &sched).unwrap();
        let mut resumed = load_checkpoint(&p).unwrap();
        let again = train_one(&mut resumed, &data.samples, &vocab, &sched).unwrap();
        assert_eq!(straight.step, again.step);
        assert!((straight.loss.total - again.loss.total).abs() <= 1e-6);
    }

    #[test]
    fn weights_export_loads_for_inference_only() {
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState::new(toy_config()).unwrap();
        let p = dir.path().join("w.safetensors");
        export_weights(&state, &p).unwrap();
        let (model, cfg, step) = load_model(&p).unwrap();
        assert_eq!(step, 0);
        assert_eq!(cfg, state.config);
        assert_eq!(model.params().tensors(), state.model.params().tensors());
        assert!(load_checkpoint(&p).is_err());
        let full = dir.path().join("c.safetensors");
        save_checkpoint(&state, &full).unwrap();
        assert_eq!(
            load_model(&full).unwrap().0.params().tensors(),
            state.model.params().tensors()
        );
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState::new(toy_config()).unwrap();
        let p = dir.path().join("c.safetensors");
        save_checkpoint(&state, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let needle = CHECKPOINT_FORMAT.as_bytes();
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let mut bad = bytes.clone();
        bad[pos + needle.len() - 1] = b'9';
        std::fs::write(&p, bad).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "format"),
            other => panic!("expected format error, got {:?}", other.map(|s| s.step)),
        }
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
