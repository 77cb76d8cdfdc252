//! Small CNN that classifies local crops into shape classes. It stands in for
//! a prompt-consistency score: a generated object counts as aligned when the
//! probe's class equals the prompted class.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{local_crop, EVAL_RESOLUTION};
use crate::error::{Error, Result};
use crate::nn::{init_normal, Adam, AdamConfig, Graph, ParamId, ParamStore, Var};
use crate::rng::keyed_rng;
use crate::shapesdata::{generate_sample, DatasetSpec};
use crate::tensor::Tensor;

pub const PROBE_FORMAT: &str = "maskdiff-probe/1";
/// Held-out accuracy below which probe-based scores are refused.
pub const PROBE_MIN_ACCURACY: f64 = 0.95;
/// First dataset id of the probe's training split (disjoint from the
/// training and held-out splits).
pub const PROBE_FIRST_ID: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub train_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_count: 2000,
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

const LAYERS: [(&str, usize, usize, usize); 3] = [
    ("conv1", 3, 16, 1),
    ("conv2", 16, 32, 2),
    ("conv3", 32, 64, 2),
];

#[derive(Debug, Clone)]
pub struct Probe {
    pub classes: Vec<String>,
    pub config: ProbeConfig,
    pub held_out_accuracy: Option<f64>,
    params: ParamStore<f32>,
}

fn id(p: &ParamStore<f32>, name: &str) -> ParamId {
    p.id(name)
        .expect("probe parameter registered in Probe::new")
}

impl Probe {
    pub fn new(classes: Vec<String>, config: ProbeConfig) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::config("classes", "probe needs at least two classes"));
        }
        let mut rng = keyed_rng(config.seed, &[0x9_0BE]);
        let mut params = ParamStore::new();
        for (name, cin, cout, _) in LAYERS {
            params.add(
                format!("{name}.weight"),
                init_normal(&[cout, cin, 3, 3], cin * 9, 2f64.sqrt(), &mut rng),
            );
            params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
        params.add(
            "fc.weight",
            init_normal(&[classes.len(), 64], 64, 1.0, &mut rng),
        );
        params.add("fc.bias", Tensor::zeros(&[classes.len()]));
        Ok(Self {
            classes,
            config,
            held_out_accuracy: None,
            params,
        })
    }

    fn record(&self, g: &mut Graph<f32>, x: Tensor<f32>) -> Result<Var> {
        let mut h = g.input(x);
        for (name, _, _, stride) in LAYERS {
            let w = g.param(&self.params, id(&self.params, &format!("{name}.weight")));
            let b = g.param(&self.params, id(&self.params, &format!("{name}.bias")));
            let c = g.conv2d(h, w, Some(b), stride, 1)?;
            h = g.relu(c);
        }
        let pooled = g.global_avg_pool(h)?;
        let w = g.param(&self.params, id(&self.params, "fc.weight"));
        let b = g.param(&self.params, id(&self.params, "fc.bias"));
        g.linear(pooled, w, Some(b))
    }

    /// `(B, 3, R, R)` crops to `(B, classes)` logits.
    pub fn logits(&self, batch: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let out = self.record(&mut g, batch)?;
        Ok(g.value(out).clone())
    }

    pub fn classify(&self, crops: &[Tensor<f32>]) -> Result<Vec<usize>> {
        let nc = self.classes.len();
        let mut out = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(64) {
            let l = self.logits(Tensor::stack(chunk)?)?;
            out.extend(l.data().chunks(nc).map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            }));
        }
        Ok(out)
    }

    /// Fraction of crops classified as their label.
    pub fn accuracy(&self, crops: &[Tensor<f32>], labels: &[usize]) -> Result<f64> {
        if crops.len() != labels.len() || crops.is_empty() {
            return Err(Error::Shape(format!(
                "{} crops vs {} labels",
                crops.len(),
                labels.len()
            )));
        }
        let pred = self.classify(crops)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }

    /// Mean cross-entropy of one minibatch and an Adam step on it.
    fn train_batch(
        &mut self,
        opt: &mut Adam<f32>,
        crops: &[&Tensor<f32>],
        labels: &[usize],
    ) -> Result<f64> {
        let owned: Vec<Tensor<f32>> = crops.iter().map(|t| (*t).clone()).collect();
        let mut g = Graph::new();
        let out = self.record(&mut g, Tensor::stack(&owned)?)?;
        let nc = self.classes.len();
        let b = labels.len();
        let mut loss = 0.0;
        let mut seed = Tensor::zeros(&[b, nc]);
        for (k, row) in g.value(out).data().chunks(nc).enumerate() {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            loss += m + z.ln() - row[labels[k]] as f64;
            for (c, &v) in row.iter().enumerate() {
                let p = (v as f64 - m).exp() / z;
                let y = if c == labels[k] { 1.0 } else { 0.0 };
                seed.data_mut()[k * nc + c] = ((p - y) / b as f64) as f32;
            }
        }
        let grads = g.backward(&[(out, seed)])?;
        let pg = g.param_grads(&grads, &self.params);
        opt.update(&mut self.params, &pg);
        Ok(loss / b as f64)
    }

    pub fn fit(&mut self, crops: &[Tensor<f32>], labels: &[usize]) -> Result<f64> {
        if crops.len() != labels.len() || crops.is_empty() {
            return Err(Error::Shape(format!(
                "{} crops vs {} labels",
                crops.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes.len()) {
            return Err(Error::Range(format!(
                "label {bad} for {} classes",
                self.classes.len()
            )));
        }
        let mut opt = Adam::new(
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
            &self.params,
        );
        let mut order: Vec<usize> = (0..crops.len()).collect();
        let mut last = f64::NAN;
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut keyed_rng(
                self.config.seed,
                &[0x9_0BE, 1, epoch as u64],
            ));
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size.max(1)) {
                let xs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &crops[i]).collect();
                let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                total += self.train_batch(&mut opt, &xs, &ys)? * chunk.len() as f64;
            }
            last = total / crops.len() as f64;
            log::info!("probe epoch {epoch}: cross-entropy {last:.4}");
            if !last.is_finite() {
                return Err(Error::NonFinite(format!("probe loss at epoch {epoch}")));
            }
        }
        Ok(last)
    }

    /// Measure and store the accuracy on real held-out crops.
    pub fn validate(&mut self, crops: &[Tensor<f32>], labels: &[usize]) -> Result<f64> {
        let acc = self.accuracy(crops, labels)?;
        self.held_out_accuracy = Some(acc);
        Ok(acc)
    }

    pub fn ensure_reliable(&self) -> Result<()> {
        match self.held_out_accuracy {
            Some(a) if a >= PROBE_MIN_ACCURACY => Ok(()),
            Some(a) => Err(Error::Refused(format!(
                "probe held-out accuracy {a:.4} is below {PROBE_MIN_ACCURACY}"
            ))),
            None => Err(Error::Refused(
                "probe was never validated on held-out data".into(),
            )),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    t.shape().to_vec(),
                    t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
                )
            })
            .collect();
        let views = blobs
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::checkpoint(n.clone(), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), PROBE_FORMAT.to_string());
        meta.insert("classes".to_string(), self.classes.join(","));
        let cfg = serde_json::to_string(&self.config).map_err(|source| Error::Json {
            context: "probe config".into(),
            source,
        })?;
        meta.insert("config".to_string(), cfg);
        if let Some(a) = self.held_out_accuracy {
            meta.insert("held_out_accuracy".to_string(), a.to_string());
        }
        let bytes = safetensors::serialize(views, Some(meta))
            .map_err(|e| Error::checkpoint("archive", e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::checkpoint("archive", e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::checkpoint("metadata", "missing"))?;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::checkpoint(k, "missing"));
        if field("format")? != PROBE_FORMAT {
            return Err(Error::checkpoint(
                "format",
                format!("expected {PROBE_FORMAT:?}"),
            ));
        }
        let classes = field("classes")?.split(',').map(String::from).collect();
        let config = serde_json::from_str(field("config")?)
            .map_err(|e| Error::checkpoint("config", e.to_string()))?;
        let mut probe = Self::new(classes, config)?;
        probe.held_out_accuracy = meta
            .get("held_out_accuracy")
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::checkpoint("held_out_accuracy", "not a number"))
            })
            .transpose()?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::checkpoint("archive", e.to_string()))?;
        if st.len() != probe.params.len() {
            return Err(Error::checkpoint(
                "tensors",
                format!("{} tensors, expected {}", st.len(), probe.params.len()),
            ));
        }
        let names: Vec<(String, Vec<usize>)> = probe
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let view = st
                .tensor(&name)
                .map_err(|e| Error::checkpoint(&name, e.to_string()))?;
            if view.dtype() != Dtype::F32 || view.shape() != shape {
                return Err(Error::checkpoint(
                    &name,
                    format!(
                        "{:?} {:?}, expected F32 {shape:?}",
                        view.dtype(),
                        view.shape()
                    ),
                ));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            probe
                .params
                .assign(&name, Tensor::from_vec(&shape, data)?)?;
        }
        Ok(probe)
    }
}

/// Local crops of real samples (cropped at the object's bounding box) with
/// their class labels.
pub fn real_crops(spec: &DatasetSpec) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
    let mut crops = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for id in spec.ids() {
        let s = generate_sample(spec, id)?;
        crops.push(local_crop(&s.image, &s.mask, EVAL_RESOLUTION)?);
        labels.push(s.meta.class);
    }
    Ok((crops, labels))
}

/// Train on a dedicated split generated from `base` and validate on its
/// held-out split.
pub fn train_probe(base: &DatasetSpec, config: &ProbeConfig) -> Result<Probe> {
    let train = DatasetSpec {
        count: config.train_count,
        first_id: PROBE_FIRST_ID,
        ..base.clone()
    };
    let (crops, labels) = real_crops(&train)?;
    let mut probe = Probe::new(base.classes.clone(), config.clone())?;
    probe.fit(&crops, &labels)?;
    let (vc, vl) = real_crops(&base.held_out())?;
    let acc = probe.validate(&vc, &vl)?;
    log::info!("probe held-out accuracy {acc:.4}");
    Ok(probe)
}

/// Fraction of generated crops whose probe class equals the prompted class.
/// Refused when the probe is not reliable on real data.
pub fn probe_accuracy(
    probe: &Probe,
    crops: &[Tensor<f32>],
    prompt_classes: &[usize],
) -> Result<f64> {
    probe.ensure_reliable()?;
    probe.accuracy(crops, prompt_classes)
}
