//! Evaluation metrics: background error, local crops, Fréchet distance over
//! pluggable features, mask IoU and the class-probe accuracy.

pub mod probe;

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::denoiser::Vocabulary;
use crate::error::{Error, Result};
use crate::imageio;
use crate::maskops::{iou, InstanceMask};
use crate::tensor::Tensor;

pub use probe::{Probe, ProbeConfig, PROBE_MIN_ACCURACY};

/// Resolution local crops are resampled to.
pub const EVAL_RESOLUTION: usize = 32;

fn check_image_mask(image: &Tensor<f32>, mask: &InstanceMask) -> Result<(usize, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    if mask.height() != h || mask.width() != w {
        return Err(Error::Shape(format!(
            "image {h}x{w} vs mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    Ok((c, h, w))
}

/// Mean squared error over all channels of the pixels where `object_mask`
/// is 0.
pub fn background_mse(
    output: &Tensor<f32>,
    x0: &Tensor<f32>,
    object_mask: &InstanceMask,
) -> Result<f64> {
    output.ensure_same_shape(x0, "background_mse")?;
    let (c, h, w) = check_image_mask(output, object_mask)?;
    if object_mask.is_full() {
        return Err(Error::Mask(
            "background_mse: mask covers the whole image".into(),
        ));
    }
    let hw = h * w;
    let mut sum = 0.0;
    for ch in 0..c {
        for (p, &m) in object_mask.data().iter().enumerate() {
            if m == 0 {
                let d = output.data()[ch * hw + p] as f64 - x0.data()[ch * hw + p] as f64;
                sum += d * d;
            }
        }
    }
    Ok(sum / (c * (hw - object_mask.count())) as f64)
}

/// Pixels of `image` inside the bounding box of `mask`, `(C, bh, bw)`.
pub fn crop_to_bbox(image: &Tensor<f32>, mask: &InstanceMask) -> Result<Tensor<f32>> {
    let (c, _, w) = check_image_mask(image, mask)?;
    let bb = mask
        .bbox()
        .ok_or_else(|| Error::Mask("crop of an empty mask".into()))?;
    let (bh, bw) = (bb.height(), bb.width());
    let h = mask.height();
    Ok(Tensor::from_fn(&[c, bh, bw], |i| {
        let (ch, y, x) = (i / (bh * bw), (i / bw) % bh, i % bw);
        image.data()[ch * h * w + (bb.y0 + y) * w + bb.x0 + x]
    }))
}

/// Bilinear resample of a `(C, H, W)` image in `[-1, 1]`.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3()?;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in image.data().chunks(h * w) {
        // the resampler clamps float pixels to [0, 1]
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_vec(
            w as u32,
            h as u32,
            plane.iter().map(|v| (v + 1.0) * 0.5).collect(),
        )
        .ok_or_else(|| Error::Shape("resize buffer".into()))?;
        let r = imageops::resize(&buf, out_w as u32, out_h as u32, FilterType::Triangle);
        out.extend(r.into_raw().into_iter().map(|v| v * 2.0 - 1.0));
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

/// Crop to the mask's bounding box and resample to `res x res`.
pub fn local_crop(image: &Tensor<f32>, mask: &InstanceMask, res: usize) -> Result<Tensor<f32>> {
    resize_bilinear(&crop_to_bbox(image, mask)?, res, res)
}

/// Pixels where any channel of `output` differs from `reference` by more
/// than `threshold`.
pub fn object_support(
    output: &Tensor<f32>,
    reference: &Tensor<f32>,
    threshold: f32,
) -> Result<InstanceMask> {
    output.ensure_same_shape(reference, "object_support")?;
    let (c, h, w) = output.dims3()?;
    let hw = h * w;
    Ok(InstanceMask::from_fn(h, w, |y, x| {
        (0..c).any(|ch| {
            let i = ch * hw + y * w + x;
            (output.data()[i] - reference.data()[i]).abs() > threshold
        })
    }))
}

pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Tensor<f32>) -> Result<Vec<f64>>;
}

/// Average-pooled pixels on a `grid x grid` lattice, all channels.
#[derive(Debug, Clone, Copy)]
pub struct PixelFeatures {
    pub grid: usize,
    pub channels: usize,
}

impl Default for PixelFeatures {
    fn default() -> Self {
        Self {
            grid: 8,
            channels: 3,
        }
    }
}

impl FeatureExtractor for PixelFeatures {
    fn dim(&self) -> usize {
        self.grid * self.grid * self.channels
    }

    fn extract(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        let (c, h, w) = image.dims3()?;
        if c != self.channels || h < self.grid || w < self.grid {
            return Err(Error::Shape(format!(
                "pixel features {}x{} from {:?}",
                self.grid,
                self.grid,
                image.shape()
            )));
        }
        let g = self.grid;
        let mut f = Vec::with_capacity(self.dim());
        for plane in image.data().chunks(h * w) {
            for gy in 0..g {
                let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
                for gx in 0..g {
                    let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    f.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(f)
    }
}

pub fn extract_all<E: FeatureExtractor + ?Sized>(
    ex: &E,
    images: &[Tensor<f32>],
) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|im| ex.extract(im)).collect()
}

pub const FID_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// Diagonal jitter added to both covariances (0 when none was needed).
    pub jitter: f64,
}

struct Stats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn stats(features: &[Vec<f64>], d: usize) -> Stats {
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Stats { mean, cov }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(sym(m));
    let root = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let e = SymmetricEigen::new(sym(cov)).eigenvalues;
    let scale = e.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
    e.min() <= 1e-12 * scale
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The cross term is
/// evaluated as `Tr sqrt(S_a^(1/2) S_b S_a^(1/2))`; if either covariance is
/// singular both get `FID_JITTER` added to the diagonal.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FidResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Range(format!(
            "fid needs >= 2 vectors per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("fid: feature vectors differ in length".into()));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fid features".into()));
    }
    let (sa, sb) = (stats(a, d), stats(b, d));
    let jitter = if is_singular(&sa.cov) || is_singular(&sb.cov) {
        FID_JITTER
    } else {
        0.0
    };
    let eye = DMatrix::<f64>::identity(d, d) * jitter;
    let (ca, cb) = (&sa.cov + &eye, &sb.cov + &eye);
    let ra = sqrt_psd(&ca);
    let cross = SymmetricEigen::new(sym(&(&ra * &cb * &ra)))
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    let diff = &sa.mean - &sb.mean;
    let value = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(FidResult {
        value: value.max(0.0),
        jitter,
    })
}

/// One evaluated tuple as stored on disk (paths relative to the manifest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub id: String,
    pub prompt: String,
    pub source: PathBuf,
    pub mask: PathBuf,
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_mask: Option<PathBuf>,
}

pub const EVAL_MANIFEST: &str = "items.jsonl";

#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub prompt: String,
    pub source: Tensor<f32>,
    pub mask: InstanceMask,
    pub output: Tensor<f32>,
    pub final_mask: Option<InstanceMask>,
    pub object_mask: Option<InstanceMask>,
}

pub fn read_eval_dir(dir: &Path) -> Result<Vec<EvalSample>> {
    let p = dir.join(EVAL_MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut out = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let e: EvalEntry = serde_json::from_str(line).map_err(|source| Error::Json {
            context: format!("{}:{}", p.display(), n + 1),
            source,
        })?;
        let opt_mask = |q: &Option<PathBuf>| {
            q.as_ref()
                .map(|q| imageio::load_mask(&dir.join(q), false))
                .transpose()
        };
        out.push(EvalSample {
            source: imageio::load_rgb(&dir.join(&e.source))?,
            mask: imageio::load_mask(&dir.join(&e.mask), false)?,
            output: imageio::load_rgb(&dir.join(&e.output))?,
            final_mask: opt_mask(&e.final_mask)?,
            object_mask: opt_mask(&e.object_mask)?,
            id: e.id,
            prompt: e.prompt,
        });
    }
    Ok(out)
}

/// Append one entry to a directory's eval manifest.
pub fn append_eval_entry(dir: &Path, entry: &EvalEntry) -> Result<()> {
    use std::io::Write;
    let p = dir.join(EVAL_MANIFEST);
    let line = serde_json::to_string(entry).map_err(|source| Error::Json {
        context: "eval entry".into(),
        source,
    })?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&p)
        .map_err(|e| Error::io(&p, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub prompt: String,
    pub prompt_class: Option<usize>,
    /// IoU of the final mask against the object mask (or the input mask).
    pub iou: Option<f64>,
    pub background_mse: Option<f64>,
    pub probe_class: Option<usize>,
    pub probe_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub mean_iou: Option<f64>,
    pub median_iou: Option<f64>,
    pub mean_background_mse: Option<f64>,
    pub median_background_mse: Option<f64>,
    pub probe_accuracy: Option<f64>,
    pub fid: Option<FidResult>,
    pub local_fid: Option<FidResult>,
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    })
}

impl Aggregates {
    /// Per-record aggregates; the FID fields are carried over unchanged.
    pub fn from_records(
        records: &[EvalRecord],
        fid: Option<FidResult>,
        local_fid: Option<FidResult>,
    ) -> Self {
        let ious: Vec<f64> = records.iter().filter_map(|r| r.iou).collect();
        let mses: Vec<f64> = records.iter().filter_map(|r| r.background_mse).collect();
        let hits: Vec<f64> = records
            .iter()
            .filter_map(|r| r.probe_correct.map(|c| if c { 1.0 } else { 0.0 }))
            .collect();
        Self {
            count: records.len(),
            mean_iou: mean(&ious),
            median_iou: median(&ious),
            mean_background_mse: mean(&mses),
            median_background_mse: median(&mses),
            probe_accuracy: mean(&hits),
            fid,
            local_fid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub aggregates: Aggregates,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct AggregateLine {
    aggregate: Aggregates,
    config: serde_json::Value,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

impl EvalReport {
    /// One JSON line per record, then one aggregate line.
    pub fn to_jsonl(&self) -> Result<String> {
        let json = |r: serde_json::Result<String>| {
            r.map_err(|source| Error::Json {
                context: "eval report".into(),
                source,
            })
        };
        let mut s = String::new();
        for r in &self.records {
            s += &json(serde_json::to_string(r))?;
            s.push('\n');
        }
        s += &json(serde_json::to_string(&AggregateLine {
            aggregate: self.aggregates.clone(),
            config: self.config.clone(),
        }))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let Some((last, rows)) = lines.split_last() else {
            return Err(Error::config("report", "empty"));
        };
        let parse_err = |source| Error::Json {
            context: "eval report".into(),
            source,
        };
        let records = rows
            .iter()
            .map(|l| serde_json::from_str(l).map_err(parse_err))
            .collect::<Result<Vec<EvalRecord>>>()?;
        let agg: AggregateLine = serde_json::from_str(last).map_err(parse_err)?;
        Ok(Self {
            records,
            aggregates: agg.aggregate,
            config: agg.config,
        })
    }

    pub fn summary_table(&self) -> String {
        let a = &self.aggregates;
        let fid = |f: &Option<FidResult>| match f {
            Some(f) if f.jitter > 0.0 => format!("{:.4} (jitter {:e})", f.value, f.jitter),
            Some(f) => format!("{:.4}", f.value),
            None => "-".into(),
        };
        let rows = [
            ("samples", a.count.to_string()),
            ("mean IoU", fmt_opt(a.mean_iou)),
            ("median IoU", fmt_opt(a.median_iou)),
            ("mean background MSE", fmt_opt(a.mean_background_mse)),
            ("median background MSE", fmt_opt(a.median_background_mse)),
            ("probe accuracy", fmt_opt(a.probe_accuracy)),
            ("FID (pixel features)", fid(&a.fid)),
            ("local FID (pixel features)", fid(&a.local_fid)),
        ];
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }

    /// Writes `report.jsonl` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.jsonl");
        std::fs::write(&p, self.to_jsonl()?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("summary.txt");
        std::fs::write(&p, self.summary_table()).map_err(|e| Error::io(&p, e))
    }
}

/// Score a set of tuples. FID fields are filled when both sets have at
/// least two members; probe fields when a probe is given.
pub fn evaluate<E: FeatureExtractor + ?Sized>(
    samples: &[EvalSample],
    vocab: &Vocabulary,
    probe: Option<&Probe>,
    extractor: &E,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if let Some(p) = probe {
        p.ensure_reliable()?;
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut crops_out = Vec::with_capacity(samples.len());
    let mut crops_src = Vec::with_capacity(samples.len());
    for s in samples {
        let prompt_class = vocab
            .parse(&s.prompt)
            .ok()
            .and_then(|c| vocab.class_of(c.token_id));
        let reference = s.object_mask.as_ref().unwrap_or(&s.mask);
        let iou_v = s
            .final_mask
            .as_ref()
            .map(|f| iou(f, reference))
            .transpose()?;
        let bg_mask = s
            .object_mask
            .as_ref()
            .or(s.final_mask.as_ref())
            .unwrap_or(&s.mask);
        let bg = if bg_mask.is_full() {
            None
        } else {
            Some(background_mse(&s.output, &s.source, bg_mask)?)
        };
        let crop = local_crop(&s.output, &s.mask, EVAL_RESOLUTION)?;
        crops_src.push(local_crop(&s.source, &s.mask, EVAL_RESOLUTION)?);
        let probe_class = probe
            .map(|p| p.classify(std::slice::from_ref(&crop)))
            .transpose()?
            .map(|v| v[0]);
        crops_out.push(crop);
        records.push(EvalRecord {
            id: s.id.clone(),
            prompt: s.prompt.clone(),
            prompt_class,
            iou: iou_v,
            background_mse: bg,
            probe_class,
            probe_correct: probe_class.zip(prompt_class).map(|(a, b)| a == b),
        });
    }
    let (full_fid, local) = if samples.len() >= 2 {
        let outs: Vec<Tensor<f32>> = samples.iter().map(|s| s.output.clone()).collect();
        let srcs: Vec<Tensor<f32>> = samples.iter().map(|s| s.source.clone()).collect();
        (
            Some(fid(
                &extract_all(extractor, &outs)?,
                &extract_all(extractor, &srcs)?,
            )?),
            Some(fid(
                &extract_all(extractor, &crops_out)?,
                &extract_all(extractor, &crops_src)?,
            )?),
        )
    } else {
        (None, None)
    };
    let aggregates = Aggregates::from_records(&records, full_fid, local);
    Ok(EvalReport {
        records,
        aggregates,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 8, 8], |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn background_mse_examples() {
        let x0 = img(1);
        let half = InstanceMask::from_fn(8, 8, |y, _| y < 4);
        assert_eq!(background_mse(&x0, &x0, &half).unwrap(), 0.0);
        let shifted = x0.map(|v| v + 0.1);
        assert!((background_mse(&shifted, &x0, &half).unwrap() - 0.01).abs() < 1e-7);
        let mut inside = x0.clone();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for (i, v) in inside.data_mut().iter_mut().enumerate() {
            if half.data()[i % 64] == 1 {
                *v += r.random_range(-0.5..0.5);
            }
        }
        assert_eq!(background_mse(&inside, &x0, &half).unwrap(), 0.0);
        assert!(background_mse(&x0, &x0, &InstanceMask::full(8, 8)).is_err());
    }

    #[test]
    fn crops() {
        let x = img(3);
        assert_eq!(crop_to_bbox(&x, &InstanceMask::full(8, 8)).unwrap(), x);
        let block = InstanceMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (3..7).contains(&x));
        let c = crop_to_bbox(&x, &block).unwrap();
        assert_eq!(c.shape(), [3, 4, 4]);
        for ch in 0..3 {
            for y in 0..4 {
                for xx in 0..4 {
                    assert_eq!(
                        c.data()[ch * 16 + y * 4 + xx],
                        x.data()[ch * 64 + (y + 2) * 8 + xx + 3]
                    );
                }
            }
        }
        let one = InstanceMask::from_fn(8, 8, |y, x| y == 5 && x == 1);
        let c = local_crop(&x, &one, 32).unwrap();
        assert_eq!(c.shape(), [3, 32, 32]);
        for ch in 0..3 {
            let v = x.data()[ch * 64 + 5 * 8 + 1];
            assert!(c.data()[ch * 1024..(ch + 1) * 1024]
                .iter()
                .all(|&u| (u - v).abs() < 1e-6));
        }
        assert!(local_crop(&x, &InstanceMask::empty(8, 8), 32).is_err());
    }

    #[test]
    fn resize_identity_and_range() {
        let x = img(4);
        let same = resize_bilinear(&x, 8, 8).unwrap();
        assert!(same.max_abs_diff(&x) < 1e-6);
        let up = resize_bilinear(&x, 19, 23).unwrap();
        assert!(up.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pixel_features_pool() {
        let x = Tensor::from_fn(
            &[3, 16, 16],
            |i| if (i % 256) / 16 < 8 { 1.0 } else { -1.0 },
        );
        let f = PixelFeatures::default().extract(&x).unwrap();
        assert_eq!(f.len(), 192);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[63], -1.0);
    }

    #[test]
    fn fid_closed_forms() {
        let a: Vec<Vec<f64>> = [-1.0, 1.0, -1.0, 1.0].iter().map(|&v| vec![v]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 3.0]).collect();
        let r = fid(&a, &b).unwrap();
        assert!((r.value - 9.0).abs() < 1e-9);
        assert_eq!(r.jitter, 0.0);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let set: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| r2.random::<f64>()).collect())
            .collect();
        let other: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..6).map(|_| r2.random::<f64>() * 2.0).collect())
            .collect();
        assert!(fid(&set, &set).unwrap().value < 1e-6);
        let ab = fid(&set, &other).unwrap().value;
        let ba = fid(&other, &set).unwrap().value;
        assert!((ab - ba).abs() <= 1e-8);
        let mut rev = set.clone();
        rev.reverse();
        assert!((fid(&rev, &other).unwrap().value - ab).abs() <= 1e-8);
    }

    #[test]
    fn fid_reports_jitter_on_singular_covariance() {
        let a: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, 0.0, 1.0]).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64 + 1.0, 0.0, 1.0]).collect();
        let r = fid(&a, &b).unwrap();
        assert_eq!(r.jitter, FID_JITTER);
        assert!((r.value - 1.0).abs() < 1e-6);
        assert!(fid(&a[..1], &b).is_err());
        assert!(fid(&a, &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn report_round_trip_and_recompute() {
        let records = vec![
            EvalRecord {
                id: "a".into(),
                prompt: "circle".into(),
                prompt_class: Some(0),
                iou: Some(0.5),
                background_mse: Some(0.1),
                probe_class: Some(0),
                probe_correct: Some(true),
            },
            EvalRecord {
                id: "b".into(),
                prompt: "ring".into(),
                prompt_class: Some(4),
                iou: Some(0.9),
                background_mse: None,
                probe_class: Some(1),
                probe_correct: Some(false),
            },
        ];
        let fidr = Some(FidResult {
            value: 2.5,
            jitter: 0.0,
        });
        let report = EvalReport {
            aggregates: Aggregates::from_records(&records, fidr, None),
            records,
            config: serde_json::json!({"seed": 1}),
        };
        assert_eq!(report.aggregates.mean_iou, Some(0.7));
        assert_eq!(report.aggregates.probe_accuracy, Some(0.5));
        let back = EvalReport::from_jsonl(&report.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(
            Aggregates::from_records(&back.records, back.aggregates.fid, None),
            back.aggregates
        );
        assert!(report.summary_table().contains("probe accuracy"));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
