//! Procedural dataset: one flat-colored geometric object on a smooth textured
//! background, with its exact instance mask and templated caption.
//!
//! On-disk layout:
//!
//! ```text
//! <dir>/spec.json          generator configuration
//! <dir>/manifest.jsonl     one SampleRecord per line
//! <dir>/images/NNNNN.png   8-bit RGB
//! <dir>/masks/NNNNN.png    8-bit gray, 0 or 255
//! ```

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Vocabulary;
use crate::error::{Error, Result};
use crate::imageio;
use crate::maskops::InstanceMask;
use crate::rng::keyed_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub resolution: usize,
    pub classes: Vec<String>,
    pub colors: Vec<ColorSpec>,
    /// Inclusive range of the object's bounding-square side in pixels.
    pub size_min: usize,
    pub size_max: usize,
    pub margin: usize,
    /// Largest absolute value of the background texture.
    pub background_amplitude: f32,
    pub count: usize,
    pub seed: u64,
    /// Id of the first sample; held-out splits use a disjoint id range.
    pub first_id: usize,
}

pub const SHAPE_CLASSES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];

impl Default for DatasetSpec {
    fn default() -> Self {
        let color = |name: &str, rgb: [f32; 3]| ColorSpec {
            name: name.into(),
            rgb,
        };
        Self {
            resolution: 32,
            classes: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
            colors: vec![
                color("red", [1.0, -1.0, -1.0]),
                color("green", [-1.0, 1.0, -1.0]),
                color("blue", [-1.0, -1.0, 1.0]),
                color("yellow", [1.0, 1.0, -1.0]),
                color("cyan", [-1.0, 1.0, 1.0]),
                color("magenta", [1.0, -1.0, 1.0]),
            ],
            size_min: 10,
            size_max: 20,
            margin: 2,
            background_amplitude: 0.6,
            count: 5000,
            seed: 0,
            first_id: 0,
        }
    }
}

impl DatasetSpec {
    /// The default held-out split: 500 samples with ids after the training
    /// range.
    pub fn held_out(&self) -> Self {
        Self {
            count: 500,
            first_id: 1_000_000,
            ..self.clone()
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(
            self.classes.clone(),
            self.colors.iter().map(|c| c.name.clone()).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.vocabulary()?;
        if let Some(c) = self
            .classes
            .iter()
            .find(|c| !SHAPE_CLASSES.contains(&c.as_str()))
        {
            return Err(Error::config(
                "classes",
                format!("unknown shape {c:?}; known: {SHAPE_CLASSES:?}"),
            ));
        }
        if let Some(c) = self
            .colors
            .iter()
            .find(|c| c.rgb.iter().any(|v| !(-1.0..=1.0).contains(v)))
        {
            return Err(Error::config(
                "colors",
                format!("{} has components outside [-1, 1]", c.name),
            ));
        }
        if self.size_min < 3 || self.size_min > self.size_max {
            return Err(Error::config("size_min", "need 3 <= size_min <= size_max"));
        }
        if self.size_max + 2 * self.margin > self.resolution {
            return Err(Error::config(
                "size_max",
                format!(
                    "object of {} px with {} px margins does not fit in {} px",
                    self.size_max, self.margin, self.resolution
                ),
            ));
        }
        if self.margin < 2 {
            return Err(Error::config("margin", "must be at least 2 pixels"));
        }
        if !(0.0..=1.0).contains(&self.background_amplitude) {
            return Err(Error::config("background_amplitude", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn ids(&self) -> std::ops::Range<usize> {
        self.first_id..self.first_id + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub class: usize,
    pub color: usize,
    pub class_name: String,
    pub color_name: String,
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: usize,
    /// `(3, R, R)` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub mask: InstanceMask,
    pub class_token: usize,
    pub caption_token: usize,
    pub caption: String,
    pub meta: SampleMeta,
}

/// A sample together with the background it was painted on.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sample: TrainingSample,
    pub background: Tensor<f32>,
}

/// Whether pixel center `(u, v)` (in units of the object's square, origin
/// at the top-left corner) belongs to `class`.
fn inside_shape(class: &str, u: f64, v: f64) -> bool {
    let (dx, dy) = (u - 0.5, v - 0.5);
    let r2 = dx * dx + dy * dy;
    match class {
        "circle" => r2 <= 0.25,
        "square" => true,
        "triangle" => dx.abs() <= v / 2.0,
        "cross" => dx.abs() <= 1.0 / 6.0 || dy.abs() <= 1.0 / 6.0,
        "ring" => r2 <= 0.25 && r2 > 0.0625,
        _ => false,
    }
}

/// Rasterize `class` into a `size`-pixel square at `(top, left)`.
pub fn rasterize(
    class: &str,
    resolution: usize,
    size: usize,
    top: usize,
    left: usize,
) -> InstanceMask {
    let s = size as f64;
    InstanceMask::from_fn(resolution, resolution, |y, x| {
        if y < top || x < left || y >= top + size || x >= left + size {
            return false;
        }
        let u = (x - left) as f64 + 0.5;
        let v = (y - top) as f64 + 0.5;
        inside_shape(class, u / s, v / s)
    })
}

/// Smooth texture: a base tint, a linear gradient and two low-frequency
/// sinusoids per channel, clamped to the configured amplitude.
fn render_background<R: Rng>(res: usize, amplitude: f32, rng: &mut R) -> Tensor<f32> {
    let a = amplitude as f64;
    let mut data = vec![0.0f32; 3 * res * res];
    let theta = rng.random_range(0.0..2.0 * PI);
    let (gc, gs) = (theta.cos(), theta.sin());
    for c in 0..3 {
        let base = rng.random_range(-0.5 * a..0.5 * a);
        let grad = rng.random_range(-0.6 * a..0.6 * a);
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                let fx = rng.random_range(0..3) as f64;
                let fy = rng.random_range(0..3) as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.0..0.25 * a);
                (fx, fy, phase, amp)
            })
            .collect();
        for y in 0..res {
            for x in 0..res {
                let (u, v) = ((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
                let mut val = base + grad * ((u - 0.5) * gc + (v - 0.5) * gs);
                for &(fx, fy, phase, amp) in &waves {
                    val += amp * (2.0 * PI * (fx * u + fy * v) + phase).sin();
                }
                data[c * res * res + y * res + x] = val.clamp(-a, a) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, res, res], data).expect("background dims")
}

/// Paint `rgb` over `image` wherever `mask` is set.
pub fn paint(image: &Tensor<f32>, mask: &InstanceMask, rgb: [f32; 3]) -> Tensor<f32> {
    let plane = mask.data().len();
    let mut out = image.clone();
    for (c, chan) in out.data_mut().chunks_mut(plane).enumerate() {
        for (v, &m) in chan.iter_mut().zip(mask.data()) {
            if m == 1 {
                *v = rgb[c];
            }
        }
    }
    out
}

/// The sample with id `id`; all randomness is keyed on `(seed, id)`.
pub fn generate_scene(spec: &DatasetSpec, id: usize) -> Result<Scene> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let mut rng = keyed_rng(spec.seed, &[0x05A4_E5E7, id as u64]);
    let res = spec.resolution;
    let class = rng.random_range(0..spec.classes.len());
    let color = rng.random_range(0..spec.colors.len());
    let size = rng.random_range(spec.size_min..=spec.size_max);
    let hi = res - spec.margin - size;
    let top = rng.random_range(spec.margin..=hi);
    let left = rng.random_range(spec.margin..=hi);
    let background = render_background(res, spec.background_amplitude, &mut rng);
    let class_name = spec.classes[class].clone();
    let mask = rasterize(&class_name, res, size, top, left);
    let image = paint(&background, &mask, spec.colors[color].rgb);
    let caption = vocab.caption_condition(class, color)?;
    let sample = TrainingSample {
        id,
        image,
        mask,
        class_token: vocab.class_condition(class)?.token_id,
        caption_token: caption.token_id,
        caption: caption.prompt_text,
        meta: SampleMeta {
            class,
            color,
            class_name,
            color_name: spec.colors[color].name.clone(),
            size,
            top,
            left,
        },
    };
    Ok(Scene { sample, background })
}

pub fn generate_sample(spec: &DatasetSpec, id: usize) -> Result<TrainingSample> {
    Ok(generate_scene(spec, id)?.sample)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub image: String,
    pub mask: String,
    pub label: String,
    pub caption: String,
    pub class_token: usize,
    pub caption_token: usize,
    pub meta: SampleMeta,
}

fn file_name(id: usize) -> String {
    format!("{id:05}.png")
}

/// Write `spec.count` samples under `dir` and return the manifest records.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec_path = dir.join("spec.json");
    let spec_json = serde_json::to_string_pretty(spec).map_err(|source| Error::Json {
        context: "dataset spec".into(),
        source,
    })?;
    std::fs::write(&spec_path, spec_json + "\n").map_err(|e| Error::io(&spec_path, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let file = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut manifest = BufWriter::new(file);
    let mut records = Vec::with_capacity(spec.count);
    for id in spec.ids() {
        let s = generate_sample(spec, id)?;
        let name = file_name(id);
        imageio::save_rgb(&dir.join("images").join(&name), &s.image)?;
        imageio::save_mask(&dir.join("masks").join(&name), &s.mask)?;
        let rec = SampleRecord {
            id,
            image: format!("images/{name}"),
            mask: format!("masks/{name}"),
            label: s.meta.class_name.clone(),
            caption: s.caption.clone(),
            class_token: s.class_token,
            caption_token: s.caption_token,
            meta: s.meta,
        };
        let line = serde_json::to_string(&rec).map_err(|source| Error::Json {
            context: format!("manifest record {id}"),
            source,
        })?;
        writeln!(manifest, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
        records.push(rec);
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(records)
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub spec: DatasetSpec,
    pub samples: Vec<TrainingSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Generate in memory without touching disk.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let samples = spec
            .ids()
            .map(|id| generate_sample(spec, id))
            .collect::<Result<_>>()?;
        Ok(Self {
            root: PathBuf::new(),
            spec: spec.clone(),
            samples,
        })
    }
}

pub fn read_spec(dir: &Path) -> Result<DatasetSpec> {
    let p = dir.join("spec.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: p.display().to_string(),
        source,
    })
}

/// Load every sample listed in the manifest, checking files against it.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let spec = read_spec(dir)?;
    let vocab = spec.vocabulary()?;
    let manifest_path = dir.join("manifest.jsonl");
    let file = File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|source| Error::Json {
            context: format!("{} line {}", manifest_path.display(), lineno + 1),
            source,
        })?;
        let id = rec.id;
        let fail = |reason: String| Error::Sample { id, reason };
        let image = imageio::load_rgb(&dir.join(&rec.image)).map_err(|e| fail(e.to_string()))?;
        let mask =
            imageio::load_mask(&dir.join(&rec.mask), true).map_err(|e| fail(e.to_string()))?;
        let r = spec.resolution;
        if image.shape() != [3, r, r] || mask.height() != r || mask.width() != r {
            return Err(fail(format!(
                "image {:?} / mask {}x{} vs resolution {r}",
                image.shape(),
                mask.height(),
                mask.width()
            )));
        }
        if mask.is_empty() {
            return Err(fail("empty instance mask".into()));
        }
        let class_ok = vocab.class_of(rec.class_token) == Some(rec.meta.class)
            && vocab.class_of(rec.caption_token) == Some(rec.meta.class)
            && vocab
                .decode(rec.caption_token)
                .map(|c| c.prompt_text)
                .ok()
                .as_deref()
                == Some(rec.caption.as_str());
        if !class_ok {
            return Err(fail("tokens disagree with metadata".into()));
        }
        samples.push(TrainingSample {
            id,
            image,
            mask,
            class_token: rec.class_token,
            caption_token: rec.caption_token,
            caption: rec.caption,
            meta: rec.meta,
        });
    }
    if samples.len() != spec.count {
        return Err(Error::Sample {
            id: samples.len(),
            reason: format!(
                "manifest lists {} samples, spec says {}",
                samples.len(),
                spec.count
            ),
        });
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        spec,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(count: usize) -> DatasetSpec {
        DatasetSpec {
            count,
            seed: 11,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn samples_respect_geometry_bounds() {
        let spec = small_spec(200);
        for id in spec.ids() {
            let scene = generate_scene(&spec, id).unwrap();
            let s = &scene.sample;
            let n = s.mask.count();
            assert!(
                n > 0 && n <= spec.size_max * spec.size_max,
                "sample {id}: {n} pixels"
            );
            let b = s.mask.bbox().unwrap();
            assert!(b.y0 >= 2 && b.x0 >= 2 && b.y1 <= 29 && b.x1 <= 29);
            assert_eq!(
                s.mask,
                rasterize(&s.meta.class_name, 32, s.meta.size, s.meta.top, s.meta.left)
            );
            assert!(scene.background.data().iter().all(|v| v.abs() <= 0.6));
            for (i, &m) in s.mask.data().iter().enumerate() {
                for c in 0..3 {
                    let v = s.image.data()[c * 1024 + i];
                    if m == 1 {
                        assert_eq!(v, spec.colors[s.meta.color].rgb[c]);
                    } else {
                        assert_eq!(v, scene.background.data()[c * 1024 + i]);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_keyed_on_seed_and_id() {
        let spec = small_spec(10);
        assert_eq!(
            generate_sample(&spec, 3).unwrap(),
            generate_sample(&spec, 3).unwrap()
        );
        assert_ne!(
            generate_sample(&spec, 3).unwrap(),
            generate_sample(&spec, 4).unwrap()
        );
        let other = DatasetSpec {
            seed: 12,
            ..spec.clone()
        };
        assert_ne!(
            generate_sample(&spec, 3).unwrap().image,
            generate_sample(&other, 3).unwrap().image
        );
    }

    #[test]
    fn circle_area_close_to_disc() {
        for size in 10..=20 {
            let m = rasterize("circle", 32, size, 4, 4);
            let r = size as f64 / 2.0;
            let disc = PI * r * r;
            let rel = (m.count() as f64 - disc).abs() / disc;
            assert!(rel <= 0.10, "size {size}: {} vs {disc:.1}", m.count());
        }
    }

    #[test]
    fn caption_matches_metadata() {
        let spec = small_spec(50);
        let v = spec.vocabulary().unwrap();
        for id in spec.ids() {
            let s = generate_sample(&spec, id).unwrap();
            assert_eq!(
                s.caption,
                format!("a {} {}", s.meta.color_name, s.meta.class_name)
            );
            assert_eq!(v.parse(&s.caption).unwrap().token_id, s.caption_token);
            assert_eq!(v.class_of(s.class_token), Some(s.meta.class));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = DatasetSpec {
            size_max: 30,
            ..DatasetSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = DatasetSpec {
            classes: vec!["hexagon".into()],
            ..DatasetSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
