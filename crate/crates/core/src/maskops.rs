//! Instance-mask geometry: the Gaussian-blur precision ladder, bounding-box
//! degeneration, binarization and overlap metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Binary mask, row-major, values exactly 0 or 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for InstanceMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "InstanceMask {}x{} ({} set)",
            self.height,
            self.width,
            self.count()
        )?;
        if self.height * self.width <= 64 * 64 {
            for row in self.data.chunks(self.width.max(1)) {
                let line: String = row
                    .iter()
                    .map(|&v| if v == 1 { '#' } else { '.' })
                    .collect();
                writeln!(f, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Inclusive pixel bounds of a mask's support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Mask(format!("non-binary value {v}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Binary mask from a float plane whose values must be exactly 0 or 1.
    pub fn from_binary_tensor<F: Float>(
        t: &Tensor<F>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if t.len() != height * width {
            return Err(Error::Shape(format!(
                "{:?} is not a {height}x{width} plane",
                t.shape()
            )));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v == F::zero() {
                    Ok(0)
                } else if v == F::one() {
                    Ok(1)
                } else {
                    Err(Error::Mask(format!("non-binary value {v}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&v| v == 1)
    }

    /// `(1, H, W)` plane with values 0.0 / 1.0.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        let data = self
            .data
            .iter()
            .map(|&v| if v == 1 { F::one() } else { F::zero() })
            .collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("mask dims")
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "masks {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a | b)
            .collect();
        Ok(Self { data, ..*self })
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a & b)
            .collect();
        Ok(Self { data, ..*self })
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| 1 - v).collect(),
            ..*self
        }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                b = Some(match b {
                    None => BBox {
                        y0: y,
                        x0: x,
                        y1: y,
                        x1: x,
                    },
                    Some(b) => BBox {
                        y0: b.y0.min(y),
                        x0: b.x0.min(x),
                        y1: b.y1.max(y),
                        x1: b.x1.max(x),
                    },
                });
            }
        }
        b
    }
}

/// Mask-precision ladder parameters: `levels` is S; kernel sizes and sigmas
/// are listed for the blurred levels `1..S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub levels: usize,
    pub kernel_sizes: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub threshold: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            kernel_sizes: vec![9, 17, 33],
            sigmas: vec![3.0, 6.0, 12.0],
            threshold: 0.05,
        }
    }
}

impl LadderConfig {
    /// Defaults are tuned for 32x32; kernel sizes and sigmas scale linearly
    /// with resolution, kernels rounded to the nearest odd size.
    pub fn for_resolution(resolution: usize) -> Self {
        let base = Self::default();
        let r = resolution as f64 / 32.0;
        let kernel_sizes = base
            .kernel_sizes
            .iter()
            .map(|&k| {
                let k = ((k as f64 * r).round() as usize).max(1);
                if k.is_multiple_of(2) {
                    k + 1
                } else {
                    k
                }
            })
            .collect();
        Self {
            kernel_sizes,
            sigmas: base.sigmas.iter().map(|s| s * r).collect(),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("ladder.levels", "must be at least 1"));
        }
        let blurred = self.levels - 1;
        if self.kernel_sizes.len() != blurred {
            return Err(Error::config(
                "ladder.kernel_sizes",
                format!(
                    "expected {blurred} entries, got {}",
                    self.kernel_sizes.len()
                ),
            ));
        }
        if self.sigmas.len() != blurred {
            return Err(Error::config(
                "ladder.sigmas",
                format!("expected {blurred} entries, got {}", self.sigmas.len()),
            ));
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::config(
                "ladder.kernel_sizes",
                "kernel sizes must be odd",
            ));
        }
        if self.kernel_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "ladder.kernel_sizes",
                "must be strictly increasing",
            ));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0)) || self.sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "ladder.sigmas",
                "must be positive and strictly increasing",
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("ladder.threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// A mask at precision level `level` (0 = exact, S = bounding box).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrecisionMask {
    pub mask: InstanceMask,
    pub level: usize,
}

/// Normalized 1-D Gaussian taps of odd length `k`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Range(format!("kernel size {k} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Range(format!("sigma {sigma} must be positive")));
    }
    let r = (k / 2) as f64;
    let taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|v| v / s).collect())
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let i = i.rem_euclid(period);
    if i >= n as isize {
        (period - i) as usize
    } else {
        i as usize
    }
}

/// Separable Gaussian blur with reflect padding. Returns an `(H, W)` grid.
pub fn gaussian_blur(m: &InstanceMask, k: usize, sigma: f64) -> Result<Tensor<f64>> {
    let taps = gaussian_kernel(k, sigma)?;
    let (h, w) = (m.height, m.width);
    let r = (k / 2) as isize;
    let src: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * src[y * w + reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// 1 where `soft > theta`, else 0.
pub fn binarize<F: Float>(
    soft: &Tensor<F>,
    height: usize,
    width: usize,
    theta: f64,
) -> Result<InstanceMask> {
    if soft.len() != height * width {
        return Err(Error::Shape(format!(
            "{:?} is not a {height}x{width} plane",
            soft.shape()
        )));
    }
    let th = F::of(theta);
    Ok(InstanceMask {
        height,
        width,
        data: soft.data().iter().map(|&v| u8::from(v > th)).collect(),
    })
}

/// Filled tight bounding rectangle of the mask's support.
pub fn bbox_mask(m: &InstanceMask) -> Result<InstanceMask> {
    let b = m
        .bbox()
        .ok_or_else(|| Error::Mask("bounding box of an empty mask".into()))?;
    Ok(InstanceMask::from_fn(m.height, m.width, |y, x| {
        b.contains(y, x)
    }))
}

fn blurred_level(m: &InstanceMask, s: usize, cfg: &LadderConfig) -> Result<InstanceMask> {
    let soft = gaussian_blur(m, cfg.kernel_sizes[s - 1], cfg.sigmas[s - 1])?;
    binarize(&soft, m.height, m.width, cfg.threshold)
}

/// Every level `0..=S` of the ladder for `m`. Intermediate levels are the
/// running union of thresholded blurs, so levels `0..S` are nested.
pub fn precision_ladder(m: &InstanceMask, cfg: &LadderConfig) -> Result<Vec<PrecisionMask>> {
    cfg.validate()?;
    if m.is_empty() {
        return Err(Error::Mask("precision ladder of an empty mask".into()));
    }
    let mut out = Vec::with_capacity(cfg.levels + 1);
    out.push(PrecisionMask {
        mask: m.clone(),
        level: 0,
    });
    for s in 1..cfg.levels {
        let prev = &out[s - 1].mask;
        let mask = prev.union(&blurred_level(m, s, cfg)?)?;
        out.push(PrecisionMask { mask, level: s });
    }
    out.push(PrecisionMask {
        mask: bbox_mask(m)?,
        level: cfg.levels,
    });
    Ok(out)
}

/// The level-`s` mask of the ladder.
pub fn precision_mask(m: &InstanceMask, s: usize, cfg: &LadderConfig) -> Result<PrecisionMask> {
    cfg.validate()?;
    if s > cfg.levels {
        return Err(Error::Range(format!(
            "precision level {s} not in 0..={}",
            cfg.levels
        )));
    }
    if m.is_empty() {
        return Err(Error::Mask("precision mask of an empty mask".into()));
    }
    if s == 0 {
        return Ok(PrecisionMask {
            mask: m.clone(),
            level: 0,
        });
    }
    if s == cfg.levels {
        return Ok(PrecisionMask {
            mask: bbox_mask(m)?,
            level: s,
        });
    }
    let mut acc = m.clone();
    for level in 1..=s {
        acc = acc.union(&blurred_level(m, level, cfg)?)?;
    }
    Ok(PrecisionMask {
        mask: acc,
        level: s,
    })
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(a: &InstanceMask, b: &InstanceMask) -> Result<f64> {
    a.check_same(b)?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        inter += (p & q) as usize;
        uni += (p | q) as usize;
    }
    Ok(if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    })
}
