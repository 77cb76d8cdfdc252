//! Noise schedule and the closed-form diffusion arithmetic: forward noising,
//! masked forward noising, clean-image reconstruction and reverse steps.
//!
//! Timesteps are 1-based (`1..=T`) at every public entry point. `t = 0`
//! denotes the clean image and uses `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// An image or noisy latent, `(channels, height, width)`.
pub type ImageTensor<F = f32> = Tensor<F>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
    config: ScheduleConfig,
}

/// Linear betas from `beta_start` to `beta_end`, endpoints inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::config(
            "beta_start",
            format!("{beta_start} not in (0, 1)"),
        ));
    }
    if !(beta_end < 1.0 && beta_end >= beta_start) {
        return Err(Error::config(
            "beta_end",
            format!("{beta_end} not in [beta_start, 1)"),
        ));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(
        betas,
        ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        },
    )
}

impl NoiseSchedule {
    fn from_betas(betas: Vec<f64>, config: ScheduleConfig) -> Result<Self> {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
            config,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variances
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Range(format!(
                "timestep {t} not in 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(t)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t - 1]
    }

    /// `(t, t_prev)` pairs for a reverse pass of `steps` evenly spaced steps,
    /// starting at `T` and ending at `t_prev = 0`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<(usize, usize)>> {
        let total = self.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::config(
                "steps",
                format!("{steps} not in 1..={total}"),
            ));
        }
        let ts: Vec<usize> = (0..steps).map(|i| total - i * total / steps).collect();
        Ok(ts
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
            .collect())
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample<F: Float>(
        &self,
        x0: &Tensor<F>,
        t: usize,
        eps: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        self.check_t(t)?;
        x0.ensure_same_shape(eps, "q_sample noise")?;
        let ab = self.alpha_bar(t);
        let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// Forward noising restricted to `mask`: noised inside, bit-identical to
    /// `x0` outside. `x0` is `(C, H, W)`; `mask` holds `H * W` values in
    /// `{0, 1}` and is broadcast over channels.
    pub fn masked_q_sample<F: Float>(
        &self,
        x0: &Tensor<F>,
        mask: &Tensor<F>,
        t: usize,
        eps: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let noised = self.q_sample(x0, t, eps)?;
        composite(&noised, x0, mask)
    }

    /// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
    pub fn predict_x0<F: Float>(
        &self,
        x_t: &Tensor<F>,
        eps_hat: &Tensor<F>,
        t: usize,
    ) -> Result<Tensor<F>> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let (s1, s2) = (F::of((1.0 - ab).sqrt()), F::of(ab.sqrt()));
        x_t.zip_map(eps_hat, |x, e| (x - s1 * e) / s2)
    }

    /// One ancestral step `t -> t - 1` with the fixed posterior variance.
    /// `noise` is ignored at `t = 1`.
    pub fn ddpm_step<F: Float>(
        &self,
        x_t: &Tensor<F>,
        eps_hat: &Tensor<F>,
        t: usize,
        noise: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        self.check_t(t)?;
        x_t.ensure_same_shape(eps_hat, "ddpm_step eps")?;
        x_t.ensure_same_shape(noise, "ddpm_step noise")?;
        let alpha = self.alpha(t);
        let inv_sqrt_alpha = F::of(1.0 / alpha.sqrt());
        let coef = F::of((1.0 - alpha) / (1.0 - self.alpha_bar(t)).sqrt());
        let sigma = if t == 1 {
            F::zero()
        } else {
            F::of(self.posterior_variance(t).sqrt())
        };
        let data = x_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .zip(noise.data())
            .map(|((&x, &e), &z)| inv_sqrt_alpha * (x - coef * e) + sigma * z)
            .collect();
        Tensor::from_vec(x_t.shape(), data)
    }

    /// Generalized (DDIM) step from `t` to any `t_prev < t`. With `eta = 0`
    /// the step is deterministic and `noise` may be `None`.
    pub fn ddim_step<F: Float>(
        &self,
        x_t: &Tensor<F>,
        eps_hat: &Tensor<F>,
        t: usize,
        t_prev: usize,
        eta: f64,
        noise: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(Error::Range(format!("t_prev {t_prev} must be below t {t}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Range(format!("eta {eta} not in [0, 1]")));
        }
        let x0_hat = self.predict_x0(x_t, eps_hat, t)?;
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let (c0, c1, cs) = (F::of(ab_prev.sqrt()), F::of(dir), F::of(sigma));
        let mut out = x0_hat.zip_map(eps_hat, |x, e| c0 * x + c1 * e)?;
        if sigma > 0.0 {
            let noise =
                noise.ok_or_else(|| Error::Range("ddim_step with eta > 0 needs noise".into()))?;
            out.ensure_same_shape(noise, "ddim_step noise")?;
            for (o, &z) in out.data_mut().iter_mut().zip(noise.data()) {
                *o += cs * z;
            }
        }
        Ok(out)
    }
}

/// Per-pixel select: `inside` where `mask == 1`, `outside` where `mask == 0`.
/// The mask holds `H * W` values and is broadcast over the channel axis of
/// `(C, H, W)` images. Values are copied, never blended arithmetically.
pub fn composite<F: Float>(
    inside: &Tensor<F>,
    outside: &Tensor<F>,
    mask: &Tensor<F>,
) -> Result<Tensor<F>> {
    inside.ensure_same_shape(outside, "composite")?;
    let plane = mask.len();
    if plane == 0 || !inside.len().is_multiple_of(plane) {
        return Err(Error::Shape(format!(
            "mask of {} values does not tile image {:?}",
            plane,
            inside.shape()
        )));
    }
    if let Some(bad) = mask
        .data()
        .iter()
        .find(|&&v| v != F::zero() && v != F::one())
    {
        return Err(Error::Mask(format!("non-binary value {bad}")));
    }
    let mut out = outside.clone();
    for (dst, src) in out
        .data_mut()
        .chunks_mut(plane)
        .zip(inside.data().chunks(plane))
    {
        for ((d, &s), &m) in dst.iter_mut().zip(src).zip(mask.data()) {
            if m == F::one() {
                *d = s;
            }
        }
    }
    Ok(out)
}
