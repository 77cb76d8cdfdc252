//! Training objectives: the noise-prediction MSE, the soft DICE loss on the
//! mask head, and their weighted sum, each with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::denoiser::{sigmoid, DenoiserOutput};
use crate::error::{Error, Result};
use crate::maskops::InstanceMask;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_DICE_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub apply_prediction_loss: bool,
    pub dice_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            apply_prediction_loss: true,
            dice_smoothing: DEFAULT_DICE_SMOOTHING,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "loss.lambda",
                "must be finite and non-negative",
            ));
        }
        if !(self.dice_smoothing >= 0.0 && self.dice_smoothing.is_finite()) {
            return Err(Error::config(
                "loss.dice_smoothing",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Loss components as logged; `dice` is `None` when the prediction loss is
/// disabled for every item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub dice: Option<f64>,
    pub total: f64,
}

/// Mean squared error between the true and predicted noise.
pub fn seg_dm_loss<F: Float>(eps: &Tensor<F>, out: &DenoiserOutput<F>) -> Result<f64> {
    mse(eps, &out.eps_hat)
}

fn mse<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    a.ensure_same_shape(b, "seg_dm_loss")?;
    if a.is_empty() {
        return Err(Error::Shape("seg_dm_loss on an empty grid".into()));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).as_f64().powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

fn check_prob_target<F: Float>(pred: &Tensor<F>, target: &InstanceMask) -> Result<()> {
    if pred.len() != target.data().len() {
        return Err(Error::Shape(format!(
            "prediction of {} values vs {}x{} target",
            pred.len(),
            target.height(),
            target.width()
        )));
    }
    if let Some(v) = pred
        .data()
        .iter()
        .find(|v| !(**v >= F::zero() && **v <= F::one()))
    {
        return Err(Error::Range(format!("mask probability {v} outside [0, 1]")));
    }
    Ok(())
}

/// `1 - (2 sum(p y) + e0) / (sum(p) + sum(y) + e0)`.
pub fn dice_loss_smoothed<F: Float>(
    pred_prob: &Tensor<F>,
    target: &InstanceMask,
    smoothing: f64,
) -> Result<f64> {
    check_prob_target(pred_prob, target)?;
    let (mut inter, mut sp) = (0.0f64, 0.0f64);
    for (&p, &y) in pred_prob.data().iter().zip(target.data()) {
        let p = p.as_f64();
        sp += p;
        if y == 1 {
            inter += p;
        }
    }
    let sy = target.count() as f64;
    let den = sp + sy + smoothing;
    if den == 0.0 {
        return Err(Error::Range(
            "DICE of two empty masks without smoothing".into(),
        ));
    }
    Ok(1.0 - (2.0 * inter + smoothing) / den)
}

pub fn dice_loss<F: Float>(pred_prob: &Tensor<F>, target: &InstanceMask) -> Result<f64> {
    dice_loss_smoothed(pred_prob, target, DEFAULT_DICE_SMOOTHING)
}

/// DICE loss of `sigmoid(logits)` and its gradient with respect to the logits.
fn dice_from_logits<F: Float>(logits: &[F], target: &[u8], smoothing: f64) -> (f64, Vec<F>) {
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z.as_f64())).collect();
    let sp: f64 = p.iter().sum();
    let inter: f64 = p
        .iter()
        .zip(target)
        .filter(|(_, &y)| y == 1)
        .map(|(v, _)| v)
        .sum();
    let sy = target.iter().filter(|&&y| y == 1).count() as f64;
    let den = sp + sy + smoothing;
    let num = 2.0 * inter + smoothing;
    let grad = p
        .iter()
        .zip(target)
        .map(|(&pi, &y)| {
            let dp = -(2.0 * f64::from(y) * den - num) / (den * den);
            F::of(dp * pi * (1.0 - pi))
        })
        .collect();
    (1.0 - num / den, grad)
}

/// Single-item total loss: `seg + lambda * dice` when the prediction loss is
/// applied, `seg` otherwise.
pub fn total_loss<F: Float>(
    eps: &Tensor<F>,
    out: &DenoiserOutput<F>,
    target_mask: &InstanceMask,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let seg = seg_dm_loss(eps, out)?;
    if !cfg.apply_prediction_loss {
        return Ok(LossBreakdown {
            seg,
            dice: None,
            total: seg,
        });
    }
    let prob = crate::denoiser::predict_mask_prob(out);
    let dice = dice_loss_smoothed(&prob, target_mask, cfg.dice_smoothing)?;
    Ok(LossBreakdown {
        seg,
        dice: Some(dice),
        total: seg + cfg.lambda * dice,
    })
}

/// Batched loss with gradients for the network head.
pub struct BatchLoss<F: Float> {
    pub breakdown: LossBreakdown,
    pub d_eps_hat: Tensor<F>,
    pub d_mask_logits: Tensor<F>,
}

/// Batched objective. The noise MSE averages over every element of the
/// batch; the DICE term averages over the items whose target is `Some`
/// (items with `None` have the prediction loss disabled). `cfg.lambda`
/// weights the DICE mean; `cfg.apply_prediction_loss = false` disables it
/// for the whole batch.
pub fn batch_loss<F: Float>(
    eps: &Tensor<F>,
    out: &DenoiserOutput<F>,
    targets: &[Option<&InstanceMask>],
    cfg: &LossConfig,
) -> Result<BatchLoss<F>> {
    cfg.validate()?;
    eps.ensure_same_shape(&out.eps_hat, "batch_loss eps")?;
    let (b, _, h, w) = out.mask_logits.dims4()?;
    if targets.len() != b {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {b}",
            targets.len()
        )));
    }
    let seg = mse(eps, &out.eps_hat)?;
    let n = F::of(eps.len() as f64);
    let two = F::of(2.0);
    let d_eps_hat = out.eps_hat.zip_map(eps, |p, e| two * (p - e) / n)?;

    let hw = h * w;
    let mut d_logits = vec![F::zero(); b * hw];
    let active: Vec<(usize, &InstanceMask)> = if cfg.apply_prediction_loss {
        targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|m| (i, m)))
            .collect()
    } else {
        Vec::new()
    };
    let mut dice_sum = 0.0;
    for &(i, m) in &active {
        if m.data().len() != hw {
            return Err(Error::Shape(format!(
                "target {i} is {}x{}, head is {h}x{w}",
                m.height(),
                m.width()
            )));
        }
        let (d, g) = dice_from_logits(
            &out.mask_logits.data()[i * hw..(i + 1) * hw],
            m.data(),
            cfg.dice_smoothing,
        );
        dice_sum += d;
        let k = F::of(cfg.lambda / active.len() as f64);
        for (dst, gv) in d_logits[i * hw..(i + 1) * hw].iter_mut().zip(g) {
            *dst = k * gv;
        }
    }
    let dice = (!active.is_empty()).then(|| dice_sum / active.len() as f64);
    let total = seg + cfg.lambda * dice.unwrap_or(0.0);
    Ok(BatchLoss {
        breakdown: LossBreakdown { seg, dice, total },
        d_eps_hat,
        d_mask_logits: Tensor::from_vec(&[b, 1, h, w], d_logits)?,
    })
}
