//! Inpainting sampler: masked initialization, classifier-free guidance,
//! per-step background blending and the switch from the coarse input mask
//! to the network's own mask prediction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{null_condition, Condition, Denoiser, DenoiserInput, DenoiserOutput};
use crate::error::{Error, Result};
use crate::maskops::{InstanceMask, PrecisionMask};
use crate::rng::{keyed_rng, normal_tensor};
use crate::schedule::{composite, NoiseSchedule};
use crate::tensor::Tensor;

/// Anything that maps batched network inputs to noise and mask logits.
pub trait NoisePredictor {
    fn predict(&self, inp: &DenoiserInput<f32>) -> Result<DenoiserOutput<f32>>;
}

impl NoisePredictor for Denoiser<f32> {
    fn predict(&self, inp: &DenoiserInput<f32>) -> Result<DenoiserOutput<f32>> {
        self.forward_batch(inp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Stochastic reverse steps (DDPM between consecutive timesteps).
    Ancestral,
    /// DDIM over a strided subset of timesteps.
    DeterministicSkip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub kind: SamplerKind,
    /// DDIM stochasticity for `DeterministicSkip`.
    pub eta: f64,
    /// Step index from which the predicted mask drives blending; 0 disables.
    pub mask_switch_step: usize,
    pub mask_switch_threshold: f64,
    /// Clamp the implied x0 estimate to the image range before each step.
    pub clip_x0: bool,
    pub trace: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 2.0,
            kind: SamplerKind::DeterministicSkip,
            eta: 0.0,
            mask_switch_step: 10,
            mask_switch_threshold: 0.5,
            clip_x0: true,
            trace: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.num_steps() {
            return Err(Error::config(
                "steps",
                format!("{} not in 1..={}", self.steps, sched.num_steps()),
            ));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config(
                "guidance_scale",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config("eta", "must lie in [0, 1]"));
        }
        if self.mask_switch_step > self.steps {
            return Err(Error::config("mask_switch_step", "must not exceed steps"));
        }
        if !(self.mask_switch_threshold > 0.0 && self.mask_switch_threshold < 1.0) {
            return Err(Error::config("mask_switch_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    /// `(C, H, W)` source image.
    pub source: Tensor<f32>,
    pub mask: PrecisionMask,
    pub condition: Condition,
    pub seed: u64,
    pub config: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub index: usize,
    pub t: usize,
    /// Sigmoid of the conditional pass's mask logits, `H * W` values.
    pub soft_mask: Vec<f64>,
    pub active_mask: InstanceMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub output: Tensor<f32>,
    pub final_mask: InstanceMask,
    /// Mask probabilities from the last network evaluation, `H * W` values.
    pub final_mask_prob: Vec<f64>,
    pub trace: Option<Vec<TraceStep>>,
    /// Steps at which the predicted mask was empty and the input mask was
    /// used instead.
    pub fallback_steps: Vec<usize>,
    pub seed: u64,
}

const SAMPLE_STREAM: u64 = 0x5A3B1E;

/// Per-request noise stream.
pub fn sample_rng(seed: u64) -> ChaCha8Rng {
    keyed_rng(seed, &[SAMPLE_STREAM])
}

/// `x_T = eps * m + x0 * (1 - m)`.
pub fn init_latent<R: Rng + ?Sized>(
    x0: &Tensor<f32>,
    m: &InstanceMask,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let noise = normal_tensor::<f32, _>(x0.shape(), rng);
    composite(&noise, x0, &m.to_tensor())
}

/// Classifier-free guidance for a batch: `eps_null + w (eps_c - eps_null)`.
/// Returns the guided noise and the conditional pass's mask logits. With
/// `w = 1` only the conditional pass runs; with `w = 0` the result is the
/// null pass exactly.
pub fn guided_eps<M: NoisePredictor + ?Sized>(
    model: &M,
    cond: &DenoiserInput<f32>,
    w: f64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if w == 1.0 {
        let out = model.predict(cond)?;
        return Ok((out.eps_hat, out.mask_logits));
    }
    let b = cond.t.len();
    let both = DenoiserInput {
        x_t: Tensor::concat_batch(&[&cond.x_t, &cond.x_t])?,
        mask: Tensor::concat_batch(&[&cond.mask, &cond.mask])?,
        t: [cond.t.clone(), cond.t.clone()].concat(),
        s: [cond.s.clone(), cond.s.clone()].concat(),
        tokens: cond
            .tokens
            .iter()
            .copied()
            .chain(std::iter::repeat_n(null_condition().token_id, b))
            .collect(),
    };
    let out = model.predict(&both)?;
    let eps_c = out.eps_hat.narrow_batch(0, b)?;
    let eps_null = out.eps_hat.narrow_batch(b, b)?;
    let logits = out.mask_logits.narrow_batch(0, b)?;
    let eps = if w == 0.0 {
        eps_null
    } else {
        let wf = w as f32;
        eps_null.zip_map(&eps_c, |n, c| n + wf * (c - n))?
    };
    Ok((eps, logits))
}

/// One reverse step with background blending. Inside `active` the chosen
/// reverse update is applied. Outside `active` the value comes from the
/// source: freshly noised to level `t_prev` inside `noise_region`, clean
/// outside it. `t_prev = 0` yields the clean source everywhere outside
/// `active`.
#[allow(clippy::too_many_arguments)]
pub fn blended_step<R: Rng + ?Sized>(
    x_t: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    active: &InstanceMask,
    noise_region: &InstanceMask,
    t: usize,
    t_prev: usize,
    x0: &Tensor<f32>,
    sched: &NoiseSchedule,
    rng: &mut R,
    kind: SamplerKind,
    eta: f64,
) -> Result<Tensor<f32>> {
    let stepped = match kind {
        SamplerKind::Ancestral if t_prev + 1 == t => {
            let z = normal_tensor(x_t.shape(), rng);
            sched.ddpm_step(x_t, eps_hat, t, &z)?
        }
        SamplerKind::Ancestral => {
            let z = normal_tensor(x_t.shape(), rng);
            sched.ddim_step(x_t, eps_hat, t, t_prev, 1.0, Some(&z))?
        }
        SamplerKind::DeterministicSkip if eta > 0.0 => {
            let z = normal_tensor(x_t.shape(), rng);
            sched.ddim_step(x_t, eps_hat, t, t_prev, eta, Some(&z))?
        }
        SamplerKind::DeterministicSkip => sched.ddim_step(x_t, eps_hat, t, t_prev, 0.0, None)?,
    };
    let background = if t_prev == 0 || noise_region.is_empty() {
        x0.clone()
    } else {
        let z = normal_tensor(x0.shape(), rng);
        sched.masked_q_sample(x0, &noise_region.to_tensor(), t_prev, &z)?
    };
    composite(&stepped, &background, &active.to_tensor())
}

/// The noise estimate consistent with `x_t` and the x0 estimate clamped to
/// `[-1, 1]`.
pub fn clipped_eps(
    x_t: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let x0 = sched.predict_x0(x_t, eps_hat, t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x_t.zip_map(&x0, |x, x0| (x - a * x0.clamp(-1.0, 1.0)) / b)
}

fn switched_mask(
    logits: &[f32],
    input: &InstanceMask,
    threshold: f64,
) -> Result<Option<InstanceMask>> {
    let (h, w) = (input.height(), input.width());
    let pred = InstanceMask::from_fn(h, w, |y, x| {
        crate::denoiser::sigmoid(logits[y * w + x] as f64) > threshold
    });
    let m = pred.intersection(input)?;
    Ok((!m.is_empty()).then_some(m))
}

pub fn sample_inpaint<M: NoisePredictor + ?Sized>(
    model: &M,
    req: &SampleRequest,
    sched: &NoiseSchedule,
) -> Result<SampleResult> {
    Ok(sample_batch(model, std::slice::from_ref(req), sched)?.remove(0))
}

/// Run several requests in lockstep with batched network calls. All
/// requests must share one sampler config; each keeps its own noise stream,
/// so results do not depend on how requests are grouped.
pub fn sample_batch<M: NoisePredictor + ?Sized>(
    model: &M,
    reqs: &[SampleRequest],
    sched: &NoiseSchedule,
) -> Result<Vec<SampleResult>> {
    let Some(first) = reqs.first() else {
        return Ok(Vec::new());
    };
    let cfg = &first.config;
    cfg.validate(sched)?;
    if reqs.iter().any(|r| r.config != *cfg) {
        return Err(Error::config(
            "config",
            "batched requests must share one sampler config",
        ));
    }
    let (c, h, w) = first.source.dims3()?;
    for r in reqs {
        if r.source.shape() != [c, h, w] || r.mask.mask.height() != h || r.mask.mask.width() != w {
            return Err(Error::Shape(format!(
                "request image {:?} / mask {}x{}",
                r.source.shape(),
                r.mask.mask.height(),
                r.mask.mask.width()
            )));
        }
        r.source.ensure_finite("source image")?;
    }
    let n = reqs.len();
    let hw = h * w;
    let mut rngs: Vec<ChaCha8Rng> = reqs.iter().map(|r| sample_rng(r.seed)).collect();
    let mut xs = reqs
        .iter()
        .zip(&mut rngs)
        .map(|(r, rng)| init_latent(&r.source, &r.mask.mask, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut active: Vec<InstanceMask> = reqs.iter().map(|r| r.mask.mask.clone()).collect();
    let mut traces: Vec<Vec<TraceStep>> = vec![Vec::new(); n];
    let mut fallbacks: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut last_prob: Vec<Vec<f64>> = vec![Vec::new(); n];
    let masks: Vec<Tensor<f32>> = reqs.iter().map(|r| r.mask.mask.to_tensor()).collect();
    let mask_batch = Tensor::stack(&masks)?;

    for (i, (t, t_prev)) in sched.sampling_timesteps(cfg.steps)?.into_iter().enumerate() {
        let inp = DenoiserInput {
            x_t: Tensor::stack(&xs)?,
            mask: mask_batch.clone(),
            t: vec![t; n],
            s: reqs.iter().map(|r| r.mask.level).collect(),
            tokens: reqs.iter().map(|r| r.condition.token_id).collect(),
        };
        let (eps, logits) = guided_eps(model, &inp, cfg.guidance_scale)?;
        for k in 0..n {
            let lg = &logits.data()[k * hw..(k + 1) * hw];
            last_prob[k] = lg
                .iter()
                .map(|&z| crate::denoiser::sigmoid(z as f64))
                .collect();
            if cfg.mask_switch_step > 0 && i >= cfg.mask_switch_step {
                match switched_mask(lg, &reqs[k].mask.mask, cfg.mask_switch_threshold)? {
                    Some(m) => active[k] = m,
                    None => {
                        log::warn!(
                            "request {k}: predicted mask empty at step {i}; keeping the input mask"
                        );
                        active[k] = reqs[k].mask.mask.clone();
                        fallbacks[k].push(i);
                    }
                }
            }
            let mut e = eps.item(k)?;
            if cfg.clip_x0 {
                e = clipped_eps(&xs[k], &e, t, sched)?;
            }
            let next = blended_step(
                &xs[k],
                &e,
                &active[k],
                &reqs[k].mask.mask,
                t,
                t_prev,
                &reqs[k].source,
                sched,
                &mut rngs[k],
                cfg.kind,
                cfg.eta,
            )?;
            if !next.is_finite() {
                return Err(Error::NonFiniteLatent(i));
            }
            xs[k] = next;
            if cfg.trace {
                traces[k].push(TraceStep {
                    index: i,
                    t,
                    soft_mask: last_prob[k].clone(),
                    active_mask: active[k].clone(),
                });
            }
        }
    }
    let mut results = Vec::with_capacity(n);
    for (k, r) in reqs.iter().enumerate() {
        let output = composite(&xs[k], &r.source, &active[k].to_tensor())?;
        results.push(SampleResult {
            output,
            final_mask: active[k].clone(),
            final_mask_prob: std::mem::take(&mut last_prob[k]),
            trace: cfg.trace.then(|| std::mem::take(&mut traces[k])),
            fallback_steps: std::mem::take(&mut fallbacks[k]),
            seed: r.seed,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Vocabulary;
    use crate::schedule::make_linear_schedule;
    use approx::assert_relative_eq;

    /// `eps = a_token * x + b_token`, logits a fixed disc.
    struct Stub;

    impl NoisePredictor for Stub {
        fn predict(&self, inp: &DenoiserInput<f32>) -> Result<DenoiserOutput<f32>> {
            let (b, c, h, w) = inp.x_t.dims4()?;
            let per = c * h * w;
            let mut eps = inp.x_t.clone();
            for (k, chunk) in eps.data_mut().chunks_mut(per).enumerate() {
                let tok = inp.tokens[k] as f32;
                chunk
                    .iter_mut()
                    .for_each(|v| *v = 0.1 * (1.0 + tok) * *v + 0.05 * tok);
            }
            let logits = Tensor::from_fn(&[b, 1, h, w], |i| {
                let (y, x) = ((i % (h * w)) / w, i % w);
                let d = (y as f32 - 4.0).powi(2) + (x as f32 - 4.0).powi(2);
                if d <= 4.0 {
                    3.0
                } else {
                    -3.0
                }
            });
            Ok(DenoiserOutput {
                eps_hat: eps,
                mask_logits: logits,
            })
        }
    }

    fn request(mask: InstanceMask, level: usize, cfg: SamplerConfig) -> SampleRequest {
        SampleRequest {
            source: Tensor::from_fn(&[3, 8, 8], |i| ((i as f32) * 0.37).sin() * 0.5),
            mask: PrecisionMask { mask, level },
            condition: Vocabulary::default().decode(2).unwrap(),
            seed: 42,
            config: cfg,
        }
    }

    fn sched() -> NoiseSchedule {
        make_linear_schedule(20, 1e-3, 0.2).unwrap()
    }

    fn box_mask() -> InstanceMask {
        InstanceMask::from_fn(8, 8, |y, x| (1..7).contains(&y) && (1..7).contains(&x))
    }

    fn assert_background_exact(r: &SampleResult, src: &Tensor<f32>) {
        for (k, (&a, &b)) in r.output.data().iter().zip(src.data()).enumerate() {
            if r.final_mask.data()[k % 64] == 0 {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn init_latent_contract() {
        let x0 = Tensor::from_fn(&[3, 8, 8], |i| i as f32 * 0.01);
        let mut rng = sample_rng(1);
        assert_eq!(
            init_latent(&x0, &InstanceMask::empty(8, 8), &mut rng).unwrap(),
            x0
        );
        let full = init_latent(&x0, &InstanceMask::full(8, 8), &mut rng).unwrap();
        assert!(full.data().iter().zip(x0.data()).all(|(a, b)| a != b));
        let m = InstanceMask::from_fn(8, 8, |y, x| (x * 3 + y) % 5 == 0);
        let z = init_latent(&x0, &m, &mut rng).unwrap();
        for (k, (&a, &b)) in z.data().iter().zip(x0.data()).enumerate() {
            if m.data()[k % 64] == 0 {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn guidance_arithmetic() {
        let x = Tensor::from_fn(&[1, 3, 8, 8], |i| (i as f32 * 0.1).cos());
        let inp = DenoiserInput {
            x_t: x,
            mask: Tensor::full(&[1, 1, 8, 8], 1.0),
            t: vec![5],
            s: vec![0],
            tokens: vec![3],
        };
        let cond = Stub.predict(&inp).unwrap().eps_hat;
        let null = Stub
            .predict(&DenoiserInput {
                tokens: vec![0],
                ..inp.clone()
            })
            .unwrap()
            .eps_hat;
        assert_eq!(guided_eps(&Stub, &inp, 1.0).unwrap().0, cond);
        assert_eq!(guided_eps(&Stub, &inp, 0.0).unwrap().0, null);
        let g3 = guided_eps(&Stub, &inp, 3.0).unwrap().0;
        let expect = null.zip_map(&cond, |n, c| n + 3.0 * (c - n)).unwrap();
        assert_eq!(g3, expect);
    }

    #[test]
    fn blended_step_background() {
        let s = sched();
        let x0 = Tensor::from_fn(&[3, 8, 8], |i| (i as f32 * 0.2).sin());
        let xt = Tensor::from_fn(&[3, 8, 8], |i| (i as f32 * 0.3).cos());
        let eps = Tensor::full(&[3, 8, 8], 0.1);
        let active = InstanceMask::from_fn(8, 8, |y, _| y < 3);
        let region = box_mask();
        let mut rng = sample_rng(3);
        let out = blended_step(
            &xt,
            &eps,
            &active,
            &region,
            4,
            0,
            &x0,
            &s,
            &mut rng,
            SamplerKind::DeterministicSkip,
            0.0,
        )
        .unwrap();
        let inner = s.ddim_step(&xt, &eps, 4, 0, 0.0, None).unwrap();
        for k in 0..192 {
            let want = if active.data()[k % 64] == 1 {
                inner.data()[k]
            } else {
                x0.data()[k]
            };
            assert_eq!(out.data()[k].to_bits(), want.to_bits());
        }
        let full = InstanceMask::full(8, 8);
        let out = blended_step(
            &xt,
            &eps,
            &full,
            &region,
            4,
            2,
            &x0,
            &s,
            &mut rng,
            SamplerKind::DeterministicSkip,
            0.0,
        )
        .unwrap();
        assert_eq!(out, s.ddim_step(&xt, &eps, 4, 2, 0.0, None).unwrap());
    }

    /// Two blended steps with a stub model, background replayed by hand.
    #[test]
    fn two_step_background_trajectory() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        for clip_x0 in [false, true] {
            let cfg = SamplerConfig {
                steps: 2,
                guidance_scale: 1.0,
                mask_switch_step: 0,
                clip_x0,
                ..SamplerConfig::default()
            };
            let req = request(box_mask(), 4, cfg);
            let r = sample_inpaint(&Stub, &req, &s).unwrap();
            let mut rng = sample_rng(req.seed);
            let m = req.mask.mask.to_tensor::<f32>();
            let x2 = init_latent(&req.source, &req.mask.mask, &mut rng).unwrap();
            let single = |x: &Tensor<f32>, t: usize| {
                let inp = DenoiserInput {
                    x_t: x.clone().reshape(&[1, 3, 8, 8]).unwrap(),
                    mask: m.clone().reshape(&[1, 1, 8, 8]).unwrap(),
                    t: vec![t],
                    s: vec![4],
                    tokens: vec![req.condition.token_id],
                };
                let e = Stub.predict(&inp).unwrap().eps_hat.item(0).unwrap();
                if clip_x0 {
                    clipped_eps(x, &e, t, &s).unwrap()
                } else {
                    e
                }
            };
            let inner = s.ddim_step(&x2, &single(&x2, 2), 2, 1, 0.0, None).unwrap();
            let z = normal_tensor::<f32, _>(&[3, 8, 8], &mut rng);
            let bg = s.masked_q_sample(&req.source, &m, 1, &z).unwrap();
            let x1 = composite(&inner, &bg, &m).unwrap();
            let x0 = s.ddim_step(&x1, &single(&x1, 1), 1, 0, 0.0, None).unwrap();
            let expect = composite(&x0, &req.source, &m).unwrap();
            assert_eq!(r.output, expect);
        }
    }

    #[test]
    fn clipping_bounds_the_x0_estimate() {
        let s = sched();
        let x = Tensor::from_vec(&[4], vec![-3.0f32, -0.2, 0.1, 2.5]).unwrap();
        let eps = Tensor::from_vec(&[4], vec![0.0f32; 4]).unwrap();
        let t = 3;
        let e = clipped_eps(&x, &eps, t, &s).unwrap();
        let x0 = s.predict_x0(&x, &e, t).unwrap();
        let raw = s.predict_x0(&x, &eps, t).unwrap();
        for (c, r) in x0.data().iter().zip(raw.data()) {
            assert_relative_eq!(*c, r.clamp(-1.0, 1.0), epsilon = 1e-5);
        }
    }

    #[test]
    fn background_is_exact_without_switch() {
        let cfg = SamplerConfig {
            steps: 10,
            mask_switch_step: 0,
            guidance_scale: 3.0,
            ..SamplerConfig::default()
        };
        let req = request(box_mask(), 4, cfg);
        let r = sample_inpaint(&Stub, &req, &sched()).unwrap();
        assert_eq!(r.final_mask, req.mask.mask);
        assert_background_exact(&r, &req.source);
    }

    #[test]
    fn switch_shrinks_active_mask_and_keeps_background() {
        let cfg = SamplerConfig {
            steps: 10,
            mask_switch_step: 3,
            trace: true,
            ..SamplerConfig::default()
        };
        let req = request(box_mask(), 4, cfg);
        let r = sample_inpaint(&Stub, &req, &sched()).unwrap();
        let disc = InstanceMask::from_fn(8, 8, |y, x| {
            (y as i32 - 4).pow(2) + (x as i32 - 4).pow(2) <= 4
        });
        assert_eq!(r.final_mask, disc.intersection(&req.mask.mask).unwrap());
        assert_background_exact(&r, &req.source);
        let trace = r.trace.unwrap();
        assert_eq!(trace.len(), 10);
        assert!(trace
            .iter()
            .all(|s| s.soft_mask.iter().all(|&p| p > 0.0 && p < 1.0)));
        assert_eq!(trace[2].active_mask, req.mask.mask);
        for pair in trace.windows(2) {
            assert!(pair[1].active_mask.is_subset_of(&pair[0].active_mask));
        }
    }

    #[test]
    fn empty_prediction_falls_back_to_input_mask() {
        let cfg = SamplerConfig {
            steps: 5,
            mask_switch_step: 1,
            ..SamplerConfig::default()
        };
        let corner = InstanceMask::from_fn(8, 8, |y, x| y < 2 && x < 2);
        let req = request(corner.clone(), 0, cfg);
        let r = sample_inpaint(&Stub, &req, &sched()).unwrap();
        assert_eq!(r.final_mask, corner);
        assert_eq!(r.fallback_steps, vec![1, 2, 3, 4]);
        assert_background_exact(&r, &req.source);
    }

    #[test]
    fn deterministic_and_batch_invariant() {
        let s = sched();
        for kind in [SamplerKind::DeterministicSkip, SamplerKind::Ancestral] {
            let cfg = SamplerConfig {
                steps: 20,
                kind,
                ..SamplerConfig::default()
            };
            let a = request(box_mask(), 4, cfg.clone());
            let mut b = request(InstanceMask::from_fn(8, 8, |y, _| y > 4), 1, cfg);
            b.seed = 7;
            let one = sample_inpaint(&Stub, &a, &s).unwrap();
            assert_eq!(one, sample_inpaint(&Stub, &a, &s).unwrap());
            let both = sample_batch(&Stub, &[b.clone(), a.clone()], &s).unwrap();
            assert_eq!(both[1], one);
            assert_eq!(both[0], sample_inpaint(&Stub, &b, &s).unwrap());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let s = sched();
        let bad = [
            SamplerConfig {
                steps: 0,
                ..SamplerConfig::default()
            },
            SamplerConfig {
                steps: 21,
                ..SamplerConfig::default()
            },
            SamplerConfig {
                steps: 5,
                mask_switch_step: 6,
                ..SamplerConfig::default()
            },
            SamplerConfig {
                guidance_scale: -1.0,
                ..SamplerConfig {
                    steps: 5,
                    ..SamplerConfig::default()
                }
            },
        ];
        for cfg in bad {
            assert!(sample_inpaint(&Stub, &request(box_mask(), 4, cfg), &s).is_err());
        }
    }
}
