//! The conditional noise-prediction network: a small U-Net over the noisy
//! image plus one mask channel, conditioned on timestep, precision level and
//! a text token, returning predicted noise and one mask-logit channel.

mod condition;

pub use condition::{null_condition, Condition, ConditionKind, Vocabulary, NULL_TOKEN};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskops::InstanceMask;
use crate::nn::{init_normal, Graph, ParamId, ParamStore, Var};
use crate::rng::keyed_rng;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub resolution: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    /// Feature-map sizes (in pixels) at which self-attention is applied.
    pub attention_resolutions: Vec<usize>,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub vocab_size: usize,
    /// Highest precision level S; the level table has S + 1 rows.
    pub levels: usize,
    /// Largest diffusion timestep accepted.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            resolution: 32,
            base_width: 32,
            channel_mults: vec![1, 2, 4],
            attention_resolutions: vec![8],
            head_dim: 32,
            embed_dim: 128,
            groups: 8,
            vocab_size: Vocabulary::default().size(),
            levels: 4,
            timesteps: 200,
        }
    }
}

impl DenoiserConfig {
    fn widths(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_width)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let down = self.channel_mults.len().saturating_sub(1);
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::config(
                "denoiser.channel_mults",
                "need at least one positive multiplier",
            ));
        }
        if self.image_channels == 0 {
            return Err(Error::config("denoiser.image_channels", "must be positive"));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(1 << down) {
            return Err(Error::config(
                "denoiser.resolution",
                format!("{} is not divisible by 2^{down}", self.resolution),
            ));
        }
        if self.groups == 0 || self.widths().iter().any(|w| w % self.groups != 0) {
            return Err(Error::config(
                "denoiser.groups",
                "every level width must be divisible by groups",
            ));
        }
        for (i, &w) in self.widths().iter().enumerate() {
            let res = self.resolution >> i;
            let deepest = i + 1 == self.channel_mults.len();
            if (deepest || self.attention_resolutions.contains(&res))
                && (self.head_dim == 0 || w % self.head_dim != 0)
            {
                return Err(Error::config(
                    "denoiser.head_dim",
                    format!("width {w} is not a multiple of head_dim"),
                ));
            }
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::config(
                "denoiser.embed_dim",
                "must be even and at least 2",
            ));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("denoiser.vocab_size", "must be positive"));
        }
        if self.timesteps == 0 {
            return Err(Error::config("denoiser.timesteps", "must be positive"));
        }
        Ok(())
    }
}

/// Network output for one image (`(C, H, W)` and `(1, H, W)`) or a batch
/// (`(B, C, H, W)` and `(B, 1, H, W)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput<F: Float = f32> {
    pub eps_hat: Tensor<F>,
    pub mask_logits: Tensor<F>,
}

impl<F: Float> DenoiserOutput<F> {
    /// Split a `(B, C + 1, H, W)` head into noise and mask logits.
    pub fn from_head(head: &Tensor<F>) -> Result<Self> {
        let (b, c1, h, w) = head.dims4()?;
        let c = c1 - 1;
        let hw = h * w;
        let mut eps = Vec::with_capacity(b * c * hw);
        let mut logits = Vec::with_capacity(b * hw);
        for item in head.data().chunks(c1 * hw) {
            eps.extend_from_slice(&item[..c * hw]);
            logits.extend_from_slice(&item[c * hw..]);
        }
        Ok(Self {
            eps_hat: Tensor::from_vec(&[b, c, h, w], eps)?,
            mask_logits: Tensor::from_vec(&[b, 1, h, w], logits)?,
        })
    }

    /// Inverse of [`DenoiserOutput::from_head`] for gradients.
    pub fn join_head(d_eps: &Tensor<F>, d_logits: &Tensor<F>) -> Result<Tensor<F>> {
        let (b, c, h, w) = d_eps.dims4()?;
        if d_logits.shape() != [b, 1, h, w] {
            return Err(Error::Shape(format!(
                "mask gradient {:?}",
                d_logits.shape()
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * (c + 1) * hw);
        for (e, l) in d_eps.data().chunks(c * hw).zip(d_logits.data().chunks(hw)) {
            data.extend_from_slice(e);
            data.extend_from_slice(l);
        }
        Tensor::from_vec(&[b, c + 1, h, w], data)
    }

    pub fn batch_len(&self) -> usize {
        self.eps_hat.shape()[0]
    }

    /// Item `i` of a batched output, without the batch axis.
    pub fn item(&self, i: usize) -> Result<DenoiserOutput<F>> {
        Ok(DenoiserOutput {
            eps_hat: self.eps_hat.item(i)?,
            mask_logits: self.mask_logits.item(i)?,
        })
    }
}

pub fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Elementwise sigmoid of the mask channel.
pub fn predict_mask_prob<F: Float>(out: &DenoiserOutput<F>) -> Tensor<F> {
    out.mask_logits.map(sigmoid)
}

/// Batched network inputs. `x_t` is `(B, C, H, W)`, `mask` is `(B, 1, H, W)`.
#[derive(Debug, Clone)]
pub struct DenoiserInput<F: Float> {
    pub x_t: Tensor<F>,
    pub mask: Tensor<F>,
    pub t: Vec<usize>,
    pub s: Vec<usize>,
    pub tokens: Vec<usize>,
}

struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

struct Lin {
    w: ParamId,
    b: ParamId,
}

struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Lin,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

struct AttnBlock {
    norm: Norm,
    qkv: Conv,
    proj: Conv,
    heads: usize,
}

struct DownLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Option<Conv>,
}

struct UpLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    upsample: bool,
}

struct Layout {
    time1: Lin,
    time2: Lin,
    level_table: ParamId,
    token_table: ParamId,
    conv_in: Conv,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    out_norm: Norm,
    out_conv: Conv,
}

struct Builder<'a, F: Float, R: Rng> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut R,
}

impl<F: Float, R: Rng> Builder<'_, F, R> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero: bool,
    ) -> Conv {
        let shape = [cout, cin, k, k];
        let w = if zero {
            Tensor::zeros(&shape)
        } else {
            init_normal(&shape, cin * k * k, 2f64.sqrt(), self.rng)
        };
        Conv {
            w: self.store.add(format!("{name}.weight"), w),
            b: self
                .store
                .add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    fn lin(&mut self, name: &str, fin: usize, fout: usize) -> Lin {
        let w = init_normal(&[fout, fin], fin, 1.0, self.rng);
        Lin {
            w: self.store.add(format!("{name}.weight"), w),
            b: self
                .store
                .add(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self
                .store
                .add(format!("{name}.gamma"), Tensor::full(&[c], F::one())),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    fn table(&mut self, name: &str, rows: usize, dim: usize) -> ParamId {
        let t = init_normal(&[rows, dim], 1, 1.0, self.rng);
        self.store.add(name, t)
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            emb: self.lin(&format!("{name}.emb"), emb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    fn attn(&mut self, name: &str, c: usize, head_dim: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            qkv: self.conv(&format!("{name}.qkv"), c, 3 * c, 1, 1, false),
            proj: self.conv(&format!("{name}.proj"), c, c, 1, 1, true),
            heads: c / head_dim,
        }
    }
}

/// Sinusoidal features of `t`, `dim` values (half sines, half cosines).
fn timestep_features<F: Float>(ts: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs =
            (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let args: Vec<f64> = freqs.collect();
        data.extend(args.iter().map(|a| F::of(a.sin())));
        data.extend(args.iter().map(|a| F::of(a.cos())));
    }
    Tensor::from_vec(&[ts.len(), dim], data).expect("feature dims")
}

pub struct Denoiser<F: Float = f32> {
    config: DenoiserConfig,
    params: ParamStore<F>,
    layout: Layout,
}

impl<F: Float> Denoiser<F> {
    /// Freshly initialized network; initialization is a pure function of
    /// `(config, seed)`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = keyed_rng(seed, &[0x1417]);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let widths = config.widths();
        let e = config.embed_dim;
        let time1 = b.lin("time.fc1", e, e);
        let time2 = b.lin("time.fc2", e, e);
        let level_table = b.table("level_embedding", config.levels + 1, e);
        let token_table = b.table("token_embedding", config.vocab_size, e);
        let conv_in = b.conv("conv_in", config.image_channels + 1, widths[0], 3, 1, false);
        let attn_at = |i: usize| {
            config
                .attention_resolutions
                .contains(&(config.resolution >> i))
        };
        let mut down = Vec::new();
        let mut prev = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let res = b.res(&format!("down.{i}.res"), prev, w, e);
            let attn = attn_at(i).then(|| b.attn(&format!("down.{i}.attn"), w, config.head_dim));
            let last = i + 1 == widths.len();
            let dconv = (!last).then(|| b.conv(&format!("down.{i}.downsample"), w, w, 3, 2, false));
            down.push(DownLevel {
                res,
                attn,
                down: dconv,
            });
            prev = w;
        }
        let deepest = *widths.last().expect("validated");
        let mid1 = b.res("mid.res1", deepest, deepest, e);
        let mid_attn = b.attn("mid.attn", deepest, config.head_dim);
        let mid2 = b.res("mid.res2", deepest, deepest, e);
        let mut up = Vec::new();
        let mut cur = deepest;
        for (i, &w) in widths.iter().enumerate().rev() {
            let res = b.res(&format!("up.{i}.res"), cur + w, w, e);
            let attn = attn_at(i).then(|| b.attn(&format!("up.{i}.attn"), w, config.head_dim));
            up.push(UpLevel {
                res,
                attn,
                upsample: i > 0,
            });
            cur = w;
        }
        let out_norm = b.norm("out.norm", widths[0]);
        let out_conv = b.conv("out.conv", widths[0], config.image_channels + 1, 1, 1, true);
        let layout = Layout {
            time1,
            time2,
            level_table,
            token_table,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            out_norm,
            out_conv,
        };
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same architecture and weights in another float type.
    pub fn cast<G: Float>(&self) -> Result<Denoiser<G>> {
        let mut other = Denoiser::<G>::new(self.config.clone(), 0)?;
        other.params = self.params.cast();
        Ok(other)
    }

    fn check_input(&self, inp: &DenoiserInput<F>) -> Result<usize> {
        let cfg = &self.config;
        let (b, c, h, w) = inp.x_t.dims4()?;
        if c != cfg.image_channels || h != cfg.resolution || w != cfg.resolution {
            return Err(Error::Shape(format!(
                "denoiser expects (B, {}, {r}, {r}), got {:?}",
                cfg.image_channels,
                inp.x_t.shape(),
                r = cfg.resolution
            )));
        }
        if inp.mask.shape() != [b, 1, h, w] {
            return Err(Error::Shape(format!(
                "mask {:?} vs image {:?}",
                inp.mask.shape(),
                inp.x_t.shape()
            )));
        }
        if inp.t.len() != b || inp.s.len() != b || inp.tokens.len() != b {
            return Err(Error::Shape(format!(
                "batch of {b} with {} timesteps, {} levels, {} tokens",
                inp.t.len(),
                inp.s.len(),
                inp.tokens.len()
            )));
        }
        if let Some(t) = inp.t.iter().find(|&&t| t == 0 || t > cfg.timesteps) {
            return Err(Error::Range(format!(
                "timestep {t} not in 1..={}",
                cfg.timesteps
            )));
        }
        if let Some(s) = inp.s.iter().find(|&&s| s > cfg.levels) {
            return Err(Error::Range(format!(
                "precision level {s} not in 0..={}",
                cfg.levels
            )));
        }
        if let Some(k) = inp.tokens.iter().find(|&&k| k >= cfg.vocab_size) {
            return Err(Error::Range(format!(
                "token {k} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        Ok(b)
    }

    /// Record a forward pass on `g`; the returned node is the `(B, C + 1, H, W)`
    /// head whose last channel is the mask logit.
    pub fn record(&self, g: &mut Graph<F>, inp: &DenoiserInput<F>) -> Result<Var> {
        self.check_input(inp)?;
        let l = &self.layout;
        let p = &self.params;
        let groups = self.config.groups;

        let feats = g.input(timestep_features(&inp.t, self.config.embed_dim));
        let temb = lin(g, p, &l.time1, feats)?;
        let temb = g.silu(temb);
        let temb = lin(g, p, &l.time2, temb)?;
        let level_table = g.param(p, l.level_table);
        let semb = g.embedding(level_table, &inp.s)?;
        let token_table = g.param(p, l.token_table);
        let cemb = g.embedding(token_table, &inp.tokens)?;
        let cond = g.add(temb, semb)?;
        let cond = g.add(cond, cemb)?;
        let cond = g.silu(cond);

        let x = g.input(inp.x_t.clone());
        let m = g.input(inp.mask.clone());
        let xm = g.concat(x, m)?;
        let mut h = conv(g, p, &l.conv_in, xm)?;
        let mut skips = Vec::new();
        for lvl in &l.down {
            h = res_block(g, p, &lvl.res, h, cond, groups)?;
            if let Some(a) = &lvl.attn {
                h = attn_block(g, p, a, h, groups)?;
            }
            skips.push(h);
            if let Some(d) = &lvl.down {
                h = conv(g, p, d, h)?;
            }
        }
        h = res_block(g, p, &l.mid1, h, cond, groups)?;
        h = attn_block(g, p, &l.mid_attn, h, groups)?;
        h = res_block(g, p, &l.mid2, h, cond, groups)?;
        for lvl in &l.up {
            let skip = skips.pop().expect("one skip per level");
            let hc = g.concat(h, skip)?;
            h = res_block(g, p, &lvl.res, hc, cond, groups)?;
            if let Some(a) = &lvl.attn {
                h = attn_block(g, p, a, h, groups)?;
            }
            if lvl.upsample {
                h = g.upsample2x(h)?;
            }
        }
        h = norm(g, p, &l.out_norm, h, groups)?;
        h = g.silu(h);
        conv(g, p, &l.out_conv, h)
    }

    /// Batched inference.
    pub fn forward_batch(&self, inp: &DenoiserInput<F>) -> Result<DenoiserOutput<F>> {
        let mut g = Graph::new();
        let head = self.record(&mut g, inp)?;
        DenoiserOutput::from_head(g.value(head))
    }

    /// Single-image inference: `x_t` is `(C, H, W)`, the outputs drop the
    /// batch axis.
    pub fn forward(
        &self,
        x_t: &Tensor<F>,
        m_s: &InstanceMask,
        t: usize,
        c: &Condition,
        s: usize,
    ) -> Result<DenoiserOutput<F>> {
        let (ch, h, w) = x_t.dims3()?;
        if m_s.height() != h || m_s.width() != w {
            return Err(Error::Shape(format!(
                "mask {}x{} vs image {h}x{w}",
                m_s.height(),
                m_s.width()
            )));
        }
        let inp = DenoiserInput {
            x_t: x_t.clone().reshape(&[1, ch, h, w])?,
            mask: m_s.to_tensor::<F>().reshape(&[1, 1, h, w])?,
            t: vec![t],
            s: vec![s],
            tokens: vec![c.token_id],
        };
        self.forward_batch(&inp)?.item(0)
    }
}

fn conv<F: Float>(g: &mut Graph<F>, p: &ParamStore<F>, c: &Conv, x: Var) -> Result<Var> {
    let w = g.param(p, c.w);
    let b = g.param(p, c.b);
    g.conv2d(x, w, Some(b), c.stride, c.pad)
}

fn lin<F: Float>(g: &mut Graph<F>, p: &ParamStore<F>, l: &Lin, x: Var) -> Result<Var> {
    let w = g.param(p, l.w);
    let b = g.param(p, l.b);
    g.linear(x, w, Some(b))
}

fn norm<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    n: &Norm,
    x: Var,
    groups: usize,
) -> Result<Var> {
    let gamma = g.param(p, n.gamma);
    let beta = g.param(p, n.beta);
    let c = g.value(x).shape()[1];
    g.group_norm(x, gamma, beta, groups.min(c))
}

fn res_block<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    r: &ResBlock,
    x: Var,
    cond: Var,
    groups: usize,
) -> Result<Var> {
    let h = norm(g, p, &r.norm1, x, groups)?;
    let h = g.silu(h);
    let h = conv(g, p, &r.conv1, h)?;
    let e = lin(g, p, &r.emb, cond)?;
    let h = g.add_channel(h, e)?;
    let h = norm(g, p, &r.norm2, h, groups)?;
    let h = g.silu(h);
    let h = conv(g, p, &r.conv2, h)?;
    let skip = match &r.skip {
        Some(s) => conv(g, p, s, x)?,
        None => x,
    };
    g.add(h, skip)
}

fn attn_block<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    a: &AttnBlock,
    x: Var,
    groups: usize,
) -> Result<Var> {
    let h = norm(g, p, &a.norm, x, groups)?;
    let qkv = conv(g, p, &a.qkv, h)?;
    let h = g.attention(qkv, a.heads)?;
    let h = conv(g, p, &a.proj, h)?;
    g.add(h, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            resolution: 8,
            base_width: 8,
            channel_mults: vec![1, 2],
            attention_resolutions: vec![4],
            head_dim: 8,
            embed_dim: 16,
            groups: 4,
            vocab_size: 7,
            levels: 2,
            timesteps: 10,
            ..DenoiserConfig::default()
        }
    }

    fn tiny_input<F: Float>(b: usize, seed: u64) -> DenoiserInput<F> {
        let mut rng = keyed_rng(seed, &[]);
        DenoiserInput {
            x_t: normal_tensor(&[b, 3, 8, 8], &mut rng),
            mask: Tensor::from_fn(&[b, 1, 8, 8], |i| {
                if (i / 8) % 8 >= 3 {
                    F::one()
                } else {
                    F::zero()
                }
            }),
            t: (0..b).map(|i| 1 + (3 * i) % 10).collect(),
            s: (0..b).map(|i| i % 3).collect(),
            tokens: (0..b).map(|i| (2 * i + 1) % 7).collect(),
        }
    }

    /// Perturb every parameter so zero-initialized layers pass gradient.
    fn randomize<F: Float>(net: &mut Denoiser<F>, seed: u64) {
        let mut rng = keyed_rng(seed, &[9]);
        for t in net.params_mut().tensors_mut() {
            let noise: Tensor<F> = normal_tensor(t.shape(), &mut rng);
            t.add_assign(&noise.scale(F::of(0.2))).unwrap();
        }
    }

    #[test]
    fn default_parameter_count_is_desk_scale() {
        let net = Denoiser::<f32>::new(DenoiserConfig::default(), 0).unwrap();
        let n = net.num_parameters();
        assert!((500_000..=5_000_000).contains(&n), "{n} parameters");
    }

    #[test]
    fn output_shapes_follow_input() {
        let net = Denoiser::<f32>::new(tiny_config(), 1).unwrap();
        let out = net.forward_batch(&tiny_input(2, 0)).unwrap();
        assert_eq!(out.eps_hat.shape(), &[2, 3, 8, 8]);
        assert_eq!(out.mask_logits.shape(), &[2, 1, 8, 8]);
        let v = Vocabulary::default();
        let x = Tensor::<f32>::zeros(&[3, 8, 8]);
        let m = InstanceMask::full(8, 8);
        let one = net.forward(&x, &m, 3, &v.decode(2).unwrap(), 1).unwrap();
        assert_eq!(one.eps_hat.shape(), &[3, 8, 8]);
        assert_eq!(one.mask_logits.shape(), &[1, 8, 8]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = Denoiser::<f32>::new(tiny_config(), 1).unwrap();
        randomize(&mut net, 3);
        let inp = tiny_input(3, 4);
        let a = net.forward_batch(&inp).unwrap();
        let b = net.forward_batch(&inp).unwrap();
        assert_eq!(a, b);
        let again = Denoiser::<f32>::new(tiny_config(), 1).unwrap();
        assert_eq!(
            again.params().tensors(),
            Denoiser::<f32>::new(tiny_config(), 1)
                .unwrap()
                .params()
                .tensors()
        );
    }

    #[test]
    fn batch_items_are_independent() {
        let mut net = Denoiser::<f64>::new(tiny_config(), 2).unwrap();
        randomize(&mut net, 5);
        let inp = tiny_input::<f64>(3, 6);
        let all = net.forward_batch(&inp).unwrap();
        let single = DenoiserInput {
            x_t: inp.x_t.narrow_batch(1, 1).unwrap(),
            mask: inp.mask.narrow_batch(1, 1).unwrap(),
            t: vec![inp.t[1]],
            s: vec![inp.s[1]],
            tokens: vec![inp.tokens[1]],
        };
        let one = net.forward_batch(&single).unwrap();
        assert!(
            one.eps_hat
                .max_abs_diff(&all.eps_hat.narrow_batch(1, 1).unwrap())
                < 1e-12
        );
    }

    #[test]
    fn rejects_out_of_range_conditioning() {
        let net = Denoiser::<f32>::new(tiny_config(), 1).unwrap();
        let mut inp = tiny_input(1, 0);
        inp.t = vec![0];
        assert!(net.forward_batch(&inp).is_err());
        let mut inp = tiny_input(1, 0);
        inp.s = vec![3];
        assert!(net.forward_batch(&inp).is_err());
        let mut inp = tiny_input(1, 0);
        inp.tokens = vec![7];
        assert!(net.forward_batch(&inp).is_err());
    }

    #[test]
    fn head_split_and_join_are_inverse() {
        let head = Tensor::<f64>::from_fn(&[2, 4, 3, 3], |i| i as f64);
        let out = DenoiserOutput::from_head(&head).unwrap();
        assert_eq!(out.mask_logits.data()[0], 27.0);
        let back = DenoiserOutput::join_head(&out.eps_hat, &out.mask_logits).unwrap();
        assert_eq!(back, head);
    }

    #[test]
    fn sigmoid_values() {
        let out = DenoiserOutput {
            eps_hat: Tensor::<f64>::zeros(&[1, 1, 3]),
            mask_logits: Tensor::from_vec(&[1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap(),
        };
        let p = predict_mask_prob(&out);
        let expect = [0.2689414213699951, 0.5, 0.7310585786300049];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((1.0 - sigmoid(20.0f64)) < 1e-8);
    }

    /// Central differences through both heads on an 8x8 probe.
    #[test]
    fn gradients_match_finite_differences() {
        let mut net = Denoiser::<f64>::new(tiny_config(), 7).unwrap();
        randomize(&mut net, 8);
        let inp = tiny_input::<f64>(1, 9);
        let mut rng = keyed_rng(10, &[]);
        let w_eps: Tensor<f64> = normal_tensor(&[1, 3, 8, 8], &mut rng);
        let w_mask: Tensor<f64> = normal_tensor(&[1, 1, 8, 8], &mut rng);
        let objective = |net: &Denoiser<f64>| {
            let out = net.forward_batch(&inp).unwrap();
            let a: f64 = out
                .eps_hat
                .data()
                .iter()
                .zip(w_eps.data())
                .map(|(x, w)| x * w)
                .sum();
            let b: f64 = out
                .mask_logits
                .data()
                .iter()
                .zip(w_mask.data())
                .map(|(x, w)| x * w)
                .sum();
            a + b
        };
        let mut g = Graph::new();
        let head = net.record(&mut g, &inp).unwrap();
        let seed = DenoiserOutput::join_head(&w_eps, &w_mask).unwrap();
        let grads = g.backward(&[(head, seed)]).unwrap();
        let pg = g.param_grads(&grads, net.params());
        let names = [
            "conv_in.weight",
            "down.0.res.conv1.weight",
            "down.1.attn.qkv.weight",
            "mid.res2.conv2.weight",
            "up.0.res.emb.weight",
            "level_embedding",
            "token_embedding",
            "time.fc1.weight",
            "out.conv.weight",
            "out.norm.gamma",
        ];
        let h = 1e-6;
        for name in names {
            let id = net.params().id(name).unwrap();
            let len = net.params().get(id).len();
            for k in [0, len / 3, len - 1] {
                let orig = net.params().get(id).data()[k];
                net.params_mut().get_mut(id).data_mut()[k] = orig + h;
                let fp = objective(&net);
                net.params_mut().get_mut(id).data_mut()[k] = orig - h;
                let fm = objective(&net);
                net.params_mut().get_mut(id).data_mut()[k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = pg[id.0].data()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{k}]: analytic {an} vs numeric {fd}");
            }
        }
    }
}
