//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] with seed gradients for one or more outputs walks the
//! tape in reverse and returns gradients for every node that depends on a
//! parameter.

use super::kernels::{self, ConvGeom, GroupStats};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats<F>,
    },
    Silu(Var),
    Relu(Var),
    Add(Var, Var),
    AddChannel {
        x: Var,
        e: Var,
    },
    Concat(Var, Var),
    Upsample2x(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<F>,
    },
    GlobalAvgPool(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input, &[])
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), &[])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} vs kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?}",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {k} does not fit {h}x{wd}")))?;
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            &geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[batch, cout, geom.ho, geom.wo], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, fin) = self.value(x).dims2()?;
        let (fout, wfin) = self.value(w).dims2()?;
        if fin != wfin {
            return Err(Error::Shape(format!(
                "linear: {fin} inputs vs weight {wfin}"
            )));
        }
        let mut y = vec![F::zero(); batch * fout];
        F::gemm(
            batch,
            fin,
            fout,
            F::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            F::zero(),
            &mut y,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(fout) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::from_vec(&[batch, fout], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!(
                "group_norm: {c} channels into {groups} groups"
            )));
        }
        let (y, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            batch,
            c,
            h * w,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::from_vec(&[batch, c, h, w], y)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (F::one() + (-v).exp()));
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(F::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x[b, c, :, :] + e[b, c]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        if self.value(e).shape() != [batch, c] {
            return Err(Error::Shape(format!(
                "add_channel: {:?} vs {:?}",
                self.value(x).shape(),
                self.value(e).shape()
            )));
        }
        let mut value = self.value(x).clone();
        let ev = self.value(e).data().to_vec();
        for (plane, &bias) in value.data_mut().chunks_mut(h * w).zip(&ev) {
            plane.iter_mut().for_each(|v| *v += bias);
        }
        Ok(self.push(value, Op::AddChannel { x, e }, &[x, e]))
    }

    /// Channel-axis concatenation of two rank-4 tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, h, w) = self.value(a).dims4()?;
        let (bb, cb, h2, w2) = self.value(b).dims4()?;
        if ba != bb || h != h2 || w != w2 {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(ba * (ca + cb) * hw);
        for i in 0..ba {
            data.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[ba, ca + cb, h, w], data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut data = vec![F::zero(); batch * c * 4 * h * w];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[batch, c, 2 * h, 2 * w], data)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = self.value(table).dims2()?;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::Range(format!("embedding index {id} >= {rows}")));
            }
            data.extend_from_slice(&self.value(table).data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::from_vec(&[ids.len(), dim], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head self-attention over spatial positions. `qkv` is
    /// `[B, 3C, H, W]`; the result is `[B, C, H, W]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (batch, c3, h, w) = self.value(qkv).dims4()?;
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: {c3} channels, {heads} heads"
            )));
        }
        let c = c3 / 3;
        let (out, probs) =
            kernels::attention_forward(self.value(qkv).data(), batch, c, h * w, heads);
        let value = Tensor::from_vec(&[batch, c, h, w], out)?;
        Ok(self.push(value, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        let n = F::of((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<F>() / n)
            .collect();
        let value = Tensor::from_vec(&[batch, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Reverse pass from the given output gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor<F>)]) -> Result<Gradients<F>> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            self.value(*v).ensure_same_shape(g, "backward seed")?;
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node<F>,
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let batch = xv.shape()[0];
                let cout = wv.shape()[0];
                let g = kernels::conv2d_backward(
                    xv.data(),
                    batch,
                    geom,
                    wv.data(),
                    cout,
                    gy.data(),
                    self.needs(*x),
                );
                if let Some(dx) = g.dx {
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                if self.needs(*w) {
                    accumulate(grads, *w, Tensor::from_vec(wv.shape(), g.dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, Tensor::from_vec(&[cout], g.db)?);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, fin) = xv.dims2()?;
                let fout = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); batch * fin];
                    F::gemm(
                        batch,
                        fout,
                        fin,
                        F::one(),
                        gy.data(),
                        false,
                        wv.data(),
                        false,
                        F::zero(),
                        &mut dx,
                    );
                    accumulate(grads, *x, Tensor::from_vec(&[batch, fin], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); fout * fin];
                    F::gemm(
                        fout,
                        batch,
                        fin,
                        F::one(),
                        gy.data(),
                        true,
                        xv.data(),
                        false,
                        F::zero(),
                        &mut dw,
                    );
                    accumulate(grads, *w, Tensor::from_vec(&[fout, fin], dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![F::zero(); fout];
                        for row in gy.data().chunks(fout) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        accumulate(grads, *b, Tensor::from_vec(&[fout], db)?);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xv = self.value(*x);
                let (batch, c, h, w) = xv.dims4()?;
                let (dx, dg, db) = kernels::group_norm_backward(
                    xv.data(),
                    batch,
                    c,
                    h * w,
                    *groups,
                    self.value(*gamma).data(),
                    stats,
                    gy.data(),
                );
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(&[c], dg)?);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(&[c], db)?);
                }
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(gy, |v, g| {
                    let s = F::one() / (F::one() + (-v).exp());
                    g * s * (F::one() + v * (F::one() - s))
                })?;
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .zip_map(gy, |v, g| if v > F::zero() { g } else { F::zero() })?;
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::AddChannel { x, e } => {
                if self.needs(*x) {
                    accumulate(grads, *x, gy.clone());
                }
                if self.needs(*e) {
                    let (_, _, h, w) = gy.dims4()?;
                    let de: Vec<F> = gy
                        .data()
                        .chunks(h * w)
                        .map(|p| p.iter().copied().sum())
                        .collect();
                    accumulate(grads, *e, Tensor::from_vec(self.value(*e).shape(), de)?);
                }
            }
            Op::Concat(a, b) => {
                let (batch, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(batch * ca * hw);
                let mut db = Vec::with_capacity(batch * cb * hw);
                for item in gy.data().chunks((ca + cb) * hw) {
                    da.extend_from_slice(&item[..ca * hw]);
                    db.extend_from_slice(&item[ca * hw..]);
                }
                if self.needs(*a) {
                    accumulate(grads, *a, Tensor::from_vec(&[batch, ca, h, w], da)?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, Tensor::from_vec(&[batch, cb, h, w], db)?);
                }
            }
            Op::Upsample2x(x) => {
                let (batch, c, h, w) = self.value(*x).dims4()?;
                let mut dx = vec![F::zero(); batch * c * h * w];
                for (p, plane) in gy.data().chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[batch, c, h, w], dx)?);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let dim = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape());
                for (row, &id) in gy.data().chunks(dim).zip(ids) {
                    for (d, &g) in dt.data_mut()[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                        *d += g;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Attention { qkv, heads, probs } => {
                let qv = self.value(*qkv);
                let (batch, c3, h, w) = qv.dims4()?;
                let d = kernels::attention_backward(
                    qv.data(),
                    probs,
                    gy.data(),
                    batch,
                    c3 / 3,
                    h * w,
                    *heads,
                );
                accumulate(grads, *qkv, Tensor::from_vec(qv.shape(), d)?);
            }
            Op::GlobalAvgPool(x) => {
                let (batch, c, h, w) = self.value(*x).dims4()?;
                let n = F::of((h * w) as f64);
                let mut dx = Vec::with_capacity(batch * c * h * w);
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g / n, h * w));
                }
                accumulate(grads, *x, Tensor::from_vec(&[batch, c, h, w], dx)?);
            }
        }
        Ok(())
    }

    /// Gradients of every parameter in `store`, zero-filled for parameters
    /// that were not used in this pass.
    pub fn param_grads(&self, grads: &Gradients<F>, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        let mut out: Vec<Tensor<F>> = store
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                out[id.0]
                    .add_assign(g)
                    .expect("parameter gradient shape matches parameter");
            }
        }
        out
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
        None => grads[v.0] = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::nn::params::init_normal;

    /// Central finite differences of `loss = <seed, f(params)>` against the
    /// tape gradient, for every parameter scalar.
    fn check<B>(store: &mut ParamStore<f64>, build: B)
    where
        B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let mut g = Graph::new();
        let out = build(&mut g, store);
        let seed = Tensor::from_fn(g.value(out).shape(), |i| ((i as f64) * 0.77).sin());
        let grads = g.backward(&[(out, seed.clone())]).unwrap();
        let analytic = g.param_grads(&grads, store);
        let loss = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let out = build(&mut g, s);
            g.value(out)
                .data()
                .iter()
                .zip(seed.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for p in 0..store.len() {
            for i in 0..store.tensors()[p].len() {
                let orig = store.tensors()[p].data()[i];
                store.tensors_mut()[p].data_mut()[i] = orig + h;
                let up = loss(store);
                store.tensors_mut()[p].data_mut()[i] = orig - h;
                let down = loss(store);
                store.tensors_mut()[p].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic[p].data()[i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "param {} [{i}]: fd {fd} vs analytic {an}",
                    store.name(ParamId(p))
                );
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_strided_and_padded_gradients() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let x = s.add("x", init_normal(&[2, 3, 5, 4], 1, 1.0, &mut r));
        let w = s.add("w", init_normal(&[4, 3, 3, 3], 1, 1.0, &mut r));
        let b = s.add("b", init_normal(&[4], 1, 1.0, &mut r));
        check(&mut s, |g, s| {
            let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
            g.conv2d(xv, wv, Some(bv), 2, 1).unwrap()
        });
        let mut s2 = ParamStore::new();
        let x = s2.add("x", init_normal(&[2, 3, 3, 3], 1, 1.0, &mut r));
        let w = s2.add("w", init_normal(&[2, 3, 1, 1], 1, 1.0, &mut r));
        check(&mut s2, |g, s| {
            let (xv, wv) = (g.param(s, x), g.param(s, w));
            g.conv2d(xv, wv, None, 1, 0).unwrap()
        });
    }

    #[test]
    fn norm_activation_and_shape_op_gradients() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let x = s.add("x", init_normal(&[2, 4, 2, 3], 1, 1.0, &mut r));
        let y = s.add("y", init_normal(&[2, 2, 2, 3], 1, 1.0, &mut r));
        let gamma = s.add("gamma", init_normal(&[4], 1, 1.0, &mut r));
        let beta = s.add("beta", init_normal(&[4], 1, 1.0, &mut r));
        let e = s.add("e", init_normal(&[2, 6], 1, 1.0, &mut r));
        check(&mut s, |g, s| {
            let xv = g.param(s, x);
            let yv = g.param(s, y);
            let gv = g.param(s, gamma);
            let bv = g.param(s, beta);
            let ev = g.param(s, e);
            let n = g.group_norm(xv, gv, bv, 2).unwrap();
            let a = g.silu(n);
            let c = g.concat(a, yv).unwrap();
            let c = g.add_channel(c, ev).unwrap();
            let r = g.relu(c);
            let sum = g.add(r, c).unwrap();
            g.upsample2x(sum).unwrap()
        });
    }

    #[test]
    fn linear_embedding_pool_gradients() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let x = s.add("x", init_normal(&[3, 2, 2, 2], 1, 1.0, &mut r));
        let w = s.add("w", init_normal(&[5, 2], 1, 1.0, &mut r));
        let b = s.add("b", init_normal(&[5], 1, 1.0, &mut r));
        let table = s.add("table", init_normal(&[4, 5], 1, 1.0, &mut r));
        check(&mut s, |g, s| {
            let xv = g.param(s, x);
            let p = g.global_avg_pool(xv).unwrap();
            let (wv, bv) = (g.param(s, w), g.param(s, b));
            let l = g.linear(p, wv, Some(bv)).unwrap();
            let t = g.param(s, table);
            let emb = g.embedding(t, &[1, 3, 1]).unwrap();
            g.add(l, emb).unwrap()
        });
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let qkv = s.add("qkv", init_normal(&[2, 12, 2, 3], 1, 1.0, &mut r));
        check(&mut s, |g, s| {
            let q = g.param(s, qkv);
            g.attention(q, 2).unwrap()
        });
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.silu(x);
        let grads = g
            .backward(&[(y, Tensor::full(&[1, 1, 2, 2], 1.0))])
            .unwrap();
        assert!(grads.get(x).is_none());
    }
}
