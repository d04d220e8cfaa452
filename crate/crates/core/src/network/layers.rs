//! Building blocks. Every layer owns only parameter names; tensors live in
//! the [`ParamStore`].

use rand_chacha::ChaCha8Rng;

use super::params::{uniform, ParamStore};
use crate::engine::{BnState, Graph, Tensor, Var};
use crate::quant::QatState;

/// Normalization constants shared by every batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnSettings {
    pub momentum: f32,
    pub eps: f32,
}

/// Everything a forward pass needs besides the input.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a mut ParamStore,
    pub train: bool,
    pub fused: bool,
    pub bn: BnSettings,
    pub quant: Option<&'a mut QatState>,
}

impl Ctx<'_> {
    pub fn param(&mut self, name: &str) -> Var {
        let t = self.store.tensor(name).clone();
        self.graph.param(name, t)
    }

    /// Convolution of `x` with the named weight (and bias), fake-quantizing
    /// the input activation and the weight when quantization is active.
    pub fn conv(&mut self, key: &str, x: Var, weight: &str, bias: Option<&str>, stride: usize, pad: usize) -> Var {
        let mut x = x;
        let mut w = self.param(weight);
        if let Some(q) = self.quant.as_deref_mut() {
            let act = self.graph.value(x);
            q.observe(key, act, self.train);
            if let Some((spec_a, spec_w)) = q.specs_for(key, self.store.tensor(weight)) {
                let (xq, mx) = crate::quant::fake_quant_with_mask(self.graph.value(x), &spec_a);
                x = self.graph.straight_through(x, xq, mx);
                let (wq, mw) = crate::quant::fake_quant_with_mask(self.graph.value(w), &spec_w);
                w = self.graph.straight_through(w, wq, mw);
            }
        }
        let b = bias.map(|b| self.param(b));
        self.graph.conv2d(x, w, b, stride, pad)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        let (rm, rv) = self
            .store
            .pair_mut(&format!("{prefix}.running_mean"), &format!("{prefix}.running_var"));
        let state = BnState {
            running_mean: rm.data_mut(),
            running_var: rv.data_mut(),
            momentum: self.bn.momentum,
            eps: self.bn.eps,
        };
        self.graph.batch_norm(x, gamma, beta, state, self.train)
    }
}

fn register_bn(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0), true);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]), true);
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false);
    store.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0), false);
}

fn conv_weight(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let bound = 1.0 / ((cin * k * k) as f32).sqrt();
    uniform(rng, &[cout, cin, k, k], bound)
}

/// Folds `(gamma, beta, mean, var)` into a convolution: returns the scaled
/// weight and the bias.
fn fold_bn(store: &ParamStore, weight: &Tensor, prefix: &str, eps: f32) -> (Tensor, Vec<f32>) {
    let gamma = store.tensor(&format!("{prefix}.gamma")).data();
    let beta = store.tensor(&format!("{prefix}.beta")).data();
    let mean = store.tensor(&format!("{prefix}.running_mean")).data();
    let var = store.tensor(&format!("{prefix}.running_var")).data();
    let o = weight.shape()[0];
    let per = weight.numel() / o;
    let mut w = weight.clone();
    let mut bias = vec![0f32; o];
    for c in 0..o {
        let s = gamma[c] / (var[c] + eps).sqrt();
        for v in &mut w.data_mut()[c * per..(c + 1) * per] {
            *v *= s;
        }
        bias[c] = beta[c] - mean[c] * s;
    }
    (w, bias)
}

fn remove_bn(store: &mut ParamStore, prefix: &str) {
    for s in ["gamma", "beta", "running_mean", "running_var"] {
        store.remove(&format!("{prefix}.{s}"));
    }
}

/// Convolution followed by batch norm and optional SiLU. After fusion the
/// normalization is folded into `{name}.weight` / `{name}.bias`.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub act: bool,
}

impl ConvBn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: bool,
    ) -> Self {
        let name = name.into();
        store.insert(format!("{name}.weight"), conv_weight(rng, cout, cin, k), true);
        register_bn(store, &format!("{name}.bn"), cout);
        Self {
            name,
            cin,
            cout,
            k,
            stride,
            act,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let w = format!("{}.weight", self.name);
        let pad = self.k / 2;
        let y = if ctx.fused {
            let b = format!("{}.bias", self.name);
            ctx.conv(&self.name, x, &w, Some(&b), self.stride, pad)
        } else {
            let y = ctx.conv(&self.name, x, &w, None, self.stride, pad);
            ctx.batch_norm(&format!("{}.bn", self.name), y)
        };
        if self.act {
            ctx.graph.silu(y)
        } else {
            y
        }
    }

    /// Folded `(weight, bias)` of the training-form layer.
    fn folded(&self, store: &ParamStore, eps: f32) -> (Tensor, Vec<f32>) {
        let w = store.tensor(&format!("{}.weight", self.name));
        fold_bn(store, w, &format!("{}.bn", self.name), eps)
    }

    pub fn fuse(&self, store: &mut ParamStore, eps: f32) {
        let (w, b) = self.folded(store, eps);
        remove_bn(store, &format!("{}.bn", self.name));
        *store.tensor_mut(&format!("{}.weight", self.name)) = w;
        store.insert(format!("{}.bias", self.name), Tensor::from_vec(&[self.cout], b), true);
    }

    pub fn conv_keys(&self) -> Vec<String> {
        vec![self.name.clone()]
    }
}

/// Re-parameterizable block: parallel 3×3 conv+BN, 1×1 conv+BN and (when
/// shapes allow) an identity BN branch, summed and activated. Fusion
/// collapses the three branches into one 3×3 convolution with bias.
#[derive(Clone, Debug)]
pub struct RepConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub identity: bool,
    k3: ConvBn,
    k1: ConvBn,
}

impl RepConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: impl Into<String>, cin: usize, cout: usize) -> Self {
        let name = name.into();
        let k3 = ConvBn::new(store, rng, format!("{name}.k3"), cin, cout, 3, 1, false);
        let k1 = ConvBn::new(store, rng, format!("{name}.k1"), cin, cout, 1, 1, false);
        let identity = cin == cout;
        if identity {
            register_bn(store, &format!("{name}.id"), cout);
        }
        Self {
            name,
            cin,
            cout,
            identity,
            k3,
            k1,
        }
    }

    fn fused_name(&self) -> String {
        format!("{}.fused", self.name)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let y = if ctx.fused {
            let n = self.fused_name();
            ctx.conv(&n, x, &format!("{n}.weight"), Some(&format!("{n}.bias")), 1, 1)
        } else {
            let a = self.k3.forward(ctx, x);
            let b = self.k1.forward(ctx, x);
            let mut s = ctx.graph.add(a, b);
            if self.identity {
                let c = ctx.batch_norm(&format!("{}.id", self.name), x);
                s = ctx.graph.add(s, c);
            }
            s
        };
        ctx.graph.silu(y)
    }

    pub fn fuse(&self, store: &mut ParamStore, eps: f32) {
        let (mut w, mut b) = self.k3.folded(store, eps);
        let (w1, b1) = self.k1.folded(store, eps);
        let (o, c) = (self.cout, self.cin);
        for oc in 0..o {
            for ic in 0..c {
                w.data_mut()[((oc * c + ic) * 3 + 1) * 3 + 1] += w1.data()[oc * c + ic];
            }
            b[oc] += b1[oc];
        }
        if self.identity {
            let mut eye = Tensor::zeros(&[o, c, 3, 3]);
            for i in 0..o {
                eye.data_mut()[((i * c + i) * 3 + 1) * 3 + 1] = 1.0;
            }
            let prefix = format!("{}.id", self.name);
            let (wi, bi) = fold_bn(store, &eye, &prefix, eps);
            w.add_assign(&wi);
            for (bv, v) in b.iter_mut().zip(bi) {
                *bv += v;
            }
            remove_bn(store, &prefix);
        }
        for layer in [&self.k3, &self.k1] {
            store.remove(&format!("{}.weight", layer.name));
            remove_bn(store, &format!("{}.bn", layer.name));
        }
        let n = self.fused_name();
        store.insert(format!("{n}.weight"), w, true);
        store.insert(format!("{n}.bias"), Tensor::from_vec(&[o], b), true);
    }

    pub fn conv_keys(&self, fused: bool) -> Vec<String> {
        if fused {
            vec![self.fused_name()]
        } else {
            vec![self.k3.name.clone(), self.k1.name.clone()]
        }
    }
}

/// Efficient layer aggregation block: two 1×1 branches, the second feeding a
/// chain of 3×3 convolutions; every intermediate is concatenated and mixed by
/// a final 1×1 convolution.
#[derive(Clone, Debug)]
pub struct Elan {
    pub name: String,
    branch_a: ConvBn,
    branch_b: ConvBn,
    chain: Vec<ConvBn>,
    mix: ConvBn,
}

impl Elan {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        cin: usize,
        hidden: usize,
        cout: usize,
        depth: usize,
    ) -> Self {
        let name = name.into();
        let branch_a = ConvBn::new(store, rng, format!("{name}.a"), cin, hidden, 1, 1, true);
        let branch_b = ConvBn::new(store, rng, format!("{name}.b"), cin, hidden, 1, 1, true);
        let chain = (0..depth)
            .map(|i| ConvBn::new(store, rng, format!("{name}.m{i}"), hidden, hidden, 3, 1, true))
            .collect();
        let mix = ConvBn::new(store, rng, format!("{name}.mix"), hidden * (2 + depth), cout, 1, 1, true);
        Self {
            name,
            branch_a,
            branch_b,
            chain,
            mix,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let a = self.branch_a.forward(ctx, x);
        let mut t = self.branch_b.forward(ctx, x);
        let mut parts = vec![a, t];
        for c in &self.chain {
            t = c.forward(ctx, t);
            parts.push(t);
        }
        let cat = ctx.graph.concat(&parts);
        self.mix.forward(ctx, cat)
    }

    fn convs(&self) -> impl Iterator<Item = &ConvBn> {
        [&self.branch_a, &self.branch_b].into_iter().chain(self.chain.iter()).chain([&self.mix])
    }

    pub fn fuse(&self, store: &mut ParamStore, eps: f32) {
        self.convs().for_each(|c| c.fuse(store, eps));
    }

    pub fn conv_keys(&self) -> Vec<String> {
        self.convs().map(|c| c.name.clone()).collect()
    }
}

/// Spatial pyramid pooling: 1×1 reduction, parallel stride-1 max pools of
/// several sizes, concatenation and a 1×1 projection.
#[derive(Clone, Debug)]
pub struct Spp {
    reduce: ConvBn,
    pools: Vec<usize>,
    project: ConvBn,
}

impl Spp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        pools: &[usize],
    ) -> Self {
        let reduce = ConvBn::new(store, rng, format!("{name}.reduce"), cin, hidden, 1, 1, true);
        let project = ConvBn::new(store, rng, format!("{name}.project"), hidden * (1 + pools.len()), cout, 1, 1, true);
        Self {
            reduce,
            pools: pools.to_vec(),
            project,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let r = self.reduce.forward(ctx, x);
        let mut parts = vec![r];
        for &k in &self.pools {
            parts.push(ctx.graph.max_pool_same(r, k));
        }
        let cat = ctx.graph.concat(&parts);
        self.project.forward(ctx, cat)
    }

    pub fn fuse(&self, store: &mut ParamStore, eps: f32) {
        self.reduce.fuse(store, eps);
        self.project.fuse(store, eps);
    }

    pub fn conv_keys(&self) -> Vec<String> {
        vec![self.reduce.name.clone(), self.project.name.clone()]
    }
}

/// Plain 1×1 convolution with bias and no activation (prediction layers).
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub name: String,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: impl Into<String>, cin: usize, cout: usize) -> Self {
        let name = name.into();
        let bound = 1.0 / (cin as f32).sqrt();
        store.insert(format!("{name}.weight"), uniform(rng, &[cout, cin, 1, 1], bound), true);
        store.insert(format!("{name}.bias"), uniform(rng, &[cout], bound), true);
        Self { name }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let n = &self.name;
        ctx.conv(n, x, &format!("{n}.weight"), Some(&format!("{n}.bias")), 1, 0)
    }
}
