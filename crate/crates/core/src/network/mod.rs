//! Multi-task network: ELAN backbone, SPP neck with top-down and bottom-up
//! fusion, anchor-based detection heads built from re-parameterizable
//! convolutions, and two stride-4 segmentation heads.

pub(crate) mod checkpoint;
mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use layers::{BnSettings, ConvBn, Ctx, Elan, Pointwise, RepConv, Spp};
pub use params::{Param, ParamStore};

use crate::data::{Palette, NUM_DET_CLASSES};
use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::quant::QatState;

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const ANCHORS_PER_SCALE: usize = 3;
/// Stride of the segmentation logits.
pub const SEG_STRIDE: usize = 4;

/// Nine `(w, h)` anchor shapes in input pixels; entries `3s..3s+3` belong to
/// stride `STRIDES[s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorSet(pub Vec<[f32; 2]>);

impl AnchorSet {
    pub const FULL_SCALE: [[f32; 2]; 9] = [
        [12.0, 16.0],
        [19.0, 36.0],
        [40.0, 28.0],
        [36.0, 75.0],
        [76.0, 55.0],
        [72.0, 146.0],
        [142.0, 110.0],
        [192.0, 243.0],
        [459.0, 401.0],
    ];

    /// Full-scale anchors multiplied by `factor`.
    pub fn scaled(factor: f32) -> Self {
        Self(Self::FULL_SCALE.iter().map(|&[w, h]| [w * factor, h * factor]).collect())
    }

    pub fn for_scale(&self, s: usize) -> &[[f32; 2]] {
        &self.0[s * ANCHORS_PER_SCALE..(s + 1) * ANCHORS_PER_SCALE]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| Error::Config {
            key: "network.anchors".into(),
            reason,
        };
        if self.0.len() != ANCHORS_PER_SCALE * STRIDES.len() {
            return Err(err(format!("expected 9 anchors, got {}", self.0.len())));
        }
        if self.0.iter().any(|&[w, h]| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
            return Err(err("anchor sides must be positive".into()));
        }
        if self.0.windows(2).any(|p| p[0][0] * p[0][1] > p[1][0] * p[1][1]) {
            return Err(err("anchors must be sorted by area".into()));
        }
        Ok(())
    }
}

impl Default for AnchorSet {
    fn default() -> Self {
        Self::scaled(0.25)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: [usize; 2],
    pub width_multiple: f32,
    pub depth_multiple: f32,
    pub num_det_classes: usize,
    pub drivable_classes: usize,
    pub lane_classes: usize,
    pub anchors: AnchorSet,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: [96, 160],
            width_multiple: 1.0,
            depth_multiple: 1.0,
            num_det_classes: NUM_DET_CLASSES,
            drivable_classes: Palette::Drivable.num_classes(),
            lane_classes: Palette::Lane.num_classes(),
            anchors: AnchorSet::default(),
            bn_momentum: 0.03,
            bn_eps: 1e-3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: String| Error::Config {
            key: format!("network.{key}"),
            reason,
        };
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(err("input_size", format!("{h}x{w} is not divisible by 32")));
        }
        if !(self.width_multiple > 0.0) || !(self.depth_multiple > 0.0) {
            return Err(err("width_multiple", "multiples must be positive".into()));
        }
        if self.num_det_classes != NUM_DET_CLASSES {
            return Err(err("num_det_classes", format!("must be {NUM_DET_CLASSES}")));
        }
        if self.drivable_classes != Palette::Drivable.num_classes() {
            return Err(err("drivable_classes", format!("must be {}", Palette::Drivable.num_classes())));
        }
        if self.lane_classes != Palette::Lane.num_classes() {
            return Err(err("lane_classes", format!("must be {}", Palette::Lane.num_classes())));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return Err(err("bn_momentum", "normalization constants out of range".into()));
        }
        self.anchors.validate()
    }

    /// Channels per anchor: 4 box terms, objectness, class logits.
    pub fn det_outputs(&self) -> usize {
        5 + self.num_det_classes
    }

    fn width(&self, c: usize) -> usize {
        let v = (c as f32 * self.width_multiple / 4.0).ceil() as usize * 4;
        v.max(4)
    }

    fn depth(&self) -> usize {
        ((2.0 * self.depth_multiple).round() as usize).max(1)
    }

    pub fn grid(&self, scale: usize) -> (usize, usize) {
        let [h, w] = self.input_size;
        (h / STRIDES[scale], w / STRIDES[scale])
    }

    pub fn seg_grid(&self) -> (usize, usize) {
        let [h, w] = self.input_size;
        (h / SEG_STRIDE, w / SEG_STRIDE)
    }
}

/// Raw network outputs. Detection tensors are `[N, A·(5+C), gh, gw]` with
/// channel `a·(5+C) + k`; segmentation logits are `[N, classes, H/4, W/4]`.
#[derive(Clone, Debug)]
pub struct ModelOutputs<T> {
    pub det: [T; 3],
    pub drivable: T,
    pub lane: T,
}

impl ModelOutputs<Tensor> {
    pub fn batch_item(&self, i: usize) -> ModelOutputs<Tensor> {
        ModelOutputs {
            det: [self.det[0].batch_item(i), self.det[1].batch_item(i), self.det[2].batch_item(i)],
            drivable: self.drivable.batch_item(i),
            lane: self.lane.batch_item(i),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.det.iter().all(Tensor::all_finite) && self.drivable.all_finite() && self.lane.all_finite()
    }
}

/// Detection output of one scale for one image in `(gy, gx, anchor, k)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct DetGrid {
    pub gh: usize,
    pub gw: usize,
    pub anchors: usize,
    pub outputs: usize,
    pub data: Vec<f32>,
}

impl DetGrid {
    /// Rearranges a `[A·K, gh, gw]` (or `[1, A·K, gh, gw]`) tensor.
    pub fn from_tensor(t: &Tensor, anchors: usize) -> Self {
        let s = t.shape();
        let (c, gh, gw) = match s.len() {
            3 => (s[0], s[1], s[2]),
            4 => {
                assert_eq!(s[0], 1, "DetGrid takes a single image");
                (s[1], s[2], s[3])
            }
            _ => panic!("unexpected detection tensor rank {}", s.len()),
        };
        let k = c / anchors;
        let mut data = vec![0f32; c * gh * gw];
        for a in 0..anchors {
            for kk in 0..k {
                let plane = &t.data()[(a * k + kk) * gh * gw..(a * k + kk + 1) * gh * gw];
                for (i, &v) in plane.iter().enumerate() {
                    data[(i * anchors + a) * k + kk] = v;
                }
            }
        }
        Self {
            gh,
            gw,
            anchors,
            outputs: k,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.gh, self.gw, self.anchors, self.outputs)
    }

    pub fn get(&self, gy: usize, gx: usize, a: usize) -> &[f32] {
        let o = ((gy * self.gw + gx) * self.anchors + a) * self.outputs;
        &self.data[o..o + self.outputs]
    }
}

#[derive(Clone, Debug)]
struct SegHead {
    reduce: ConvBn,
    merge: ConvBn,
    refine: ConvBn,
    out: Pointwise,
}

impl SegHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c3: usize, c1: usize, classes: usize) -> Self {
        Self {
            reduce: ConvBn::new(store, rng, format!("{name}.reduce"), c3, c3, 3, 1, true),
            merge: ConvBn::new(store, rng, format!("{name}.merge"), c3 + c1, c3, 3, 1, true),
            refine: ConvBn::new(store, rng, format!("{name}.refine"), c3, c1, 3, 1, true),
            out: Pointwise::new(store, rng, format!("{name}.out"), c1, classes),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, n3: Var, c1: Var) -> Var {
        let r = self.reduce.forward(ctx, n3);
        let up = ctx.graph.upsample_nearest(r, 2);
        let cat = ctx.graph.concat(&[up, c1]);
        let m = self.merge.forward(ctx, cat);
        let f = self.refine.forward(ctx, m);
        self.out.forward(ctx, f)
    }

    fn convs(&self) -> [&ConvBn; 3] {
        [&self.reduce, &self.merge, &self.refine]
    }
}

#[derive(Clone, Debug)]
struct Arch {
    stem: ConvBn,
    down: [ConvBn; 4],
    stages: [Elan; 4],
    spp: Spp,
    lateral5: ConvBn,
    fuse4: Elan,
    lateral4: ConvBn,
    fuse3: Elan,
    pan3: ConvBn,
    pan_fuse4: Elan,
    pan4: ConvBn,
    pan_fuse5: Elan,
    det_rep: [RepConv; 3],
    det_out: [Pointwise; 3],
    drivable: SegHead,
    lane: SegHead,
}

impl Arch {
    fn build(cfg: &NetworkConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let w = [cfg.width(16), cfg.width(32), cfg.width(64), cfg.width(128)];
        let d = cfg.depth();
        let stem = ConvBn::new(store, rng, "backbone.stem", 3, w[0], 3, 2, true);
        let ins = [w[0], w[0], w[1], w[2]];
        let down = std::array::from_fn(|i| {
            ConvBn::new(store, rng, format!("backbone.down{}", i + 1), ins[i], w[i], 3, 2, true)
        });
        let stages = std::array::from_fn(|i| {
            Elan::new(store, rng, format!("backbone.elan{}", i + 1), w[i], w[i] / 2, w[i], d)
        });
        let spp = Spp::new(store, rng, "neck.spp", w[3], w[3], w[3], &[5, 9, 13]);
        let lateral5 = ConvBn::new(store, rng, "neck.lateral5", w[3], w[2], 1, 1, true);
        let fuse4 = Elan::new(store, rng, "neck.fuse4", 2 * w[2], w[2] / 2, w[2], d);
        let lateral4 = ConvBn::new(store, rng, "neck.lateral4", w[2], w[1], 1, 1, true);
        let fuse3 = Elan::new(store, rng, "neck.fuse3", 2 * w[1], w[1] / 2, w[1], d);
        let pan3 = ConvBn::new(store, rng, "neck.pan3", w[1], w[2], 3, 2, true);
        let pan_fuse4 = Elan::new(store, rng, "neck.pan_fuse4", 2 * w[2], w[2] / 2, w[2], d);
        let pan4 = ConvBn::new(store, rng, "neck.pan4", w[2], w[3], 3, 2, true);
        let pan_fuse5 = Elan::new(store, rng, "neck.pan_fuse5", 2 * w[3], w[3] / 2, w[3], d);
        let head_in = [w[1], w[2], w[3]];
        let det_rep = std::array::from_fn(|s| {
            RepConv::new(store, rng, format!("det.rep{s}"), head_in[s], 2 * head_in[s])
        });
        let outs = ANCHORS_PER_SCALE * cfg.det_outputs();
        let det_out: [Pointwise; 3] = std::array::from_fn(|s| {
            Pointwise::new(store, rng, format!("det.out{s}"), 2 * head_in[s], outs)
        });
        for (s, p) in det_out.iter().enumerate() {
            let bias = store.tensor_mut(&format!("{}.bias", p.name));
            let cells = (cfg.input_size[0] / STRIDES[s]) * (cfg.input_size[1] / STRIDES[s]);
            // Low initial objectness (≈8 objects per image) and class priors.
            let obj = (8.0 / cells as f32).ln();
            let cls = (0.6 / (cfg.num_det_classes as f32 - 0.99)).ln();
            let k = cfg.det_outputs();
            for a in 0..ANCHORS_PER_SCALE {
                bias.data_mut()[a * k + 4] = obj;
                for c in 0..cfg.num_det_classes {
                    bias.data_mut()[a * k + 5 + c] = cls;
                }
            }
        }
        let drivable = SegHead::new(store, rng, "seg_drivable", w[1], w[0], cfg.drivable_classes);
        let lane = SegHead::new(store, rng, "seg_lane", w[1], w[0], cfg.lane_classes);
        Self {
            stem,
            down,
            stages,
            spp,
            lateral5,
            fuse4,
            lateral4,
            fuse3,
            pan3,
            pan_fuse4,
            pan4,
            pan_fuse5,
            det_rep,
            det_out,
            drivable,
            lane,
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> ModelOutputs<Var> {
        let mut t = self.stem.forward(ctx, x);
        let mut feats = Vec::with_capacity(4);
        for (d, e) in self.down.iter().zip(&self.stages) {
            t = d.forward(ctx, t);
            t = e.forward(ctx, t);
            feats.push(t);
        }
        let (c1, p3, p4, p5) = (feats[0], feats[1], feats[2], feats[3]);
        let n5 = self.spp.forward(ctx, p5);
        let l5 = self.lateral5.forward(ctx, n5);
        let u5 = ctx.graph.upsample_nearest(l5, 2);
        let cat4 = ctx.graph.concat(&[u5, p4]);
        let n4 = self.fuse4.forward(ctx, cat4);
        let l4 = self.lateral4.forward(ctx, n4);
        let u4 = ctx.graph.upsample_nearest(l4, 2);
        let cat3 = ctx.graph.concat(&[u4, p3]);
        let n3 = self.fuse3.forward(ctx, cat3);
        let d3 = self.pan3.forward(ctx, n3);
        let cat_d4 = ctx.graph.concat(&[d3, n4]);
        let o4 = self.pan_fuse4.forward(ctx, cat_d4);
        let d4 = self.pan4.forward(ctx, o4);
        let cat_d5 = ctx.graph.concat(&[d4, n5]);
        let o5 = self.pan_fuse5.forward(ctx, cat_d5);
        let det_in = [n3, o4, o5];
        let det = std::array::from_fn(|s| {
            let r = self.det_rep[s].forward(ctx, det_in[s]);
            self.det_out[s].forward(ctx, r)
        });
        let drivable = self.drivable.forward(ctx, n3, c1);
        let lane = self.lane.forward(ctx, n3, c1);
        ModelOutputs { det, drivable, lane }
    }

    fn conv_bns(&self) -> Vec<&ConvBn> {
        let mut v: Vec<&ConvBn> = vec![&self.stem];
        v.extend(self.down.iter());
        v.extend(self.drivable.convs());
        v.extend(self.lane.convs());
        v.extend([&self.lateral5, &self.lateral4, &self.pan3, &self.pan4]);
        v
    }

    fn elans(&self) -> Vec<&Elan> {
        let mut v: Vec<&Elan> = self.stages.iter().collect();
        v.extend([&self.fuse4, &self.fuse3, &self.pan_fuse4, &self.pan_fuse5]);
        v
    }

    fn fuse(&self, store: &mut ParamStore, eps: f32) {
        self.conv_bns().into_iter().for_each(|c| c.fuse(store, eps));
        self.elans().into_iter().for_each(|e| e.fuse(store, eps));
        self.spp.fuse(store, eps);
        self.det_rep.iter().for_each(|r| r.fuse(store, eps));
    }

    fn conv_keys(&self, fused: bool) -> Vec<String> {
        let mut keys: Vec<String> = self.conv_bns().iter().flat_map(|c| c.conv_keys()).collect();
        keys.extend(self.elans().iter().flat_map(|e| e.conv_keys()));
        keys.extend(self.spp.conv_keys());
        keys.extend(self.det_rep.iter().flat_map(|r| r.conv_keys(fused)));
        keys.extend(self.det_out.iter().map(|p| p.name.clone()));
        keys.push(self.drivable.out.name.clone());
        keys.push(self.lane.out.name.clone());
        keys
    }

    fn input_key(&self) -> String {
        self.stem.name.clone()
    }

    fn output_keys(&self) -> Vec<String> {
        let mut v: Vec<String> = self.det_out.iter().map(|p| p.name.clone()).collect();
        v.push(self.drivable.out.name.clone());
        v.push(self.lane.out.name.clone());
        v
    }
}

/// A network instance: architecture, parameters and optional fake-quant state.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub store: ParamStore,
    fused: bool,
    pub qat: Option<QatState>,
    arch: Arch,
}

impl Model {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Arch::build(config, &mut store, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            fused: false,
            qat: None,
            arch,
        })
    }

    /// Training-form skeleton whose parameters are replaced afterwards
    /// (used when loading archives).
    pub(crate) fn from_parts(config: NetworkConfig, store: ParamStore, fused: bool, qat: Option<QatState>) -> Result<Self> {
        let mut m = Self::build(&config, 0)?;
        if fused {
            m.reparameterize();
        }
        for (name, p) in m.store.iter() {
            match store.get(name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(Error::Format(format!("parameter {name} missing from archive"))),
            }
        }
        if store.len() != m.store.len() {
            return Err(Error::Format("archive holds unexpected parameters".into()));
        }
        m.store = store;
        m.qat = qat;
        Ok(m)
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Names of every convolution in forward order; quantization state is
    /// keyed by these.
    pub fn conv_keys(&self) -> Vec<String> {
        self.arch.conv_keys(self.fused)
    }

    /// The convolution reading the network input.
    pub fn input_conv(&self) -> String {
        self.arch.input_key()
    }

    /// The prediction convolutions of all heads.
    pub fn output_convs(&self) -> Vec<String> {
        self.arch.output_keys()
    }

    /// Weight and bias parameter names of convolution `key`.
    pub fn conv_params(&self, key: &str) -> (String, Option<String>) {
        let bias = format!("{key}.bias");
        let bias = self.store.contains(&bias).then_some(bias);
        (format!("{key}.weight"), bias)
    }

    /// Collapses multi-branch blocks into single 3×3 convolutions and folds
    /// every normalization layer into its convolution. Calling it on an
    /// already fused model does nothing.
    pub fn reparameterize(&mut self) {
        if self.fused {
            return;
        }
        self.arch.fuse(&mut self.store, self.config.bn_eps);
        self.fused = true;
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let [h, w] = self.config.input_size;
        if s.len() != 4 || s[0] == 0 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::Argument(format!(
                "expected input batch [N, 3, {h}, {w}], got {s:?}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `x` on `graph`.
    pub fn forward_graph(&mut self, graph: &mut Graph, x: Var, train: bool) -> Result<ModelOutputs<Var>> {
        self.check_input(graph.value(x))?;
        let bn = BnSettings {
            momentum: self.config.bn_momentum,
            eps: self.config.bn_eps,
        };
        let mut ctx = Ctx {
            graph,
            store: &mut self.store,
            train,
            fused: self.fused,
            bn,
            quant: self.qat.as_mut(),
        };
        Ok(self.arch.forward(&mut ctx, x))
    }

    /// Eval-mode forward pass.
    pub fn forward(&mut self, x: &Tensor) -> Result<ModelOutputs<Tensor>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.forward_graph(&mut g, xv, false)?;
        Ok(ModelOutputs {
            det: out.det.map(|v| g.value(v).clone()),
            drivable: g.value(out.drivable).clone(),
            lane: g.value(out.lane).clone(),
        })
    }
}
