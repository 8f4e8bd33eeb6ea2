//! Backbone, P2-augmented PAFPN neck and anchor-free detection heads.
//!
//! ```text
//! image ─ stem(s2) ─ P1
//!   stage k (k = 2..5): conv s2 + bottlenecks [+ MFAM]           → B_k
//!   top-down:  T5 = lateral(B5);  T_k = node(cat(up2(T_{k+1}), B_k))
//!   bottom-up: N_lo = T_lo;       N_k = node(cat(down(N_{k-1}), T_k [, B_k]))
//!   per head level: [IEMA] → [DASI(finer, current, coarser)] → head
//! ```
//!
//! Every head emits `4 + num_classes` channels per cell: centre offsets,
//! width/height regressors, then class logits.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub use config::{Level, ModelConfig, BASE_CHANNELS, BASE_DEPTHS, BASE_NECK_DEPTH};

use crate::blocks::{
    Conv, ConvBnSilu, Ctx, Dasi, DasiInput, DasiSpec, Iema, IemaSpec, Mfam, MfamSpec, Mode, ParamStore,
};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{ConvSpec, Shape, Tape, Tensor, Var};

/// Prior probability used to initialise class-logit biases.
pub const CLASS_PRIOR: f64 = 0.01;

/// Number of box regressor channels in front of the class logits.
pub const BOX_CHANNELS: usize = 4;

#[derive(Debug, Clone)]
struct Bottleneck {
    cv1: ConvBnSilu,
    cv2: ConvBnSilu,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let hidden = (c / 2).max(1);
        Ok(Self {
            cv1: ConvBnSilu::new(store, &format!("{name}.cv1"), ConvSpec::new(c, hidden, 1, 1))?,
            cv2: ConvBnSilu::new(store, &format!("{name}.cv2"), ConvSpec::new(hidden, c, 3, 1))?,
        })
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.cv1.forward(ctx, x)?;
        let h = self.cv2.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}

/// 1×1 reduction followed by residual bottlenecks.
#[derive(Debug, Clone)]
struct Node {
    reduce: ConvBnSilu,
    blocks: Vec<Bottleneck>,
}

impl Node {
    fn new(store: &mut ParamStore, name: &str, cin: usize, c: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            reduce: ConvBnSilu::new(store, &format!("{name}.reduce"), ConvSpec::new(cin, c, 1, 1))?,
            blocks: (0..depth)
                .map(|i| Bottleneck::new(store, &format!("{name}.m{i}"), c))
                .collect::<Result<_>>()?,
        })
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut y = self.reduce.forward(ctx, x)?;
        for b in &self.blocks {
            y = b.forward(ctx, y)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: ConvBnSilu,
    blocks: Vec<Bottleneck>,
}

#[derive(Debug, Clone)]
struct Head {
    stem: ConvBnSilu,
    out: Conv,
}

#[derive(Debug, Clone)]
struct Graph {
    stem: ConvBnSilu,
    /// Indexed by level 2..=5 at position k − 2.
    stages: Vec<Stage>,
    mfams: Vec<Option<Mfam>>,
    lateral: ConvBnSilu,
    /// (k, node), from level 4 down to the lowest neck level.
    top_down: Vec<(usize, Node)>,
    /// (k, downsampling conv, node), from lowest + 1 up to 5.
    bottom_up: Vec<(usize, ConvBnSilu, Node)>,
    iemas: BTreeMap<Level, Iema>,
    dasis: BTreeMap<Level, Dasi>,
    heads: BTreeMap<Level, Head>,
}

/// A built model: configuration, parameters and the module graph.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    graph: Graph,
}

/// One row of the layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub params: usize,
    pub flops: u64,
    pub output: Shape,
}

/// Builds the model graph with parameters initialised from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(config.clone(), seed)
}

/// Runs the model on `images` and returns the raw head outputs per level.
pub fn model_forward(model: &Model, ctx: &mut Ctx<'_>, images: Var) -> Result<BTreeMap<Level, Var>> {
    model.forward(ctx, images)
}

pub fn count_params(model: &Model) -> usize {
    model.count_params()
}

pub fn estimate_gflops(model: &Model, image_size: usize) -> Result<f64> {
    model.estimate_gflops(image_size)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let graph = Graph::build(&config, &mut store)?;
        Ok(Self { config, store, graph })
    }

    pub fn count_params(&self) -> usize {
        self.store.count_learnable()
    }

    pub fn head_channels(&self) -> usize {
        BOX_CHANNELS + self.config.num_classes
    }

    /// Names of the top-level layers, in execution order; every parameter
    /// name starts with one of these followed by a dot.
    pub fn layer_names(&self) -> Vec<String> {
        self.graph.layer_names()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<BTreeMap<Level, Var>> {
        Ok(self.forward_traced(ctx, images)?.0)
    }

    /// Forward pass that also returns the output of every top-level layer.
    pub fn forward_traced(
        &self,
        ctx: &mut Ctx<'_>,
        images: Var,
    ) -> Result<(BTreeMap<Level, Var>, Vec<(String, Var)>)> {
        let s = ctx.tape.shape(images);
        if s.c != 3 || s.h != s.w || s.h % 32 != 0 || s.h == 0 {
            return Err(shape_err(format!(
                "expected images of shape Nx3xSxS with S a multiple of 32 (model built for {}), got {s}",
                self.config.image_size
            )));
        }
        self.graph.forward(&self.config, ctx, images)
    }

    /// Inference-mode forward on a batch; returns one tensor per level.
    pub fn predict(&self, images: &Tensor) -> Result<BTreeMap<Level, Tensor>> {
        let s = images.shape();
        if s.h != self.config.image_size || s.w != self.config.image_size {
            return Err(shape_err(format!(
                "expected {}x{} images, got {s}",
                self.config.image_size, self.config.image_size
            )));
        }
        let mut ctx = Ctx::new(&self.store, Tape::no_grad(), Mode::Infer);
        let x = ctx.tape.constant(images.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(out.into_iter().map(|(l, v)| (l, ctx.tape.value(v).clone())).collect())
    }

    /// Shape-only forward at `image_size`; returns (total FLOPs, conv FLOPs)
    /// and the per-layer table.
    fn meta_pass(&self, image_size: usize) -> Result<(u64, u64, Vec<LayerRow>)> {
        if image_size == 0 || image_size % 32 != 0 {
            return Err(config_err(format!(
                "image_size must be a positive multiple of 32, got {image_size}"
            )));
        }
        let mut ctx = Ctx::new(&self.store, Tape::meta(), Mode::Infer);
        let x = ctx.tape.constant(Tensor::zeros(Shape::new(1, 3, image_size, image_size)));
        let (_, trace) = self.forward_traced(&mut ctx, x)?;
        let flops: BTreeMap<&str, u64> = ctx.tape.flops_by_scope().iter().map(|(s, f)| (s.as_str(), *f)).collect();
        let rows = trace
            .iter()
            .map(|(name, v)| LayerRow {
                name: name.clone(),
                params: self.store.count_with_prefix(&format!("{name}.")),
                flops: flops.get(name.as_str()).copied().unwrap_or(0),
                output: ctx.tape.shape(*v),
            })
            .collect();
        Ok((ctx.tape.total_flops(), ctx.tape.conv_flops(), rows))
    }

    /// Forward FLOPs for one image, in units of 10⁹.
    pub fn estimate_gflops(&self, image_size: usize) -> Result<f64> {
        Ok(self.meta_pass(image_size)?.0 as f64 / 1e9)
    }

    /// (all FLOPs, convolution FLOPs) for one image.
    pub fn flop_counts(&self, image_size: usize) -> Result<(u64, u64)> {
        let (t, c, _) = self.meta_pass(image_size)?;
        Ok((t, c))
    }

    pub fn layer_table(&self) -> Result<Vec<LayerRow>> {
        Ok(self.meta_pass(self.config.image_size)?.2)
    }

    pub fn format_layer_table(&self) -> Result<String> {
        let rows = self.layer_table()?;
        let mut s = String::new();
        let _ = writeln!(s, "{:<4} {:<12} {:>10} {:>14}  output", "#", "layer", "params", "FLOPs");
        for (i, r) in rows.iter().enumerate() {
            let _ = writeln!(s, "{:<4} {:<12} {:>10} {:>14}  {}", i, r.name, r.params, r.flops, r.output);
        }
        let (total, _, _) = self.meta_pass(self.config.image_size)?;
        let _ = writeln!(
            s,
            "total: {} params ({:.4} M), {:.4} GFLOPs at {}x{}",
            self.count_params(),
            self.count_params() as f64 / 1e6,
            total as f64 / 1e9,
            self.config.image_size,
            self.config.image_size
        );
        Ok(s)
    }
}

impl Graph {
    fn build(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        let ch = cfg.channels()?;
        let c = |k: usize| ch[k - 1];
        let lo = cfg.lowest_neck_level();
        let nd = cfg.neck_depth();

        let stem = ConvBnSilu::new(store, "stem", ConvSpec::new(3, c(1), 3, 2))?;
        let mut stages = Vec::new();
        let mut mfams = Vec::new();
        for k in 2..=5 {
            let name = format!("stage{k}");
            stages.push(Stage {
                down: ConvBnSilu::new(store, &format!("{name}.down"), ConvSpec::new(c(k - 1), c(k), 3, 2))?,
                blocks: (0..cfg.stage_depth(k))
                    .map(|i| Bottleneck::new(store, &format!("{name}.m{i}"), c(k)))
                    .collect::<Result<_>>()?,
            });
            mfams.push(if cfg.use_mfam {
                let spec = MfamSpec {
                    channels: c(k),
                    kernel_sizes: cfg.mfam_kernels.clone(),
                    include_identity_branch: true,
                };
                Some(Mfam::new(store, &format!("mfam{k}"), spec)?)
            } else {
                None
            });
        }

        let lateral = ConvBnSilu::new(store, "lateral5", ConvSpec::new(c(5), c(5), 1, 1))?;
        let mut top_down = Vec::new();
        for k in (lo..=4).rev() {
            top_down.push((k, Node::new(store, &format!("td{k}"), c(k + 1) + c(k), c(k), nd)?));
        }
        let mut bottom_up = Vec::new();
        for k in lo + 1..=5 {
            let down = ConvBnSilu::new(store, &format!("bu{k}.down"), ConvSpec::new(c(k - 1), c(k - 1), 3, 2))?;
            let cin = c(k - 1) + c(k) + if cfg.use_skips { c(k) } else { 0 };
            bottom_up.push((k, down, Node::new(store, &format!("bu{k}"), cin, c(k), nd)?));
        }

        for l in &cfg.levels {
            if l.index() < lo {
                return Err(config_err(format!("detection level {l} is not carried by the neck")));
            }
        }
        let mut iemas = BTreeMap::new();
        if cfg.use_iema {
            for &l in &cfg.levels {
                let spec = IemaSpec::new(c(l.index())).with_groups(cfg.iema_groups);
                iemas.insert(l, Iema::new(store, &format!("iema{}", l.index()), spec)?);
            }
        }
        let mut dasis = BTreeMap::new();
        if cfg.use_dasi {
            for (i, &l) in cfg.levels.iter().enumerate() {
                let k = l.index();
                let low = i.checked_sub(1).map(|j| {
                    let f = cfg.levels[j].index();
                    DasiInput {
                        channels: c(f),
                        ratio: 1 << (k - f),
                    }
                });
                let high = cfg.levels.get(i + 1).map(|h| DasiInput {
                    channels: c(h.index()),
                    ratio: 1 << (h.index() - k),
                });
                dasis.insert(l, Dasi::new(store, &format!("dasi{k}"), DasiSpec::new(c(k)), low, high)?);
            }
        }
        let mut heads = BTreeMap::new();
        let no = BOX_CHANNELS + cfg.num_classes;
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        for &l in &cfg.levels {
            let k = l.index();
            let name = format!("head{k}");
            let stem = ConvBnSilu::new(store, &format!("{name}.stem"), ConvSpec::new(c(k), c(k), 3, 1))?;
            let out = Conv::new(store, &format!("{name}.out"), ConvSpec::new(c(k), no, 1, 1).with_bias(true))?;
            let bias = out.bias.expect("head conv has bias");
            store.get_mut(bias).data_mut()[BOX_CHANNELS..].fill(prior);
            heads.insert(l, Head { stem, out });
        }

        Ok(Self {
            stem,
            stages,
            mfams,
            lateral,
            top_down,
            bottom_up,
            iemas,
            dasis,
            heads,
        })
    }

    fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["stem".to_string()];
        for k in 2..=5 {
            names.push(format!("stage{k}"));
            if self.mfams[k - 2].is_some() {
                names.push(format!("mfam{k}"));
            }
        }
        names.push("lateral5".into());
        names.extend(self.top_down.iter().map(|(k, _)| format!("td{k}")));
        names.extend(self.bottom_up.iter().map(|(k, _, _)| format!("bu{k}")));
        names.extend(self.iemas.keys().map(|l| format!("iema{}", l.index())));
        names.extend(self.dasis.keys().map(|l| format!("dasi{}", l.index())));
        names.extend(self.heads.keys().map(|l| format!("head{}", l.index())));
        names
    }

    fn forward(
        &self,
        cfg: &ModelConfig,
        ctx: &mut Ctx<'_>,
        images: Var,
    ) -> Result<(BTreeMap<Level, Var>, Vec<(String, Var)>)> {
        let mut trace = Vec::new();
        let mut mark = |name: &str, v: Var| trace.push((name.to_string(), v));

        ctx.tape.set_scope("stem");
        let mut x = self.stem.forward(ctx, images)?;
        mark("stem", x);

        // Backbone: B[k] for k = 2..=5.
        let mut b: BTreeMap<usize, Var> = BTreeMap::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let k = i + 2;
            let name = format!("stage{k}");
            ctx.tape.set_scope(name.as_str());
            x = stage.down.forward(ctx, x)?;
            for blk in &stage.blocks {
                x = blk.forward(ctx, x)?;
            }
            mark(&name, x);
            if let Some(m) = &self.mfams[i] {
                let name = format!("mfam{k}");
                ctx.tape.set_scope(name.as_str());
                x = m.forward(ctx, x)?;
                mark(&name, x);
            }
            b.insert(k, x);
        }

        // Top-down.
        ctx.tape.set_scope("lateral5");
        let mut t: BTreeMap<usize, Var> = BTreeMap::new();
        let t5 = self.lateral.forward(ctx, b[&5])?;
        mark("lateral5", t5);
        t.insert(5, t5);
        for (k, node) in &self.top_down {
            let name = format!("td{k}");
            ctx.tape.set_scope(name.as_str());
            let up = ctx.tape.resize_nearest(t[&(k + 1)], 2)?;
            let cat = join(ctx, &[up, b[k]])?;
            let y = node.forward(ctx, cat)?;
            mark(&name, y);
            t.insert(*k, y);
        }

        // Bottom-up with optional skips from the backbone.
        let lo = cfg.lowest_neck_level();
        let mut n: BTreeMap<usize, Var> = BTreeMap::new();
        n.insert(lo, t[&lo]);
        for (k, down, node) in &self.bottom_up {
            let name = format!("bu{k}");
            ctx.tape.set_scope(name.as_str());
            let d = down.forward(ctx, n[&(k - 1)])?;
            let mut parts = vec![d, t[k]];
            if cfg.use_skips {
                parts.push(b[k]);
            }
            let cat = join(ctx, &parts)?;
            let y = node.forward(ctx, cat)?;
            mark(&name, y);
            n.insert(*k, y);
        }

        let mut feats: BTreeMap<Level, Var> = cfg.levels.iter().map(|&l| (l, n[&l.index()])).collect();
        for (l, iema) in &self.iemas {
            let name = format!("iema{}", l.index());
            ctx.tape.set_scope(name.as_str());
            let y = iema.forward(ctx, feats[l])?;
            mark(&name, y);
            feats.insert(*l, y);
        }
        if !self.dasis.is_empty() {
            let before = feats.clone();
            for (i, l) in cfg.levels.iter().enumerate() {
                let name = format!("dasi{}", l.index());
                ctx.tape.set_scope(name.as_str());
                let low = i.checked_sub(1).map(|j| before[&cfg.levels[j]]);
                let high = cfg.levels.get(i + 1).map(|h| before[h]);
                let y = self.dasis[l].forward(ctx, before[l], low, high)?.output;
                mark(&name, y);
                feats.insert(*l, y);
            }
        }

        let mut out = BTreeMap::new();
        for (l, head) in &self.heads {
            let name = format!("head{}", l.index());
            ctx.tape.set_scope(name.as_str());
            let h = head.stem.forward(ctx, feats[l])?;
            let y = head.out.forward(ctx, h)?;
            mark(&name, y);
            out.insert(*l, y);
        }
        ctx.tape.set_scope("");
        Ok((out, trace))
    }
}

/// Channel concatenation; spatial sizes must agree exactly.
fn join(ctx: &mut Ctx<'_>, parts: &[Var]) -> Result<Var> {
    let s0 = ctx.tape.shape(parts[0]);
    for p in &parts[1..] {
        let s = ctx.tape.shape(*p);
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(shape_err(format!("neck concat of {s0} with {s}")));
        }
    }
    ctx.tape.concat(parts)
}
