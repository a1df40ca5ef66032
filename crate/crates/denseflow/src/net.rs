//! Fully-convolutional DenseNet for optical flow.
//!
//! Encoder: a 3x3 stem, then dense blocks (input concatenated into the
//! output) alternating with transition downs (1x1 conv + 2x2 max pool).
//! Decoder: transition ups (paired stride-2 deconvolutions for features and
//! flow), concatenation with the skip activation at the same resolution,
//! dense blocks without input self-concatenation, and a 3x3 flow head per
//! resolution. Each head refines residually: its output is added to the
//! upsampled coarser flow. Flow values double at each upsample so
//! displacements stay in pixels of their own grid.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::rng::StreamRng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// Structural hyperparameters. `flow_levels` must equal `num_blocks_up + 1`:
/// one prediction at the bottleneck plus one per expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub growth_rate: usize,
    pub num_blocks_down: usize,
    pub num_blocks_up: usize,
    pub layers_per_block: usize,
    pub initial_channels: usize,
    pub dropout_rate: f64,
    pub lrelu_slope: f64,
    pub input_channels: usize,
    pub flow_levels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            growth_rate: 12,
            num_blocks_down: 4,
            num_blocks_up: 4,
            layers_per_block: 4,
            initial_channels: 32,
            dropout_rate: 0.2,
            lrelu_slope: 0.1,
            input_channels: 6,
            flow_levels: 5,
        }
    }
}

impl NetworkConfig {
    /// The deeper variant: five blocks of ten layers on each side.
    pub fn deeper() -> Self {
        NetworkConfig {
            num_blocks_down: 5,
            num_blocks_up: 5,
            layers_per_block: 10,
            flow_levels: 6,
            ..NetworkConfig::default()
        }
    }

    /// A small configuration for quick CPU experiments and tests.
    pub fn desk() -> Self {
        NetworkConfig {
            growth_rate: 8,
            num_blocks_down: 3,
            num_blocks_up: 3,
            layers_per_block: 2,
            initial_channels: 16,
            dropout_rate: 0.0,
            flow_levels: 4,
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("growth_rate", self.growth_rate),
            ("num_blocks_down", self.num_blocks_down),
            ("num_blocks_up", self.num_blocks_up),
            ("layers_per_block", self.layers_per_block),
            ("initial_channels", self.initial_channels),
            ("input_channels", self.input_channels),
            ("flow_levels", self.flow_levels),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.num_blocks_up != self.num_blocks_down {
            return Err(Error::Config(format!(
                "num_blocks_up ({}) must equal num_blocks_down ({}) so every \
                 expansion has a skip activation at its resolution",
                self.num_blocks_up, self.num_blocks_down
            )));
        }
        if self.flow_levels != self.num_blocks_up + 1 {
            return Err(Error::Config(format!(
                "flow_levels ({}) must be num_blocks_up + 1 ({}): one \
                 prediction at the bottleneck plus one per expansion",
                self.flow_levels,
                self.num_blocks_up + 1
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(0.0..1.0).contains(&self.lrelu_slope) {
            return Err(Error::Config(format!(
                "lrelu_slope must be in [0, 1), got {}",
                self.lrelu_slope
            )));
        }
        Ok(())
    }

    /// Input extents must be divisible by this so every transition sees even
    /// extents and the coarsest grid is at least 2x2.
    pub fn divisor(&self) -> usize {
        1 << (self.num_blocks_down + 1)
    }
}

struct Conv {
    w: Tensor<f32>,
    b: Tensor<f32>,
}

impl Conv {
    /// 3x3 or 1x1 convolution weights, fan-in scaled normal init.
    fn init(rng: &StreamRng, name: &str, cout: usize, cin: usize, k: usize) -> Conv {
        let mut r = rng.child(name);
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Conv {
            w: Tensor::from_fn(vec![cout, cin, k, k], |_| (r.normal() * std) as f32),
            b: Tensor::zeros(vec![cout]),
        }
    }

    /// Deconvolution weights laid out [cin, cout, k, k].
    fn init_deconv(rng: &StreamRng, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let mut r = rng.child(name);
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Conv {
            w: Tensor::from_fn(vec![cin, cout, k, k], |_| (r.normal() * std) as f32),
            b: Tensor::zeros(vec![cout]),
        }
    }

    /// Zero weights and bias; used for flow heads so the initial prediction
    /// is the identity warp.
    fn zeros(cout: usize, cin: usize, k: usize) -> Conv {
        Conv {
            w: Tensor::zeros(vec![cout, cin, k, k]),
            b: Tensor::zeros(vec![cout]),
        }
    }
}

struct Bn {
    gamma: Tensor<f32>,
    beta: Tensor<f32>,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
}

impl Bn {
    fn new(channels: usize) -> Bn {
        Bn {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// BN -> LReLU -> 3x3 conv -> dropout, producing `growth_rate` channels.
struct CompositeLayer {
    bn: Bn,
    conv: Conv,
}

/// `include_input` distinguishes contracting blocks (output is the input
/// plus all layer outputs) from expanding ones (layer outputs only).
struct DenseBlock {
    layers: Vec<CompositeLayer>,
    include_input: bool,
}

impl DenseBlock {
    fn init(rng: &StreamRng, name: &str, cin: usize, cfg: &NetworkConfig, include_input: bool) -> DenseBlock {
        let layers = (0..cfg.layers_per_block)
            .map(|i| {
                let c = cin + i * cfg.growth_rate;
                CompositeLayer {
                    bn: Bn::new(c),
                    conv: Conv::init(
                        rng,
                        &format!("{name}.l{i}.conv"),
                        cfg.growth_rate,
                        c,
                        3,
                    ),
                }
            })
            .collect();
        DenseBlock { layers, include_input }
    }
}

struct TransitionDown {
    conv: Conv,
}

struct TransitionUp {
    feat: Conv,
    flow: Conv,
}

/// A built network: parameters plus the configuration that shaped them.
pub struct Network {
    pub config: NetworkConfig,
    stem: Conv,
    down: Vec<DenseBlock>,
    tds: Vec<TransitionDown>,
    bottleneck: DenseBlock,
    tus: Vec<TransitionUp>,
    up: Vec<DenseBlock>,
    heads: Vec<Conv>,
}

/// Per-stage channel arithmetic shared by `build` and `plan`.
struct ChannelWalk {
    skips: Vec<usize>,
    bottleneck_in: usize,
    bottleneck_out: usize,
    concat_in: Vec<usize>,
    up_out: usize,
}

fn walk_channels(cfg: &NetworkConfig) -> ChannelWalk {
    let grow = cfg.layers_per_block * cfg.growth_rate;
    let mut c = cfg.initial_channels;
    let mut skips = Vec::new();
    for _ in 0..cfg.num_blocks_down {
        c += grow;
        skips.push(c);
    }
    let bottleneck_in = c;
    let bottleneck_out = c + grow;
    let mut feat = bottleneck_out;
    let mut concat_in = Vec::new();
    for u in 0..cfg.num_blocks_up {
        let skip = skips[cfg.num_blocks_down - 1 - u];
        concat_in.push(feat + skip + 2);
        feat = grow;
    }
    ChannelWalk {
        skips,
        bottleneck_in,
        bottleneck_out,
        concat_in,
        up_out: grow,
    }
}

/// Deterministic one-stage-per-line listing of the architecture: stage name,
/// operator, input/output channels, spatial extent relative to the input.
pub fn plan(cfg: &NetworkConfig) -> Result<String> {
    cfg.validate()?;
    let w = walk_channels(cfg);
    let mut out = String::new();
    let mut line = |name: &str, op: &str, cin: usize, cout: usize, denom: usize| {
        let scale = if denom == 1 {
            "1".to_string()
        } else {
            format!("1/{denom}")
        };
        out.push_str(&format!("{name:<14} {op:<18} {cin:>4} -> {cout:<4} @ {scale}\n"));
    };
    line("stem", "conv3x3", cfg.input_channels, cfg.initial_channels, 1);
    let mut c = cfg.initial_channels;
    let mut denom = 1;
    for d in 0..cfg.num_blocks_down {
        line(&format!("down{d}"), "dense_block_down", c, w.skips[d], denom);
        c = w.skips[d];
        line(&format!("down{d}.td"), "transition_down", c, c, denom * 2);
        denom *= 2;
    }
    line("bottleneck", "dense_block_down", w.bottleneck_in, w.bottleneck_out, denom);
    line("head0", "flow_head", w.bottleneck_out, 2, denom);
    let mut feat = w.bottleneck_out;
    for u in 0..cfg.num_blocks_up {
        denom /= 2;
        line(&format!("up{u}.tu"), "transition_up", feat + 2, feat + 2, denom);
        line(&format!("up{u}"), "dense_block_up", w.concat_in[u], w.up_out, denom);
        line(&format!("head{}", u + 1), "flow_head", w.up_out, 2, denom);
        feat = w.up_out;
    }
    Ok(out)
}

/// Handles into one recorded forward pass: the flow pyramid (coarsest first)
/// and the tape leaf for every trainable parameter, in `visit_params` order.
pub struct ForwardPass {
    pub flows: Vec<Var>,
    pub params: Vec<(String, Var)>,
}

struct Ctx<'a> {
    tape: &'a mut Tape<f32>,
    mode: Mode,
    rng: StreamRng,
    train_params: bool,
    params: Vec<(String, Var)>,
    bn_updates: Vec<(Vec<f32>, Vec<f32>)>,
}

impl<'a> Ctx<'a> {
    fn leaf(&mut self, name: String, t: &Tensor<f32>) -> Var {
        let v = self.tape.leaf(t.clone(), self.train_params);
        self.params.push((name, v));
        v
    }

    fn conv(&mut self, name: &str, c: &Conv, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.leaf(format!("{name}.w"), &c.w);
        let b = self.leaf(format!("{name}.b"), &c.b);
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn deconv2x(&mut self, name: &str, c: &Conv, x: Var) -> Result<Var> {
        let w = self.leaf(format!("{name}.w"), &c.w);
        let b = self.leaf(format!("{name}.b"), &c.b);
        self.tape.conv_transpose2d(x, w, b, 2, 1, 1)
    }
}

impl Network {
    /// Assemble a network. Pure in (config, seed): identical arguments give
    /// bit-identical parameters.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let rng = StreamRng::new(seed).child("net-init");
        let w = walk_channels(config);
        let stem = Conv::init(&rng, "stem", config.initial_channels, config.input_channels, 3);
        let mut c = config.initial_channels;
        let mut down = Vec::new();
        let mut tds = Vec::new();
        for d in 0..config.num_blocks_down {
            down.push(DenseBlock::init(&rng, &format!("down{d}"), c, config, true));
            c = w.skips[d];
            tds.push(TransitionDown {
                conv: Conv::init(&rng, &format!("td{d}"), c, c, 1),
            });
        }
        let bottleneck = DenseBlock::init(&rng, "bottleneck", w.bottleneck_in, config, true);
        let mut heads = vec![Conv::zeros(2, w.bottleneck_out, 3)];
        let mut tus = Vec::new();
        let mut up = Vec::new();
        let mut feat = w.bottleneck_out;
        for u in 0..config.num_blocks_up {
            tus.push(TransitionUp {
                feat: Conv::init_deconv(&rng, &format!("tu{u}.feat"), feat, feat, 3),
                flow: Conv::init_deconv(&rng, &format!("tu{u}.flow"), 2, 2, 3),
            });
            up.push(DenseBlock::init(&rng, &format!("up{u}"), w.concat_in[u], config, false));
            feat = w.up_out;
            heads.push(Conv::zeros(2, feat, 3));
        }
        Ok(Network {
            config: config.clone(),
            stem,
            down,
            tds,
            bottleneck,
            tus,
            up,
            heads,
        })
    }

    /// Total trainable scalar count (conv and deconv weights and biases, BN
    /// gamma and beta). Running statistics are buffers, not parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        self.visit_owned(&mut |name, t| f(name, t));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        fn block(name: &str, b: &mut DenseBlock, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
            for (i, l) in b.layers.iter_mut().enumerate() {
                f(&format!("{name}.l{i}.bn.gamma"), &mut l.bn.gamma);
                f(&format!("{name}.l{i}.bn.beta"), &mut l.bn.beta);
                f(&format!("{name}.l{i}.conv.w"), &mut l.conv.w);
                f(&format!("{name}.l{i}.conv.b"), &mut l.conv.b);
            }
        }
        f("stem.w", &mut self.stem.w);
        f("stem.b", &mut self.stem.b);
        for d in 0..self.down.len() {
            block(&format!("down{d}"), &mut self.down[d], f);
            f(&format!("td{d}.conv.w"), &mut self.tds[d].conv.w);
            f(&format!("td{d}.conv.b"), &mut self.tds[d].conv.b);
        }
        block("bottleneck", &mut self.bottleneck, f);
        for u in 0..self.up.len() {
            f(&format!("tu{u}.feat.w"), &mut self.tus[u].feat.w);
            f(&format!("tu{u}.feat.b"), &mut self.tus[u].feat.b);
            f(&format!("tu{u}.flow.w"), &mut self.tus[u].flow.w);
            f(&format!("tu{u}.flow.b"), &mut self.tus[u].flow.b);
            block(&format!("up{u}"), &mut self.up[u], f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            f(&format!("head{i}.w"), &mut h.w);
            f(&format!("head{i}.b"), &mut h.b);
        }
    }

    fn visit_owned(&self, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        fn block(name: &str, b: &DenseBlock, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
            for (i, l) in b.layers.iter().enumerate() {
                f(&format!("{name}.l{i}.bn.gamma"), &l.bn.gamma);
                f(&format!("{name}.l{i}.bn.beta"), &l.bn.beta);
                f(&format!("{name}.l{i}.conv.w"), &l.conv.w);
                f(&format!("{name}.l{i}.conv.b"), &l.conv.b);
            }
        }
        f("stem.w", &self.stem.w);
        f("stem.b", &self.stem.b);
        for d in 0..self.down.len() {
            block(&format!("down{d}"), &self.down[d], f);
            f(&format!("td{d}.conv.w"), &self.tds[d].conv.w);
            f(&format!("td{d}.conv.b"), &self.tds[d].conv.b);
        }
        block("bottleneck", &self.bottleneck, f);
        for u in 0..self.up.len() {
            f(&format!("tu{u}.feat.w"), &self.tus[u].feat.w);
            f(&format!("tu{u}.feat.b"), &self.tus[u].feat.b);
            f(&format!("tu{u}.flow.w"), &self.tus[u].flow.w);
            f(&format!("tu{u}.flow.b"), &self.tus[u].flow.b);
            block(&format!("up{u}"), &self.up[u], f);
        }
        for (i, h) in self.heads.iter().enumerate() {
            f(&format!("head{i}.w"), &h.w);
            f(&format!("head{i}.b"), &h.b);
        }
    }

    /// BN running statistic buffers, in the same deterministic order as
    /// `visit_params` walks their layers.
    pub fn visit_bn_stats(&self, f: &mut dyn FnMut(&str, &[f32], &[f32])) {
        self.for_each_bn(|name, bn| f(name, &bn.running_mean, &bn.running_var));
    }

    pub fn visit_bn_stats_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f32>, &mut Vec<f32>)) {
        self.for_each_bn_mut(|name, bn| f(name, &mut bn.running_mean, &mut bn.running_var));
    }

    fn for_each_bn(&self, mut f: impl FnMut(&str, &Bn)) {
        let mut blocks: Vec<(String, &DenseBlock)> = Vec::new();
        for (d, b) in self.down.iter().enumerate() {
            blocks.push((format!("down{d}"), b));
        }
        blocks.push(("bottleneck".into(), &self.bottleneck));
        for (u, b) in self.up.iter().enumerate() {
            blocks.push((format!("up{u}"), b));
        }
        for (name, b) in blocks {
            for (i, l) in b.layers.iter().enumerate() {
                f(&format!("{name}.l{i}.bn"), &l.bn);
            }
        }
    }

    fn for_each_bn_mut(&mut self, mut f: impl FnMut(&str, &mut Bn)) {
        let nd = self.down.len();
        for d in 0..nd {
            for i in 0..self.down[d].layers.len() {
                f(&format!("down{d}.l{i}.bn"), &mut self.down[d].layers[i].bn);
            }
        }
        for i in 0..self.bottleneck.layers.len() {
            f(&format!("bottleneck.l{i}.bn"), &mut self.bottleneck.layers[i].bn);
        }
        for u in 0..self.up.len() {
            for i in 0..self.up[u].layers.len() {
                f(&format!("up{u}.l{i}.bn"), &mut self.up[u].layers[i].bn);
            }
        }
    }

    fn check_input(&self, i1: &Tensor<f32>, i2: &Tensor<f32>) -> Result<(usize, usize, usize)> {
        if i1.shape() != i2.shape() {
            return Err(Error::shape(
                "frame pair must share a shape",
                i1.shape(),
                i2.shape(),
            ));
        }
        let (n, c, h, w) = i1.dims4()?;
        if 2 * c != self.config.input_channels {
            return Err(Error::InvalidArgument(format!(
                "network expects {} stacked input channels, got 2x{c}",
                self.config.input_channels
            )));
        }
        let div = self.config.divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "input extent {h}x{w} must be divisible by {div}"
            )));
        }
        Ok((n, h, w))
    }

    fn composite(
        &self,
        ctx: &mut Ctx,
        name: &str,
        layer: &CompositeLayer,
        x: Var,
    ) -> Result<Var> {
        let gamma = ctx.leaf(format!("{name}.bn.gamma"), &layer.bn.gamma);
        let beta = ctx.leaf(format!("{name}.bn.beta"), &layer.bn.beta);
        let (y, stats) = ctx.tape.batch_norm(
            x,
            gamma,
            beta,
            &layer.bn.running_mean,
            &layer.bn.running_var,
            BN_EPS,
            ctx.mode,
        )?;
        if let Some(s) = stats {
            ctx.bn_updates.push(s);
        }
        let y = ctx.tape.leaky_relu(y, self.config.lrelu_slope)?;
        let y = ctx.conv(&format!("{name}.conv"), &layer.conv, y, 1, 1)?;
        let mut r = ctx.rng.child(name);
        ctx.tape.dropout(y, self.config.dropout_rate, ctx.mode, &mut r)
    }

    fn dense_block(&self, ctx: &mut Ctx, name: &str, block: &DenseBlock, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        let mut outs = Vec::new();
        for (i, layer) in block.layers.iter().enumerate() {
            let input = if feats.len() == 1 {
                feats[0]
            } else {
                ctx.tape.concat(&feats)?
            };
            let y = self.composite(ctx, &format!("{name}.l{i}"), layer, input)?;
            feats.push(y);
            outs.push(y);
        }
        if block.include_input {
            ctx.tape.concat(&feats)
        } else if outs.len() == 1 {
            Ok(outs[0])
        } else {
            ctx.tape.concat(&outs)
        }
    }

    fn run(&self, ctx: &mut Ctx, i1: Var, i2: Var) -> Result<Vec<Var>> {
        let x = ctx.tape.concat(&[i1, i2])?;
        let mut x = ctx.conv("stem", &self.stem, x, 1, 1)?;
        let mut skips = Vec::new();
        for d in 0..self.down.len() {
            x = self.dense_block(ctx, &format!("down{d}"), &self.down[d], x)?;
            skips.push(x);
            x = ctx.conv(&format!("td{d}.conv"), &self.tds[d].conv, x, 1, 0)?;
            x = ctx.tape.maxpool2d(x, 2, 2)?;
        }
        let mut feat = self.dense_block(ctx, "bottleneck", &self.bottleneck, x)?;
        let mut flow = ctx.conv("head0", &self.heads[0], feat, 1, 1)?;
        let mut flows = vec![flow];
        for u in 0..self.up.len() {
            let feat_up = ctx.deconv2x(&format!("tu{u}.feat"), &self.tus[u].feat, feat)?;
            let flow_up = ctx.deconv2x(&format!("tu{u}.flow"), &self.tus[u].flow, flow)?;
            let flow_up = ctx.tape.mul_scalar(flow_up, 2.0);
            let skip = skips[self.down.len() - 1 - u];
            let cat = ctx.tape.concat(&[feat_up, skip, flow_up])?;
            feat = self.dense_block(ctx, &format!("up{u}"), &self.up[u], cat)?;
            // residual refinement: the head corrects the upsampled estimate
            let refine = ctx.conv(&format!("head{}", u + 1), &self.heads[u + 1], feat, 1, 1)?;
            flow = ctx.tape.add(refine, flow_up)?;
            flows.push(flow);
        }
        Ok(flows)
    }

    /// Record a training forward pass. Parameters enter the tape as
    /// gradient-carrying leaves; BN running statistics update in place.
    /// `rng` drives dropout; pass a per-iteration child for reproducibility.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<f32>,
        i1: &Tensor<f32>,
        i2: &Tensor<f32>,
        rng: &StreamRng,
    ) -> Result<ForwardPass> {
        self.check_input(i1, i2)?;
        let mut ctx = Ctx {
            tape,
            mode: Mode::Train,
            rng: rng.child("dropout"),
            train_params: true,
            params: Vec::new(),
            bn_updates: Vec::new(),
        };
        let v1 = ctx.tape.constant(i1.clone());
        let v2 = ctx.tape.constant(i2.clone());
        let flows = self.run(&mut ctx, v1, v2)?;
        let Ctx {
            params, bn_updates, ..
        } = ctx;
        let mut iter = bn_updates.into_iter();
        self.for_each_bn_mut(|_, bn| {
            let (mean, var) = iter.next().expect("one stat pair per BN layer");
            for (r, b) in bn.running_mean.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in bn.running_var.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        });
        Ok(ForwardPass { flows, params })
    }

    /// Record an eval-mode pass (no dropout, running BN statistics, no
    /// parameter gradients) on an existing tape.
    pub fn forward_eval_vars(
        &self,
        tape: &mut Tape<f32>,
        i1: &Tensor<f32>,
        i2: &Tensor<f32>,
    ) -> Result<ForwardPass> {
        self.check_input(i1, i2)?;
        let mut ctx = Ctx {
            tape,
            mode: Mode::Eval,
            rng: StreamRng::new(0),
            train_params: false,
            params: Vec::new(),
            bn_updates: Vec::new(),
        };
        let v1 = ctx.tape.constant(i1.clone());
        let v2 = ctx.tape.constant(i2.clone());
        let flows = self.run(&mut ctx, v1, v2)?;
        Ok(ForwardPass {
            flows,
            params: ctx.params,
        })
    }

    /// Eval-mode inference for a single frame pair [1, c, h, w]; returns the
    /// flow pyramid coarsest first, finest at input resolution.
    pub fn forward(&self, i1: &Tensor<f32>, i2: &Tensor<f32>) -> Result<Vec<FlowField>> {
        let mut tape = Tape::new();
        let pass = self.forward_eval_vars(&mut tape, i1, i2)?;
        pass.flows
            .iter()
            .map(|&v| {
                let (_, _, h, w) = tape.value(v).dims4()?;
                FlowField::from_channels(w, h, tape.value(v).data())
            })
            .collect()
    }
}
