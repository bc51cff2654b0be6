//! Model graphs: plain-chain CNNs and dense-connectivity (DenseNet-style)
//! networks, plus their forward and backward passes.
//!
//! A model is an ordered DAG of named nodes; every edge source precedes its
//! consumers. Dense blocks grow a running concatenation: layer `l` of a
//! block consumes the block input plus all `l-1` previous layer outputs, so
//! its input channel count is `k0 + k*(l-1)`. Plain-chain models use the
//! same layer budget with in-degree 1 everywhere.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormState, BnSaved, Mode};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Dense,
    Plain,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Dense => "dense",
            ModelKind::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ModelKind::Dense),
            "plain" => Ok(ModelKind::Plain),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Classifier head: hidden dense widths (each followed by ReLU and dropout)
/// before the implicit final classifier layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub dense_widths: Vec<usize>,
    pub dropout_rate: f64,
}

impl HeadConfig {
    /// Named head presets: A=[1024], B=[1024,512], C=[1024,512,256],
    /// D=[1024,512,256,128], all with dropout 0.5.
    pub fn preset(name: &str) -> Result<HeadConfig> {
        let widths = match name {
            "A" | "a" => vec![1024],
            "B" | "b" => vec![1024, 512],
            "C" | "c" => vec![1024, 512, 256],
            "D" | "d" => vec![1024, 512, 256, 128],
            other => return Err(Error::Config(format!("unknown head preset '{other}'"))),
        };
        Ok(HeadConfig {
            dense_widths: widths,
            dropout_rate: 0.5,
        })
    }
}

/// Stem in front of the first dense block.
#[derive(Debug, Clone, PartialEq)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    /// Follow the stem conv with a 2x2 stride-2 average pool.
    pub pool: bool,
}

impl StemConfig {
    /// 3x3 stride-1 stem for small inputs.
    pub fn small() -> Self {
        StemConfig {
            kernel: 3,
            stride: 1,
            pool: false,
        }
    }

    /// 7x7 stride-2 stem plus pool for 224-class inputs.
    pub fn large() -> Self {
        StemConfig {
            kernel: 7,
            stride: 2,
            pool: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetConfig {
    pub stem: StemConfig,
    /// Stem output channels; the `k0` seen by the first block.
    pub k0: usize,
    pub block_sizes: Vec<usize>,
    pub growth_rate: usize,
    /// Width of each bottleneck 1x1 conv = multiplier * growth_rate.
    pub bottleneck_multiplier: usize,
    /// Transition compression in (0, 1].
    pub compression: f64,
    pub head: HeadConfig,
    pub num_classes: usize,
    /// Square input resolution.
    pub input_resolution: usize,
    pub in_channels: usize,
}

impl DenseNetConfig {
    /// DenseNet121-shaped backbone: k0=64, blocks [6,12,24,16], k=32,
    /// bottleneck 4k, compression 0.5.
    pub fn densenet121(head: HeadConfig, num_classes: usize, resolution: usize) -> Self {
        DenseNetConfig {
            stem: StemConfig::large(),
            k0: 64,
            block_sizes: vec![6, 12, 24, 16],
            growth_rate: 32,
            bottleneck_multiplier: 4,
            compression: 0.5,
            head,
            num_classes,
            input_resolution: resolution,
            in_channels: 1,
        }
    }

    /// Small model for 32x32-scale synthetic runs.
    pub fn toy(resolution: usize) -> Self {
        DenseNetConfig {
            stem: StemConfig::small(),
            k0: 16,
            block_sizes: vec![3, 3],
            growth_rate: 12,
            bottleneck_multiplier: 4,
            compression: 0.5,
            head: HeadConfig {
                dense_widths: vec![64],
                dropout_rate: 0.5,
            },
            num_classes: 2,
            input_resolution: resolution,
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.is_empty() {
            return Err(Error::Config("block_sizes must be nonempty".into()));
        }
        if self.growth_rate < 1 {
            return Err(Error::Config("growth_rate must be >= 1".into()));
        }
        if self.k0 < 1 {
            return Err(Error::Config("k0 must be >= 1".into()));
        }
        if self.bottleneck_multiplier < 1 {
            return Err(Error::Config("bottleneck_multiplier must be >= 1".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config("compression must be in (0, 1]".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.head.dense_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.head.dropout_rate) {
            return Err(Error::Config("head dropout rate must be in [0, 1)".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        self.spatial_trace()?;
        self.channel_trace()?;
        Ok(())
    }

    /// Spatial extent after the stem and after each transition; errors when
    /// an average pool would see an odd extent.
    pub fn spatial_trace(&self) -> Result<Vec<usize>> {
        let mut trace = Vec::new();
        let k = self.stem.kernel;
        let pad = k / 2;
        let s = self.input_resolution;
        if s + 2 * pad < k || self.stem.stride == 0 {
            return Err(Error::Config(format!(
                "resolution {s} too small for stem kernel {k}"
            )));
        }
        let mut cur = (s + 2 * pad - k) / self.stem.stride + 1;
        if self.stem.pool {
            if cur % 2 != 0 {
                return Err(Error::Config(format!(
                    "resolution {s} leaves odd extent {cur} at the stem pool"
                )));
            }
            cur /= 2;
        }
        trace.push(cur);
        for b in 0..self.block_sizes.len().saturating_sub(1) {
            if cur % 2 != 0 {
                return Err(Error::Config(format!(
                    "resolution {s} leaves odd extent {cur} at transition {}",
                    b + 1
                )));
            }
            cur /= 2;
            trace.push(cur);
        }
        if cur == 0 {
            return Err(Error::Config(format!(
                "resolution {s} collapses to zero extent"
            )));
        }
        Ok(trace)
    }

    /// Channel counts: output of each dense block (k0 + layers*growth) and
    /// each transition. Errors when compression floors a width to zero.
    pub fn channel_trace(&self) -> Result<Vec<usize>> {
        let mut trace = Vec::new();
        let mut ch = self.k0;
        for (b, &layers) in self.block_sizes.iter().enumerate() {
            ch = dense_block_out_channels(ch, layers, self.growth_rate);
            trace.push(ch);
            if b + 1 < self.block_sizes.len() {
                ch = compressed_channels(ch, self.compression)?;
                trace.push(ch);
            }
        }
        Ok(trace)
    }

    /// Output channels of each dense block only.
    pub fn block_channels(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut ch = self.k0;
        for (b, &layers) in self.block_sizes.iter().enumerate() {
            ch = dense_block_out_channels(ch, layers, self.growth_rate);
            out.push(ch);
            if b + 1 < self.block_sizes.len() {
                ch = compressed_channels(ch, self.compression)?;
            }
        }
        Ok(out)
    }
}

/// Dense-block channel accounting: a block of `layers` layers with growth `k`
/// leaves `in_channels + layers * k` channels on its concatenated output.
pub fn dense_block_out_channels(in_channels: usize, layers: usize, growth: usize) -> usize {
    in_channels + layers * growth
}

/// Transition width: floor(theta * channels), which must stay >= 1.
pub fn compressed_channels(channels: usize, theta: f64) -> Result<usize> {
    let out = libm::floor(theta * channels as f64) as usize;
    if out == 0 {
        return Err(Error::Config(format!(
            "compression {theta} floors {channels} channels to zero"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input,
    Conv {
        weight: String,
        bias: String,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        key: String,
    },
    Relu,
    AvgPool,
    GlobalAvgPool,
    Dense {
        weight: String,
        bias: String,
    },
    Dropout {
        rate: f64,
    },
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<usize>,
}

/// Per-key batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub config: DenseNetConfig,
    pub kind: ModelKind,
    pub seed: u64,
    /// Epoch metadata carried into checkpoints.
    pub trained_epoch: usize,
    pub nodes: Vec<Node>,
    pub params: BTreeMap<String, Tensor>,
    pub bn: BTreeMap<String, BnRunning>,
    pub frozen: BTreeSet<String>,
    /// Node index of each block's output (last concat for dense kind, last
    /// layer conv for plain kind).
    pub block_out_nodes: Vec<usize>,
}

/// Everything a backward pass (or Grad-CAM) needs from a forward pass.
pub struct ForwardCache {
    pub mode: Mode,
    pub outputs: Vec<Tensor>,
    bn_saved: BTreeMap<usize, BnSaved>,
    dropout_masks: BTreeMap<usize, Vec<f64>>,
}

pub struct BackwardResult {
    pub param_grads: BTreeMap<String, Vec<f64>>,
    /// Gradient at the requested capture node, when one was named.
    pub captured: Option<Tensor>,
}

impl ModelGraph {
    fn empty(config: DenseNetConfig, kind: ModelKind, seed: u64) -> Self {
        ModelGraph {
            config,
            kind,
            seed,
            trained_epoch: 0,
            nodes: vec![Node {
                name: "input".to_string(),
                op: OpKind::Input,
                inputs: vec![],
            }],
            params: BTreeMap::new(),
            bn: BTreeMap::new(),
            frozen: BTreeSet::new(),
            block_out_nodes: Vec::new(),
        }
    }

    fn push(&mut self, name: String, op: OpKind, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node { name, op, inputs });
        self.nodes.len() - 1
    }

    fn add_conv(
        &mut self,
        name: &str,
        input: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> usize {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let fan_in = cin * k * k;
        let std = sqrt(2.0 / fan_in as f64);
        let n = cout * cin * k * k;
        let w = Tensor::from_vec(
            &[cout, cin, k, k],
            (0..n).map(|_| rng.normal() * std).collect(),
        );
        self.params.insert(wname.clone(), w);
        self.params.insert(bname.clone(), Tensor::zeros(&[cout]));
        self.push(
            name.to_string(),
            OpKind::Conv {
                weight: wname,
                bias: bname,
                stride,
                pad,
            },
            vec![input],
        )
    }

    fn add_bn(&mut self, name: &str, input: usize, channels: usize) -> usize {
        self.params
            .insert(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0));
        self.params
            .insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.bn.insert(
            name.to_string(),
            BnRunning {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            },
        );
        self.push(
            name.to_string(),
            OpKind::BatchNorm {
                key: name.to_string(),
            },
            vec![input],
        )
    }

    fn add_dense(
        &mut self,
        name: &str,
        input: usize,
        fin: usize,
        fout: usize,
        rng: &mut Rng,
    ) -> usize {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let std = sqrt(2.0 / fin as f64);
        let w = Tensor::from_vec(
            &[fin, fout],
            (0..fin * fout).map(|_| rng.normal() * std).collect(),
        );
        self.params.insert(wname.clone(), w);
        self.params.insert(bname.clone(), Tensor::zeros(&[fout]));
        self.push(
            name.to_string(),
            OpKind::Dense {
                weight: wname,
                bias: bname,
            },
            vec![input],
        )
    }

    /// One composite layer H: BN -> ReLU -> 1x1 conv (mult*k) -> BN -> ReLU
    /// -> 3x3 conv (k, pad 1). Returns the 3x3 conv node.
    fn add_composite_layer(
        &mut self,
        prefix: &str,
        input: usize,
        in_ch: usize,
        growth: usize,
        mult: usize,
        rng: &mut Rng,
    ) -> usize {
        let mid = mult * growth;
        let bn1 = self.add_bn(&format!("{prefix}.bn1"), input, in_ch);
        let r1 = self.push(format!("{prefix}.relu1"), OpKind::Relu, vec![bn1]);
        let c1 = self.add_conv(&format!("{prefix}.conv1"), r1, in_ch, mid, 1, 1, 0, rng);
        let bn2 = self.add_bn(&format!("{prefix}.bn2"), c1, mid);
        let r2 = self.push(format!("{prefix}.relu2"), OpKind::Relu, vec![bn2]);
        self.add_conv(&format!("{prefix}.conv2"), r2, mid, growth, 3, 1, 1, rng)
    }

    /// Append a dense block: layer `l` consumes the concatenation of the
    /// block input and all previous layer outputs. Returns the block output
    /// node and its channel count (`in_channels + num_layers * growth`).
    pub fn append_dense_block(
        &mut self,
        prefix: &str,
        input: usize,
        in_channels: usize,
        num_layers: usize,
        growth: usize,
        mult: usize,
        rng: &mut Rng,
    ) -> (usize, usize) {
        let mut feat = input;
        let mut ch = in_channels;
        for l in 1..=num_layers {
            // structural check: input channels of layer l
            debug_assert_eq!(ch, in_channels + growth * (l - 1));
            let conv = self.add_composite_layer(
                &format!("{prefix}.layer{l}"),
                feat,
                ch,
                growth,
                mult,
                rng,
            );
            feat = self.push(
                format!("{prefix}.layer{l}.cat"),
                OpKind::Concat,
                vec![feat, conv],
            );
            ch += growth;
        }
        (feat, ch)
    }

    /// Append a plain-chain block with the same layer budget as a dense
    /// block but in-degree 1 everywhere (plain sequential wiring).
    pub fn append_plain_block(
        &mut self,
        prefix: &str,
        input: usize,
        in_channels: usize,
        num_layers: usize,
        growth: usize,
        mult: usize,
        rng: &mut Rng,
    ) -> (usize, usize) {
        let mut feat = input;
        let mut ch = in_channels;
        for l in 1..=num_layers {
            feat = self.add_composite_layer(
                &format!("{prefix}.layer{l}"),
                feat,
                ch,
                growth,
                mult,
                rng,
            );
            ch = growth;
        }
        (feat, ch)
    }

    /// Append a transition: BN -> ReLU -> 1x1 conv to floor(theta * in) ->
    /// 2x2 average pool, stride 2.
    pub fn append_transition(
        &mut self,
        prefix: &str,
        input: usize,
        in_channels: usize,
        theta: f64,
        rng: &mut Rng,
    ) -> Result<(usize, usize)> {
        let out_ch = compressed_channels(in_channels, theta)?;
        let bn = self.add_bn(&format!("{prefix}.bn"), input, in_channels);
        let r = self.push(format!("{prefix}.relu"), OpKind::Relu, vec![bn]);
        let c = self.add_conv(&format!("{prefix}.conv"), r, in_channels, out_ch, 1, 1, 0, rng);
        let p = self.push(format!("{prefix}.pool"), OpKind::AvgPool, vec![c]);
        Ok((p, out_ch))
    }

    /// Build a full model: stem, alternating blocks and transitions, final
    /// BN-ReLU-GAP, then the configured head and classifier.
    pub fn build(config: DenseNetConfig, kind: ModelKind, seed: u64) -> Result<ModelGraph> {
        config.validate()?;
        let mut rng = Rng::new(seed).substream(streams::INIT);
        let mut g = ModelGraph::empty(config.clone(), kind, seed);

        let stem_pad = config.stem.kernel / 2;
        let mut node = g.add_conv(
            "stem.conv",
            0,
            config.in_channels,
            config.k0,
            config.stem.kernel,
            config.stem.stride,
            stem_pad,
            &mut rng,
        );
        if config.stem.pool {
            node = g.push("stem.pool".to_string(), OpKind::AvgPool, vec![node]);
        }

        let mut ch = config.k0;
        let nblocks = config.block_sizes.len();
        for (b, &layers) in config.block_sizes.iter().enumerate() {
            let prefix = format!("block{}", b + 1);
            let (out_node, out_ch) = match kind {
                ModelKind::Dense => g.append_dense_block(
                    &prefix,
                    node,
                    ch,
                    layers,
                    config.growth_rate,
                    config.bottleneck_multiplier,
                    &mut rng,
                ),
                ModelKind::Plain => g.append_plain_block(
                    &prefix,
                    node,
                    ch,
                    layers,
                    config.growth_rate,
                    config.bottleneck_multiplier,
                    &mut rng,
                ),
            };
            g.block_out_nodes.push(out_node);
            node = out_node;
            ch = out_ch;
            if b + 1 < nblocks {
                let (t, tch) =
                    g.append_transition(&format!("trans{}", b + 1), node, ch, config.compression, &mut rng)?;
                node = t;
                ch = tch;
            }
        }

        let bn = g.add_bn("final.bn", node, ch);
        let r = g.push("final.relu".to_string(), OpKind::Relu, vec![bn]);
        let mut feat = g.push("final.gap".to_string(), OpKind::GlobalAvgPool, vec![r]);
        let mut width = ch;
        for (i, &w) in config.head.dense_widths.iter().enumerate() {
            let d = g.add_dense(&format!("head.fc{}", i + 1), feat, width, w, &mut rng);
            let rl = g.push(format!("head.relu{}", i + 1), OpKind::Relu, vec![d]);
            feat = g.push(
                format!("head.drop{}", i + 1),
                OpKind::Dropout {
                    rate: config.head.dropout_rate,
                },
                vec![rl],
            );
            width = w;
        }
        g.add_dense("head.out", feat, width, config.num_classes, &mut rng);
        Ok(g)
    }

    /// Override the rate of every dropout node (train-time knob).
    pub fn set_dropout_rate(&mut self, rate: f64) {
        for node in &mut self.nodes {
            if let OpKind::Dropout { rate: r } = &mut node.op {
                *r = rate;
            }
        }
        self.config.head.dropout_rate = rate;
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Default Grad-CAM target: the final block's output feature map.
    pub fn default_cam_target(&self) -> usize {
        *self.block_out_nodes.last().expect("model has blocks")
    }

    /// Total element count over all named trainable parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Channel count (or feature width after GAP/dense) at every node,
    /// derived purely from graph structure and parameter shapes.
    pub fn infer_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let c = match &node.op {
                OpKind::Input => self.config.in_channels,
                OpKind::Conv { weight, .. } => self.params[weight].shape()[0],
                OpKind::Dense { weight, .. } => self.params[weight].shape()[1],
                OpKind::Concat => node.inputs.iter().map(|&i| out[i]).sum(),
                _ => out[node.inputs[0]],
            };
            out.push(c);
        }
        out
    }

    /// In-degree of every node (structure check for dense vs plain wiring).
    pub fn in_degrees(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.inputs.len()).collect()
    }

    /// Mark parameters as frozen so the optimizer skips them.
    pub fn freeze(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            if !self.params.contains_key(n) {
                return Err(Error::Config(format!("cannot freeze unknown parameter '{n}'")));
            }
            self.frozen.insert(n.clone());
        }
        Ok(())
    }

    /// All parameter names outside the classifier head.
    pub fn backbone_param_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| !k.starts_with("head."))
            .cloned()
            .collect()
    }

    /// Forward pass over an (N, in_channels, S, S) batch. Train mode
    /// updates batch-norm running statistics (the only model mutation) and
    /// draws dropout masks from `rng`.
    pub fn forward(
        &mut self,
        batch: &Tensor,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor, ForwardCache)> {
        let (_, c, h, w) = batch.dims4("forward")?;
        if c != self.config.in_channels {
            return Err(Error::Shape {
                op: "forward",
                axis: "channel",
                expected: self.config.in_channels,
                got: c,
            });
        }
        if h != self.config.input_resolution || w != self.config.input_resolution {
            return Err(Error::Shape {
                op: "forward",
                axis: "resolution",
                expected: self.config.input_resolution,
                got: h,
            });
        }
        let mut cache = ForwardCache {
            mode,
            outputs: Vec::with_capacity(self.nodes.len()),
            bn_saved: BTreeMap::new(),
            dropout_masks: BTreeMap::new(),
        };
        for idx in 0..self.nodes.len() {
            let node = self.nodes[idx].clone();
            let out = match &node.op {
                OpKind::Input => batch.clone(),
                OpKind::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let x = &cache.outputs[node.inputs[0]];
                    ops::conv2d(x, &self.params[weight], self.params[bias].data(), *stride, *pad)?
                }
                OpKind::BatchNorm { key } => {
                    let x = &cache.outputs[node.inputs[0]];
                    let running = self.bn.get(key).expect("bn running stats").clone();
                    let mut state = BatchNormState {
                        gamma: self.params[&format!("{key}.gamma")].data().to_vec(),
                        beta: self.params[&format!("{key}.beta")].data().to_vec(),
                        running_mean: running.mean,
                        running_var: running.var,
                        momentum: BN_MOMENTUM,
                        epsilon: BN_EPSILON,
                    };
                    let (y, saved) = ops::batch_norm(x, &mut state, mode)?;
                    if mode == Mode::Train {
                        self.bn.insert(
                            key.clone(),
                            BnRunning {
                                mean: state.running_mean,
                                var: state.running_var,
                            },
                        );
                    }
                    cache.bn_saved.insert(idx, saved);
                    y
                }
                OpKind::Relu => ops::relu(&cache.outputs[node.inputs[0]]),
                OpKind::AvgPool => ops::avg_pool(&cache.outputs[node.inputs[0]])?,
                OpKind::GlobalAvgPool => ops::global_avg_pool(&cache.outputs[node.inputs[0]])?,
                OpKind::Dense { weight, bias } => ops::dense(
                    &cache.outputs[node.inputs[0]],
                    &self.params[weight],
                    self.params[bias].data(),
                )?,
                OpKind::Dropout { rate } => {
                    let (y, mask) =
                        ops::dropout(&cache.outputs[node.inputs[0]], *rate, mode, rng)?;
                    cache.dropout_masks.insert(idx, mask);
                    y
                }
                OpKind::Concat => {
                    let parts: Vec<&Tensor> =
                        node.inputs.iter().map(|&i| &cache.outputs[i]).collect();
                    ops::concat_channels(&parts)?
                }
            };
            cache.outputs.push(out);
        }
        let logits = cache.outputs.last().expect("nonempty graph").clone();
        Ok((logits, cache))
    }

    /// Backward pass from a gradient on the logits. Optionally captures the
    /// fully accumulated gradient at one node (for Grad-CAM).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Tensor,
        capture_node: Option<usize>,
    ) -> Result<BackwardResult> {
        let n = self.nodes.len();
        let mut node_grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        node_grads[n - 1] = Some(d_logits.clone());
        let mut param_grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut captured = None;

        for idx in (0..n).rev() {
            let g = match node_grads[idx].take() {
                Some(g) => g,
                None => continue, // no consumer contributed gradient
            };
            if capture_node == Some(idx) {
                captured = Some(g.clone());
            }
            let node = &self.nodes[idx];
            match &node.op {
                OpKind::Input => {}
                OpKind::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let x = &cache.outputs[node.inputs[0]];
                    let (dx, dw, db) =
                        ops::conv2d_backward(x, &self.params[weight], *stride, *pad, &g)?;
                    acc_param(&mut param_grads, weight, dw.data());
                    acc_param(&mut param_grads, bias, &db);
                    acc_node(&mut node_grads, node.inputs[0], dx);
                }
                OpKind::BatchNorm { key } => {
                    let x = &cache.outputs[node.inputs[0]];
                    let saved = cache.bn_saved.get(&idx).expect("bn saved stats");
                    let running = self.bn.get(key).expect("bn running stats");
                    let state = BatchNormState {
                        gamma: self.params[&format!("{key}.gamma")].data().to_vec(),
                        beta: self.params[&format!("{key}.beta")].data().to_vec(),
                        running_mean: running.mean.clone(),
                        running_var: running.var.clone(),
                        momentum: BN_MOMENTUM,
                        epsilon: BN_EPSILON,
                    };
                    let (dx, dgamma, dbeta) = ops::batch_norm_backward(x, &state, saved, &g)?;
                    acc_param(&mut param_grads, &format!("{key}.gamma"), &dgamma);
                    acc_param(&mut param_grads, &format!("{key}.beta"), &dbeta);
                    acc_node(&mut node_grads, node.inputs[0], dx);
                }
                OpKind::Relu => {
                    let x = &cache.outputs[node.inputs[0]];
                    acc_node(&mut node_grads, node.inputs[0], ops::relu_backward(x, &g));
                }
                OpKind::AvgPool => {
                    let xshape = cache.outputs[node.inputs[0]].shape().to_vec();
                    acc_node(
                        &mut node_grads,
                        node.inputs[0],
                        ops::avg_pool_backward(&xshape, &g),
                    );
                }
                OpKind::GlobalAvgPool => {
                    let xshape = cache.outputs[node.inputs[0]].shape().to_vec();
                    acc_node(
                        &mut node_grads,
                        node.inputs[0],
                        ops::global_avg_pool_backward(&xshape, &g),
                    );
                }
                OpKind::Dense { weight, bias } => {
                    let x = &cache.outputs[node.inputs[0]];
                    let (dx, dw, db) = ops::dense_backward(x, &self.params[weight], &g)?;
                    acc_param(&mut param_grads, weight, dw.data());
                    acc_param(&mut param_grads, bias, &db);
                    acc_node(&mut node_grads, node.inputs[0], dx);
                }
                OpKind::Dropout { .. } => {
                    let mask = cache.dropout_masks.get(&idx).expect("dropout mask");
                    acc_node(&mut node_grads, node.inputs[0], ops::dropout_backward(mask, &g));
                }
                OpKind::Concat => {
                    let part_ch: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|&i| cache.outputs[i].shape()[1])
                        .collect();
                    let parts = ops::concat_channels_backward(&g, &part_ch)?;
                    for (&src, part) in node.inputs.iter().zip(parts) {
                        acc_node(&mut node_grads, src, part);
                    }
                }
            }
        }
        Ok(BackwardResult {
            param_grads,
            captured,
        })
    }
}

fn acc_param(grads: &mut BTreeMap<String, Vec<f64>>, name: &str, g: &[f64]) {
    match grads.get_mut(name) {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => {
            grads.insert(name.to_string(), g.to_vec());
        }
    }
}

fn acc_node(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
