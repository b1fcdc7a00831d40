//! Progressive dense V-net, its single-head variant and a 2-D U-Net, built
//! as a declarative layer graph that is interpreted on a [`Tape`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::BatchStats;
use crate::nn::{ConvGeom, Dims, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::volume::{resample_nearest, LabelMask, ScanMetadata, N_CLASSES};

pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Pdvnet,
    Dvnet,
    Unet2d,
}

impl NetKind {
    pub const ALL: [NetKind; 3] = [NetKind::Pdvnet, NetKind::Dvnet, NetKind::Unet2d];

    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Pdvnet => "pdvnet",
            NetKind::Dvnet => "dvnet",
            NetKind::Unet2d => "unet2d",
        }
    }

    pub fn is_2d(self) -> bool {
        self == NetKind::Unet2d
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unsupported(format!("unknown network kind '{s}' (expected pdvnet, dvnet or unet2d)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetKind,
    /// `(nx, ny, nz)` for the 3-D nets, `(nx, ny)` for the U-Net.
    pub in_shape: Vec<usize>,
    pub n_classes: usize,
    pub initial_kernels: usize,
    pub initial_kernel_size: usize,
    pub block_depths: Vec<usize>,
    pub growth_rates: Vec<usize>,
    pub conv_kernel_size: usize,
    pub skip_channels: [usize; 3],
    pub unet_base_features: usize,
    pub unet_depth: usize,
    pub dropout_rate: f64,
}

impl NetworkSpec {
    pub fn pdvnet(in_shape: [usize; 3]) -> Self {
        Self {
            kind: NetKind::Pdvnet,
            in_shape: in_shape.to_vec(),
            n_classes: N_CLASSES,
            initial_kernels: 24,
            initial_kernel_size: 5,
            block_depths: vec![5, 10, 10],
            growth_rates: vec![4, 8, 16],
            conv_kernel_size: 3,
            skip_channels: [12, 24, 24],
            unet_base_features: 16,
            unet_depth: 4,
            dropout_rate: 0.5,
        }
    }

    pub fn dvnet(in_shape: [usize; 3]) -> Self {
        Self {
            kind: NetKind::Dvnet,
            ..Self::pdvnet(in_shape)
        }
    }

    pub fn unet2d(in_shape: [usize; 2]) -> Self {
        Self {
            kind: NetKind::Unet2d,
            in_shape: in_shape.to_vec(),
            ..Self::pdvnet([in_shape[0], in_shape[1], 1])
        }
    }

    /// Default spec of `kind` for a 3-D grid; the U-Net takes its in-plane size.
    pub fn for_kind(kind: NetKind, shape: [usize; 3]) -> Self {
        match kind {
            NetKind::Pdvnet => Self::pdvnet(shape),
            NetKind::Dvnet => Self::dvnet(shape),
            NetKind::Unet2d => Self::unet2d([shape[0], shape[1]]),
        }
    }

    /// Spatial input size as `[nx, ny, nz]`, with `nz = 1` in 2-D.
    pub fn spatial(&self) -> [usize; 3] {
        match self.in_shape.as_slice() {
            [x, y] => [*x, *y, 1],
            [x, y, z] => [*x, *y, *z],
            _ => [0; 3],
        }
    }

    /// Spatial size of every pathway output.
    pub fn output_spatial(&self) -> [usize; 3] {
        let s = self.spatial();
        match self.kind {
            NetKind::Unet2d => s,
            _ => [s[0] / 2, s[1] / 2, s[2] / 2],
        }
    }

    pub fn n_pathways(&self) -> usize {
        match self.kind {
            NetKind::Pdvnet => 3,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_classes != N_CLASSES {
            return bad(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        let dims = self.in_shape.len();
        match self.kind {
            NetKind::Unet2d => {
                if dims != 2 {
                    return bad(format!("unet2d expects a 2-D in_shape, got {:?}", self.in_shape));
                }
                if self.unet_depth < 2 || self.unet_base_features == 0 {
                    return bad("unet2d needs unet_depth >= 2 and unet_base_features > 0".into());
                }
                let f = 1 << (self.unet_depth - 1);
                if self.in_shape.iter().any(|&d| d == 0 || d % f != 0) {
                    return bad(format!("every spatial dimension of {:?} must be divisible by {f}", self.in_shape));
                }
            }
            _ => {
                if dims != 3 {
                    return bad(format!("{} expects a 3-D in_shape, got {:?}", self.kind, self.in_shape));
                }
                if self.block_depths.len() != 3 || self.growth_rates.len() != 3 {
                    return bad("block_depths and growth_rates must each have length 3".into());
                }
                if self.in_shape.iter().any(|&d| d == 0 || d % 8 != 0) {
                    return bad(format!("every spatial dimension of {:?} must be divisible by 8", self.in_shape));
                }
                if self.initial_kernels == 0 || self.initial_kernel_size.is_multiple_of(2) || self.conv_kernel_size.is_multiple_of(2) {
                    return bad("kernel sizes must be odd and initial_kernels positive".into());
                }
                if self.skip_channels.contains(&0) || self.growth_rates.contains(&0) {
                    return bad("skip_channels and growth_rates must be positive".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Input,
    AvgPool([usize; 3]),
    MaxPool([usize; 3]),
    Conv { out_channels: usize, geom: ConvGeom, bias: bool },
    UpConv { out_channels: usize, factor: [usize; 3] },
    BatchNorm,
    PRelu,
    Relu,
    Dropout,
    Concat,
    /// Trilinear up-sampling by an integer factor.
    Upsample([usize; 3]),
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub channels: usize,
    pub spatial: [usize; 3],
}

/// Predicted output shape of every layer, in evaluation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShapeTable(pub Vec<LayerShape>);

impl LayerShapeTable {
    pub fn get(&self, name: &str) -> Option<&LayerShape> {
        self.0.iter().find(|s| s.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerShape> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Trainable tensors plus non-trainable buffers (normalisation running
/// statistics), keyed by `<layer>.<role>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub trainable: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn count(&self) -> usize {
        self.trainable.values().map(|t| t.dims().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.trainable.values().chain(self.buffers.values()).all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let c = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Parameters {
            trainable: c(&self.trainable),
            buffers: c(&self.buffers),
        }
    }

    fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.trainable
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))
    }

    /// Blends batch statistics into the running averages.
    pub fn update_running_stats(&mut self, updates: &[(String, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (layer, s) in updates {
            let unbias = if s.count > 1 { T::lit(s.count as f64 / (s.count - 1) as f64) } else { T::one() };
            if let Some(rm) = self.buffers.get_mut(&format!("{layer}.running_mean")) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = keep * *r + m * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{layer}.running_var")) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                    *r = keep * *r + m * b * unbias;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout; the seed drives channel selection.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Infer,
}

/// A recorded forward pass: the tape, the variable of every layer and the
/// pathway outputs.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub layer_vars: Vec<Var>,
    pub heads: Vec<Var>,
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn head_values(&self) -> Vec<Tensor<T>> {
        self.heads.iter().map(|&v| self.tape.value(v).clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    heads: Vec<usize>,
    shapes: LayerShapeTable,
}

struct Builder {
    layers: Vec<Layer>,
    shapes: Vec<LayerShape>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, op: LayerOp, inputs: Vec<usize>) -> Result<usize> {
        let name = name.into();
        let first = inputs.first().map(|&i| self.shapes[i].clone());
        let err = |m: &str| Error::ShapeMismatch(format!("layer '{name}': {m}"));
        let (channels, spatial) = match &op {
            LayerOp::Input => unreachable!("input is seeded by the builder"),
            LayerOp::Concat => {
                let s0 = first.ok_or_else(|| err("no inputs"))?;
                if inputs.iter().any(|&i| self.shapes[i].spatial != s0.spatial) {
                    return Err(err("concatenated inputs differ in spatial size"));
                }
                (inputs.iter().map(|&i| self.shapes[i].channels).sum(), s0.spatial)
            }
            op => {
                let s = first.ok_or_else(|| err("no inputs"))?;
                match op {
                    LayerOp::AvgPool(f) | LayerOp::MaxPool(f) => {
                        if (0..3).any(|a| s.spatial[a] % f[a] != 0) {
                            return Err(err("pooling factor does not divide input"));
                        }
                        (s.channels, [0, 1, 2].map(|a| s.spatial[a] / f[a]))
                    }
                    LayerOp::Conv { out_channels, geom, .. } => (*out_channels, geom.out_spatial(s.spatial).ok_or_else(|| err("kernel exceeds input"))?),
                    LayerOp::UpConv { out_channels, factor } => (*out_channels, [0, 1, 2].map(|a| s.spatial[a] * factor[a])),
                    LayerOp::Upsample(f) => (s.channels, [0, 1, 2].map(|a| s.spatial[a] * f[a])),
                    _ => (s.channels, s.spatial),
                }
            }
        };
        self.layers.push(Layer { name: name.clone(), op, inputs });
        self.shapes.push(LayerShape { name, channels, spatial });
        Ok(self.layers.len() - 1)
    }

    fn conv(&mut self, name: &str, input: usize, out_channels: usize, geom: ConvGeom, bias: bool) -> Result<usize> {
        self.add(format!("{name}.conv"), LayerOp::Conv { out_channels, geom, bias }, vec![input])
    }

    /// conv -> batch norm -> PReLU.
    fn conv_bn_prelu(&mut self, name: &str, input: usize, out: usize, geom: ConvGeom) -> Result<usize> {
        let c = self.conv(name, input, out, geom, false)?;
        let b = self.add(format!("{name}.bn"), LayerOp::BatchNorm, vec![c])?;
        self.add(format!("{name}.prelu"), LayerOp::PRelu, vec![b])
    }

    fn conv_bn_relu(&mut self, name: &str, input: usize, out: usize, geom: ConvGeom) -> Result<usize> {
        let c = self.conv(name, input, out, geom, false)?;
        let b = self.add(format!("{name}.bn"), LayerOp::BatchNorm, vec![c])?;
        self.add(format!("{name}.relu"), LayerOp::Relu, vec![b])
    }

    fn dense_block(&mut self, name: &str, mut x: usize, depth: usize, growth: usize, k: usize) -> Result<usize> {
        for l in 0..depth {
            let p = format!("{name}.l{l}");
            let a = self.conv_bn_prelu(&p, x, growth, ConvGeom::same([k; 3]))?;
            let d = self.add(format!("{p}.dropout"), LayerOp::Dropout, vec![a])?;
            x = self.add(format!("{p}.concat"), LayerOp::Concat, vec![x, d])?;
        }
        Ok(x)
    }

    fn head(&mut self, name: &str, input: usize, classes: usize) -> Result<usize> {
        let c = self.conv(name, input, classes, ConvGeom::same([1; 3]), true)?;
        self.add(format!("{name}.softmax"), LayerOp::Softmax, vec![c])
    }
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn shape_table(&self) -> &LayerShapeTable {
        &self.shapes
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Every layer that `layer` transitively reads from.
    pub fn ancestors(&self, layer: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = self.layers[layer].inputs.clone();
        while let Some(i) = stack.pop() {
            if seen.insert(i) {
                stack.extend(&self.layers[i].inputs);
            }
        }
        seen
    }

    fn build_graph(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let s = spec.spatial();
        let mut b = Builder {
            layers: vec![Layer {
                name: "input".into(),
                op: LayerOp::Input,
                inputs: vec![],
            }],
            shapes: vec![LayerShape {
                name: "input".into(),
                channels: 1,
                spatial: s,
            }],
        };
        let heads = match spec.kind {
            NetKind::Unet2d => Self::unet(&mut b, spec)?,
            _ => Self::vnet(&mut b, spec)?,
        };
        Ok(Self {
            spec: spec.clone(),
            layers: b.layers,
            heads,
            shapes: LayerShapeTable(b.shapes),
        })
    }

    fn vnet(b: &mut Builder, spec: &NetworkSpec) -> Result<Vec<usize>> {
        let k = spec.conv_kernel_size;
        let pooled = b.add("init.pool", LayerOp::AvgPool([2; 3]), vec![0])?;
        let strided = b.conv_bn_prelu("init", 0, spec.initial_kernels, ConvGeom::strided([spec.initial_kernel_size; 3], [2; 3]))?;
        let mut x = b.add("init.concat", LayerOp::Concat, vec![pooled, strided])?;
        let mut skips = Vec::new();
        for i in 0..3 {
            if i > 0 {
                let width = spec.initial_kernels;
                x = b.conv_bn_prelu(&format!("down{}", i + 1), x, width, ConvGeom::strided([k; 3], [2; 3]))?;
            }
            x = b.dense_block(&format!("block{}", i + 1), x, spec.block_depths[i], spec.growth_rates[i], k)?;
            let skip = b.conv_bn_prelu(&format!("skip{}", i + 1), x, spec.skip_channels[i], ConvGeom::same([k; 3]))?;
            skips.push(skip);
        }
        let up2 = b.add("skip2.up", LayerOp::Upsample([2; 3]), vec![skips[1]])?;
        let up3 = b.add("skip3.up", LayerOp::Upsample([4; 3]), vec![skips[2]])?;
        let n = spec.n_classes;
        Ok(match spec.kind {
            NetKind::Pdvnet => {
                let p1 = b.head("path1", skips[0], n)?;
                let m2 = b.add("path2.merge", LayerOp::Concat, vec![skips[0], up2])?;
                let p2 = b.head("path2", m2, n)?;
                let m3 = b.add("path3.merge", LayerOp::Concat, vec![m2, up3])?;
                let p3 = b.head("path3", m3, n)?;
                vec![p1, p2, p3]
            }
            _ => {
                let m = b.add("head.merge", LayerOp::Concat, vec![skips[0], up2, up3])?;
                vec![b.head("head", m, n)?]
            }
        })
    }

    fn unet(b: &mut Builder, spec: &NetworkSpec) -> Result<Vec<usize>> {
        let g = ConvGeom::same([3, 3, 1]);
        let mut x = 0;
        let mut skips = Vec::new();
        for level in 0..spec.unet_depth {
            let f = spec.unet_base_features << level;
            if level > 0 {
                x = b.add(format!("enc{level}.pool"), LayerOp::MaxPool([2, 2, 1]), vec![x])?;
            }
            x = b.conv_bn_relu(&format!("enc{level}.a"), x, f, g)?;
            x = b.conv_bn_relu(&format!("enc{level}.b"), x, f, g)?;
            skips.push(x);
        }
        for level in (0..spec.unet_depth - 1).rev() {
            let f = spec.unet_base_features << level;
            let up = b.add(format!("dec{level}.up"), LayerOp::UpConv { out_channels: f, factor: [2, 2, 1] }, vec![x])?;
            let cat = b.add(format!("dec{level}.concat"), LayerOp::Concat, vec![skips[level], up])?;
            x = b.conv_bn_relu(&format!("dec{level}.a"), cat, f, g)?;
            x = b.conv_bn_relu(&format!("dec{level}.b"), x, f, g)?;
        }
        Ok(vec![b.head("head", x, spec.n_classes)?])
    }

    fn init_params<T: Scalar>(&self, seed: u64) -> Parameters<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trainable = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let per_channel = |c: usize, v: f64| Tensor::full(Dims::new(1, c, [1, 1, 1]), T::lit(v));
        for layer in &self.layers {
            let in_c = layer.inputs.first().map(|&i| self.shapes.0[i].channels).unwrap_or(0);
            let name = layer.name.strip_suffix(".conv").unwrap_or(&layer.name);
            match &layer.op {
                LayerOp::Conv { out_channels, geom, bias } => {
                    let fan_in = (in_c * geom.taps()) as f64;
                    // heads feed a softmax, so they get a gentler gain
                    let gain = if *bias { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
                    let d = Dims::new(*out_channels, in_c, geom.kernel);
                    let w = (0..d.len()).map(|_| T::lit(normal.sample(&mut rng))).collect();
                    trainable.insert(format!("{name}.weight"), Tensor::from_vec(d, w));
                    if *bias {
                        trainable.insert(format!("{name}.bias"), per_channel(*out_channels, 0.0));
                    }
                }
                LayerOp::UpConv { out_channels, factor } => {
                    let taps: usize = factor.iter().product();
                    let normal = Normal::new(0.0, (2.0 / (in_c * taps) as f64).sqrt()).expect("finite std");
                    let d = Dims::new(in_c, *out_channels, *factor);
                    let w = (0..d.len()).map(|_| T::lit(normal.sample(&mut rng))).collect();
                    trainable.insert(format!("{}.weight", layer.name), Tensor::from_vec(d, w));
                    trainable.insert(format!("{}.bias", layer.name), per_channel(*out_channels, 0.0));
                }
                LayerOp::BatchNorm => {
                    trainable.insert(format!("{}.gamma", layer.name), per_channel(in_c, 1.0));
                    trainable.insert(format!("{}.beta", layer.name), per_channel(in_c, 0.0));
                    buffers.insert(format!("{}.running_mean", layer.name), per_channel(in_c, 0.0));
                    buffers.insert(format!("{}.running_var", layer.name), per_channel(in_c, 1.0));
                }
                LayerOp::PRelu => {
                    trainable.insert(format!("{}.slope", layer.name), per_channel(in_c, PRELU_INIT));
                }
                _ => {}
            }
        }
        Parameters { trainable, buffers }
    }

    /// Interprets the graph on a fresh tape.
    pub fn forward_pass<T: Scalar>(&self, params: &Parameters<T>, input: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let d = input.dims();
        if d.n == 0 || d.c != 1 || d.spatial != self.spec.spatial() {
            return Err(Error::ShapeMismatch(format!(
                "network expects input [n>=1, 1, {:?}], got {d}",
                self.spec.spatial()
            )));
        }
        let mut tape = Tape::new();
        let mut vars: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::new();
        let mut rng = match mode {
            Mode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            Mode::Infer => None,
        };
        for layer in &self.layers {
            let x = layer.inputs.first().map(|&i| vars[i]);
            let pname = layer.name.strip_suffix(".conv").unwrap_or(&layer.name);
            let param = |tape: &mut Tape<T>, role: &str| -> Result<Var> {
                let key = format!("{pname}.{role}");
                Ok(tape.param(&key, params.get(&key)?.clone()))
            };
            let v = match &layer.op {
                LayerOp::Input => tape.input(input.clone()),
                LayerOp::AvgPool(f) => tape.avgpool(x.unwrap(), *f),
                LayerOp::MaxPool(f) => tape.maxpool(x.unwrap(), *f),
                LayerOp::Conv { geom, bias, .. } => {
                    let w = param(&mut tape, "weight")?;
                    let b = if *bias { Some(param(&mut tape, "bias")?) } else { None };
                    tape.conv(x.unwrap(), w, b, *geom)
                }
                LayerOp::UpConv { factor, .. } => {
                    let w = param(&mut tape, "weight")?;
                    let b = param(&mut tape, "bias")?;
                    tape.upconv(x.unwrap(), w, Some(b), *factor)
                }
                LayerOp::BatchNorm => {
                    let g = param(&mut tape, "gamma")?;
                    let b = param(&mut tape, "beta")?;
                    match mode {
                        Mode::Train { .. } => {
                            let (v, stats) = tape.batchnorm(x.unwrap(), g, b, None);
                            bn_stats.push((layer.name.clone(), stats.expect("batch statistics")));
                            v
                        }
                        Mode::Infer => {
                            let mean = params.get(&format!("{}.running_mean", layer.name))?;
                            let var = params.get(&format!("{}.running_var", layer.name))?;
                            tape.batchnorm(x.unwrap(), g, b, Some((mean.data(), var.data()))).0
                        }
                    }
                }
                LayerOp::PRelu => {
                    let s = param(&mut tape, "slope")?;
                    tape.prelu(x.unwrap(), s)
                }
                LayerOp::Relu => tape.relu(x.unwrap()),
                LayerOp::Dropout => match rng.as_mut() {
                    Some(rng) if self.spec.dropout_rate > 0.0 => {
                        let mask = dropout_mask(tape.dims(x.unwrap()).c, self.spec.dropout_rate, rng);
                        tape.channel_scale(x.unwrap(), mask)
                    }
                    _ => x.unwrap(),
                },
                LayerOp::Concat => {
                    let xs: Vec<Var> = layer.inputs.iter().map(|&i| vars[i]).collect();
                    tape.concat(&xs)
                }
                LayerOp::Upsample(f) => {
                    let s = tape.dims(x.unwrap()).spatial;
                    tape.resize(x.unwrap(), [0, 1, 2].map(|a| s[a] * f[a]))
                }
                LayerOp::Softmax => tape.softmax(x.unwrap()),
            };
            vars.push(v);
        }
        let heads = self.heads.iter().map(|&h| vars[h]).collect();
        Ok(ForwardPass {
            tape,
            layer_vars: vars,
            heads,
            bn_stats,
        })
    }

    /// Per-pathway probability maps, coarsest pathway first.
    pub fn forward<T: Scalar>(&self, params: &Parameters<T>, input: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        Ok(self.forward_pass(params, input, mode)?.head_values())
    }
}

/// Builds the graph, initialises parameters from `seed` and returns the
/// predicted layer shapes.
pub fn build<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<(Network, Parameters<T>, LayerShapeTable)> {
    let net = Network::build_graph(spec)?;
    let params = net.init_params(seed);
    let table = net.shapes.clone();
    Ok((net, params, table))
}

/// Inverted-dropout channel multipliers: `0` for dropped channels,
/// `1 / (1 - rate)` for survivors.
pub fn dropout_mask<T: Scalar>(channels: usize, rate: f64, rng: &mut impl Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..channels).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect()
}

/// Zeroes whole channels with probability `rate`, using one channel
/// selection for the whole batch, and rescales the survivors.
pub fn apply_batchwise_spatial_dropout<T: Scalar>(features: &Tensor<T>, rate: f64, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(features.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask(features.dims().c, rate, &mut rng);
    Ok(crate::nn::ops::channel_scale(features, &mask))
}

/// Voxelwise argmax of batch item `item` (ties go to the lower class).
pub fn argmax_labels<T: Scalar>(prob: &Tensor<T>, item: usize) -> Result<Vec<u8>> {
    let d = prob.dims();
    if item >= d.n || d.c == 0 || d.c > u8::MAX as usize {
        return Err(Error::ShapeMismatch(format!("cannot take argmax of item {item} from {d}")));
    }
    let p = d.voxels();
    let x = prob.item(item);
    Ok((0..p)
        .map(|v| {
            let mut best = 0;
            for c in 1..d.c {
                if x[c * p + v] > x[best * p + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Final label map: argmax of the (single-item) probability map followed
/// by nearest-neighbour up-sampling to `out_shape`. The mask carries unit
/// spacing and synthetic metadata; use [`LabelMask::with_geometry`] to
/// attach the scan's own.
pub fn predict_labels<T: Scalar>(prob: &Tensor<T>, out_shape: [usize; 3]) -> Result<LabelMask> {
    if prob.dims().n != 1 {
        return Err(Error::ShapeMismatch(format!("predict_labels expects one batch item, got {}", prob.dims().n)));
    }
    let labels = argmax_labels(prob, 0)?;
    let data = resample_nearest(&labels, prob.dims().spatial, out_shape);
    LabelMask::new(data, out_shape, [1.0; 3], ScanMetadata::synthetic("prediction", 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(n: usize, s: [usize; 3]) -> Tensor<f32> {
        Tensor::full(Dims::new(n, 1, s), 0.5)
    }

    #[test]
    fn kind_parses_and_rejects_unknown() {
        for k in NetKind::ALL {
            assert_eq!(k.as_str().parse::<NetKind>().unwrap(), k);
        }
        assert!("resnet".parse::<NetKind>().is_err());
    }

    #[test]
    fn indivisible_shapes_are_rejected() {
        assert!(build::<f32>(&NetworkSpec::pdvnet([60, 64, 32]), 0).is_err());
        assert!(build::<f32>(&NetworkSpec::unet2d([64, 36]), 0).is_err());
        let mut s = NetworkSpec::pdvnet([64, 64, 32]);
        s.block_depths.pop();
        assert!(build::<f32>(&s, 0).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = NetworkSpec::unet2d([64, 64]);
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"unet2d\""));
        assert_eq!(serde_json::from_str::<NetworkSpec>(&j).unwrap(), s);
    }

    #[test]
    fn pdvnet_outputs_three_normalised_half_resolution_maps() {
        let (net, params, _) = build::<f32>(&NetworkSpec::pdvnet([16, 16, 8]), 1).unwrap();
        let out = net.forward(&params, &ones(1, [16, 16, 8]), Mode::Infer).unwrap();
        assert_eq!(out.len(), 3);
        for p in &out {
            assert_eq!(p.dims(), Dims::new(1, 6, [8, 8, 4]));
            let v = p.dims().voxels();
            for i in 0..v {
                let s: f32 = (0..6).map(|c| p.item(0)[c * v + i]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let (net, params, _) = build::<f32>(&NetworkSpec::dvnet([16, 16, 8]), 1).unwrap();
        assert!(matches!(net.forward(&params, &ones(1, [8, 16, 16]), Mode::Infer), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn identical_batch_items_give_identical_inference_outputs() {
        let (net, params, _) = build::<f64>(&NetworkSpec::pdvnet([16, 16, 8]), 2).unwrap();
        let d = Dims::new(2, 1, [16, 16, 8]);
        let half: Vec<f64> = (0..d.voxels()).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        let x = Tensor::from_vec(d, [half.clone(), half].concat());
        for p in net.forward(&params, &x, Mode::Infer).unwrap() {
            assert_eq!(p.item(0), p.item(1));
        }
    }

    #[test]
    fn running_stats_move_towards_batch_stats() {
        let (_, mut params, _) = build::<f64>(&NetworkSpec::dvnet([8, 8, 8]), 0).unwrap();
        let stats = BatchStats {
            mean: vec![1.0; 24],
            var: vec![3.0; 24],
            count: 4,
        };
        params.update_running_stats(&[("init.bn".into(), stats)]);
        assert!((params.buffers["init.bn.running_mean"].data()[0] - 0.1).abs() < 1e-12);
        assert!((params.buffers["init.bn.running_var"].data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_invalid_rate_errors() {
        let x = Tensor::from_vec(Dims::new(2, 3, [2, 1, 1]), (0..12).map(|v| v as f64).collect());
        assert_eq!(apply_batchwise_spatial_dropout(&x, 0.0, 5).unwrap(), x);
        assert!(apply_batchwise_spatial_dropout(&x, 1.0, 5).is_err());
        assert!(apply_batchwise_spatial_dropout(&x, -0.1, 5).is_err());
    }

    #[test]
    fn uniform_probabilities_predict_background() {
        let p = Tensor::<f32>::full(Dims::new(1, 6, [2, 2, 2]), 1.0 / 6.0);
        let m = predict_labels(&p, [4, 4, 4]).unwrap();
        assert!(m.data().iter().all(|&l| l == 0));
    }
}
