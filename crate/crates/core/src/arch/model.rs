use std::fmt;

use rand::RngExt;

use super::parse::{layers_to_string, parse_layers, LayerSpec};
use crate::layers::{Activation, ConvLayer, DenseLayer, DropoutSpec, Mode, PoolLayer, KERNEL_SIZE};
use crate::seed::{self, SeedRng};
use crate::tensor::{ParamId, Tape, Tensor, Var};
use crate::{Error, Real, Result};

/// Dropout rate attached to `F(n)*` unless training overrides it.
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Layers plus the input image shape `(variables, window)` and class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
    pub input: (usize, usize),
    pub classes: usize,
}

impl ArchSpec {
    pub fn new(layers: Vec<LayerSpec>, input: (usize, usize), classes: usize) -> Result<Self> {
        if input.0 == 0 || input.1 == 0 {
            return Err(Error::invalid(format!("input shape {input:?} must be positive")));
        }
        if classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        // Re-run the ordering rules on programmatically built specs.
        parse_layers(&layers_to_string(&layers))?;
        Ok(ArchSpec { layers, input, classes })
    }

    pub fn parse(text: &str, input: (usize, usize), classes: usize) -> Result<Self> {
        Self::new(parse_layers(text)?, input, classes)
    }

    /// Canonical architecture string (without the implicit output layer).
    pub fn arch_string(&self) -> String {
        layers_to_string(&self.layers)
    }

    pub fn has_global(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::GlobalFeature { .. }))
    }

    /// Output shape after every layer, and the widths feeding the first
    /// fully-connected layer.
    pub fn trace_shapes(&self) -> Result<ShapeTrace> {
        let (mut h, mut w, mut c) = (self.input.0, self.input.1, 1);
        let mut steps = Vec::new();
        let mut global_dim = 0;
        let mut flat = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let index = i + 1;
            let shape = match *layer {
                LayerSpec::Conv { kernels } => {
                    let conv = ConvLayer {
                        index,
                        kernel: ParamId(0),
                        bias: ParamId(0),
                        in_channels: c,
                        out_channels: kernels,
                    };
                    (h, w) = conv.output_hw(h, w)?;
                    c = kernels;
                    StepShape::Map { rows: h, cols: w, channels: c }
                }
                LayerSpec::Pool { rows, cols } => {
                    (h, w) = PoolLayer { index, rows, cols }.output_hw(h, w)?;
                    StepShape::Map { rows: h, cols: w, channels: c }
                }
                LayerSpec::GlobalFeature { dim } => {
                    global_dim = dim;
                    StepShape::Vector(dim)
                }
                LayerSpec::FullyConnected { neurons, .. } => {
                    flat.get_or_insert(h * w * c);
                    StepShape::Vector(neurons)
                }
            };
            steps.push((*layer, shape));
        }
        let cnn_features = flat.expect("validated: at least one F(n)");
        Ok(ShapeTrace {
            input: self.input,
            steps,
            cnn_features,
            global_dim,
        })
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.arch_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepShape {
    Map { rows: usize, cols: usize, channels: usize },
    Vector(usize),
}

impl fmt::Display for StepShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepShape::Map { rows, cols, channels } => write!(f, "({rows},{cols},{channels})"),
            StepShape::Vector(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: (usize, usize),
    pub steps: Vec<(LayerSpec, StepShape)>,
    /// Length of the flattened last feature map.
    pub cnn_features: usize,
    /// Global feature width (0 without a `G(n)` layer).
    pub global_dim: usize,
}

impl ShapeTrace {
    /// Width of the concatenated vector entering the first `F(n)`.
    pub fn fc_input(&self) -> usize {
        self.cnn_features + self.global_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Conv,
    Mlp,
    Fc,
}

/// Parameter totals split by block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub conv: usize,
    pub mlp: usize,
    pub fc: usize,
    /// Part of `fc` that exists only because of the global features:
    /// `global_dim × width of the first F(n)`.
    pub fc_from_global: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Conv(ConvLayer),
    Pool(PoolLayer),
}

/// Topology compiled from an [`ArchSpec`]: which parameter feeds which
/// layer. Holds no parameter data.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: ArchSpec,
    trace: ShapeTrace,
    stages: Vec<Stage>,
    global: Option<DenseLayer>,
    hidden: Vec<(DenseLayer, bool)>,
    head: DenseLayer,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    groups: Vec<ParamGroup>,
    dropout: f64,
}

impl Network {
    pub fn compile(arch: &ArchSpec) -> Result<Self> {
        let trace = arch.trace_shapes()?;
        let mut net = Network {
            arch: arch.clone(),
            trace: trace.clone(),
            stages: Vec::new(),
            global: None,
            hidden: Vec::new(),
            head: DenseLayer {
                index: 0,
                weights: ParamId(0),
                bias: ParamId(0),
                fan_in: 0,
                fan_out: 0,
                activation: Activation::Identity,
            },
            names: Vec::new(),
            shapes: Vec::new(),
            groups: Vec::new(),
            dropout: DEFAULT_DROPOUT,
        };
        let mut channels = 1;
        let mut fan_in = trace.fc_input();
        let (mut n_conv, mut n_fc) = (0, 0);
        for (i, layer) in arch.layers.iter().enumerate() {
            let index = i + 1;
            match *layer {
                LayerSpec::Conv { kernels } => {
                    n_conv += 1;
                    let kernel = net.add_param(format!("conv{n_conv}.weight"), vec![kernels, channels, KERNEL_SIZE, KERNEL_SIZE], ParamGroup::Conv);
                    let bias = net.add_param(format!("conv{n_conv}.bias"), vec![kernels], ParamGroup::Conv);
                    net.stages.push(Stage::Conv(ConvLayer {
                        index,
                        kernel,
                        bias,
                        in_channels: channels,
                        out_channels: kernels,
                    }));
                    channels = kernels;
                }
                LayerSpec::Pool { rows, cols } => net.stages.push(Stage::Pool(PoolLayer { index, rows, cols })),
                LayerSpec::GlobalFeature { dim } => {
                    let pixels = arch.input.0 * arch.input.1;
                    net.global = Some(net.dense(index, "global", pixels, dim, Activation::Relu, ParamGroup::Mlp));
                }
                LayerSpec::FullyConnected { neurons, dropout } => {
                    n_fc += 1;
                    let d = net.dense(index, &format!("fc{n_fc}"), fan_in, neurons, Activation::Relu, ParamGroup::Fc);
                    net.hidden.push((d, dropout));
                    fan_in = neurons;
                }
            }
        }
        net.head = net.dense(arch.layers.len() + 1, "head", fan_in, arch.classes, Activation::Identity, ParamGroup::Fc);
        Ok(net)
    }

    fn add_param(&mut self, name: String, shape: Vec<usize>, group: ParamGroup) -> ParamId {
        self.names.push(name);
        self.shapes.push(shape);
        self.groups.push(group);
        ParamId(self.names.len() - 1)
    }

    fn dense(&mut self, index: usize, name: &str, fan_in: usize, fan_out: usize, activation: Activation, group: ParamGroup) -> DenseLayer {
        let weights = self.add_param(format!("{name}.weight"), vec![fan_in, fan_out], group);
        let bias = self.add_param(format!("{name}.bias"), vec![fan_out], group);
        DenseLayer {
            index,
            weights,
            bias,
            fan_in,
            fan_out,
            activation,
        }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn trace(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout
    }

    pub fn count_params(&self) -> ParamCount {
        let mut count = ParamCount {
            total: 0,
            conv: 0,
            mlp: 0,
            fc: 0,
            fc_from_global: 0,
        };
        for (shape, group) in self.shapes.iter().zip(&self.groups) {
            let n: usize = shape.iter().product();
            count.total += n;
            match group {
                ParamGroup::Conv => count.conv += n,
                ParamGroup::Mlp => count.mlp += n,
                ParamGroup::Fc => count.fc += n,
            }
        }
        if let Some((first, _)) = self.hidden.first() {
            count.fc_from_global = self.trace.global_dim * first.fan_out;
        }
        count
    }

    /// Forward pass to the pre-softmax logits. `dropout_rng` switches
    /// dropout on (train mode); `None` is evaluation.
    pub fn logits<T: Real>(&self, tape: &mut Tape<'_, T>, image: &Tensor<T>, dropout_rng: Option<&mut SeedRng>) -> Result<Var> {
        let (n, w) = self.arch.input;
        let ok = image.shape() == [n, w] || image.shape() == [1, n, w];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: image.shape().to_vec(),
                rhs: vec![1, n, w],
            });
        }
        let x = tape.constant(image.clone().reshape([1, n, w])?);

        let mut fmap = x;
        for stage in &self.stages {
            fmap = match stage {
                Stage::Conv(c) => c.forward(tape, fmap)?,
                Stage::Pool(p) => p.forward(tape, fmap)?,
            };
        }
        let mut h = tape.flatten(fmap)?;
        if let Some(g) = &self.global {
            let v = tape.flatten(x)?;
            let gf = g.forward(tape, v)?;
            h = tape.concat(&[h, gf])?;
        }

        let mode = if dropout_rng.is_some() { Mode::Train } else { Mode::Eval };
        let spec = DropoutSpec::new(self.dropout, mode)?;
        let mut rng = dropout_rng;
        for (dense, dropout) in &self.hidden {
            h = dense.forward(tape, h)?;
            if *dropout {
                if let Some(rng) = rng.as_deref_mut() {
                    h = spec.forward(tape, h, rng)?;
                }
            }
        }
        self.head.forward(tape, h)
    }
}

/// A network together with its parameters `θ = {θ_conv, θ_mlp, θ_fc}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    net: Network,
    params: Vec<Tensor<T>>,
    seed: u64,
    mode: Mode,
}

impl<T: Real> Model<T> {
    /// Builds and He-uniform initialises a model; biases start at zero.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let net = Network::compile(arch)?;
        let mut rng = seed::rng(seed);
        let mut params = Vec::with_capacity(net.shapes.len());
        for shape in &net.shapes {
            let t = if shape.len() == 1 {
                Tensor::zeros(shape.clone())?
            } else {
                // Conv [out, in, k, k] and dense [fan_in, fan_out].
                let fan_in = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
                let limit = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| T::from_f64(rng.random_range(-limit..limit))).collect();
                Tensor::new(shape.clone(), data)?
            };
            params.push(t);
        }
        Ok(Model {
            net,
            params,
            seed,
            mode: Mode::Eval,
        })
    }

    /// Assembles a model from explicit parameter tensors, in
    /// [`Network::param_names`] order.
    pub fn from_params(arch: &ArchSpec, params: Vec<Tensor<T>>, seed: u64) -> Result<Self> {
        let net = Network::compile(arch)?;
        if params.len() != net.shapes.len() {
            return Err(Error::invalid(format!("expected {} parameter tensors, got {}", net.shapes.len(), params.len())));
        }
        for ((p, shape), name) in params.iter().zip(&net.shapes).zip(&net.names) {
            if p.shape() != shape.as_slice() {
                return Err(Error::invalid(format!("{name}: shape {:?}, expected {shape:?}", p.shape())));
            }
        }
        Ok(Model {
            net,
            params,
            seed,
            mode: Mode::Eval,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.net.arch
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Borrow the topology and the parameters separately, e.g. to perturb
    /// parameters between forward passes.
    pub fn split_mut(&mut self) -> (&Network, &mut [Tensor<T>]) {
        (&self.net, &mut self.params)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn dropout_rate(&self) -> f64 {
        self.net.dropout
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        DropoutSpec::new(rate, Mode::Train)?;
        self.net.dropout = rate;
        Ok(())
    }

    pub fn count_params(&self) -> ParamCount {
        self.net.count_params()
    }

    /// Forward pass honouring the model's mode. Train mode needs a dropout
    /// generator.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, image: &Tensor<T>, rng: Option<&mut SeedRng>) -> Result<Var> {
        match (self.mode, rng) {
            (Mode::Train, None) => Err(Error::invalid("train-mode forward needs a dropout generator")),
            (Mode::Train, rng) => self.net.logits(tape, image, rng),
            (Mode::Eval, _) => self.net.logits(tape, image, None),
        }
    }

    /// Stores accumulated gradients on the parameter tensors.
    pub fn set_grads(&mut self, grads: crate::tensor::ParamGrads<T>) {
        for (p, g) in self.params.iter_mut().zip(grads.into_vecs()) {
            p.grad = Some(g);
        }
    }
}
