//! ResNet-style convolutional stack followed by a bidirectional LSTM,
//! turning an image into a sequence of feature vectors.

use rand::Rng;

use crate::adcore::{
    glorot_uniform, lstm_cell, Graph, LstmParams, LstmVars, ParamId, ParamStore, Size2, Tensor,
    Var,
};
use crate::error::{FanError, Result};
use crate::rfgeom::{self, Center, LayerSpec, LayerStack};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageOp {
    /// Convolution followed by ReLU.
    Conv {
        kernel: Size2,
        stride: Size2,
        pad: Size2,
        channels: usize,
    },
    Pool {
        kernel: Size2,
        stride: Size2,
        pad: Size2,
    },
    /// `blocks` residual units of two 3×3 convolutions each.
    Residual { channels: usize, blocks: usize },
}

impl StageOp {
    fn conv(k: (usize, usize), s: (usize, usize), p: (usize, usize), channels: usize) -> Self {
        // Tuples are written width × height, as in the layer tables.
        StageOp::Conv {
            kernel: Size2::new(k.1, k.0),
            stride: Size2::new(s.1, s.0),
            pad: Size2::new(p.1, p.0),
            channels,
        }
    }

    fn pool(k: (usize, usize), s: (usize, usize), p: (usize, usize)) -> Self {
        StageOp::Pool {
            kernel: Size2::new(k.1, k.0),
            stride: Size2::new(s.1, s.0),
            pad: Size2::new(p.1, p.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub ops: Vec<StageOp>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub input: Size2,
    pub stages: Vec<Stage>,
    /// Hidden size of each direction of the bidirectional LSTM.
    pub rnn_hidden: usize,
}

fn stage(name: &str, ops: Vec<StageOp>) -> Stage {
    Stage {
        name: name.to_string(),
        ops,
    }
}

impl EncoderConfig {
    /// The 32-layer network for 1×32×256 inputs: five stages ending at 1×65.
    pub fn paper() -> Self {
        EncoderConfig {
            in_channels: 1,
            input: Size2::new(32, 256),
            stages: vec![
                stage(
                    "conv1_x",
                    vec![
                        StageOp::conv((3, 3), (1, 1), (1, 1), 32),
                        StageOp::conv((3, 3), (1, 1), (1, 1), 64),
                    ],
                ),
                stage(
                    "conv2_x",
                    vec![
                        StageOp::pool((2, 2), (2, 2), (0, 0)),
                        StageOp::Residual { channels: 128, blocks: 1 },
                        StageOp::conv((3, 3), (1, 1), (1, 1), 128),
                    ],
                ),
                stage(
                    "conv3_x",
                    vec![
                        StageOp::pool((2, 2), (2, 2), (0, 0)),
                        StageOp::Residual { channels: 256, blocks: 2 },
                        StageOp::conv((3, 3), (1, 1), (1, 1), 256),
                    ],
                ),
                stage(
                    "conv4_x",
                    vec![
                        StageOp::pool((2, 2), (1, 2), (1, 0)),
                        StageOp::Residual { channels: 512, blocks: 5 },
                        StageOp::conv((3, 3), (1, 1), (1, 1), 512),
                    ],
                ),
                stage(
                    "conv5_x",
                    vec![
                        StageOp::Residual { channels: 512, blocks: 3 },
                        StageOp::conv((2, 2), (1, 2), (1, 0), 512),
                        StageOp::conv((2, 2), (1, 1), (0, 0), 512),
                    ],
                ),
            ],
            rnn_hidden: 256,
        }
    }

    /// Small network for 1×16×64 inputs: two conv+pool stages and a
    /// height-collapsing convolution, giving 16 features.
    pub fn toy() -> Self {
        EncoderConfig {
            in_channels: 1,
            input: Size2::new(16, 64),
            stages: vec![
                stage(
                    "stage1",
                    vec![
                        StageOp::conv((3, 3), (1, 1), (1, 1), 16),
                        StageOp::pool((2, 2), (2, 2), (0, 0)),
                    ],
                ),
                stage(
                    "stage2",
                    vec![
                        StageOp::conv((3, 3), (1, 1), (1, 1), 32),
                        StageOp::pool((2, 2), (2, 2), (0, 0)),
                    ],
                ),
                stage("collapse", vec![StageOp::conv((3, 4), (1, 1), (1, 0), 64)]),
            ],
            rnn_hidden: 32,
        }
    }

    /// Channel count of the leading convolution when it keeps the input
    /// resolution, so its activations share the image's pixel grid.
    pub fn first_conv_channels(&self) -> Option<usize> {
        match self.stages.first()?.ops.first()? {
            StageOp::Conv {
                kernel,
                stride,
                pad,
                channels,
            } => {
                let same = stride.h == 1
                    && stride.w == 1
                    && 2 * pad.h + 1 == kernel.h
                    && 2 * pad.w + 1 == kernel.w;
                same.then_some(*channels)
            }
            _ => None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(FanError::Config(format!("unknown encoder preset `{other}`"))),
        }
    }

    /// Geometry of every convolution and pooling layer in order. Residual
    /// blocks contribute their two 3×3 main-path convolutions.
    pub fn layer_stack(&self) -> LayerStack {
        let mut layers = Vec::new();
        for st in &self.stages {
            for op in &st.ops {
                match *op {
                    StageOp::Conv {
                        kernel,
                        stride,
                        pad,
                        ..
                    } => layers.push(LayerSpec::conv(kernel, stride, pad)),
                    StageOp::Pool { kernel, stride, pad } => {
                        layers.push(LayerSpec::pool(kernel, stride, pad))
                    }
                    StageOp::Residual { blocks, .. } => {
                        for _ in 0..2 * blocks {
                            layers.push(LayerSpec::conv(
                                Size2::square(3),
                                Size2::square(1),
                                Size2::square(1),
                            ));
                        }
                    }
                }
            }
        }
        LayerStack::new(layers)
    }

    /// Spatial extents after each stage, with the channel count.
    pub fn stage_shapes(&self) -> Result<Vec<(String, usize, Size2)>> {
        if self.in_channels == 0 || self.rnn_hidden == 0 {
            return Err(FanError::Config("channels and hidden size must be positive".into()));
        }
        let mut size = self.input;
        let mut ch = self.in_channels;
        let mut out = Vec::new();
        for st in &self.stages {
            for op in &st.ops {
                match *op {
                    StageOp::Conv {
                        kernel,
                        stride,
                        pad,
                        channels,
                    } => {
                        size = LayerSpec::conv(kernel, stride, pad)
                            .output_size(size)
                            .filter(|_| stride.h > 0 && stride.w > 0 && channels > 0)
                            .ok_or_else(|| stage_error(st, size))?;
                        ch = channels;
                    }
                    StageOp::Pool { kernel, stride, pad } => {
                        if pad.h >= kernel.h || pad.w >= kernel.w || stride.h == 0 || stride.w == 0 {
                            return Err(stage_error(st, size));
                        }
                        size = LayerSpec::pool(kernel, stride, pad)
                            .output_size(size)
                            .ok_or_else(|| stage_error(st, size))?;
                    }
                    StageOp::Residual { channels, .. } => {
                        if channels == 0 {
                            return Err(stage_error(st, size));
                        }
                        ch = channels;
                    }
                }
            }
            out.push((st.name.clone(), ch, size));
        }
        Ok(out)
    }

    /// Validate the configuration; returns `(T, D_cnn)`.
    pub fn check(&self) -> Result<(usize, usize)> {
        let shapes = self.stage_shapes()?;
        let &(ref name, ch, size) = shapes
            .last()
            .ok_or_else(|| FanError::Config("encoder has no stages".into()))?;
        if size.h != 1 {
            return Err(FanError::Config(format!(
                "encoder must end with height 1, stage `{name}` ends at {}x{}",
                size.h, size.w
            )));
        }
        Ok((size.w, ch))
    }

    /// Sequence length and feature dimension after the recurrent layer.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        let (t, _) = self.check()?;
        Ok((t, 2 * self.rnn_hidden))
    }
}

fn stage_error(st: &Stage, size: Size2) -> FanError {
    FanError::Config(format!(
        "stage `{}` produces a non-positive extent from {}x{} input",
        st.name, size.h, size.w
    ))
}

#[derive(Clone, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    stride: Size2,
    pad: Size2,
}

#[derive(Clone, Debug)]
struct ResidualIds {
    first: ConvIds,
    second: ConvIds,
    project: Option<ConvIds>,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(ConvIds),
    Pool {
        kernel: Size2,
        stride: Size2,
        pad: Size2,
    },
    Residual(ResidualIds),
}

/// Encoder parameters (held in a shared [`ParamStore`]) plus cached geometry.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: Vec<Layer>,
    forward_rnn: LstmParams,
    backward_rnn: LstmParams,
    centers: Vec<Center>,
    seq_len: usize,
    cnn_dim: usize,
}

fn register_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: Size2,
    stride: Size2,
    pad: Size2,
    rng: &mut R,
) -> Result<ConvIds> {
    let area = kernel.h * kernel.w;
    let w = glorot_uniform(rng, vec![cout, cin, kernel.h, kernel.w], cin * area, cout * area);
    Ok(ConvIds {
        w: store.add(format!("{name}.w"), w)?,
        b: store.add(format!("{name}.b"), Tensor::zeros(vec![cout]))?,
        stride,
        pad,
    })
}

impl Encoder {
    /// Register all encoder parameters under the `encoder.` prefix.
    pub fn build<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let (seq_len, cnn_dim) = config.check()?;
        let mut layers = Vec::new();
        let mut ch = config.in_channels;
        let mut conv_n = 0;
        let mut res_n = 0;
        let k3 = Size2::square(3);
        let one = Size2::square(1);
        for st in &config.stages {
            for op in &st.ops {
                match *op {
                    StageOp::Conv {
                        kernel,
                        stride,
                        pad,
                        channels,
                    } => {
                        conv_n += 1;
                        let name = format!("encoder.conv{conv_n}");
                        layers.push(Layer::Conv(register_conv(
                            store, &name, ch, channels, kernel, stride, pad, rng,
                        )?));
                        ch = channels;
                    }
                    StageOp::Pool { kernel, stride, pad } => layers.push(Layer::Pool { kernel, stride, pad }),
                    StageOp::Residual { channels, blocks } => {
                        for _ in 0..blocks {
                            res_n += 1;
                            let name = format!("encoder.res{res_n}");
                            let first =
                                register_conv(store, &format!("{name}.a"), ch, channels, k3, one, one, rng)?;
                            let second = register_conv(
                                store,
                                &format!("{name}.b"),
                                channels,
                                channels,
                                k3,
                                one,
                                one,
                                rng,
                            )?;
                            let project = if ch != channels {
                                Some(register_conv(
                                    store,
                                    &format!("{name}.proj"),
                                    ch,
                                    channels,
                                    one,
                                    one,
                                    Size2::square(0),
                                    rng,
                                )?)
                            } else {
                                None
                            };
                            layers.push(Layer::Residual(ResidualIds {
                                first,
                                second,
                                project,
                            }));
                            ch = channels;
                        }
                    }
                }
            }
        }
        let forward_rnn = LstmParams::register(store, "encoder.rnn_fwd", cnn_dim, config.rnn_hidden, rng)?;
        let backward_rnn = LstmParams::register(store, "encoder.rnn_bwd", cnn_dim, config.rnn_hidden, rng)?;
        let centers = rfgeom::feature_centers(&config.layer_stack(), config.input)?
            .into_iter()
            .map(Center::to_zero_based)
            .collect();
        Ok(Encoder {
            config,
            layers,
            forward_rnn,
            backward_rnn,
            centers,
            seq_len,
            cnn_dim,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.config.rnn_hidden
    }

    pub fn cnn_dim(&self) -> usize {
        self.cnn_dim
    }

    /// Receptive-field centers of the output features, 0-indexed pixels.
    pub fn centers(&self) -> &[Center] {
        &self.centers
    }

    pub fn recurrent_params(&self) -> (LstmParams, LstmParams) {
        (self.forward_rnn, self.backward_rnn)
    }

    fn conv(g: &mut Graph, store: &ParamStore, x: Var, c: &ConvIds) -> Result<Var> {
        let w = g.param(store, c.w);
        let b = g.param(store, c.b);
        g.conv2d(x, w, b, c.stride, c.pad)
    }

    /// Forward pass of the convolutional part. Returns the final `C×1×T`
    /// map and the output of the first convolution.
    pub fn cnn(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<(Var, Option<Var>)> {
        let want = [self.config.in_channels, self.config.input.h, self.config.input.w];
        if g.shape(image) != want {
            return Err(FanError::shape(
                "encode",
                format!("image shape {:?} does not match configured {:?}", g.shape(image), want),
            ));
        }
        let mut x = image;
        let mut first_conv = None;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => {
                    let y = Self::conv(g, store, x, c)?;
                    let y = g.relu(y);
                    first_conv.get_or_insert(y);
                    y
                }
                Layer::Pool { kernel, stride, pad } => g.maxpool2d(x, *kernel, *stride, *pad)?,
                Layer::Residual(r) => {
                    let a = Self::conv(g, store, x, &r.first)?;
                    let a = g.relu(a);
                    let main = Self::conv(g, store, a, &r.second)?;
                    let skip = match &r.project {
                        Some(p) => Self::conv(g, store, x, p)?,
                        None => x,
                    };
                    let sum = g.add(main, skip)?;
                    g.relu(sum)
                }
            };
        }
        Ok((x, first_conv))
    }

    /// Full encoder: CNN, then a bidirectional LSTM over the columns.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<FeatureSequence> {
        let (maps, first_conv) = self.cnn(g, store, image)?;
        let (d, t) = (self.cnn_dim, self.seq_len);
        let m = g.reshape(maps, vec![d, t])?;
        let rows = g.transpose(m)?;
        let xs: Vec<Var> = (0..t).map(|j| g.slice(rows, j * d, d)).collect::<Result<_>>()?;
        let fwd = self.forward_rnn.bind(g, store);
        let bwd = self.backward_rnn.bind(g, store);
        let hf = run_lstm(g, &xs, &fwd, false)?;
        let hb = run_lstm(g, &xs, &bwd, true)?;
        let mut parts = Vec::with_capacity(2 * t);
        for j in 0..t {
            parts.push(hf[j]);
            parts.push(hb[j]);
        }
        let flat = g.concat(&parts)?;
        let vectors = g.reshape(flat, vec![t, 2 * self.config.rnn_hidden])?;
        Ok(FeatureSequence {
            vectors,
            len: t,
            dim: 2 * self.config.rnn_hidden,
            centers: self.centers.clone(),
            first_conv,
        })
    }
}

/// Run an LSTM over `xs` from zero state. With `reverse` set the sequence is
/// consumed back to front; outputs are returned in input order either way.
pub fn run_lstm(g: &mut Graph, xs: &[Var], p: &LstmVars, reverse: bool) -> Result<Vec<Var>> {
    let mut h = g.constant(Tensor::zeros(vec![p.hidden]));
    let mut c = g.constant(Tensor::zeros(vec![p.hidden]));
    let mut out = vec![h; xs.len()];
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    for i in order {
        let (nh, nc) = lstm_cell(g, xs[i], h, c, p)?;
        h = nh;
        c = nc;
        out[i] = h;
    }
    Ok(out)
}

/// Encoder output bound to a graph.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    /// `T × D` matrix whose rows are h_1..h_T.
    pub vectors: Var,
    pub len: usize,
    pub dim: usize,
    /// Receptive-field center of each feature, 0-indexed pixels.
    pub centers: Vec<Center>,
    /// First convolution's activations, if the encoder has one.
    pub first_conv: Option<Var>,
}
