//! Sequential ConvNet with one control gate per convolutional channel.
//!
//! A gate multiplies the post-ReLU feature map of its channel. Every conv
//! layer must be followed directly by a ReLU; the gate sits on that ReLU's
//! output. Dense layers are never gated.

mod forward;
mod io;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use forward::{ForwardCache, Gradients};
pub use io::{load_model, read_model, save_model, write_model};

use crate::error::{DrnetError, Result};
use crate::tensor::{ConvGeometry, Tensor};

/// Architecture of a single layer, without parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv2d({in_channels},{out_channels},{kernel},{stride},{padding})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2d { size, stride } => write!(f, "maxpool2d({size},{stride})"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense({inputs},{outputs})"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                let inner = s[open + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| format!("unterminated argument list in `{s}`"))?;
                let args = inner
                    .split(',')
                    .map(|a| a.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                (&s[..open], args)
            }
            None => (s, Vec::new()),
        };
        let spec = match (name, args.as_slice()) {
            ("conv2d", &[in_channels, out_channels, kernel, stride, padding]) => LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            ("relu", []) => LayerSpec::Relu,
            ("maxpool2d", &[size, stride]) => LayerSpec::MaxPool2d { size, stride },
            ("flatten", []) => LayerSpec::Flatten,
            ("dense", &[inputs, outputs]) => LayerSpec::Dense { inputs, outputs },
            _ => return Err(format!("unknown layer `{s}`")),
        };
        Ok(spec)
    }
}

/// Input shape plus layer sequence; serializes to a single line such as
/// `input(1,28,28);conv2d(1,8,3,1,1);relu;...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape;
        write!(f, "input({c},{h},{w})")?;
        for layer in &self.layers {
            write!(f, ";{layer}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut parts = s.split(';');
        let head = parts.next().unwrap_or_default().trim();
        let dims = head
            .strip_prefix("input(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("architecture must start with input(c,h,w), got `{head}`"))?
            .split(',')
            .map(|d| d.trim().parse::<usize>().map_err(|e| format!("input shape: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let input_shape: [usize; 3] = dims
            .try_into()
            .map_err(|_| "input shape needs three extents".to_string())?;
        let layers = parts.map(str::parse).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Architecture {
            input_shape,
            layers,
        })
    }
}

impl Architecture {
    /// Reference MNIST network: three 3x3 conv blocks (8, 16, 32 channels)
    /// each followed by ReLU and 2x2 max-pooling, then 288 -> 64 -> 10 dense.
    pub fn mnist5() -> Self {
        let conv = |i, o| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let pool = LayerSpec::MaxPool2d { size: 2, stride: 2 };
        Architecture {
            input_shape: [1, 28, 28],
            layers: vec![
                conv(1, 8),
                LayerSpec::Relu,
                pool,
                conv(8, 16),
                LayerSpec::Relu,
                pool,
                conv(16, 32),
                LayerSpec::Relu,
                pool,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 32 * 3 * 3,
                    outputs: 64,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 64,
                    outputs: 10,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub geometry: ConvGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    Conv2d(ConvLayer),
    Relu,
    MaxPool2d { size: usize, stride: usize },
    Flatten,
    Dense(DenseLayer),
}

/// Location of one conv layer's channels in the flat gate vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateSlot {
    /// Index of the conv layer in the layer sequence.
    pub conv_layer: usize,
    /// Index of the ReLU whose output the gates scale.
    pub activation_layer: usize,
    pub range: Range<usize>,
}

impl GateSlot {
    pub fn channels(&self) -> usize {
        self.range.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedNetwork {
    arch: Architecture,
    layers: Vec<Layer>,
    /// Per-sample shape entering each layer; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
    gate_map: Vec<GateSlot>,
    num_classes: usize,
}

impl GatedNetwork {
    /// Network with all parameters zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let (shapes, gate_map) = check_architecture(&arch)?;
        let layers = arch
            .layers
            .iter()
            .zip(&shapes)
            .map(|(spec, shape)| match *spec {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => Layer::Conv2d(ConvLayer {
                    weights: Tensor::zeros(vec![out_channels, in_channels, kernel, kernel]),
                    bias: Tensor::zeros(vec![out_channels]),
                    geometry: ConvGeometry::new(
                        "conv2d",
                        [shape[0], shape[1], shape[2]],
                        out_channels,
                        [kernel, kernel],
                        stride,
                        padding,
                    )
                    .expect("geometry checked"),
                }),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2d { size, stride } => Layer::MaxPool2d { size, stride },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { inputs, outputs } => Layer::Dense(DenseLayer {
                    weights: Tensor::zeros(vec![outputs, inputs]),
                    bias: Tensor::zeros(vec![outputs]),
                }),
            })
            .collect();
        let num_classes = shapes.last().expect("nonempty").iter().product();
        Ok(GatedNetwork {
            arch,
            layers,
            shapes,
            gate_map,
            num_classes,
        })
    }

    /// Fan-in scaled uniform init: weights in `±sqrt(6 / fan_in)`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut net = GatedNetwork::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let weights = match layer {
                Layer::Conv2d(c) => &mut c.weights,
                Layer::Dense(d) => &mut d.weights,
                _ => continue,
            };
            let fan_in: usize = weights.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in weights.data_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn gate_map(&self) -> &[GateSlot] {
        &self.gate_map
    }

    pub fn total_gated_channels(&self) -> usize {
        self.gate_map.last().map_or(0, |s| s.range.end)
    }

    /// Column labels `convIdx.channelIdx` for every gated channel, in gate order.
    pub fn channel_labels(&self) -> Vec<String> {
        self.gate_map
            .iter()
            .enumerate()
            .flat_map(|(l, slot)| (0..slot.channels()).map(move |c| format!("{l}.{c}")))
            .collect()
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Parameter tensors in layer order, weights before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv2d(c) => vec![&c.weights, &c.bias],
                Layer::Dense(d) => vec![&d.weights, &d.bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv2d(c) => vec![&mut c.weights, &mut c.bias],
                Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.arch.input_shape;
        match x.shape() {
            [_, xc, xh, xw] if [*xc, *xh, *xw] == [c, h, w] => Ok(()),
            other => Err(DrnetError::shape(
                "forward",
                format!("network expects [N,{c},{h},{w}], got {other:?}"),
            )),
        }
    }

    pub(crate) fn check_gates(&self, gates: &[f64]) -> Result<()> {
        if gates.len() != self.total_gated_channels() {
            return Err(DrnetError::invalid(format!(
                "gate vector has {} values, network has {} gated channels",
                gates.len(),
                self.total_gated_channels()
            )));
        }
        Ok(())
    }
}

type LayerShapes = (Vec<Vec<usize>>, Vec<GateSlot>);

/// Propagates the per-sample shape through the layer list and builds the gate map.
fn check_architecture(arch: &Architecture) -> std::result::Result<LayerShapes, DrnetError> {
    let integrity = |i: usize, spec: &LayerSpec, msg: String| {
        DrnetError::invalid(format!("layer {i} ({}): {msg}", spec.kind()))
    };
    if arch.input_shape.contains(&0) {
        return Err(DrnetError::invalid("input extents must be positive"));
    }
    if arch.layers.is_empty() {
        return Err(DrnetError::invalid("architecture has no layers"));
    }
    let mut shape = arch.input_shape.to_vec();
    let mut shapes = vec![shape.clone()];
    let mut gate_map = Vec::new();
    let mut next_gate = 0;
    for (i, spec) in arch.layers.iter().enumerate() {
        shape = match (*spec, shape.as_slice()) {
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                &[c, h, w],
            ) => {
                if in_channels != c {
                    return Err(integrity(
                        i,
                        spec,
                        format!("declares {in_channels} input channels but receives {c}"),
                    ));
                }
                if out_channels == 0 {
                    return Err(integrity(i, spec, "output channel count must be > 0".into()));
                }
                let g = ConvGeometry::new("conv2d", [c, h, w], out_channels, [kernel, kernel], stride, padding)
                    .map_err(|e| integrity(i, spec, e.to_string()))?;
                if arch.layers.get(i + 1) != Some(&LayerSpec::Relu) {
                    return Err(integrity(i, spec, "must be followed by relu to carry gates".into()));
                }
                gate_map.push(GateSlot {
                    conv_layer: i,
                    activation_layer: i + 1,
                    range: next_gate..next_gate + out_channels,
                });
                next_gate += out_channels;
                vec![out_channels, g.out_h, g.out_w]
            }
            (LayerSpec::Relu, _) => shape.clone(),
            (LayerSpec::MaxPool2d { size, stride }, &[c, h, w]) => {
                if size == 0 || stride == 0 || size > h || size > w {
                    return Err(integrity(i, spec, format!("window does not fit a {h}x{w} map")));
                }
                vec![c, (h - size) / stride + 1, (w - size) / stride + 1]
            }
            (LayerSpec::Flatten, s) => vec![s.iter().product()],
            (LayerSpec::Dense { inputs, outputs }, &[f]) => {
                if inputs != f {
                    return Err(integrity(
                        i,
                        spec,
                        format!("declares {inputs} inputs but receives {f}"),
                    ));
                }
                if outputs == 0 {
                    return Err(integrity(i, spec, "output count must be > 0".into()));
                }
                vec![outputs]
            }
            (_, s) => {
                return Err(integrity(i, spec, format!("cannot consume input of shape {s:?}")));
            }
        };
        shapes.push(shape.clone());
    }
    if shape.len() != 1 {
        return Err(DrnetError::invalid(format!(
            "network must end in a flat class vector, ends in {shape:?}"
        )));
    }
    if gate_map.is_empty() {
        return Err(DrnetError::invalid("network has no gated conv channels"));
    }
    Ok((shapes, gate_map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist5_layout() {
        let net = GatedNetwork::zeros(Architecture::mnist5()).unwrap();
        assert_eq!(net.total_gated_channels(), 56);
        assert_eq!(net.num_classes(), 10);
        let ranges: Vec<_> = net.gate_map().iter().map(|s| s.range.clone()).collect();
        assert_eq!(ranges, vec![0..8, 8..24, 24..56]);
        assert_eq!(net.channel_labels()[8], "1.0");
        assert_eq!(net.channel_labels()[55], "2.31");
        // conv: 80 + 1168 + 4640, dense: 18496 + 650
        assert_eq!(net.param_count(), 80 + 1168 + 4640 + 18496 + 650);
    }

    #[test]
    fn gate_map_is_a_partition() {
        let net = GatedNetwork::zeros(Architecture::mnist5()).unwrap();
        let mut next = 0;
        for slot in net.gate_map() {
            assert_eq!(slot.range.start, next);
            assert!(slot.range.end > slot.range.start);
            next = slot.range.end;
        }
        assert_eq!(next, net.total_gated_channels());
    }

    #[test]
    fn architecture_string_round_trips() {
        let arch = Architecture::mnist5();
        let text = arch.to_string();
        assert!(text.starts_with("input(1,28,28);conv2d(1,8,3,1,1);relu;maxpool2d(2,2)"));
        assert_eq!(text.parse::<Architecture>().unwrap(), arch);
        assert!("input(1,28);relu".parse::<Architecture>().is_err());
        assert!("input(1,28,28);conv3d(1)".parse::<Architecture>().is_err());
    }

    #[test]
    fn rejects_channel_mismatch_naming_layer() {
        let mut arch = Architecture::mnist5();
        arch.layers[3] = LayerSpec::Conv2d {
            in_channels: 4,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let err = GatedNetwork::zeros(arch).unwrap_err().to_string();
        assert!(err.contains("layer 3 (conv2d)"), "{err}");
    }

    #[test]
    fn rejects_conv_without_relu() {
        let arch: Architecture = "input(1,4,4);conv2d(1,2,3,1,1);flatten;dense(32,2)".parse().unwrap();
        assert!(GatedNetwork::zeros(arch).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = GatedNetwork::init(Architecture::mnist5(), 3).unwrap();
        let b = GatedNetwork::init(Architecture::mnist5(), 3).unwrap();
        let c = GatedNetwork::init(Architecture::mnist5(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(a.params()[0].data().iter().all(|w| w.abs() <= bound));
    }
}
