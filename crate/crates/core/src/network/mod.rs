//! Sequential layer stacks shared by teachers and students.

pub mod arch;
pub mod checkpoint;
mod projector;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::tensor::{kernels, Float, Param, Tape, Tensor, Var};

pub use arch::ArchDescription;
pub use projector::insert_projectors;

fn default_stride() -> usize {
    1
}

/// One layer of a sequential network. Only output extents are given; input
/// extents are inferred from the preceding shape at build time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        out_features: usize,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    #[serde(rename = "avgpool2d")]
    AvgPool2d {
        window: usize,
    },
    Flatten,
    /// Width-matching map: a 1×1 convolution on feature maps, an affine map
    /// on flat features.
    #[serde(rename = "projector1x1")]
    Projector {
        out_width: usize,
    },
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Affine { .. } | LayerSpec::Conv2d { .. } | LayerSpec::Projector { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Affine { out_features } => match input {
                [_] if out_features > 0 => Ok(vec![out_features]),
                [_] => Err("affine needs at least one output feature".into()),
                _ => Err(format!("affine expects flat features, got {input:?} (missing flatten?)")),
            },
            LayerSpec::Conv2d { out_channels, kernel, stride, padding } => match input {
                &[c, h, w] => {
                    if out_channels == 0 {
                        return Err("conv2d needs at least one output channel".into());
                    }
                    let geo = kernels::ConvGeometry::new((c, h, w), (kernel, kernel), stride, padding)
                        .map_err(|e| e.to_string())?;
                    Ok(vec![out_channels, geo.out_h, geo.out_w])
                }
                _ => Err(format!("conv2d expects [C, H, W], got {input:?}")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::AvgPool2d { window } => match input {
                &[c, _, _] => {
                    let (oh, ow) = kernels::avgpool_extents(input, window).map_err(|e| e.to_string())?;
                    Ok(vec![c, oh, ow])
                }
                _ => Err(format!("avgpool2d expects [C, H, W], got {input:?}")),
            },
            LayerSpec::Flatten => match input {
                [_, _, _] => Ok(vec![input.iter().product()]),
                _ => Err(format!("flatten expects [C, H, W], got {input:?}")),
            },
            LayerSpec::Projector { out_width } => match input {
                _ if out_width == 0 => Err("projector needs a positive width".into()),
                [_] => Ok(vec![out_width]),
                &[_, h, w] => Ok(vec![out_width, h, w]),
                _ => Err(format!("projector cannot map shape {input:?}")),
            },
        }
    }

    /// Shapes of (weight, bias) for a given per-sample input shape.
    fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Affine { out_features } => vec![vec![input[0], out_features], vec![out_features]],
            LayerSpec::Conv2d { out_channels, kernel, .. } => {
                vec![vec![out_channels, input[0], kernel, kernel], vec![out_channels]]
            }
            LayerSpec::Projector { out_width } if input.len() == 1 => {
                vec![vec![input[0], out_width], vec![out_width]]
            }
            LayerSpec::Projector { out_width } => vec![vec![out_width, input[0], 1, 1], vec![out_width]],
            _ => Vec::new(),
        }
    }
}

/// Feature width of a per-sample shape: channels for maps, length for vectors.
pub fn width_of(shape: &[usize]) -> usize {
    shape[0]
}

/// A built layer with its parameters (weight first, then bias).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: Vec<Param<T>>,
}

impl<T: Float> Layer<T> {
    fn fan_in(&self) -> usize {
        self.params
            .first()
            .map(|w| match w.tensor.rank() {
                2 => w.tensor.shape()[0],
                _ => w.tensor.shape()[1..].iter().product(),
            })
            .unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Tape-free forward of one batch.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.spec {
            LayerSpec::Affine { .. } => {
                kernels::add_row_bias(&kernels::matmul(x, &self.params[0].tensor)?, &self.params[1].tensor)
            }
            LayerSpec::Conv2d { stride, padding, .. } => kernels::add_channel_bias(
                &kernels::conv2d(x, &self.params[0].tensor, stride, padding)?,
                &self.params[1].tensor,
            ),
            LayerSpec::Projector { .. } if x.rank() == 2 => {
                kernels::add_row_bias(&kernels::matmul(x, &self.params[0].tensor)?, &self.params[1].tensor)
            }
            LayerSpec::Projector { .. } => {
                kernels::add_channel_bias(&kernels::conv2d(x, &self.params[0].tensor, 1, 0)?, &self.params[1].tensor)
            }
            LayerSpec::Relu => Ok(kernels::relu(x)),
            LayerSpec::AvgPool2d { window } => kernels::avgpool2d(x, window),
            LayerSpec::Flatten => {
                let n = x.shape()[0];
                let rest = x.numel() / n;
                x.clone().reshape(&[n, rest])
            }
        }
    }

    /// Records the same computation as [`Layer::apply`] on a tape.
    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let rank = tape.value(x).rank();
        match self.spec {
            LayerSpec::Affine { .. } => {
                let (w, b) = (tape.param(&self.params[0]), tape.param(&self.params[1]));
                tape.affine(x, w, b)
            }
            LayerSpec::Projector { .. } if rank == 2 => {
                let (w, b) = (tape.param(&self.params[0]), tape.param(&self.params[1]));
                tape.affine(x, w, b)
            }
            LayerSpec::Conv2d { stride, padding, .. } => {
                let (w, b) = (tape.param(&self.params[0]), tape.param(&self.params[1]));
                let y = tape.conv2d(x, w, stride, padding)?;
                tape.add_channel_bias(y, b)
            }
            LayerSpec::Projector { .. } => {
                let (w, b) = (tape.param(&self.params[0]), tape.param(&self.params[1]));
                let y = tape.conv2d(x, w, 1, 0)?;
                tape.add_channel_bias(y, b)
            }
            LayerSpec::Relu => Ok(tape.relu(x)),
            LayerSpec::AvgPool2d { window } => tape.avgpool2d(x, window),
            LayerSpec::Flatten => tape.flatten(x),
        }
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = self.fan_in();
        for (i, p) in self.params.iter_mut().enumerate() {
            if i == 0 {
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in p.tensor.data_mut() {
                    let u: f64 = rng.random();
                    *v = T::of((2.0 * u - 1.0) * bound);
                }
            } else {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Runs `layers` in order without recording.
pub fn forward_layers<T: Float>(layers: &[Layer<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut iter = layers.iter();
    let Some(first) = iter.next() else {
        return Ok(x.clone());
    };
    let mut h = first.apply(x)?;
    for layer in iter {
        h = layer.apply(&h)?;
    }
    Ok(h)
}

/// Runs `layers` in order on a tape.
pub fn record_layers<T: Float>(layers: &[Layer<T>], tape: &mut Tape<T>, x: Var) -> Result<Var> {
    layers.iter().try_fold(x, |h, layer| layer.record(tape, h))
}

/// Activation at a block boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation<T> {
    pub tensor: Tensor<T>,
    /// Index of the producing layer; `None` for the raw input.
    pub layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<Layer<T>>,
}

/// Validates the shape chain and allocates zero-filled parameters.
pub fn build_network<T: Float>(specs: &[LayerSpec], input_shape: &[usize], classes: usize) -> Result<Network<T>> {
    if specs.is_empty() {
        return Err(Error::Build { layer: 0, message: "network needs at least an affine head".into() });
    }
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Build { layer: 0, message: format!("invalid input shape {input_shape:?}") });
    }
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let out = spec.output_shape(&shape).map_err(|message| Error::Build { layer: i, message })?;
        let params = spec
            .param_shapes(&shape)
            .into_iter()
            .zip(["weight", "bias"])
            .map(|(s, name)| Param::new(format!("{i}.{name}"), Tensor::zeros(&s)))
            .collect();
        layers.push(Layer { spec: spec.clone(), in_shape: shape, out_shape: out.clone(), params });
        shape = out;
    }
    let last = specs.len() - 1;
    match specs[last] {
        LayerSpec::Affine { out_features } if out_features == classes => {}
        LayerSpec::Affine { out_features } => {
            return Err(Error::Build {
                layer: last,
                message: format!("head produces {out_features} logits for {classes} classes"),
            })
        }
        _ => return Err(Error::Build { layer: last, message: "final layer must be an affine head".into() }),
    }
    Ok(Network { input_shape: input_shape.to_vec(), classes, layers })
}

impl<T: Float> Network<T> {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Per-sample output shape of every layer, computed at build time.
    pub fn shape_table(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.out_shape.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    /// Index of the final affine layer.
    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// First layer of the classifier head: the final affine, or the flatten
    /// right before it.
    pub fn head_start(&self) -> usize {
        let h = self.head_index();
        if h > 0 && self.layers[h - 1].spec == LayerSpec::Flatten {
            h - 1
        } else {
            h
        }
    }

    /// Uniform fan-in initialization (`±sqrt(6/fan_in)`) for weights, zero
    /// biases; fully determined by `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            layer.init(&mut rng);
        }
    }

    /// Re-initializes a single layer from its own seed.
    pub fn init_layer(&mut self, index: usize, seed: u64) -> Result<()> {
        let layer = self.layers.get_mut(index).ok_or_else(|| Error::Contract(format!("layer {index} out of range")))?;
        layer.init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(())
    }

    /// Clears every trainable flag.
    pub fn freeze(&mut self) {
        self.params_mut().for_each(|p| p.trainable = false);
    }

    /// Sets every trainable flag.
    pub fn unfreeze(&mut self) {
        self.params_mut().for_each(|p| p.trainable = true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().all(|p| !p.trainable)
    }

    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    in_shape: l.in_shape.clone(),
                    out_shape: l.out_shape.clone(),
                    params: l
                        .params
                        .iter()
                        .map(|p| Param { id: p.id.clone(), tensor: p.tensor.cast(), trainable: p.trainable })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Copies parameter values (not trainable flags) from an identically
    /// shaped network.
    pub fn copy_params_from(&mut self, other: &Network<T>) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Incompatible(format!("{} layers vs {} layers", self.layers.len(), other.layers.len())));
        }
        for (dst, src) in self.params_mut().zip(other.params()) {
            if dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {} has shape {:?}, source has {:?}",
                    dst.id,
                    dst.tensor.shape(),
                    src.tensor.shape()
                )));
            }
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }

    /// Overwrites parameters by id; ids not present in `params` are kept.
    pub fn set_params(&mut self, params: &[Param<T>]) -> Result<()> {
        for p in params {
            let dst = self
                .params_mut()
                .find(|d| d.id == p.id)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {}", p.id)))?;
            if dst.tensor.shape() != p.tensor.shape() {
                return Err(Error::dim("set_params", dst.tensor.shape(), p.tensor.shape()));
            }
            dst.tensor = p.tensor.clone();
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.shape()[0]];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::dim("network input", &expected, x.shape()));
        }
        Ok(())
    }

    fn check_range(&self, range: &Range<usize>) -> Result<()> {
        if range.start > range.end || range.end > self.layers.len() {
            return Err(Error::Contract(format!(
                "layer range {range:?} out of bounds for {} layers",
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        forward_layers(&self.layers, x)
    }

    /// Runs layers `range` on an activation that is valid input for
    /// `range.start`.
    pub fn forward_range(&self, x: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
        self.check_range(&range)?;
        let expected = match range.start {
            0 => &self.input_shape,
            i => &self.layers[i - 1].out_shape,
        };
        if x.shape()[1..] != expected[..] {
            return Err(Error::dim("forward_range", expected, &x.shape()[1..]));
        }
        forward_layers(&self.layers[range], x)
    }

    /// Output of blocks `1..=through_block` of `partition`; `0` returns `x`.
    pub fn forward_prefix(&self, x: &Tensor<T>, through_block: usize, partition: &Partition) -> Result<Activation<T>> {
        if through_block > partition.k() {
            return Err(Error::Contract(format!("block {through_block} out of range for k = {}", partition.k())));
        }
        if partition.ends().last() != Some(&self.layers.len()) {
            return Err(Error::Validation(format!(
                "partition ends {:?} do not cover {} layers",
                partition.ends(),
                self.layers.len()
            )));
        }
        self.check_input(x)?;
        if through_block == 0 {
            return Ok(Activation { tensor: x.clone(), layer: None });
        }
        let end = partition.ends()[through_block - 1];
        Ok(Activation { tensor: forward_layers(&self.layers[..end], x)?, layer: Some(end - 1) })
    }

    /// Records layers `range` on a tape starting from `x`.
    pub fn record_range(&self, tape: &mut Tape<T>, x: Var, range: Range<usize>) -> Result<Var> {
        self.check_range(&range)?;
        record_layers(&self.layers[range], tape, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cnn() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { window: 2 },
            LayerSpec::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Affine { out_features: 3 },
        ]
    }

    #[test]
    fn single_affine_counts_params() {
        let net = build_network::<f32>(&[LayerSpec::Affine { out_features: 3 }], &[4], 3).unwrap();
        assert_eq!(net.len(), 1);
        assert_eq!(net.param_count(), 15);
    }

    #[test]
    fn empty_spec_is_rejected() {
        assert!(matches!(build_network::<f32>(&[], &[4], 3), Err(Error::Build { .. })));
    }

    #[test]
    fn conv_head_without_flatten_is_rejected() {
        let specs = vec![
            LayerSpec::Conv2d { out_channels: 2, kernel: 1, stride: 1, padding: 0 },
            LayerSpec::Affine { out_features: 3 },
        ];
        match build_network::<f32>(&specs, &[1, 4, 4], 3) {
            Err(Error::Build { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected build error, got {other:?}"),
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let specs = [LayerSpec::Affine { out_features: 3 }];
        let mut a = build_network::<f32>(&specs, &[4], 3).unwrap();
        let mut b = a.clone();
        a.init_params(7);
        b.init_params(7);
        assert_eq!(a, b);
        b.init_params(8);
        assert_ne!(a, b);
        let bound = (6.0f32 / 4.0).sqrt();
        let w = &a.layers()[0].params[0].tensor;
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.layers()[0].params[1].tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_table_matches_runtime() {
        let mut net = build_network::<f64>(&toy_cnn(), &[1, 4, 4], 3).unwrap();
        net.init_params(1);
        let x = Tensor::from_f64(&[2, 1, 4, 4], &(0..32).map(|v| v as f64 / 32.0).collect::<Vec<_>>()).unwrap();
        let mut h = x;
        for (layer, shape) in net.layers().iter().zip(net.shape_table()) {
            h = layer.apply(&h).unwrap();
            assert_eq!(&h.shape()[1..], &shape[..]);
        }
        assert_eq!(h.shape(), &[2, 3]);
    }

    #[test]
    fn tape_and_direct_forward_agree_bitwise() {
        let mut net = build_network::<f32>(&toy_cnn(), &[1, 4, 4], 3).unwrap();
        net.init_params(3);
        let x = Tensor::from_f64(&[2, 1, 4, 4], &(0..32).map(|v| (v as f64).sin()).collect::<Vec<_>>()).unwrap();
        let direct = net.forward(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = net.record_range(&mut tape, xv, 0..net.len()).unwrap();
        assert_eq!(tape.value(out), &direct);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = build_network::<f32>(&toy_cnn(), &[1, 4, 4], 3).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        assert!(matches!(net.forward(&x), Err(Error::Dimension { .. })));
    }
}
