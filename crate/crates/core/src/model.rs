//! The seven benchmark architectures and exact parameter counting.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Tape, Var};
use crate::bspline::{make_uniform_grid, DEFAULT_GRID_BLEND};
use crate::error::{Error, Result};
use crate::kan::{kan_init, KanLinearLayer};
use crate::nn::{Conv2dLayer, LinearLayer};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelName {
    TwoLayerConvNet,
    TwoLayerConvNetPlus,
    SingleLayerLinearNet,
    FourLayerConvNet,
    TwoLayerConvKAN,
    FourLayerConvKAN,
    ThreeLayerConvTwoLayerKAN,
}

impl ModelName {
    pub const ALL: [ModelName; 7] = [
        ModelName::TwoLayerConvNet,
        ModelName::TwoLayerConvNetPlus,
        ModelName::SingleLayerLinearNet,
        ModelName::FourLayerConvNet,
        ModelName::TwoLayerConvKAN,
        ModelName::FourLayerConvKAN,
        ModelName::ThreeLayerConvTwoLayerKAN,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::TwoLayerConvNet => "TwoLayerConvNet",
            ModelName::TwoLayerConvNetPlus => "TwoLayerConvNetPlus",
            ModelName::SingleLayerLinearNet => "SingleLayerLinearNet",
            ModelName::FourLayerConvNet => "FourLayerConvNet",
            ModelName::TwoLayerConvKAN => "TwoLayerConvKAN",
            ModelName::FourLayerConvKAN => "FourLayerConvKAN",
            ModelName::ThreeLayerConvTwoLayerKAN => "ThreeLayerConvTwoLayerKAN",
        }
    }

    /// Convolution output channels, each followed by ReLU and a 2x2 pool.
    fn conv_channels(self) -> &'static [usize] {
        match self {
            ModelName::TwoLayerConvNet | ModelName::TwoLayerConvKAN => &[5, 5],
            ModelName::TwoLayerConvNetPlus => &[5, 25],
            ModelName::SingleLayerLinearNet => &[],
            ModelName::FourLayerConvNet | ModelName::FourLayerConvKAN => &[8, 16, 32, 64],
            ModelName::ThreeLayerConvTwoLayerKAN => &[8, 16, 32],
        }
    }

    pub fn pooling_stages(self) -> u32 {
        self.conv_channels().len() as u32
    }

    pub fn uses_kan(self) -> bool {
        matches!(
            self,
            ModelName::TwoLayerConvKAN
                | ModelName::FourLayerConvKAN
                | ModelName::ThreeLayerConvTwoLayerKAN
        )
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown model {s:?}; expected one of {}",
                    ModelName::ALL.map(ModelName::as_str).join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KanConfig {
    pub grid_size: usize,
    pub degree: usize,
    pub range: (f64, f64),
    pub base_term: bool,
    /// Uniform weight when adapting grids to data.
    pub grid_blend: f64,
}

impl Default for KanConfig {
    fn default() -> Self {
        KanConfig {
            grid_size: 5,
            degree: 3,
            range: (-1.0, 1.0),
            base_term: true,
            grid_blend: DEFAULT_GRID_BLEND,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HiddenWidths {
    /// Hidden dense width of TwoLayerConvNetPlus.
    pub conv_plus: usize,
    /// Hidden dense width of FourLayerConvNet.
    pub four_conv: usize,
    /// Width between the two KAN layers of ThreeLayerConvTwoLayerKAN.
    pub kan_mid: usize,
}

impl Default for HiddenWidths {
    fn default() -> Self {
        HiddenWidths {
            conv_plus: 128,
            four_conv: 256,
            kan_mid: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: ModelName,
    /// `[channels, H, W]`
    pub input_shape: [usize; 3],
    pub n_classes: usize,
    #[serde(default)]
    pub kan: KanConfig,
    #[serde(default)]
    pub hidden: HiddenWidths,
}

impl ModelSpec {
    pub fn new(name: ModelName, input_shape: [usize; 3], n_classes: usize) -> Self {
        ModelSpec {
            name,
            input_shape,
            n_classes,
            kan: KanConfig::default(),
            hidden: HiddenWidths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 || self.n_classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "input {:?} and {} classes must be positive",
                self.input_shape, self.n_classes
            )));
        }
        let pools = self.name.pooling_stages();
        let divisor = 1usize << pools;
        if h % divisor != 0 || w % divisor != 0 {
            return Err(Error::Divisibility {
                model: self.name.to_string(),
                pools,
                divisor,
                h,
                w,
            });
        }
        let h = &self.hidden;
        if h.conv_plus == 0 || h.four_conv == 0 || h.kan_mid == 0 {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if self.name.uses_kan() {
            let k = &self.kan;
            make_uniform_grid(k.range.0, k.range.1, k.grid_size, k.degree)?;
            if !(0.0..=1.0).contains(&k.grid_blend) {
                return Err(Error::InvalidConfig(format!(
                    "grid blend {} outside [0, 1]",
                    k.grid_blend
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Relu,
    Pool,
    Flatten,
    Linear,
    Kan,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2dLayer),
    Relu,
    MaxPool2,
    Flatten,
    Linear(LinearLayer),
    KanLinear(KanLinearLayer),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2 => LayerKind::Pool,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::KanLinear(_) => LayerKind::Kan,
        }
    }

    /// Learnable tensors in declared order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::KanLinear(k) => vec![&k.spline_coeffs, &k.spline_scaler, &k.base_weight],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::KanLinear(k) => vec![
                &mut k.spline_coeffs,
                &mut k.spline_scaler,
                &mut k.base_weight,
            ],
            _ => Vec::new(),
        }
    }

    fn frozen(&self) -> Vec<bool> {
        match self {
            Layer::KanLinear(k) => vec![false, false, !k.base_term],
            other => vec![false; other.params().len()],
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.parameter_count(),
            Layer::Linear(l) => l.parameter_count(),
            Layer::KanLinear(k) => k.parameter_count(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

/// Instantiates `spec` with seed-derived, per-layer initialization.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let [mut c, mut h, mut w] = spec.input_shape;
    let mut layers = Vec::new();
    let layer_seed = |idx: usize| rng::derive(seed, idx as u64);

    for &c_out in spec.name.conv_channels() {
        layers.push(Layer::Conv2d(Conv2dLayer::init(c, c_out, layer_seed(layers.len()))));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        c = c_out;
        h /= 2;
        w /= 2;
    }
    layers.push(Layer::Flatten);
    let features = c * h * w;
    let classes = spec.n_classes;

    let dense = |layers: &mut Vec<Layer>, n_in: usize, n_out: usize| {
        layers.push(Layer::Linear(LinearLayer::init(n_in, n_out, layer_seed(layers.len()))));
    };
    let kan = |layers: &mut Vec<Layer>, n_in: usize, n_out: usize| -> Result<()> {
        let k = &spec.kan;
        let grid = make_uniform_grid(k.range.0, k.range.1, k.grid_size, k.degree)?;
        let mut layer = kan_init(n_in, n_out, &grid, layer_seed(layers.len()))?;
        if !k.base_term {
            layer.disable_base_term();
        }
        layers.push(Layer::KanLinear(layer));
        Ok(())
    };

    match spec.name {
        ModelName::TwoLayerConvNet | ModelName::SingleLayerLinearNet => {
            dense(&mut layers, features, classes);
        }
        ModelName::TwoLayerConvNetPlus => {
            let hidden = spec.hidden.conv_plus;
            dense(&mut layers, features, hidden);
            layers.push(Layer::Relu);
            dense(&mut layers, hidden, classes);
        }
        ModelName::FourLayerConvNet => {
            let hidden = spec.hidden.four_conv;
            dense(&mut layers, features, hidden);
            layers.push(Layer::Relu);
            dense(&mut layers, hidden, classes);
        }
        ModelName::TwoLayerConvKAN | ModelName::FourLayerConvKAN => {
            kan(&mut layers, features, classes)?;
        }
        ModelName::ThreeLayerConvTwoLayerKAN => {
            let hidden = spec.hidden.kan_mid;
            kan(&mut layers, features, hidden)?;
            kan(&mut layers, hidden, classes)?;
        }
    }

    Ok(Model {
        spec: spec.clone(),
        seed,
        layers,
    })
}

/// Exact number of learnable scalars.
pub fn param_count(model: &Model) -> usize {
    model.layers.iter().map(Layer::parameter_count).sum()
}

impl Model {
    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Per-parameter flag: true when the optimizer must leave it untouched.
    pub fn frozen(&self) -> Vec<bool> {
        self.layers.iter().flat_map(Layer::frozen).collect()
    }

    /// Records the forward pass on `tape`, registering parameter `p` (in
    /// [`Model::params`] order) as `ParamId(p)`. Returns the logits.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let shape = tape.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(Error::shape(
                "forward_classify",
                format!(
                    "images {shape:?} do not match input shape {:?}",
                    self.spec.input_shape
                ),
            ));
        }
        let mut next_id = 0;
        let mut param = |tape: &mut Tape, t: &Tensor| {
            let v = tape.param(ParamId(next_id), t.clone());
            next_id += 1;
            v
        };
        let mut x = images;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d(c) => {
                    let w = param(tape, &c.weight);
                    let b = param(tape, &c.bias);
                    tape.conv2d(x, w, b)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::MaxPool2 => tape.maxpool2(x)?,
                Layer::Flatten => {
                    let s = tape.value(x).shape();
                    let flat = [s[0], s[1..].iter().product()];
                    tape.reshape(x, &flat)?
                }
                Layer::Linear(l) => {
                    let w = param(tape, &l.weight);
                    let b = param(tape, &l.bias);
                    tape.linear(x, w, b)?
                }
                Layer::KanLinear(k) => {
                    let c = param(tape, &k.spline_coeffs);
                    let s = param(tape, &k.spline_scaler);
                    let b = param(tape, &k.base_weight);
                    let grids: Arc<[_]> = k.grids.clone().into();
                    tape.kan_linear(x, c, s, b, grids)?
                }
            };
        }
        Ok(x)
    }

    /// Logits for a batch `[batch, c, H, W]` without keeping the tape.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Adapts the grids of every KAN layer to the activations `images`
    /// produce at that layer, front to back.
    pub fn update_kan_grids(&mut self, images: &Tensor) -> Result<()> {
        let blend = self.spec.kan.grid_blend;
        let mut x = images.clone();
        for layer in &mut self.layers {
            if let Layer::KanLinear(k) = layer {
                k.update_grids(&x, blend)?;
            }
            x = apply_layer(layer, &x)?;
        }
        Ok(())
    }
}

/// Tape-free application of one layer.
fn apply_layer(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    use crate::nn;
    match layer {
        Layer::Conv2d(c) => nn::conv2d_forward(x, &c.weight, &c.bias),
        Layer::Relu => Ok(x.map(nn::relu)),
        Layer::MaxPool2 => nn::maxpool2_forward(x).map(|(y, _)| y),
        Layer::Flatten => {
            let s = x.shape();
            let flat = [s[0], s[1..].iter().product()];
            x.clone().reshape(&flat)
        }
        Layer::Linear(l) => nn::linear_forward(x, &l.weight, &l.bias),
        Layer::KanLinear(k) => k.forward(x),
    }
}

/// Records the classifier forward pass; see [`Model::forward`].
pub fn forward_classify(model: &Model, tape: &mut Tape, images: Var) -> Result<Var> {
    model.forward(tape, images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in ModelName::ALL {
            assert_eq!(m.as_str().parse::<ModelName>().unwrap(), m);
        }
        assert!("ResNet".parse::<ModelName>().is_err());
    }

    #[test]
    fn neu_linear_count() {
        let spec = ModelSpec::new(ModelName::SingleLayerLinearNet, [3, 200, 200], 6);
        let m = build_model(&spec, 0).unwrap();
        assert_eq!(m.kinds(), [LayerKind::Flatten, LayerKind::Linear]);
        assert_eq!(param_count(&m), 720_006);
    }

    #[test]
    fn two_layer_conv_kan_sequence() {
        use LayerKind::*;
        let spec = ModelSpec::new(ModelName::TwoLayerConvKAN, [1, 64, 64], 6);
        let m = build_model(&spec, 0).unwrap();
        assert_eq!(m.kinds(), [Conv, Relu, Pool, Conv, Relu, Pool, Flatten, Kan]);
    }

    #[test]
    fn odd_pooling_is_rejected() {
        let spec = ModelSpec::new(ModelName::FourLayerConvNet, [3, 200, 200], 6);
        assert!(matches!(build_model(&spec, 0), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn frozen_base_term() {
        let mut spec = ModelSpec::new(ModelName::TwoLayerConvKAN, [1, 8, 8], 3);
        spec.kan.base_term = false;
        let m = build_model(&spec, 2).unwrap();
        assert_eq!(m.frozen(), [false, false, false, false, false, false, true]);
        let Layer::KanLinear(k) = m.layers.last().unwrap() else { panic!() };
        assert!(k.base_weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_shape() {
        let spec = ModelSpec::new(ModelName::TwoLayerConvNet, [1, 8, 8], 3);
        let m = build_model(&spec, 0).unwrap();
        assert!(m.logits(&Tensor::zeros(&[2, 1, 8, 4])).is_err());
    }
}
