//! The detector: a small stride-8..64 backbone, reverse-connection blocks
//! producing one fusion map per detection layer, and per-layer objectness,
//! classification and regression heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{AnchorSet, ANCHORS_PER_LOCATION, STRIDES};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Shape, Tensor, Var};

/// Number of detection layers (4, 5, 6, 7).
pub const NUM_LAYERS: usize = 4;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side in pixels; must be a multiple of 64.
    pub input_size: usize,
    /// Foreground classes (background excluded).
    pub num_classes: usize,
    /// Channels of backbone maps at strides 8, 16, 32, 64.
    pub backbone_channels: [usize; NUM_LAYERS],
    /// Channels of every reverse fusion map.
    pub rf_channels: usize,
    /// Smallest default-box size; `input_size / 10` when unset.
    pub s_min: Option<f64>,
    /// Detection layers in use, as indices 0..4 (layers 4..7).
    pub detect_layers: Vec<usize>,
    /// Whether the objectness branch exists.
    pub objectness: bool,
    /// Standard deviation of the Gaussian initializer of the head weights.
    pub init_std: f64,
    /// Initializer of the backbone and reverse-connection weights.
    pub trunk_init: TrunkInit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrunkInit {
    /// Zero-mean Gaussian with variance `2 / fan_in`.
    #[default]
    He,
    /// Same Gaussian as the heads (`init_std`).
    Gaussian,
}

impl TrunkInit {
    pub fn name(self) -> &'static str {
        match self {
            TrunkInit::He => "he",
            TrunkInit::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "he" => Some(TrunkInit::He),
            "gaussian" => Some(TrunkInit::Gaussian),
            _ => None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 128,
            num_classes: 3,
            backbone_channels: [16, 32, 32, 32],
            rf_channels: 32,
            s_min: None,
            detect_layers: vec![0, 1, 2, 3],
            objectness: true,
            init_std: 0.01,
            trunk_init: TrunkInit::He,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        validate_input_size(self.input_size)?;
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::config("backbone channels must be positive"));
        }
        if self.rf_channels < 2 || !self.rf_channels.is_multiple_of(2) {
            return Err(Error::config("rf_channels must be an even number >= 2"));
        }
        if let Some(s) = self.s_min {
            if !(s > 0.0) {
                return Err(Error::config("s_min must be positive"));
            }
        }
        if self.detect_layers.is_empty() || self.detect_layers.iter().any(|&l| l >= NUM_LAYERS) {
            return Err(Error::config("detect_layers must be a non-empty subset of 0..4"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init_std must be positive"));
        }
        Ok(())
    }

    /// Smallest box size at a given input size; scales with the input.
    pub fn s_min_for(&self, input_size: usize) -> f64 {
        match self.s_min {
            Some(s) => s * input_size as f64 / self.input_size as f64,
            None => input_size as f64 / 10.0,
        }
    }

    pub fn anchors<T: Scalar>(&self, input_size: usize) -> Result<AnchorSet<T>> {
        AnchorSet::generate(input_size, self.s_min_for(input_size), &self.detect_layers)
    }

    pub fn layer_enabled(&self, layer: usize) -> bool {
        self.detect_layers.contains(&layer)
    }
}

pub fn validate_input_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(64) {
        return Err(Error::config(format!(
            "input size {size} must be a positive multiple of 64"
        )));
    }
    Ok(())
}

/// Maps `[0, 1]` pixel values to the network's input range.
pub fn normalize_image<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    let data = image.data().iter().map(|&v| v - half).collect();
    Tensor::from_vec(image.shape(), data).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvParams {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct InceptionParams {
    pointwise: ConvParams,
    spatial: ConvParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HeadParams {
    objectness: Option<ConvParams>,
    inception: [InceptionParams; 2],
    classify: ConvParams,
    regress: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stem: [ConvParams; 3],
    backbone: [ConvParams; NUM_LAYERS],
    top: ConvParams,
    lateral: [Option<ConvParams>; NUM_LAYERS],
    upsample: [Option<ConvParams>; NUM_LAYERS],
    heads: [Option<HeadParams>; NUM_LAYERS],
}

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Per-layer head outputs recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutputs {
    pub layer: usize,
    /// `[N, 2A, H, W]` logits; absent when the objectness branch is disabled.
    pub obj_logits: Option<Var>,
    pub obj_probs: Option<Var>,
    /// `[N, (K+1)A, H, W]`.
    pub cls_logits: Var,
    pub cls_probs: Var,
    /// `[N, 4A, H, W]` offsets `(t_x, t_y, t_w, t_h)` per box.
    pub loc: Var,
}

/// Everything a forward pass records.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One variable per model parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Backbone maps C4..C7.
    pub features: [Var; NUM_LAYERS],
    /// Reverse fusion maps 4..7.
    pub fusion: [Var; NUM_LAYERS],
    /// Head outputs of the enabled layers, in layer order.
    pub layers: Vec<LayerOutputs>,
}

impl Forward {
    pub fn layer(&self, layer: usize) -> Option<&LayerOutputs> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// The detector's parameters and architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Param<T>>,
}

struct Builder<'a, T> {
    params: Vec<Param<T>>,
    rng: &'a mut ChaCha8Rng,
    head_std: f64,
    trunk: TrunkInit,
    /// Set while building backbone and reverse layers.
    in_trunk: bool,
}

impl<T: Scalar> Builder<'_, T> {
    fn std(&self, fan_in: usize) -> f64 {
        match (self.in_trunk, self.trunk) {
            (true, TrunkInit::He) => (2.0 / fan_in as f64).sqrt(),
            _ => self.head_std,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvParams {
        let weight = self.params.len();
        let std = self.std(cin * k * k);
        self.params.push(Param {
            name: format!("{name}.weight"),
            tensor: Tensor::randn(Shape::new(cout, cin, k, k), std, self.rng),
        });
        self.bias(name, cout, weight)
    }

    /// Transposed-convolution weight `[Cin, Cout, 2, 2]`.
    fn deconv(&mut self, name: &str, cin: usize, cout: usize) -> ConvParams {
        let weight = self.params.len();
        // each output pixel sees one tap per input channel
        let std = self.std(cin);
        self.params.push(Param {
            name: format!("{name}.weight"),
            tensor: Tensor::randn(Shape::new(cin, cout, 2, 2), std, self.rng),
        });
        self.bias(name, cout, weight)
    }

    fn bias(&mut self, name: &str, cout: usize, weight: usize) -> ConvParams {
        let bias = self.params.len();
        self.params.push(Param {
            name: format!("{name}.bias"),
            tensor: Tensor::zeros(Shape::new(1, 1, 1, cout)),
        });
        ConvParams { weight, bias }
    }
}

fn build_layout<T: Scalar>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Layout {
    let [c4, c5, c6, c7] = cfg.backbone_channels;
    let r = cfg.rf_channels;
    let a = ANCHORS_PER_LOCATION;
    let stem = [
        b.conv("backbone.conv1", 3, c4, 3),
        b.conv("backbone.conv2", c4, c4, 3),
        b.conv("backbone.conv3", c4, c4, 3),
    ];
    let backbone = [
        b.conv("backbone.conv4", c4, c4, 3),
        b.conv("backbone.conv5", c4, c5, 3),
        b.conv("backbone.conv6", c5, c6, 3),
        b.conv("backbone.conv7", c6, c7, 2),
    ];
    let top = b.conv("reverse.rf7", c7, r, 3);
    let mut lateral = [None; NUM_LAYERS];
    let mut upsample = [None; NUM_LAYERS];
    for layer in (0..NUM_LAYERS - 1).rev() {
        let cin = cfg.backbone_channels[layer];
        upsample[layer] = Some(b.deconv(&format!("reverse.up{}", layer + 4), r, r));
        lateral[layer] = Some(b.conv(&format!("reverse.lateral{}", layer + 4), cin, r, 3));
    }
    b.in_trunk = false;
    let mut heads = [None; NUM_LAYERS];
    for (layer, head) in heads.iter_mut().enumerate() {
        if !cfg.layer_enabled(layer) {
            continue;
        }
        let p = format!("head{}", layer + 4);
        let objectness = cfg
            .objectness
            .then(|| b.conv(&format!("{p}.objectness"), r, 2 * a, 3));
        let mut inception = Vec::with_capacity(2);
        for i in 1..=2 {
            inception.push(InceptionParams {
                pointwise: b.conv(&format!("{p}.inception{i}.branch1x1"), r, r / 2, 1),
                spatial: b.conv(&format!("{p}.inception{i}.branch3x3"), r, r / 2, 3),
            });
        }
        let classify = b.conv(&format!("{p}.classify"), r, (cfg.num_classes + 1) * a, 3);
        let regress = b.conv(&format!("{p}.regress"), r, 4 * a, 3);
        *head = Some(HeadParams {
            objectness,
            inception: [inception[0], inception[1]],
            classify,
            regress,
        });
    }
    Layout {
        stem,
        backbone,
        top,
        lateral,
        upsample,
        heads,
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a model with Gaussian weights and zero biases, deterministic in `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
            head_std: config.init_std,
            trunk: config.trunk_init,
            in_trunk: true,
        };
        let layout = build_layout(&config, &mut b);
        Ok(Model {
            config,
            layout,
            params: b.params,
        })
    }

    /// Assembles a model from named parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        let template = Model::<T>::build(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::Input(format!(
                    "parameter mismatch: expected {} {}, found {} {}",
                    want.name,
                    want.tensor.shape(),
                    got.name,
                    got.tensor.shape()
                )));
            }
        }
        Ok(Model {
            config,
            layout: template.layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.tensor.shape().numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Records the full forward pass for normalized images `[N, 3, S, S]`.
    pub fn forward(&self, g: &mut Graph<T>, images: Tensor<T>) -> Result<Forward> {
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.tensor.clone())).collect();
        self.forward_with(g, params, images)
    }

    /// Forward pass reading parameters from already-recorded variables
    /// (one per [`Model::params`] entry, same order and shapes).
    pub fn forward_with(&self, g: &mut Graph<T>, params: Vec<Var>, images: Tensor<T>) -> Result<Forward> {
        if params.len() != self.params.len() {
            return Err(Error::Input(format!(
                "forward_with: {} parameter variables for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let s = images.shape();
        if s.c != 3 || s.h != s.w {
            return Err(Error::dim(format!("expected [N, 3, S, S] images, got {s}")));
        }
        validate_input_size(s.h)?;
        let layout = &self.layout;
        let conv = |g: &mut Graph<T>, x: Var, p: ConvParams, stride: usize, pad: usize| {
            g.conv2d(x, params[p.weight], Some(params[p.bias]), stride, pad)
        };
        let conv_relu = |g: &mut Graph<T>, x: Var, p: ConvParams, stride: usize, pad: usize| {
            let y = conv(g, x, p, stride, pad)?;
            g.relu(y)
        };

        let x = g.input(images);
        let mut h = x;
        for &p in &layout.stem {
            h = conv_relu(g, h, p, 1, 1)?;
            h = g.maxpool2(h)?;
        }
        let c4 = conv_relu(g, h, layout.backbone[0], 1, 1)?;
        let p4 = g.maxpool2(c4)?;
        let c5 = conv_relu(g, p4, layout.backbone[1], 1, 1)?;
        let p5 = g.maxpool2(c5)?;
        let c6 = conv_relu(g, p5, layout.backbone[2], 1, 1)?;
        let c7 = conv_relu(g, c6, layout.backbone[3], 2, 0)?;
        let features = [c4, c5, c6, c7];

        let rf7 = conv_relu(g, c7, layout.top, 1, 1)?;
        let mut fusion = [rf7; NUM_LAYERS];
        for layer in (0..NUM_LAYERS - 1).rev() {
            let up = layout.upsample[layer].expect("upsample exists below top");
            let lat = layout.lateral[layer].expect("lateral exists below top");
            let u = g.deconv2d(fusion[layer + 1], params[up.weight], Some(params[up.bias]), 2)?;
            let l = conv(g, features[layer], lat, 1, 1)?;
            if g.shape(u) != g.shape(l) {
                return Err(Error::dim(format!(
                    "reverse connection {}: upsampled {} vs lateral {}",
                    layer + 4,
                    g.shape(u),
                    g.shape(l)
                )));
            }
            let sum = g.add(u, l)?;
            fusion[layer] = g.relu(sum)?;
        }

        let k1 = self.config.num_classes + 1;
        let mut layers = Vec::new();
        for (layer, head) in layout.heads.iter().enumerate() {
            let Some(head) = head else { continue };
            let rf = fusion[layer];
            let (obj_logits, obj_probs) = match head.objectness {
                Some(p) => {
                    let logits = conv(g, rf, p, 1, 1)?;
                    let probs = g.softmax_groups(logits, 2)?;
                    (Some(logits), Some(probs))
                }
                None => (None, None),
            };
            let mut t = rf;
            for inc in head.inception {
                let a = conv_relu(g, t, inc.pointwise, 1, 0)?;
                let b = conv_relu(g, t, inc.spatial, 1, 1)?;
                t = g.concat_channels(a, b)?;
            }
            let cls_logits = conv(g, t, head.classify, 1, 1)?;
            let cls_probs = g.softmax_groups(cls_logits, k1)?;
            let loc = conv(g, rf, head.regress, 1, 1)?;
            layers.push(LayerOutputs {
                layer,
                obj_logits,
                obj_probs,
                cls_logits,
                cls_probs,
                loc,
            });
        }
        Ok(Forward {
            params,
            features,
            fusion,
            layers,
        })
    }
}

/// Spatial side of detection layer `layer` for a given input side.
pub fn layer_side(input_size: usize, layer: usize) -> usize {
    input_size / STRIDES[layer]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_size_must_divide_by_64() {
        let cfg = ModelConfig {
            input_size: 100,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::<f32>::build(cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(ModelConfig::default(), 7).unwrap();
        let b = Model::<f32>::build(ModelConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::build(ModelConfig::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn objectness_ablation_drops_objectness_params() {
        let cfg = ModelConfig {
            objectness: false,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::build(cfg, 1).unwrap();
        assert!(m.params().iter().all(|p| !p.name.contains("objectness")));
    }

    #[test]
    fn from_params_rejects_mismatch() {
        let m = Model::<f32>::build(ModelConfig::default(), 1).unwrap();
        let mut p = m.params().to_vec();
        p.pop();
        assert!(Model::from_params(ModelConfig::default(), p).is_err());
        assert!(Model::from_params(ModelConfig::default(), m.params().to_vec()).is_ok());
    }
}
