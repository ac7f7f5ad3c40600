//! The counting network: truncated-VGG backbone, pyramid pooling
//! enhancement, and T refinement stages that each emit a confidence map.
//!
//! The backbone is the VGG19 prefix through its third pooling (2 x conv c1,
//! pool, 2 x conv c2, pool, 4 x conv c3, pool), all 3x3 stride-1
//! same-padding ReLU convs, so the map resolution is input/8. The pyramid
//! module max-pools the features at each scale, applies a 1x1 conv with
//! ReLU, upsamples back bilinearly, and concatenates everything with its
//! input. Stage 1 reads the enhanced features through three 3x3 convs, a
//! 1x1 conv, and a single-filter 1x1 sigmoid head; later stages concatenate
//! the previous map and run five 7x7 convs, a 1x1 conv, and the same
//! sigmoid head. Default widths reproduce the full-scale architecture;
//! scaled-down widths serve desk-scale runs.

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, Shape4, Tape, Tensor4, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;

/// Architecture hyperparameters. `stride` is fixed at 8 by the backbone's
/// three pooling layers and is kept explicit for coordinate conversions.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub stages: usize,
    pub backbone_widths: [usize; 3],
    pub ppm_scales: Vec<usize>,
    pub ppm_channels: usize,
    /// Stage conv width and the stage-1 1x1 width.
    pub stage_widths: [usize; 2],
    pub stride: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 512,
            stages: 4,
            backbone_widths: [64, 128, 256],
            ppm_scales: vec![1, 2, 3, 6],
            ppm_channels: 512,
            stage_widths: [128, 512],
            stride: 8,
        }
    }
}

/// One convolution in the plan: square kernel, stride 1, same padding.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
}

impl ConvSpec {
    fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize) -> Self {
        ConvSpec {
            name: name.into(),
            in_c,
            out_c,
            k,
        }
    }

    pub fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride != 8 {
            return Err(Error::invalid(format!(
                "stride is fixed at 8 by the three pooling layers, got {}",
                self.stride
            )));
        }
        if self.stages == 0 {
            return Err(Error::invalid("need at least one stage"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.stride) {
            return Err(Error::invalid(format!(
                "input size {} must be a positive multiple of stride {}",
                self.input_size, self.stride
            )));
        }
        if self.ppm_scales.is_empty() || self.ppm_scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("ppm scales must be non-empty and strictly ascending"));
        }
        let map = self.input_size / self.stride;
        let max_scale = *self.ppm_scales.last().unwrap();
        if max_scale > map {
            return Err(Error::invalid(format!(
                "largest ppm scale {max_scale} exceeds the {map}x{map} feature map"
            )));
        }
        if self.backbone_widths.contains(&0) || self.stage_widths.contains(&0) || self.ppm_channels == 0
        {
            return Err(Error::invalid("channel widths must be positive"));
        }
        Ok(())
    }

    /// Backbone output for an `h x w` input: `(channels, h/8, w/8)`.
    pub fn backbone_output_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if !h.is_multiple_of(self.stride) || !w.is_multiple_of(self.stride) {
            return Err(Error::invalid(format!(
                "backbone input {h}x{w} not divisible by stride {}",
                self.stride
            )));
        }
        Ok((self.backbone_widths[2], h / self.stride, w / self.stride))
    }

    /// Channels after pyramid enhancement: backbone + one block per scale.
    pub fn ppm_output_channels(&self) -> usize {
        self.backbone_widths[2] + self.ppm_scales.len() * self.ppm_channels
    }

    pub fn backbone_convs(&self) -> Vec<ConvSpec> {
        let [c1, c2, c3] = self.backbone_widths;
        let chain = [
            (3, c1),
            (c1, c1),
            (c1, c2),
            (c2, c2),
            (c2, c3),
            (c3, c3),
            (c3, c3),
            (c3, c3),
        ];
        chain
            .iter()
            .enumerate()
            .map(|(i, &(ic, oc))| ConvSpec::new(format!("backbone.conv{i}"), ic, oc, 3))
            .collect()
    }

    /// Backbone conv indices after which a 2x2 max pool runs.
    pub fn backbone_pool_after() -> [usize; 3] {
        [1, 3, 7]
    }

    pub fn ppm_convs(&self) -> Vec<ConvSpec> {
        self.ppm_scales
            .iter()
            .map(|&s| ConvSpec::new(format!("ppm.scale{s}"), self.backbone_widths[2], self.ppm_channels, 1))
            .collect()
    }

    /// Stage `t` (1-based) conv chain; the final conv is the single-filter
    /// sigmoid head.
    pub fn stage_convs(&self, t: usize) -> Vec<ConvSpec> {
        let [sc, s1x1] = self.stage_widths;
        let enhanced = self.ppm_output_channels();
        let mut specs = Vec::new();
        if t == 1 {
            let chain = [(enhanced, sc, 3), (sc, sc, 3), (sc, sc, 3), (sc, s1x1, 1), (s1x1, 1, 1)];
            for (i, &(ic, oc, k)) in chain.iter().enumerate() {
                specs.push(ConvSpec::new(format!("stage1.conv{i}"), ic, oc, k));
            }
        } else {
            let mut chain = vec![(enhanced + 1, sc, 7)];
            chain.extend(std::iter::repeat_n((sc, sc, 7), 4));
            chain.push((sc, sc, 1));
            chain.push((sc, 1, 1));
            for (i, &(ic, oc, k)) in chain.iter().enumerate() {
                specs.push(ConvSpec::new(format!("stage{t}.conv{i}"), ic, oc, k));
            }
        }
        specs
    }

    /// Every conv in canonical order: backbone, ppm levels, stages.
    pub fn all_convs(&self) -> Vec<ConvSpec> {
        let mut specs = self.backbone_convs();
        specs.extend(self.ppm_convs());
        for t in 1..=self.stages {
            specs.extend(self.stage_convs(t));
        }
        specs
    }

    /// Total parameter scalars, a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.all_convs()
            .iter()
            .map(|s| s.out_c * s.in_c * s.k * s.k + s.out_c)
            .sum()
    }

    /// Flat key=value document (the self-describing half of a checkpoint).
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "input_size={}\nstages={}\nbackbone_widths={}\nppm_scales={}\nppm_channels={}\nstage_widths={}\nstride={}\n",
            self.input_size,
            self.stages,
            join(&self.backbone_widths),
            join(&self.ppm_scales),
            self.ppm_channels,
            join(&self.stage_widths),
            self.stride
        )
    }

    /// Parse the key=value document; unknown keys and missing keys are
    /// rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut seen: HashMap<&str, String> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {} is not key=value: {line}", lineno + 1)))?;
            let key = key.trim();
            let known = [
                "input_size",
                "stages",
                "backbone_widths",
                "ppm_scales",
                "ppm_channels",
                "stage_widths",
                "stride",
            ];
            let key = known
                .iter()
                .find(|&&k| k == key)
                .ok_or_else(|| Error::invalid(format!("unknown network config key `{key}`")))?;
            seen.insert(key, value.trim().to_string());
        }
        let get = |key: &str| -> Result<String> {
            seen.get(key)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("network config missing key `{key}`")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for `{key}`")))
        };
        let parse_list = |key: &str| -> Result<Vec<usize>> {
            get(key)?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad value for `{key}`")))
                })
                .collect()
        };
        let backbone: Vec<usize> = parse_list("backbone_widths")?;
        let stage: Vec<usize> = parse_list("stage_widths")?;
        if backbone.len() != 3 || stage.len() != 2 {
            return Err(Error::invalid("backbone_widths needs 3 entries, stage_widths needs 2"));
        }
        let config = NetworkConfig {
            input_size: parse_usize("input_size")?,
            stages: parse_usize("stages")?,
            backbone_widths: [backbone[0], backbone[1], backbone[2]],
            ppm_scales: parse_list("ppm_scales")?,
            ppm_channels: parse_usize("ppm_channels")?,
            stage_widths: [stage[0], stage[1]],
            stride: parse_usize("stride")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor4,
}

/// The network: a config plus its named parameters in canonical order.
#[derive(Clone, Debug)]
pub struct Model {
    config: NetworkConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Model {
    /// Fresh model with He-normal conv weights (std `sqrt(2 / (in_c k^2))`)
    /// and zero biases, drawn deterministically from the seed.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for spec in config.all_convs() {
            let std = (2.0 / (spec.in_c * spec.k * spec.k) as f64).sqrt();
            let weight = Tensor4::randn(Shape4::new(spec.out_c, spec.in_c, spec.k, spec.k), std, &mut rng);
            let bias = Tensor4::zeros(Shape4::new(1, spec.out_c, 1, 1));
            params.push(Param {
                name: format!("{}.weight", spec.name),
                tensor: weight,
            });
            params.push(Param {
                name: format!("{}.bias", spec.name),
                tensor: bias,
            });
        }
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model { config, params, index })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor4)> {
        self.params.iter_mut().map(|p| (p.name.as_str(), &mut p.tensor))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor4> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor4> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].tensor)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.shape().numel()).sum()
    }

    /// Write the checkpoint at `path` and the architecture document next to
    /// it (same stem, `.cfg` extension).
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        let named: Vec<(&str, &Tensor4)> = self.params.iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
        save_checkpoint(path, &named)?;
        crate::dataset::write_atomic(&path.with_extension("cfg"), self.config.to_text().as_bytes())
    }

    /// Load a checkpoint plus its sibling `.cfg`; every parameter must match
    /// the shape the config dictates.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let cfg_text = std::fs::read_to_string(path.with_extension("cfg"))?;
        let config = NetworkConfig::from_text(&cfg_text)?;
        let stored = load_checkpoint(path)?;
        Model::from_checkpoint(config, stored)
    }

    pub fn from_checkpoint(config: NetworkConfig, stored: Vec<(String, Tensor4)>) -> Result<Self> {
        let mut fresh = Model::new(config, 0)?;
        if stored.len() != fresh.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config expects {}",
                stored.len(),
                fresh.params.len()
            )));
        }
        for (name, tensor) in stored {
            let idx = *fresh
                .index
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            let expected = fresh.params[idx].tensor.shape();
            if tensor.shape() != expected {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: shape {} does not match config shape {expected}",
                    tensor.shape()
                )));
            }
            fresh.params[idx].tensor = tensor;
        }
        Ok(fresh)
    }

    /// Register every parameter on a tape. Trainable bindings mark the
    /// leaves as requiring gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let mut t = p.tensor.clone();
            t.set_requires_grad(trainable);
            vars.push(tape.leaf(&t));
        }
        BoundModel {
            config: self.config.clone(),
            index: self.index.clone(),
            vars,
        }
    }

    /// Bind with one named parameter replaced by an existing tape var
    /// (finite-difference probes drive the forward pass through this seam).
    pub fn bind_with_override(&self, tape: &mut Tape, trainable: bool, name: &str, var: Var) -> Result<BoundModel> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        if tape.shape(var) != self.params[idx].tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "bind_with_override",
                left: tape.shape(var).to_string(),
                right: self.params[idx].tensor.shape().to_string(),
            });
        }
        let mut vars = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            if i == idx {
                vars.push(var);
            } else {
                let mut t = p.tensor.clone();
                t.set_requires_grad(trainable);
                vars.push(tape.leaf(&t));
            }
        }
        Ok(BoundModel {
            config: self.config.clone(),
            index: self.index.clone(),
            vars,
        })
    }

    /// Pull gradients off the tape into each parameter's grad buffer.
    pub fn absorb_grads(&mut self, bound: &BoundModel, tape: &Tape) -> Result<()> {
        for (param, &var) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(var) {
                param.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Inference convenience: forward on a private tape, returning the T
    /// confidence-map tensors.
    pub fn forward_maps(&self, image: &Tensor4) -> Result<Vec<Tensor4>> {
        let mut tape = Tape::new();
        let image_var = tape.leaf(image);
        let bound = self.bind(&mut tape, false);
        let maps = bound.model_forward(&mut tape, image_var)?;
        Ok(maps.iter().map(|&v| tape.to_tensor(v)).collect())
    }
}

/// A model's parameters registered on one tape.
pub struct BoundModel {
    config: NetworkConfig,
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Act {
    Relu,
    Sigmoid,
}

impl BoundModel {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, tape: &mut Tape, x: Var, spec: &ConvSpec, act: Act) -> Result<Var> {
        let w = self.var(&format!("{}.weight", spec.name))?;
        let b = self.var(&format!("{}.bias", spec.name))?;
        let y = tape.conv2d(x, w, b, 1, spec.pad())?;
        Ok(match act {
            Act::Relu => tape.relu(y),
            Act::Sigmoid => tape.sigmoid(y),
        })
    }

    /// Feature extraction: input `n x 3 x H x W` (H, W divisible by 8) to
    /// `n x c3 x H/8 x W/8`.
    pub fn backbone_forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let s = tape.shape(image);
        if s.c != 3 {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward: expected 3 input channels",
                left: s.to_string(),
                right: "nx3xHxW".into(),
            });
        }
        if !s.h.is_multiple_of(self.config.stride) || !s.w.is_multiple_of(self.config.stride) {
            return Err(Error::invalid(format!(
                "backbone input {}x{} not divisible by stride {}",
                s.h, s.w, self.config.stride
            )));
        }
        let convs = self.config.backbone_convs();
        let pools = NetworkConfig::backbone_pool_after();
        let mut x = image;
        for (i, spec) in convs.iter().enumerate() {
            x = self.conv(tape, x, spec, Act::Relu)?;
            if pools.contains(&i) {
                x = tape.max_pool_2x2(x)?;
            }
        }
        Ok(x)
    }

    /// Pyramid enhancement: each scale max-pools to `k x k`, runs its 1x1
    /// conv with ReLU, upsamples back, and everything concatenates behind
    /// the input features.
    pub fn ppm_forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let s = tape.shape(features);
        let max_scale = *self.config.ppm_scales.last().unwrap();
        if s.h < max_scale || s.w < max_scale {
            return Err(Error::invalid(format!(
                "ppm input {}x{} smaller than largest scale {max_scale}",
                s.h, s.w
            )));
        }
        let mut parts = vec![features];
        for (scale, spec) in self.config.ppm_scales.iter().zip(self.config.ppm_convs()) {
            let pooled = tape.adaptive_max_pool(features, *scale)?;
            let conved = self.conv(tape, pooled, &spec, Act::Relu)?;
            parts.push(tape.bilinear_upsample(conved, s.h, s.w)?);
        }
        tape.concat_channels(&parts)
    }

    /// Stage `t` (1-based). Stage 1 takes only the enhanced features; later
    /// stages additionally take the previous map, which is concatenated on.
    pub fn stage_forward(&self, tape: &mut Tape, t: usize, ppm_out: Var, prev_map: Option<Var>) -> Result<Var> {
        if t == 0 || t > self.config.stages {
            return Err(Error::invalid(format!(
                "stage {t} out of range 1..={}",
                self.config.stages
            )));
        }
        if (t == 1) != prev_map.is_none() {
            return Err(Error::invalid(format!(
                "stage {t}: previous map must be supplied exactly when t > 1"
            )));
        }
        let mut x = match prev_map {
            None => ppm_out,
            Some(prev) => tape.concat_channels(&[ppm_out, prev])?,
        };
        let convs = self.config.stage_convs(t);
        let last = convs.len() - 1;
        for (i, spec) in convs.iter().enumerate() {
            let act = if i == last { Act::Sigmoid } else { Act::Relu };
            x = self.conv(tape, x, spec, act)?;
        }
        Ok(x)
    }

    /// Full forward pass: `[C_1 .. C_T]`, every stage reading the same
    /// enhanced features.
    pub fn model_forward(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let s = tape.shape(image);
        if s.h != self.config.input_size || s.w != self.config.input_size {
            return Err(Error::ShapeMismatch {
                op: "model_forward: input size differs from config",
                left: s.to_string(),
                right: format!("nx3x{0}x{0}", self.config.input_size),
            });
        }
        let features = self.backbone_forward(tape, image)?;
        let enhanced = self.ppm_forward(tape, features)?;
        let mut maps = Vec::with_capacity(self.config.stages);
        let mut prev = None;
        for t in 1..=self.config.stages {
            let map = self.stage_forward(tape, t, enhanced, prev)?;
            maps.push(map);
            prev = Some(map);
        }
        Ok(maps)
    }
}
