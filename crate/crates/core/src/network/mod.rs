//! Segmentation network: a U-Net encoder/decoder with a softmax output, a
//! coordinate-regression head (GeoMT) and an optional acquisition-time head
//! (TimeMT), all running on the [`graph`] tape.
//!
//! Parameter names are stable and double as checkpoint keys:
//!
//! | prefix      | contents                                          |
//! |-------------|---------------------------------------------------|
//! | `enc.{s}.`  | encoder stage `s`: two conv3x3 + batch norm       |
//! | `dec.{s}.`  | decoder stage `s`: transposed conv, two conv3x3   |
//! | `out.`      | 1x1 classifier                                    |
//! | `geo.`      | max-pool + 5 linear layers                        |
//! | `time.`     | max-pool + 2 linear layers                        |

pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_encoding::TimeFields;
use crate::rng::Rng;
pub use graph::{BnMode, BnStats, Gradients, Graph, NodeId};
pub use params::ParamStore;
pub use tensor::Tensor;

/// Momentum of the batch-norm running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_bands: usize,
    /// Output classes including the trailing "other" class.
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    /// Side of the square training input.
    pub input_size: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self { in_bands: 5, num_classes: 13, encoder_channels: vec![16, 32, 64, 128], input_size: 64 }
    }
}

impl SegNetConfig {
    /// Configuration at the original image scale with ResNet-like widths.
    pub fn full_scale() -> Self {
        Self { encoder_channels: vec![64, 128, 256, 512], input_size: 256, ..Self::default() }
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial downsampling factor between the input and `Z`.
    pub fn reduction(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 || self.num_classes < 2 {
            return Err(Error::Config("model needs input bands and at least two classes".into()));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be non-empty and positive".into()));
        }
        if self.input_size == 0 || self.input_size % self.reduction() != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                self.reduction()
            )));
        }
        Ok(())
    }
}

/// Which activations feed the auxiliary heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Bottleneck features `Z`.
    Encoder,
    /// Last decoder block, at input resolution.
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoHeadConfig {
    pub pool_output: usize,
    pub hidden_widths: Vec<usize>,
    pub out_dim: usize,
    pub feature_source: FeatureSource,
}

impl Default for GeoHeadConfig {
    fn default() -> Self {
        Self {
            pool_output: 4,
            hidden_widths: vec![512, 512, 384, 320],
            out_dim: 256,
            feature_source: FeatureSource::Encoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeHeadConfig {
    pub pool_output: usize,
    pub hidden_width: usize,
    pub use_month: bool,
    pub use_hour: bool,
    pub noise: bool,
    pub feature_source: FeatureSource,
}

impl Default for TimeHeadConfig {
    fn default() -> Self {
        Self {
            pool_output: 4,
            hidden_width: 64,
            use_month: true,
            use_hour: true,
            noise: false,
            feature_source: FeatureSource::Encoder,
        }
    }
}

impl TimeHeadConfig {
    pub fn fields(&self) -> TimeFields {
        TimeFields { use_month: self.use_month, use_hour: self.use_hour, noise: self.noise }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Outputs requested from one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub segmentation: bool,
    pub geo: bool,
    pub time: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Softmax output `[N, C+1, H, W]`.
    pub probs: Option<NodeId>,
    /// Encoder output `[N, C_top, H', W']`.
    pub z: NodeId,
    pub geo: Option<NodeId>,
    pub time: Option<NodeId>,
}

/// Architecture description; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub net: SegNetConfig,
    pub geo: Option<GeoHeadConfig>,
    pub time: Option<TimeHeadConfig>,
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        self.store.params.insert(name, Tensor::from_vec(shape, data).unwrap());
    }

    fn zeros(&mut self, name: String, len: usize) {
        self.store.params.insert(name, Tensor::zeros(&[len]));
    }

    fn batch_norm(&mut self, prefix: &str, channels: usize) {
        self.store.params.insert(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0));
        self.store.params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.store.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
        self.store.buffers.insert(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0));
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.kaiming(format!("{prefix}.conv1.weight"), &[cout, cin, 3, 3], cin * 9);
        self.batch_norm(&format!("{prefix}.bn1"), cout);
        self.kaiming(format!("{prefix}.conv2.weight"), &[cout, cout, 3, 3], cout * 9);
        self.batch_norm(&format!("{prefix}.bn2"), cout);
    }

    fn mlp(&mut self, prefix: &str, fin: usize, hidden: &[usize], out: usize) {
        let mut prev = fin;
        for (i, &h) in hidden.iter().enumerate() {
            self.kaiming(format!("{prefix}.fc{i}.weight"), &[prev, h], prev);
            self.batch_norm(&format!("{prefix}.bn{i}"), h);
            prev = h;
        }
        let last = hidden.len();
        self.kaiming(format!("{prefix}.fc{last}.weight"), &[prev, out], prev);
        self.zeros(format!("{prefix}.fc{last}.bias"), out);
    }
}

impl SegModel {
    pub fn new(net: SegNetConfig, geo: Option<GeoHeadConfig>, time: Option<TimeHeadConfig>) -> Result<Self> {
        net.validate()?;
        let model = Self { net, geo, time };
        if let Some(g) = &model.geo {
            if g.pool_output == 0 || g.out_dim == 0 || g.hidden_widths.len() != 4 || g.hidden_widths.contains(&0) {
                return Err(Error::Config(
                    "geo head needs a positive pool size, positive out_dim and exactly 4 hidden widths".into(),
                ));
            }
            model.check_pool(g.feature_source, g.pool_output, model.net.input_size)?;
        }
        if let Some(t) = &model.time {
            t.fields().validate()?;
            if t.pool_output == 0 || t.hidden_width == 0 {
                return Err(Error::Config("time head sizes must be positive".into()));
            }
            model.check_pool(t.feature_source, t.pool_output, model.net.input_size)?;
        }
        Ok(model)
    }

    fn tap_shape(&self, source: FeatureSource, input_size: usize) -> (usize, usize) {
        match source {
            FeatureSource::Encoder => (*self.net.encoder_channels.last().unwrap(), input_size / self.net.reduction()),
            FeatureSource::Decoder => (self.net.encoder_channels[0], input_size),
        }
    }

    fn check_pool(&self, source: FeatureSource, pool: usize, input_size: usize) -> Result<()> {
        let (_, side) = self.tap_shape(source, input_size);
        if side < pool || side % pool != 0 {
            return Err(Error::Config(format!(
                "head pooling to {pool}x{pool} needs a tap side divisible by it, got {side}"
            )));
        }
        Ok(())
    }

    pub fn init(&self, rng: &mut Rng) -> ParamStore {
        let mut init = Init { store: ParamStore::default(), rng };
        let widths = &self.net.encoder_channels;
        let mut cin = self.net.in_bands;
        for (s, &w) in widths.iter().enumerate() {
            init.conv_bn(&format!("enc.{s}"), cin, w);
            cin = w;
        }
        for s in (0..widths.len()).rev() {
            let w = widths[s];
            init.kaiming(format!("dec.{s}.up.weight"), &[cin, w, 2, 2], cin);
            init.zeros(format!("dec.{s}.up.bias"), w);
            init.conv_bn(&format!("dec.{s}"), 2 * w, w);
            cin = w;
        }
        init.kaiming("out.weight".into(), &[self.net.num_classes, widths[0], 1, 1], widths[0]);
        init.zeros("out.bias".into(), self.net.num_classes);
        if let Some(g) = &self.geo {
            let (c, _) = self.tap_shape(g.feature_source, self.net.input_size);
            init.mlp("geo", c * g.pool_output * g.pool_output, &g.hidden_widths, g.out_dim);
        }
        if let Some(t) = &self.time {
            let (c, _) = self.tap_shape(t.feature_source, self.net.input_size);
            let fin = c * t.pool_output * t.pool_output;
            init.mlp("time", fin, &[t.hidden_width], t.fields().encoded_len());
        }
        init.store
    }

    /// Trainable parameter count without materializing weights.
    pub fn param_count(&self) -> usize {
        let widths = &self.net.encoder_channels;
        let conv_bn = |cin: usize, cout: usize| cout * cin * 9 + cout * cout * 9 + 4 * cout;
        let mlp = |fin: usize, hidden: &[usize], out: usize| {
            let mut prev = fin;
            let mut n = 0;
            for &h in hidden {
                n += prev * h + 2 * h;
                prev = h;
            }
            n + prev * out + out
        };
        let mut n = 0;
        let mut cin = self.net.in_bands;
        for &w in widths {
            n += conv_bn(cin, w);
            cin = w;
        }
        for &w in widths.iter().rev() {
            n += cin * w * 4 + w + conv_bn(2 * w, w);
            cin = w;
        }
        n += self.net.num_classes * widths[0] + self.net.num_classes;
        if let Some(g) = &self.geo {
            let (c, _) = self.tap_shape(g.feature_source, self.net.input_size);
            n += mlp(c * g.pool_output * g.pool_output, &g.hidden_widths, g.out_dim);
        }
        if let Some(t) = &self.time {
            let (c, _) = self.tap_shape(t.feature_source, self.net.input_size);
            n += mlp(c * t.pool_output * t.pool_output, &[t.hidden_width], t.fields().encoded_len());
        }
        n
    }

    fn bn(&self, g: &mut Graph, p: &ParamStore, x: NodeId, prefix: &str, mode: Mode) -> Result<NodeId> {
        let gamma = g.param(p, &format!("{prefix}.gamma"))?;
        let beta = g.param(p, &format!("{prefix}.beta"))?;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: p.buffer(&format!("{prefix}.running_mean"))?.data().to_vec(),
                var: p.buffer(&format!("{prefix}.running_var"))?.data().to_vec(),
            },
        };
        g.batch_norm(x, gamma, beta, bn_mode, prefix)
    }

    fn conv_block(&self, g: &mut Graph, p: &ParamStore, x: NodeId, prefix: &str, mode: Mode) -> Result<NodeId> {
        let mut h = x;
        for i in 1..=2 {
            let w = g.param(p, &format!("{prefix}.conv{i}.weight"))?;
            h = g.conv2d(h, w, None)?;
            h = self.bn(g, p, h, &format!("{prefix}.bn{i}"), mode)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    fn head(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        tap: NodeId,
        prefix: &str,
        pool_output: usize,
        layers: usize,
        mode: Mode,
    ) -> Result<NodeId> {
        let side = g.value(tap).shape()[2];
        if side < pool_output || side % pool_output != 0 {
            return Err(Error::Shape(format!(
                "{prefix} head cannot pool a {side}x{side} map to {pool_output}x{pool_output}"
            )));
        }
        let pooled = g.max_pool(tap, side / pool_output)?;
        let mut h = g.flatten(pooled);
        for i in 0..layers - 1 {
            let w = g.param(p, &format!("{prefix}.fc{i}.weight"))?;
            h = g.linear(h, w, None)?;
            h = self.bn(g, p, h, &format!("{prefix}.bn{i}"), mode)?;
            h = g.relu(h);
        }
        let last = layers - 1;
        let w = g.param(p, &format!("{prefix}.fc{last}.weight"))?;
        let b = g.param(p, &format!("{prefix}.fc{last}.bias"))?;
        g.linear(h, w, Some(b))
    }

    /// Builds the requested outputs for a `[N, B, H, W]` batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        images: Tensor,
        mode: Mode,
        heads: Heads,
    ) -> Result<Forward> {
        let shape = images.shape().to_vec();
        let red = self.net.reduction();
        if shape.len() != 4 || shape[1] != self.net.in_bands || shape[2] != shape[3] || shape[2] % red != 0 || shape[2] == 0 {
            return Err(Error::Shape(format!(
                "expected [N, {}, S, S] with S a multiple of {red}, got {shape:?}",
                self.net.in_bands
            )));
        }
        let heads = Heads {
            geo: heads.geo && self.geo.is_some(),
            time: heads.time && self.time.is_some(),
            ..heads
        };
        let needs_decoder = heads.segmentation
            || (heads.geo && self.geo.as_ref().is_some_and(|c| c.feature_source == FeatureSource::Decoder))
            || (heads.time && self.time.as_ref().is_some_and(|c| c.feature_source == FeatureSource::Decoder));

        let x = g.constant(images);
        let mut skips = Vec::with_capacity(self.net.stages());
        let mut h = x;
        for s in 0..self.net.stages() {
            h = self.conv_block(g, p, h, &format!("enc.{s}"), mode)?;
            skips.push(h);
            h = g.max_pool(h, 2)?;
        }
        let z = h;

        let mut probs = None;
        let mut decoded = None;
        if needs_decoder {
            let mut d = z;
            for s in (0..self.net.stages()).rev() {
                let w = g.param(p, &format!("dec.{s}.up.weight"))?;
                let b = g.param(p, &format!("dec.{s}.up.bias"))?;
                let up = g.conv_transpose2x2(d, w, b)?;
                let cat = g.concat(up, skips[s])?;
                d = self.conv_block(g, p, cat, &format!("dec.{s}"), mode)?;
            }
            decoded = Some(d);
            if heads.segmentation {
                let w = g.param(p, "out.weight")?;
                let b = g.param(p, "out.bias")?;
                let logits = g.conv2d(d, w, Some(b))?;
                probs = Some(g.softmax(logits));
            }
        }
        let tap = |source: FeatureSource| match source {
            FeatureSource::Encoder => z,
            FeatureSource::Decoder => decoded.expect("decoder built for decoder tap"),
        };
        let geo = match (&self.geo, heads.geo) {
            (Some(c), true) => Some(self.head(g, p, tap(c.feature_source), "geo", c.pool_output, c.hidden_widths.len() + 1, mode)?),
            _ => None,
        };
        let time = match (&self.time, heads.time) {
            (Some(c), true) => Some(self.head(g, p, tap(c.feature_source), "time", c.pool_output, 2, mode)?),
            _ => None,
        };
        Ok(Forward { probs, z, geo, time })
    }

    /// Encoder features in evaluation mode.
    pub fn encode(&self, p: &ParamStore, images: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, p, images, Mode::Eval, Heads { segmentation: false, geo: false, time: false })?;
        Ok(g.value(f.z).clone())
    }

    /// Per-pixel class probabilities in evaluation mode.
    pub fn predict_probs(&self, p: &ParamStore, images: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, p, images, Mode::Eval, Heads { segmentation: true, geo: false, time: false })?;
        Ok(g.value(f.probs.expect("segmentation requested")).clone())
    }

    /// Predicted coordinate encoding in evaluation mode, `[N, out_dim]`.
    pub fn predict_location(&self, p: &ParamStore, images: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, p, images, Mode::Eval, Heads { segmentation: false, geo: true, time: false })?;
        f.geo.map(|id| g.value(id).clone()).ok_or_else(|| Error::Config("model has no geo head".into()))
    }

    /// Predicted time encoding in evaluation mode.
    pub fn predict_time(&self, p: &ParamStore, images: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, p, images, Mode::Eval, Heads { segmentation: false, geo: false, time: true })?;
        f.time.map(|id| g.value(id).clone()).ok_or_else(|| Error::Config("model has no time head".into()))
    }
}

/// Folds training-mode batch statistics into the running estimates.
pub fn apply_bn_stats(params: &mut ParamStore, stats: &[BnStats]) -> Result<()> {
    for s in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let key = format!("{}.{suffix}", s.key);
            let buf = params
                .buffers
                .get_mut(&key)
                .ok_or_else(|| Error::InvalidInput(format!("unknown buffer `{key}`")))?;
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

/// Argmax over channels of a `[N, C, H, W]` probability tensor, as `[N][H*W]`.
pub fn argmax_classes(probs: &Tensor) -> Vec<Vec<u8>> {
    let (n, c, s) = probs.ncs();
    let d = probs.data();
    (0..n)
        .map(|i| {
            (0..s)
                .map(|q| {
                    let mut best = 0;
                    for ch in 1..c {
                        if d[(i * c + ch) * s + q] > d[(i * c + best) * s + q] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}
