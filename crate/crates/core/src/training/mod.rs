//! The adaptation loop: batches from a labeled source and an unlabeled
//! target, the summed objective, optimizer steps, early stopping and
//! evaluation.

pub mod ablate;
pub mod checkpoint;
pub mod evaluate;
pub mod fit;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::class_balance::{DcsConfig, DcsState, LabelMap};
use crate::data::{stack_images, Patch};
use crate::error::{Error, Result};
use crate::geo_encoding::{circle_encode_time, encode_supervision, EncodedLocation, EncodedTime, EncodingConfig};
use crate::network::{apply_bn_stats, GeoHeadConfig, Graph, Heads, Mode, NodeId, ParamStore, SegModel, SegNetConfig, Tensor, TimeHeadConfig};
use crate::rng::Rng;

pub use checkpoint::Checkpoint;
pub use evaluate::{evaluate, evaluate_patches, load_eval_labels, EvalReport};
pub use fit::{fit, fit_dataset, EarlyStopper, EpochRecord, FitOutcome, History};
pub use optim::Adam;

/// Which parts of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub geo_mt: bool,
    pub dcs: bool,
    pub time_mt: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self { geo_mt: true, dcs: true, time_mt: false }
    }
}

impl Components {
    pub const BASELINE: Self = Self { geo_mt: false, dcs: false, time_mt: false };
    pub const FULL: Self = Self { geo_mt: true, dcs: true, time_mt: false };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    /// Share of source patches held out for early stopping.
    pub val_fraction: f64,
    /// Random flips and quarter turns on training crops.
    pub augment: bool,
    pub components: Components,
    /// Training crops are `model.input_size` pixels wide.
    pub model: SegNetConfig,
    pub dcs: DcsConfig,
    pub encoding: EncodingConfig,
    pub geo_head: GeoHeadConfig,
    pub time_head: TimeHeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 120,
            learning_rate: 1e-4,
            patience: 30,
            seed: 0,
            val_fraction: 0.1,
            augment: true,
            components: Components::default(),
            model: SegNetConfig::default(),
            dcs: DcsConfig::default(),
            encoding: EncodingConfig::default(),
            geo_head: GeoHeadConfig::default(),
            time_head: TimeHeadConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Sets the class count everywhere it appears.
    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.model.num_classes = num_classes + 1;
        self.dcs.num_classes = num_classes;
        self.dcs.ignore_index = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2 (batch norm needs a batch)".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "train.patience {} exceeds train.max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("train.val_fraction must lie in [0, 1)".into()));
        }
        self.dcs.validate()?;
        self.encoding.validate()?;
        if self.model.num_classes != self.dcs.num_classes + 1 {
            return Err(Error::Config(format!(
                "train.model.num_classes ({}) must be train.dcs.num_classes ({}) plus one for \"other\"",
                self.model.num_classes, self.dcs.num_classes
            )));
        }
        if self.components.geo_mt && self.geo_head.out_dim != self.encoding.dim {
            return Err(Error::Config(format!(
                "train.geo_head.out_dim ({}) must equal train.encoding.dim ({})",
                self.geo_head.out_dim, self.encoding.dim
            )));
        }
        self.model()?;
        Ok(())
    }

    /// The architecture implied by the enabled components.
    pub fn model(&self) -> Result<SegModel> {
        SegModel::new(
            self.model.clone(),
            self.components.geo_mt.then(|| self.geo_head.clone()),
            self.components.time_mt.then(|| self.time_head.clone()),
        )
    }

    fn heads(&self) -> Heads {
        Heads { segmentation: true, geo: self.components.geo_mt, time: self.components.time_mt }
    }
}

/// One optimization step's inputs. Target samples never carry labels.
#[derive(Debug, Clone)]
pub struct UdaBatch {
    pub source_images: Tensor,
    pub source_labels: Vec<LabelMap>,
    /// Empty when the geo head is disabled.
    pub source_coords: Vec<EncodedLocation>,
    /// Empty when the time head is disabled.
    pub source_times: Vec<EncodedTime>,
    /// Present when an auxiliary head needs target features.
    pub target_images: Option<Tensor>,
    pub target_coords: Vec<EncodedLocation>,
    pub target_times: Vec<EncodedTime>,
}

impl UdaBatch {
    /// Builds supervision targets with fresh noise drawn from `rng`.
    pub fn build(source: &[Patch], target: &[Patch], cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.components;
        let mut source_labels = Vec::with_capacity(source.len());
        for p in source {
            let label = p
                .label
                .clone()
                .ok_or_else(|| Error::InvalidInput(format!("source patch `{}` has no label", p.meta.patch_id)))?;
            source_labels.push(label);
        }
        let encode = |patches: &[Patch], rng: &mut Rng| -> Result<(Vec<EncodedLocation>, Vec<EncodedTime>)> {
            let mut coords = Vec::new();
            let mut times = Vec::new();
            for p in patches {
                if c.geo_mt {
                    coords.push(encode_supervision(p.meta.centroid(), &cfg.encoding, rng)?);
                }
                if c.time_mt {
                    times.push(circle_encode_time(p.meta.timestamp(), cfg.time_head.fields(), rng)?);
                }
            }
            Ok((coords, times))
        };
        let (source_coords, source_times) = encode(source, rng)?;
        let aux = c.geo_mt || c.time_mt;
        let (target_coords, target_times) = if aux { encode(target, rng)? } else { (Vec::new(), Vec::new()) };
        let target_images = if aux { Some(stack_images(target.iter().map(|p| &p.image))?) } else { None };
        Ok(Self {
            source_images: stack_images(source.iter().map(|p| &p.image))?,
            source_labels,
            source_coords,
            source_times,
            target_images,
            target_coords,
            target_times,
        })
    }
}

/// Per-step decomposition of the objective. Disabled terms are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_coord_source: f64,
    pub l_coord_target: f64,
    pub l_time_source: f64,
    pub l_time_target: f64,
    pub total: f64,
}

impl LossReport {
    pub const TERMS: [&'static str; 5] = ["l_seg", "l_coord_source", "l_coord_target", "l_time_source", "l_time_target"];

    pub fn terms(&self) -> [f64; 5] {
        [self.l_seg, self.l_coord_source, self.l_coord_target, self.l_time_source, self.l_time_target]
    }
}

/// Mean squared error over all samples and vector components.
pub fn coord_loss(pred: &[EncodedLocation], target: &[EncodedLocation]) -> Result<f64> {
    if pred.len() != target.len() || pred.iter().zip(target).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("coordinate loss needs matching batches".into()));
    }
    let n: usize = pred.iter().map(EncodedLocation::len).sum();
    if n == 0 {
        return Ok(0.0);
    }
    let sq: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(a, b)| a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(sq / n as f64)
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    pub dcs: DcsState,
}

impl TrainState {
    pub fn init(model: &SegModel, cfg: &TrainConfig) -> Self {
        let mut rng = crate::rng::seeded(cfg.seed, crate::rng::stream::INIT);
        Self { params: model.init(&mut rng), adam: Adam::new(), dcs: DcsState::new(cfg.dcs.num_classes) }
    }
}

fn flat<T>(items: &[T], f: impl Fn(&T) -> &[f64]) -> Vec<f64> {
    items.iter().flat_map(|x| f(x).iter().copied()).collect()
}

/// Forward on source and target, one Adam step on the summed loss.
///
/// With DCS enabled the class weights absorb every source label of the batch,
/// in order, before the loss is formed.
pub fn train_step(model: &SegModel, state: &mut TrainState, batch: &UdaBatch, cfg: &TrainConfig) -> Result<LossReport> {
    let c = cfg.components;
    let n = batch.source_labels.len();
    let weights = if c.dcs {
        for label in &batch.source_labels {
            state.dcs.observe(label, &cfg.dcs)?;
        }
        state.dcs.weights.clone()
    } else {
        vec![1.0; cfg.dcs.num_classes]
    };
    let mut pixels = Vec::with_capacity(n * batch.source_labels.first().map_or(0, |l| l.data.len()));
    for label in &batch.source_labels {
        pixels.extend(label.data.iter().map(|&l| (!cfg.dcs.is_ignored(l)).then(|| (l as usize, weights[l as usize]))));
    }

    let mut g = Graph::new();
    let src = model.forward(&mut g, &state.params, batch.source_images.clone(), Mode::Train, cfg.heads())?;
    let l_seg = g.weighted_nll(src.probs.expect("segmentation head requested"), pixels)?;
    let mut terms: Vec<(usize, NodeId)> = vec![(0, l_seg)];
    if let Some(geo) = src.geo {
        terms.push((1, g.mse(geo, &flat(&batch.source_coords, EncodedLocation::as_slice))?));
    }
    if let Some(time) = src.time {
        terms.push((3, g.mse(time, &flat(&batch.source_times, |t| &t.0))?));
    }
    if let Some(images) = &batch.target_images {
        let heads = Heads { segmentation: false, ..cfg.heads() };
        let tgt = model.forward(&mut g, &state.params, images.clone(), Mode::Train, heads)?;
        if let Some(geo) = tgt.geo {
            terms.push((2, g.mse(geo, &flat(&batch.target_coords, EncodedLocation::as_slice))?));
        }
        if let Some(time) = tgt.time {
            terms.push((4, g.mse(time, &flat(&batch.target_times, |t| &t.0))?));
        }
    }

    let mut values = [0.0; 5];
    for &(slot, id) in &terms {
        let v = g.value(id).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{} is {v}", LossReport::TERMS[slot])));
        }
        values[slot] = v;
    }
    let ids: Vec<NodeId> = terms.iter().map(|&(_, id)| id).collect();
    let total = g.sum(&ids)?;
    let grads = g.backward(total)?;
    state.adam.apply(&mut state.params, grads.params(), cfg.learning_rate)?;
    apply_bn_stats(&mut state.params, g.bn_stats())?;
    Ok(LossReport {
        l_seg: values[0],
        l_coord_source: values[1],
        l_coord_target: values[2],
        l_time_source: values[3],
        l_time_target: values[4],
        total: g.value(total).item(),
    })
}
