use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::{evaluate_patches, train_step, Checkpoint, LossReport, TrainConfig, TrainState, UdaBatch};
use crate::class_balance::LabelMap;
use crate::data::{augment, random_crop, Dataset, Patch};
use crate::error::{Error, Result};
use crate::rng::{child, seeded, stream, Rng};

/// Stops once `patience` consecutive epochs fail to beat the best score.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    best: Option<f64>,
    wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, wait: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Higher scores are better; the first score always counts as an improvement.
    pub fn observe(&mut self, score: f64) -> StopDecision {
        if self.best.map_or(true, |b| score > b) {
            self.best = Some(score);
            self.wait = 0;
            return StopDecision { improved: true, stop: false };
        }
        self.wait += 1;
        StopDecision { improved: false, stop: self.wait >= self.patience }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub loss: LossReport,
    pub val_miou: f64,
    pub improved: bool,
    /// DCS weights at the end of the epoch.
    pub dcs_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History(pub Vec<EpochRecord>);

impl History {
    pub fn to_csv(&self) -> String {
        let classes = self.0.first().map_or(0, |r| r.dcs_weights.len());
        let mut out = String::from("epoch,steps");
        for t in LossReport::TERMS {
            write!(out, ",{t}").unwrap();
        }
        out.push_str(",total,val_miou,improved");
        for c in 0..classes {
            write!(out, ",dcs_{c}").unwrap();
        }
        out.push('\n');
        for r in &self.0 {
            write!(out, "{},{}", r.epoch, r.steps).unwrap();
            for v in r.loss.terms() {
                write!(out, ",{v}").unwrap();
            }
            write!(out, ",{},{},{}", r.loss.total, r.val_miou, r.improved as u8).unwrap();
            for w in &r.dcs_weights {
                write!(out, ",{w}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Snapshot at the epoch with the best validation score.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: History,
    pub stopped_early: bool,
}

impl FitOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.0.len()
    }
}

/// Splits source indices into (train, validation).
fn split(n: usize, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(cfg.seed, stream::SPLIT));
    let mut n_val = (cfg.val_fraction * n as f64).round() as usize;
    if cfg.val_fraction > 0.0 && n >= 4 {
        n_val = n_val.max(1);
    }
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

/// Chunks of `size`, folding a trailing singleton into the previous chunk.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn prepare(p: &Patch, cfg: &TrainConfig, rng: &mut Rng) -> Result<Patch> {
    let crop = random_crop(p, cfg.model.input_size, rng)?;
    if cfg.augment {
        augment(&crop, rng)
    } else {
        Ok(crop)
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.l_seg += r.l_seg;
        m.l_coord_source += r.l_coord_source;
        m.l_coord_target += r.l_coord_target;
        m.l_time_source += r.l_time_source;
        m.l_time_target += r.l_time_target;
        m.total += r.total;
    }
    LossReport {
        l_seg: m.l_seg / n,
        l_coord_source: m.l_coord_source / n,
        l_coord_target: m.l_coord_target / n,
        l_time_source: m.l_time_source / n,
        l_time_target: m.l_time_target / n,
        total: m.total / n,
    }
}

/// Trains on labeled `source` and unlabeled `target` patches.
///
/// A seeded share of the source is held out; its mIoU drives early stopping.
/// Every random stream is derived from the seed and the epoch index.
pub fn fit(
    cfg: &TrainConfig,
    source: &[Patch],
    target: &[Patch],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let model = cfg.model()?;
    if target.iter().any(|p| p.label.is_some()) {
        return Err(Error::InvalidInput("target patches must not carry labels".into()));
    }
    let (train_idx, val_idx) = split(source.len(), cfg);
    if train_idx.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 training patches, have {}", train_idx.len())));
    }
    let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx };
    let val: Vec<Patch> = val_idx.iter().map(|&i| source[i].clone()).collect();
    let val_labels: Vec<LabelMap> = val
        .iter()
        .map(|p| p.label.clone().ok_or_else(|| Error::InvalidInput(format!("source patch `{}` has no label", p.meta.patch_id))))
        .collect::<Result<_>>()?;

    let mut state = TrainState::init(&model, cfg);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = History::default();
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;
    let mut target_pos = 0usize;
    let mut target_order: Vec<usize> = Vec::new();
    let mut target_round = 0u64;

    for epoch in 0..cfg.max_epochs {
        let e = epoch as u64;
        let mut order = train_idx.clone();
        order.shuffle(&mut child(cfg.seed, stream::SHUFFLE, e));
        let mut aug_rng = child(cfg.seed, stream::AUGMENT, e);
        let mut noise_rng = child(cfg.seed, stream::NOISE, e);
        let mut reports = Vec::new();
        for batch in batches(&order, cfg.batch_size) {
            let src: Vec<Patch> = batch.iter().map(|&i| prepare(&source[i], cfg, &mut aug_rng)).collect::<Result<_>>()?;
            let mut tgt = Vec::new();
            if !target.is_empty() && (cfg.components.geo_mt || cfg.components.time_mt) {
                for _ in 0..batch.len() {
                    if target_pos == target_order.len() {
                        target_order = (0..target.len()).collect();
                        target_order.shuffle(&mut child(cfg.seed, stream::SHUFFLE, (1 << 32) + target_round));
                        target_round += 1;
                        target_pos = 0;
                    }
                    tgt.push(prepare(&target[target_order[target_pos]], cfg, &mut aug_rng)?);
                    target_pos += 1;
                }
            }
            let uda = UdaBatch::build(&src, &tgt, cfg, &mut noise_rng)?;
            let report = train_step(&model, &mut state, &uda, cfg)
                .map_err(|err| match err {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {}, step {}: {m}", epoch + 1, reports.len() + 1)),
                    other => other,
                })?;
            reports.push(report);
        }
        let val_miou = evaluate_patches(&model, &state.params, &val, &val_labels)?.iou.miou;
        let decision = stopper.observe(val_miou);
        let snapshot = || Checkpoint { config: cfg.clone(), epoch: epoch + 1, best_score: stopper.best().unwrap_or(val_miou), state: state.clone() };
        if decision.improved {
            best = Some(snapshot());
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: reports.len(),
            loss: mean_report(&reports),
            val_miou,
            improved: decision.improved,
            dcs_weights: state.dcs.weights.clone(),
        };
        on_epoch(&record);
        history.0.push(record);
        if decision.stop {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    let last = Checkpoint {
        config: cfg.clone(),
        epoch: history.0.len(),
        best_score: stopper.best().unwrap_or(0.0),
        state,
    };
    Ok(FitOutcome { best: best.expect("at least one epoch ran"), last, history, stopped_early })
}

/// [`fit`] on every labeled domain as source and every unlabeled one as
/// target. Held-out target labels are never opened.
pub fn fit_dataset(cfg: &TrainConfig, dataset: &Dataset, on_epoch: impl FnMut(&EpochRecord)) -> Result<FitOutcome> {
    let mut source = Vec::new();
    for d in dataset.labeled_domains() {
        source.extend(dataset.load_domain(&d)?);
    }
    let mut target = Vec::new();
    for d in dataset.unlabeled_domains() {
        target.extend(dataset.load_domain(&d)?);
    }
    if source.is_empty() {
        return Err(Error::dataset(&dataset.root, "no labeled source domain"));
    }
    fit(cfg, &source, &target, on_epoch)
}
