use std::path::Path;

use super::Checkpoint;
use crate::class_balance::LabelMap;
use crate::data::{format::read_label, four_crop, reassemble_quadrants, stack_images, Dataset, Patch};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::network::{argmax_classes, ParamStore, SegModel};

/// Quadrant images per forward pass.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub iou: IouReport,
    pub patches: usize,
}

/// Predicts each patch as four quadrants, stitches the quadrant predictions
/// back together and scores them against `labels`. The last output class is
/// "other" and is ignored.
pub fn evaluate_patches(model: &SegModel, params: &ParamStore, patches: &[Patch], labels: &[LabelMap]) -> Result<EvalReport> {
    if patches.len() != labels.len() {
        return Err(Error::InvalidInput(format!("{} patches but {} label maps", patches.len(), labels.len())));
    }
    let size = model.net.num_classes;
    let other = size - 1;
    let mut confusion = ConfusionMatrix::new(size);
    let quads: Vec<[Patch; 4]> = patches.iter().map(four_crop).collect::<Result<_>>()?;
    let images: Vec<_> = quads.iter().flat_map(|q| q.iter().map(|p| &p.image)).collect();
    let mut predicted = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let probs = model.predict_probs(params, stack_images(chunk.iter().copied())?)?;
        predicted.extend(argmax_classes(&probs));
    }
    for (i, (q, reference)) in quads.iter().zip(labels).enumerate() {
        let s = q[0].image.height;
        let maps: [LabelMap; 4] = std::array::from_fn(|k| LabelMap { height: s, width: s, data: predicted[4 * i + k].clone() });
        let pred = reassemble_quadrants(&maps)?;
        confusion.accumulate(&pred, reference, Some(other))?;
    }
    let iou = confusion.iou(Some(other));
    Ok(EvalReport { confusion, iou, patches: patches.len() })
}

/// Held-out label maps for `ids`, read from `dir/<id>.bin`.
pub fn load_eval_labels(dataset: &Dataset, dir: &Path, ids: &[String]) -> Result<Vec<LabelMap>> {
    ids.iter()
        .map(|id| {
            let path = dir.join(format!("{id}.bin"));
            if !path.is_file() {
                return Err(Error::dataset(&path, format!("missing evaluation labels for patch `{id}`")));
            }
            dataset.check_label(&path, id, read_label(&path)?)
        })
        .collect()
}

/// Scores a checkpoint on every unlabeled domain of `dataset`.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, labels_dir: &Path) -> Result<EvalReport> {
    let model = checkpoint.config.model()?;
    let mut patches = Vec::new();
    for domain in dataset.unlabeled_domains() {
        patches.extend(dataset.load_domain(&domain)?);
    }
    if patches.is_empty() {
        return Err(Error::dataset(&dataset.root, "no unlabeled domain to evaluate"));
    }
    let ids: Vec<String> = patches.iter().map(|p| p.meta.patch_id.clone()).collect();
    let labels = load_eval_labels(dataset, labels_dir, &ids)?;
    evaluate_patches(&model, &checkpoint.state.params, &patches, &labels)
}
