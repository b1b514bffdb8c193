//! Confusion matrices and intersection-over-union.

use std::fmt::Write as _;

use crate::class_balance::LabelMap;
use crate::error::{Error, Result};

/// Square count matrix, rows = reference class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(size: usize) -> Self {
        Self { size, counts: vec![0; size * size] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Shape("confusion matrix rows must be square".into()));
        }
        Ok(Self { size, counts: rows.concat() })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.size + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose reference is not `ignore_index`. Predictions or
    /// references outside the matrix are rejected.
    pub fn accumulate(&mut self, pred: &LabelMap, reference: &LabelMap, ignore_index: Option<usize>) -> Result<()> {
        if pred.height != reference.height || pred.width != reference.width {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs reference {}x{}",
                pred.height, pred.width, reference.height, reference.width
            )));
        }
        for (&p, &r) in pred.data.iter().zip(&reference.data) {
            let (p, r) = (p as usize, r as usize);
            if Some(r) == ignore_index {
                continue;
            }
            if p >= self.size || r >= self.size {
                return Err(Error::InvalidInput(format!(
                    "class pair ({r}, {p}) outside a {n}x{n} matrix",
                    n = self.size
                )));
            }
            self.counts[r * self.size + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            return Err(Error::Shape("cannot merge matrices of different size".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// IoU per class, skipping `ignore_index`. Classes with an empty union are
    /// reported as `None` and left out of the mean.
    pub fn iou(&self, ignore_index: Option<usize>) -> IouReport {
        let mut per_class = Vec::new();
        for c in 0..self.size {
            if Some(c) == ignore_index {
                continue;
            }
            let tp = self.get(c, c);
            let fp: u64 = (0..self.size).filter(|&r| r != c && Some(r) != ignore_index).map(|r| self.get(r, c)).sum();
            let fn_: u64 = (0..self.size).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
            let denom = tp + fp + fn_;
            per_class.push(if denom == 0 { None } else { Some(tp as f64 / denom as f64) });
        }
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
        IouReport { per_class, miou, empty: self.total() == 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` marks a class absent from both prediction and reference.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// No pixel was counted.
    pub empty: bool,
}

impl IouReport {
    pub fn excluded(&self) -> Vec<usize> {
        self.per_class.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect()
    }

    /// CSV with one `class,iou` row per class and a final `miou` row.
    /// Excluded classes have an empty IoU cell.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,iou\n");
        for (i, v) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class_{i}"));
            match v {
                Some(x) => writeln!(out, "{name},{x:.6}").unwrap(),
                None => writeln!(out, "{name},").unwrap(),
            }
        }
        writeln!(out, "miou,{:.6}", self.miou).unwrap();
        out
    }
}
