//! Grids of training runs that differ by configuration deltas.
//!
//! A grid file holds an optional `[base]` table applied to every cell and a
//! list of `[[cells]]`, each with an `id` and a `set` table. Both tables use
//! the key layout of the `[train]` section of a run configuration:
//!
//! ```toml
//! [base]
//! max_epochs = 5
//!
//! [[cells]]
//! id = "no-noise"
//! set = { encoding = { noise_radius_m = 0.0 } }
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_patches, fit, TrainConfig};
use crate::class_balance::LabelMap;
use crate::config::with_overrides;
use crate::data::Patch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub id: String,
    #[serde(default)]
    pub set: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub base: toml::Table,
    pub cells: Vec<GridCell>,
}

fn table(text: &str) -> toml::Table {
    toml::from_str(text).expect("static grid fragment")
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: GridSpec = toml::from_str(text).map_err(|e| Error::Config(format!("grid: {}", e.message())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cells {
            if c.id.is_empty() || c.id.contains(['/', '\\', ',']) {
                return Err(Error::Config(format!("grid: invalid cell id `{}`", c.id)));
            }
            if !seen.insert(&c.id) {
                return Err(Error::Config(format!("grid: duplicate cell id `{}`", c.id)));
            }
        }
        Ok(())
    }

    /// Resolved configuration of one cell.
    pub fn cell_config(&self, base: &TrainConfig, cell: &GridCell) -> Result<TrainConfig> {
        let with_base = with_overrides(base, &self.base)?;
        let cfg = with_overrides(&with_base, &cell.set).map_err(|e| Error::Config(format!("cell `{}`: {e}", cell.id)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Location-noise x frequency, feature tap, time variants and component
    /// rows: fifteen cells in total.
    pub fn standard() -> Self {
        let mut cells = Vec::new();
        let no_time = "[components]\ntime_mt = false\n";
        for noise_km in [0u32, 30, 50] {
            for freq in [10000u32, 20000] {
                cells.push(GridCell {
                    id: format!("noise{noise_km}km-f{freq}"),
                    set: table(&format!(
                        "{no_time}[encoding]\nnoise_radius_m = {}.0\nbase_frequency = {freq}.0\n",
                        noise_km * 1000
                    )),
                });
            }
        }
        for source in ["encoder", "decoder"] {
            cells.push(GridCell {
                id: format!("features-{source}"),
                set: table(&format!("{no_time}[geo_head]\nfeature_source = \"{source}\"\n")),
            });
        }
        cells.push(GridCell { id: "time-none".into(), set: table(no_time) });
        cells.push(GridCell {
            id: "time-both".into(),
            set: table("[components]\ntime_mt = true\n[time_head]\nuse_month = true\nuse_hour = true\nnoise = false\n"),
        });
        cells.push(GridCell {
            id: "time-month-noise".into(),
            set: table("[components]\ntime_mt = true\n[time_head]\nuse_month = true\nuse_hour = false\nnoise = true\n"),
        });
        for (id, geo, dcs) in [("baseline", false, false), ("geomt", true, false), ("dcs", false, true), ("full", true, true)] {
            cells.push(GridCell {
                id: format!("components-{id}"),
                set: table(&format!("[components]\ngeo_mt = {geo}\ndcs = {dcs}\ntime_mt = false\n")),
            });
        }
        Self { base: toml::Table::new(), cells }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub id: String,
    /// Target mIoU of the best checkpoint.
    pub miou: Option<f64>,
    pub val_miou: Option<f64>,
    pub params: Option<usize>,
    pub epochs_run: Option<usize>,
    /// `ok`, or the failure message.
    pub status: String,
}

pub fn results_csv(results: &[CellResult]) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut out = String::from("cell_id,miou,val_miou,params,epochs_run,status\n");
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.id,
            opt(r.miou.map(|v| format!("{v:.6}"))),
            opt(r.val_miou.map(|v| format!("{v:.6}"))),
            opt(r.params.map(|v| v.to_string())),
            opt(r.epochs_run.map(|v| v.to_string())),
            r.status.replace([',', '\n'], ";")
        )
        .unwrap();
    }
    out
}

/// Runs every cell on the same data and seeds. A failing cell is recorded
/// and the grid continues. With `out`, each cell's history goes to
/// `out/cells/<id>/history.csv` and the table to `out/results.csv`.
pub fn ablate(
    grid: &GridSpec,
    base: &TrainConfig,
    source: &[Patch],
    target: &[Patch],
    target_labels: &[LabelMap],
    out: Option<&Path>,
    mut on_cell: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    grid.validate()?;
    let mut results = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let run = || -> Result<CellResult> {
            let cfg = grid.cell_config(base, cell)?;
            let outcome = fit(&cfg, source, target, |_| {})?;
            if let Some(dir) = out {
                let cell_dir = dir.join("cells").join(&cell.id);
                fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
                let path = cell_dir.join("history.csv");
                fs::write(&path, outcome.history.to_csv()).map_err(|e| Error::io(&path, e))?;
            }
            let model = cfg.model()?;
            let report = evaluate_patches(&model, &outcome.best.state.params, target, target_labels)?;
            Ok(CellResult {
                id: cell.id.clone(),
                miou: Some(report.iou.miou),
                val_miou: Some(outcome.best.best_score),
                params: Some(model.param_count()),
                epochs_run: Some(outcome.epochs_run()),
                status: "ok".into(),
            })
        };
        let result = run().unwrap_or_else(|e| CellResult {
            id: cell.id.clone(),
            miou: None,
            val_miou: None,
            params: None,
            epochs_run: None,
            status: format!("failed: {e}"),
        });
        on_cell(&result);
        results.push(result);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("results.csv");
        fs::write(&path, results_csv(&results)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(results)
}
