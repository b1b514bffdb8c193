use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use geomt::config::RunConfig;
use geomt::data::{generate_synthetic, load_dataset, Dataset, LoadOptions, EVAL_LABELS_DIR};
use geomt::geo_encoding::{encode_supervision, EncodingConfig, RawCoordinate};
use geomt::network::SegNetConfig;
use geomt::rng::{seeded, stream};
use geomt::training::ablate::{ablate as run_grid, GridSpec};
use geomt::training::{evaluate, fit_dataset, load_eval_labels, Checkpoint, EvalReport};

use crate::{AblateArgs, EncodeArgs, EvalArgs, Failure, GenDataArgs, ParamsArgs, TrainArgs};

type Outcome = Result<(), Failure>;

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::from(e.into())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Failure::Config(format!("missing {what} path (pass --{what} or set paths.{what})")))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn parse_pair(line: &str) -> Option<(f64, f64)> {
    let mut it = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
    let a = it.next()?.parse().ok()?;
    let b = it.next()?.parse().ok()?;
    it.next().is_none().then_some((a, b))
}

pub fn encode(a: EncodeArgs) -> Outcome {
    let defaults = EncodingConfig::default();
    let (origin_lon_m, origin_lat_m) = a.origin.unwrap_or((defaults.origin_lon_m, defaults.origin_lat_m));
    let cfg = EncodingConfig {
        dim: a.dim,
        base_frequency: a.base_frequency,
        noise_radius_m: a.noise_radius_m,
        origin_lon_m,
        origin_lat_m,
    };
    cfg.validate()?;
    let reader: Box<dyn Read> = if a.input.as_os_str() == "-" {
        Box::new(io::stdin())
    } else {
        Box::new(fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display())).map_err(runtime)?)
    };
    let mut rng = seeded(a.seed, stream::NOISE);
    let mut out = String::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(runtime)?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (lon, lat) = parse_pair(line).ok_or_else(|| runtime(anyhow!("line {}: expected `lon_m lat_m`", n + 1)))?;
        let enc = encode_supervision(RawCoordinate::new(lon, lat), &cfg, &mut rng)?;
        let row: Vec<String> = enc.0.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    match a.output {
        Some(p) => write_text(&p, &out),
        None => io::stdout().write_all(out.as_bytes()).map_err(runtime),
    }
}

pub fn gen_data(a: GenDataArgs) -> Outcome {
    let mut run = load_config(a.config.as_deref())?;
    let s = &mut run.synthetic;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $( if let Some(v) = a.$flag { s.$field = v; } )* };
    }
    set!(seed => seed, source_domains => num_domains_source, target_domains => num_domains_target,
         patches_per_domain => patches_per_domain, image_size => image_size, num_classes => num_classes,
         shift_magnitude => shift_magnitude, other_fraction => other_fraction, box_half_width_m => box_half_width_m,
         region_half_width_m => region_half_width_m, pixel_noise => pixel_noise, geo_informative => geo_informative);
    run.synthetic.validate()?;
    let summary = generate_synthetic(&run.synthetic, &a.out)?;
    run.write_echo(&a.out)?;
    let source = summary.domains.iter().filter(|d| d.role == geomt::data::synthetic::Role::Source).count();
    println!(
        "wrote {} patches in {} domains ({} source, {} target) to {}",
        summary.patches,
        summary.domains.len(),
        source,
        summary.domains.len() - source,
        a.out.display()
    );
    Ok(())
}

fn open_dataset(run: &RunConfig, root: &Path) -> Result<Dataset, Failure> {
    Ok(load_dataset(root, run.load_options())?)
}

pub fn train(a: TrainArgs) -> Outcome {
    let mut run = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        run.set_seed(seed);
    }
    let data = required(a.data, &run.paths.data, "data")?;
    let out = required(a.out, &run.paths.out, "out")?;
    run.paths.data = Some(data.clone());
    run.paths.out = Some(out.clone());
    run.validate()?;
    run.write_echo(&out)?;
    let dataset = open_dataset(&run, &data)?;
    let quiet = a.quiet;
    let outcome = fit_dataset(&run.train, &dataset, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  seg {:.4}  coord_s {:.4}  coord_t {:.4}  total {:.4}  val_miou {:.4}{}",
                r.epoch,
                r.loss.l_seg,
                r.loss.l_coord_source,
                r.loss.l_coord_target,
                r.loss.total,
                r.val_miou,
                if r.improved { "  *" } else { "" }
            );
        }
    })?;
    write_text(&out.join("history.csv"), &outcome.history.to_csv())?;
    outcome.best.save(&out.join("checkpoint.bin"))?;
    outcome.last.save(&out.join("last.bin"))?;
    println!(
        "trained {} epochs{}; best validation mIoU {:.4} at epoch {}",
        outcome.epochs_run(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.best.best_score,
        outcome.best.epoch
    );
    Ok(())
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

pub fn eval(a: EvalArgs) -> Outcome {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let options = LoadOptions {
        bands: checkpoint.config.model.in_bands,
        num_classes: checkpoint.config.dcs.num_classes,
        merge_above: a.merge_labels_above,
    };
    let dataset = load_dataset(&a.data, options)?;
    let labels = a.labels.unwrap_or_else(|| a.data.join(EVAL_LABELS_DIR));
    let report: EvalReport = evaluate(&checkpoint, &dataset, &labels)?;
    let csv = report.iou.to_csv(&class_names(report.iou.per_class.len()));
    match a.out {
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(runtime)?;
            write_text(&dir.join("iou.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    let excluded = report.iou.excluded();
    if !excluded.is_empty() {
        eprintln!("classes absent from prediction and reference (left out of the mean): {excluded:?}");
    }
    println!("mIoU {:.6} over {} patches", report.iou.miou, report.patches);
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Outcome {
    let grid = match (&a.grid, a.preset.as_deref()) {
        (Some(p), _) => GridSpec::load(p)?,
        (None, Some("standard")) => GridSpec::standard(),
        _ => return Err(Failure::Usage("pass --grid <file> or --preset standard".into())),
    };
    if a.print_grid {
        print!("{}", grid.to_toml());
        return Ok(());
    }
    let mut run = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        run.set_seed(seed);
    }
    if let Some(e) = a.epochs {
        run.train.max_epochs = e;
        run.train.patience = run.train.patience.min(e);
    }
    let data = required(a.data, &run.paths.data, "data")?;
    let out = required(a.out, &run.paths.out, "out")?;
    run.paths.data = Some(data.clone());
    run.paths.out = Some(out.clone());
    run.validate()?;
    run.write_echo(&out)?;
    write_text(&out.join("grid.toml"), &grid.to_toml())?;

    let dataset = open_dataset(&run, &data)?;
    let load = |names: Vec<String>| -> Result<Vec<_>, Failure> {
        let mut v = Vec::new();
        for d in names {
            v.extend(dataset.load_domain(&d)?);
        }
        Ok(v)
    };
    let source = load(dataset.labeled_domains())?;
    let target = load(dataset.unlabeled_domains())?;
    let labels_dir = run.paths.labels.clone().unwrap_or_else(|| data.join(EVAL_LABELS_DIR));
    let ids: Vec<String> = target.iter().map(|p| p.meta.patch_id.clone()).collect();
    let labels = load_eval_labels(&dataset, &labels_dir, &ids)?;
    let results = run_grid(&grid, &run.train, &source, &target, &labels, Some(&out), |r| {
        match r.miou {
            Some(m) => eprintln!("cell {:<24} mIoU {m:.4}  epochs {}", r.id, r.epochs_run.unwrap_or(0)),
            None => eprintln!("cell {:<24} {}", r.id, r.status),
        }
    })?;
    let failed = results.iter().filter(|r| r.status != "ok").count();
    println!("{} cells, {} failed; results in {}", results.len(), failed, out.join("results.csv").display());
    Ok(())
}

pub fn params(a: ParamsArgs) -> Outcome {
    let mut run = load_config(a.config.as_deref())?;
    if a.full_scale {
        run.train.model = SegNetConfig { num_classes: run.train.model.num_classes, ..SegNetConfig::full_scale() };
    }
    let model = run.train.model()?;
    let store = model.init(&mut seeded(0, stream::INIT));
    let geo = store.num_trainable_under("geo.");
    let time = store.num_trainable_under("time.");
    let total = store.num_trainable();
    println!("segmentation {}", total - geo - time);
    println!("geo_head {geo}");
    println!("time_head {time}");
    println!("total {total}");
    Ok(())
}
