use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use geomt::data::synthetic::{synthesize, Role};
use geomt::data::{generate_synthetic, load_dataset, LoadOptions, Patch, SyntheticConfig, EVAL_LABELS_DIR};
use geomt::data::format::read_label;

fn small(seed: u64) -> SyntheticConfig {
    SyntheticConfig { patches_per_domain: 4, image_size: 32, seed, ..Default::default() }
}

fn options(cfg: &SyntheticConfig) -> LoadOptions {
    LoadOptions { num_classes: cfg.num_classes, ..Default::default() }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generated_dataset_loads_back() {
    let cfg = small(3);
    let dir = tempfile::tempdir().unwrap();
    let summary = generate_synthetic(&cfg, dir.path()).unwrap();
    assert_eq!(summary.patches, 16);
    let ds = load_dataset(dir.path(), options(&cfg)).unwrap();
    assert_eq!(ds.labeled_domains(), ["D001", "D002", "D003"]);
    assert_eq!(ds.unlabeled_domains(), ["D101"]);
    assert_eq!(ds.len(), 16);

    let memory = synthesize(&cfg).unwrap();
    for (spec, patches) in &memory {
        let loaded = ds.load_domain(&spec.name).unwrap();
        assert_eq!(loaded.len(), patches.len());
        for (a, b) in patches.iter().zip(&loaded) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.meta, b.meta);
            match spec.role {
                Role::Source => assert_eq!(a.label, b.label),
                Role::Target => {
                    assert!(b.label.is_none(), "target labels must stay hidden");
                    let held = read_label(&dir.path().join(EVAL_LABELS_DIR).join(format!("{}.bin", a.meta.patch_id)));
                    assert_eq!(Some(held.unwrap()), a.label);
                }
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&small(11), a.path()).unwrap();
    generate_synthetic(&small(11), b.path()).unwrap();
    generate_synthetic(&small(12), c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn class_fractions_match_configuration() {
    let cfg = SyntheticConfig { patches_per_domain: 6, ..Default::default() };
    let want = cfg.fractions();
    for (_, patches) in synthesize(&cfg).unwrap() {
        for p in &patches {
            let label = p.label.as_ref().unwrap();
            let mut counts = vec![0usize; want.len()];
            for &l in &label.data {
                counts[l as usize] += 1;
            }
            for (c, (&n, &f)) in counts.iter().zip(&want).enumerate() {
                let got = n as f64 / label.data.len() as f64;
                assert!((got - f).abs() <= 0.02, "{} class {c}: {got} vs {f}", p.meta.patch_id);
            }
        }
    }
}

fn band_means(patches: &[Patch], band: usize) -> Vec<f64> {
    patches
        .iter()
        .map(|p| {
            let n = p.image.height * p.image.width;
            (0..n).map(|i| p.image.data[i * p.image.bands + band] as f64).sum::<f64>() / n as f64
        })
        .collect()
}

fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let moments = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var, n)
    };
    let (ma, va, na) = moments(a);
    let (mb, vb, nb) = moments(b);
    (ma - mb) / (va / na + vb / nb).sqrt()
}

fn split(cfg: &SyntheticConfig) -> (Vec<Patch>, Vec<Patch>) {
    let mut source = Vec::new();
    let mut target = Vec::new();
    for (spec, patches) in synthesize(cfg).unwrap() {
        match spec.role {
            Role::Source => source.extend(patches),
            Role::Target => target.extend(patches),
        }
    }
    (source, target)
}

#[test]
fn without_shift_domains_are_indistinguishable() {
    let cfg = SyntheticConfig { shift_magnitude: 0.0, patches_per_domain: 30, image_size: 32, seed: 5, ..Default::default() };
    let (source, target) = split(&cfg);
    for band in 0..5 {
        let t = welch_t(&band_means(&source, band), &band_means(&target, band));
        assert!(t.abs() < 3.0, "band {band}: t = {t}");
    }
}

#[test]
fn with_shift_some_band_differs() {
    let cfg = SyntheticConfig { patches_per_domain: 30, image_size: 32, seed: 5, ..Default::default() };
    let (source, target) = split(&cfg);
    let worst = (0..4)
        .map(|band| welch_t(&band_means(&source, band), &band_means(&target, band)).abs())
        .fold(0.0, f64::max);
    assert!(worst > 3.0, "largest |t| = {worst}");
}
