use std::path::PathBuf;

use ssd_core::adapter::init_params;
use ssd_core::checkpoint::Checkpoint;
use ssd_core::dataio::{generate_synthetic, SynthConfig, BASE_SPLIT, NOVEL_SPLIT};
use ssd_core::metrics::{evaluate, EvalConfig};
use ssd_core::pack::{DescriptionPack, PACK_BLOB, PACK_MANIFEST};
use ssd_core::scoring::{rank_descending, score_category_names, SimilarityConfig};
use ssd_core::trainer::{train, TrainConfig};
use ssd_core::Error;

fn shipped_pack_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/default-pack")
}

fn small_setup() -> (DescriptionPack, ssd_core::dataio::DatasetFixture) {
    let pack = DescriptionPack::default_reconstruction(32, 0).unwrap();
    let cfg = SynthConfig { images: 12, ..SynthConfig::default() };
    (pack.clone(), generate_synthetic(&cfg, &pack).unwrap())
}

#[test]
fn shipped_default_pack_matches_a_fresh_save() {
    let fresh = tempfile::tempdir().unwrap();
    DescriptionPack::default_reconstruction(32, 0).unwrap().save(fresh.path()).unwrap();
    let shipped = shipped_pack_dir();
    if std::env::var_os("SSD_BLESS").is_some() {
        DescriptionPack::default_reconstruction(32, 0).unwrap().save(&shipped).unwrap();
    }
    for name in [PACK_MANIFEST, PACK_BLOB] {
        let a = std::fs::read(fresh.path().join(name)).unwrap();
        let b = std::fs::read(shipped.join(name)).unwrap_or_else(|e| panic!("{name}: {e} (run with SSD_BLESS=1)"));
        assert!(a == b, "{name} differs from a fresh save");
    }
    let loaded = DescriptionPack::load(&shipped).unwrap();
    assert_eq!(loaded.description_count(), 21);
}

#[test]
fn baseline_eval_reproduces_name_ranking() {
    let (pack, data) = small_setup();
    let split = data.split(NOVEL_SPLIT).unwrap().to_vec();
    let cfg = EvalConfig { baseline: true, pair_level: true, ..EvalConfig::default() };
    let report = evaluate(None, &data, &pack, &split, &[1, 2], &cfg).unwrap();
    let free = EvalConfig { graph_constraint: false, ..cfg.clone() };
    let unconstrained = evaluate(None, &data, &pack, &split, &[2], &free).unwrap();

    let rows: Vec<usize> = split.iter().map(|n| data.relation_index(n).unwrap()).collect();
    let names: Vec<Vec<f32>> = rows.iter().map(|&r| data.relation_name_embeddings[r].clone()).collect();
    let sim = SimilarityConfig::default();
    let (mut hits1, mut hits2, mut total) = (0usize, 0usize, 0usize);
    for s in &data.samples {
        let Some(gt) = rows.iter().position(|&r| r == s.gt_relation) else { continue };
        let v: Vec<f32> = s.subject.cls.iter().zip(&s.object.cls).map(|(a, b)| 0.5 * (a + b)).collect();
        let ranking = rank_descending(&score_category_names(&v, &names, &sim).unwrap());
        total += 1;
        hits1 += usize::from(ranking[0] == gt);
        hits2 += usize::from(ranking[..2.min(ranking.len())].contains(&gt));
    }
    assert!(total > 0);
    assert_eq!(report.r_at_k[&1], hits1 as f64 / total as f64);
    // One triplet per pair under the graph constraint.
    assert_eq!(report.r_at_k[&2], report.r_at_k[&1]);
    assert_eq!(unconstrained.r_at_k[&2], hits2 as f64 / total as f64);
    assert!(report.config_echo.baseline);
}

#[test]
fn zero_epoch_training_equals_a_fresh_init() {
    let (pack, data) = small_setup();
    let base = data.split(BASE_SPLIT).unwrap().to_vec();
    let train_set = data.filter_to_relations(&base).unwrap();
    let cfg = TrainConfig { epochs: 0, seed: 5, ..TrainConfig::default() };
    let mut calls = 0;
    let out = train(&train_set, &pack, &cfg, &base, |_| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 0);
    assert!(out.log.is_empty());
    let fresh = Checkpoint::new(init_params(cfg.dims_for(32), 5).unwrap(), 5, cfg.temperature);
    assert_eq!(out.checkpoint.id(), fresh.id());

    let novel = data.split(NOVEL_SPLIT).unwrap().to_vec();
    let eval = EvalConfig::default();
    let mut a = evaluate(Some(&out.checkpoint), &data, &pack, &novel, &[1, 5], &eval).unwrap();
    let mut b = evaluate(Some(&fresh), &data, &pack, &novel, &[1, 5], &eval).unwrap();
    a.config_echo.checkpoint_id = None;
    b.config_echo.checkpoint_id = None;
    assert_eq!(a, b);
}

#[test]
fn training_reports_every_epoch_and_batch() {
    let (pack, data) = small_setup();
    let base = data.split(BASE_SPLIT).unwrap().to_vec();
    let train_set = data.filter_to_relations(&base).unwrap();
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let out = train(&train_set, &pack, &cfg, &base, |c| {
        seen.push(c.epochs_completed);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [1, 2, 3]);
    let batches = train_set.samples.len().div_ceil(cfg.batch_size);
    assert_eq!(out.log.len(), 3 * batches);
    assert!(out.log.iter().all(|r| r.loss.is_finite() && r.lr == cfg.lr));
    assert_eq!(out.checkpoint.epochs_completed, 3);
    assert_eq!(out.checkpoint.train_config["epochs"], 3);
}

#[test]
fn training_on_novel_samples_is_a_leak() {
    let (pack, data) = small_setup();
    let base = data.split(BASE_SPLIT).unwrap().to_vec();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let err = train(&data, &pack, &cfg, &base, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::DataLeak { .. }), "{err}");
}

#[test]
fn eval_never_touches_its_inputs() {
    let (pack, data) = small_setup();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint::new(init_params(TrainConfig::default().dims_for(32), 0).unwrap(), 0, 10.0);
    ckpt.save(dir.path().join("ckpt")).unwrap();
    data.save(dir.path().join("data")).unwrap();
    let snapshot = |p: &std::path::Path| {
        let mut files: Vec<_> = walk(p).into_iter().map(|f| (f.clone(), std::fs::read(&f).unwrap())).collect();
        files.sort();
        files
    };
    let before = snapshot(dir.path());
    let loaded = Checkpoint::load(dir.path().join("ckpt")).unwrap();
    let fixture = ssd_core::dataio::DatasetFixture::load(dir.path().join("data")).unwrap();
    let split = fixture.split(BASE_SPLIT).unwrap().to_vec();
    let a = evaluate(Some(&loaded), &fixture, &pack, &split, &[1], &EvalConfig::default()).unwrap();
    let b = evaluate(Some(&loaded), &fixture, &pack, &split, &[1], &EvalConfig::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(before, snapshot(dir.path()));
}

fn walk(p: &std::path::Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(p).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}
