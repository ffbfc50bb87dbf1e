use std::path::Path;

use byol_core::config::{Profile, RunConfig};
use byol_core::eval::{self, ImageEntry};
use byol_core::loss::{self, LossConfig};
use byol_core::model::checkpoint::Checkpoint;
use byol_core::nn::Mode;
use byol_core::train::{self, RunData, TrainError, Trainer};
use byol_core::Tape;

/// A run small enough for a unit-test budget.
fn small(dir: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "output.dir = {}\ndata.per_class = 12\ndata.test_per_class = 6\ndata.image_size = 16\ndata.crop_size = 16\n\
         train.batch_size = 8\ntrain.max_steps = 8\ntrain.checkpoint_every = 4\ntrain.deterministic = true\n\
         eval.max_epochs = 5\n",
        dir.display()
    );
    RunConfig::parse(&text, Profile::Desk).unwrap().parse_onto(extra).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn deterministic_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    for variant in ["byol", "cssl"] {
        let cfg = small(dir.path(), &format!("loss.variant = {variant}\nmodel.dropout = 0.2\n"));
        train::train_run(&cfg, None).unwrap();
        let first = files(dir.path());
        std::fs::remove_dir_all(dir.path()).unwrap();
        train::train_run(&cfg, None).unwrap();
        assert_eq!(first.len(), 5);
        assert!(first == files(dir.path()), "{variant}: run directories differ");
        std::fs::remove_dir_all(dir.path()).unwrap();
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = "train.max_steps = 10\ntrain.checkpoint_every = 3\n";
    let a = train::train_run(&small(full.path(), extra), None).unwrap();
    // Stop after 6 steps, then resume to 10 from the step-6 checkpoint.
    train::train_run(&small(part.path(), "train.max_steps = 6\ntrain.checkpoint_every = 3\n"), None).unwrap();
    let ckpt = train::checkpoint_path(part.path(), 6);
    let b = train::train_run(&small(part.path(), extra), Some(&ckpt)).unwrap();
    assert_eq!(a.records, b.records);
    let (ca, cb) = (std::fs::read(&a.final_checkpoint).unwrap(), std::fs::read(&b.final_checkpoint).unwrap());
    assert_eq!(Checkpoint::from_bytes(&ca).unwrap().online_params, Checkpoint::from_bytes(&cb).unwrap().online_params);
    assert_eq!(
        std::fs::read(full.path().join("metrics.csv")).unwrap(),
        std::fs::read(part.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn zero_epochs_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let s = train::train_run(&small(dir.path(), "train.epochs = 0\n"), None).unwrap();
    assert!(s.records.is_empty());
    assert_eq!(train::list_checkpoints(dir.path()).unwrap(), vec![train::checkpoint_path(dir.path(), 0)]);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "optim.lr = 0\ntrain.freeze_stats = true\ntrain.max_steps = 3\n");
    let data = RunData::load(&cfg).unwrap();
    let mut t = Trainer::new(cfg, data.pretrain).unwrap();
    let (online, target) = (t.pair.online.store.checksum(), t.pair.target.store.checksum());
    for _ in 0..3 {
        t.train_step(None).unwrap();
    }
    assert_eq!(t.pair.online.store.checksum(), online);
    // Target is an average of identical weights, so it stays put too.
    assert_eq!(t.pair.target.store.checksum(), target);
}

#[test]
fn optimizer_step_never_touches_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "loss.variant = ccsl-with-repulsion\nloss.theta_n = 0.0\n");
    let data = RunData::load(&cfg).unwrap();
    let mut t = Trainer::new(cfg, data.pretrain).unwrap();
    let (_, idx) = t.batch_indices(0);
    let (v, vp) = t.views(&idx, 0).unwrap();
    let g = t.compute_gradients(&v, &vp, 0).unwrap();
    let before = t.pair.target.store.checksum();
    t.opt.step(t.pair.online.store.params_mut(), &g.grads).unwrap();
    assert_eq!(t.pair.target.store.checksum(), before);
    assert_ne!(t.pair.online.store.checksum(), t.pair.target.store.checksum());
}

#[test]
fn no_loss_sends_gradient_to_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "");
    let data = RunData::load(&cfg).unwrap();
    let t = Trainer::new(cfg, data.pretrain).unwrap();
    let (_, idx) = t.batch_indices(0);
    let (v, _) = t.views(&idx, 0).unwrap();
    let mut pair = t.pair.clone();
    for variant in ["byol", "ccsl", "ccsl-with-repulsion", "cssl"] {
        let cfg = LossConfig {
            variant: variant.parse().unwrap(),
            theta_p: 0.0,
            theta_n: -0.1,
            ..LossConfig::default()
        };
        let mut tape = Tape::<f64>::new();
        let po = pair.online.store.bind(&mut tape, true);
        // Target parameters tracked, so any leak would show up.
        let pt = pair.target.store.bind(&mut tape, true);
        let x = tape.constant(v.cast());
        let on = pair.forward_online::<f64, byol_core::rng::Rng>(&mut tape, &po, x, Mode::Train, None).unwrap();
        let tg = pair.forward_target(&mut tape, &pt, x, Mode::Train).unwrap();
        let q = tape.l2_normalize(on.prediction).unwrap();
        let z = tape.l2_normalize(tg).unwrap();
        let terms = loss::directional_loss(&mut tape, q, z, &cfg).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        for &var in pt.vars() {
            if let Some(g) = grads.get(var) {
                assert!(g.data().iter().all(|&x| x == 0.0), "{variant}");
            }
        }
        assert!(po.vars().iter().any(|&var| grads.get(var).is_some_and(|g| g.data().iter().any(|&x| x != 0.0))));
    }
}

#[test]
fn byol_lowers_the_loss_at_desk_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(
        &format!("output.dir = {}\ntrain.max_steps = 200\ntrain.checkpoint_every = 0\n", dir.path().display()),
        Profile::Desk,
    )
    .unwrap();
    let s = train::train_run(&cfg, None).unwrap();
    let smooth = |r: &[train::MetricsRecord]| r.iter().map(|m| m.loss).sum::<f64>() / r.len() as f64;
    let n = s.records.len();
    assert!(smooth(&s.records[n - 20..]) < s.records[0].loss);
}

#[test]
fn strict_collapse_aborts_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    // A floor above 1 makes every step count as collapsed.
    let cfg = small(dir.path(), "train.strict_collapse = true\ntrain.collapse_floor = 10\ntrain.collapse_patience = 2\n");
    match train::train_run(&cfg, None) {
        Err(TrainError::Collapse { step, .. }) => {
            assert_eq!(step, 1);
            assert!(train::checkpoint_path(dir.path(), 2).exists());
        }
        other => panic!("{:?}", other.map(|s| s.records.len())),
    }
}

#[test]
fn evaluation_leaves_the_encoder_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "");
    let s = train::train_run(&cfg, None).unwrap();
    let data = RunData::load(&cfg).unwrap();
    let ckpt = Checkpoint::load(&s.final_checkpoint).unwrap();
    let bytes = std::fs::read(&s.final_checkpoint).unwrap();
    let report = eval::linear_eval(&ckpt, &data.probe_train, &data.probe_test, &cfg.eval, Some(&s.final_checkpoint)).unwrap();
    assert_eq!(std::fs::read(&s.final_checkpoint).unwrap(), bytes);
    assert_eq!(report.per_class.len(), 4);
    assert!((0.0..=1.0).contains(&report.top1));
    assert_eq!(report.checkpoint.step, 8);
    assert!(report.to_json().contains("\"top1\""));

    let unlabeled = byol_core::data::ImageDataset {
        labels: None,
        ..data.probe_test.clone()
    };
    assert!(matches!(
        eval::linear_eval(&ckpt, &data.probe_train, &unlabeled, &cfg.eval, None),
        Err(eval::EvalError::Config(_))
    ));

    let curve = eval::accuracy_curve(dir.path(), &data.probe_train, &data.probe_test, &cfg.eval).unwrap();
    assert_eq!(curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 4, 8]);
    assert!(dir.path().join("accuracy_curve.csv").exists());
}

#[test]
fn similarity_report_writes_table_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "");
    let s = train::train_run(&cfg, None).unwrap();
    let data = RunData::load(&cfg).unwrap();
    let bin = dir.path().join("imgs");
    byol_core::data::write_stl10(&bin, byol_core::data::Split::Test, &data.probe_test).unwrap();
    let entries: Vec<ImageEntry> = (0..3)
        .map(|i| ImageEntry {
            label: format!("img-{i}"),
            path: bin.join("test_X.bin"),
            index: Some(i),
        })
        .collect();
    let ckpt = Checkpoint::load(&s.final_checkpoint).unwrap();
    let out = dir.path().join("sim");
    let m = eval::similarity_report(&ckpt, &entries, 0.8, -0.5, &out).unwrap();
    assert_eq!(m.n, 3);
    assert!(m.scores.iter().all(|s| (-1.0 - 1e-9..=1.0 + 1e-9).contains(s)));
    let csv = std::fs::read_to_string(out.join("similarity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    assert!(std::fs::read_to_string(out.join("similarity.svg")).unwrap().starts_with("<svg"));
    assert!(matches!(
        eval::similarity_report(&ckpt, &entries[..1], 0.8, -0.5, &out),
        Err(eval::EvalError::Config(_))
    ));
}

fn fresh_checkpoint(dir: &Path, extra: &str) -> (RunConfig, Checkpoint) {
    let cfg = small(dir, &format!("train.epochs = 0\n{extra}"));
    let s = train::train_run(&cfg, None).unwrap();
    (cfg, Checkpoint::load(&s.final_checkpoint).unwrap())
}

#[test]
fn probe_fits_one_image_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = fresh_checkpoint(dir.path(), "");
    let data = RunData::load(&cfg).unwrap();
    let one = data.probe_train.subset(&[0, 1, 2, 3]);
    let eval_cfg = byol_core::config::EvalConfig {
        batch_size: 4,
        max_epochs: 300,
        patience: 300,
        ..cfg.eval.clone()
    };
    let report = eval::linear_eval(&ckpt, &one, &one, &eval_cfg, None).unwrap();
    assert_eq!(report.top1, 1.0);
}

#[test]
fn random_labels_stay_near_chance() {
    use rand::Rng as _;
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = fresh_checkpoint(dir.path(), "data.classes = 10\ndata.per_class = 30\ndata.test_per_class = 60\n");
    let data = RunData::load(&cfg).unwrap();
    let mut accs = Vec::new();
    for seed in 0..3 {
        let mut rng = byol_core::rng::seeded(seed);
        let mut relabel = |ds: &byol_core::data::ImageDataset| byol_core::data::ImageDataset {
            labels: Some((0..ds.len()).map(|_| rng.random_range(1..=10u8)).collect()),
            ..ds.clone()
        };
        let (mut tr, mut te) = (relabel(&data.probe_train), relabel(&data.probe_test));
        // Every class present so the probe width is 10.
        for k in 0..10 {
            tr.labels.as_mut().unwrap()[k] = k as u8 + 1;
            te.labels.as_mut().unwrap()[k] = k as u8 + 1;
        }
        accs.push(eval::linear_eval(&ckpt, &tr, &te, &cfg.eval, None).unwrap().top1);
    }
    for a in accs {
        assert!((0.05..=0.15).contains(&a), "accuracy {a} far from chance");
    }
}

#[test]
fn duplicate_images_score_like_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = fresh_checkpoint(dir.path(), "");
    let data = RunData::load(&cfg).unwrap();
    let mut model = eval::load_model(&ckpt).unwrap();
    let imgs = vec![data.probe_test.image(0), data.probe_test.image(1), data.probe_test.image(0)];
    let m = eval::similarity_scores(&mut model, &imgs, 0.8, -0.5).unwrap();
    assert!((m.score(0, 2) - m.score(0, 0)).abs() < 1e-4);
    assert!((m.score(2, 0) - m.score(2, 2)).abs() < 1e-4);
    // Pure function of its inputs.
    let again = eval::similarity_scores(&mut model, &imgs, 0.8, -0.5).unwrap();
    assert_eq!(m.scores, again.scores);
}
