use std::path::{Path, PathBuf};

use hipnet::data::{self, Manifest, Record, Split};
use hipnet::densenet::{Network, NetworkSpec};
use hipnet::phantom;
use hipnet::train::{self, AdamConfig, Grid, InitMode, Prediction, TrainConfig, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        input_size: 32,
        initial_channels: 4,
        growth_rate: 4,
        block_layout: vec![1, 1],
        ..NetworkSpec::default()
    }
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        spec: tiny_spec(),
        ..TrainConfig::default()
    }
}

fn corpus(dir: &Path) -> Manifest {
    let m = phantom::generate_dataset([6, 6, 6], 32, 4, dir).unwrap();
    let m = Manifest::new(m.records().to_vec()).unwrap().with_base_dir(dir);
    data::stratified_split(&m, [0.5, 0.25, 0.25], 4).unwrap()
}

#[test]
fn adam_matches_closed_form_over_random_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for probe in 0..1000 {
        let cfg = AdamConfig {
            learning_rate: rng.random_range(1e-5..0.1),
            beta1: rng.random_range(0.5..0.999),
            beta2: rng.random_range(0.9..0.99999),
            epsilon: rng.random_range(1e-10..1e-4),
        };
        let steps = rng.random_range(1..=12);
        let grads: Vec<f64> = (0..steps).map(|_| rng.random_range(-5.0..5.0)).collect();
        let start: f64 = rng.random_range(-3.0..3.0);

        let mut p = [start];
        let (mut m, mut v) = ([0.0], [0.0]);
        for (t, g) in grads.iter().enumerate() {
            train::adam_step(&mut p, &[*g], &mut m, &mut v, t as u64 + 1, &cfg).unwrap();
        }

        // Moments as explicit weighted sums of the gradient history.
        let mut expected = start;
        for t in 1..=steps {
            let m_t: f64 = (1..=t).map(|i| (1.0 - cfg.beta1) * cfg.beta1.powi((t - i) as i32) * grads[i - 1]).sum();
            let v_t: f64 = (1..=t)
                .map(|i| (1.0 - cfg.beta2) * cfg.beta2.powi((t - i) as i32) * grads[i - 1] * grads[i - 1])
                .sum();
            let m_hat = m_t / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v_t / (1.0 - cfg.beta2.powi(t as i32));
            expected -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        assert!((p[0] - expected).abs() < 1e-12, "probe {probe}: {} vs {expected}", p[0]);
    }
}

#[test]
fn frozen_body_stays_bit_identical_to_the_donor() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let mut donor = Network::build(NetworkSpec { num_classes: 5, ..tiny_spec() }).unwrap();
    donor.init_gaussian(77).unwrap();
    let config = TrainConfig { init_mode: InitMode::PretrainedFrozen, ..tiny_config(3) };
    let out = train::train(&config, &manifest, Some(&donor)).unwrap();
    let head = NetworkSpec::head_names();
    for (name, t) in out.network.state().iter() {
        if !head.contains(name) {
            assert_eq!(Some(t), donor.state().get(name), "{name}");
        }
    }
    let start = train::initial_network(&config, Some(&donor)).unwrap();
    assert_eq!(train::changed_tensors(&start, &out.network), head);
    assert!(matches!(
        train::train(&config, &manifest, None),
        Err(TrainError::MissingDonor)
    ));
}

#[test]
fn runs_are_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let config = tiny_config(2);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train::train(&config, &manifest, None).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.network.state(), b.network.state());
    assert_eq!(a.record.epochs, b.record.epochs);
    assert_eq!(a.record.metrics_csv(), b.record.metrics_csv());
    assert_eq!(a.record.audit, b.record.audit);
    let other = train::train(&TrainConfig { seed: 43, ..config.clone() }, &manifest, None).unwrap();
    assert_ne!(other.network.state(), a.network.state());
}

#[test]
fn zero_epochs_return_the_initial_network() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let config = tiny_config(0);
    let out = train::train(&config, &manifest, None).unwrap();
    assert!(out.record.epochs.is_empty());
    assert_eq!(out.record.metrics_csv(), "epoch,train_loss,val_accuracy\n");
    assert_eq!(out.network.state(), train::initial_network(&config, None).unwrap().state());
}

#[test]
fn one_training_image_is_memorized() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut records = Vec::new();
    for (i, (class, split)) in [(phantom::DesignClass::A, Split::Train), (phantom::DesignClass::B, Split::Val)]
        .into_iter()
        .enumerate()
    {
        let p = phantom::render(&phantom::scene_for_index(class, 1, i as u64), 96).unwrap();
        let file = format!("{i}.png");
        hipnet::image::save_gray(&p.image, &dir.join(&file)).unwrap();
        let mut r = Record::new(format!("r{i}"), PathBuf::from(file), class.label());
        r.split = Some(split);
        records.push(r);
    }
    let manifest = Manifest::new(records).unwrap().with_base_dir(dir);
    let mut config = TrainConfig { epochs: 50, ..TrainConfig::default() };
    config.spec.num_classes = 2;
    let out = train::train(&config, &manifest, None).unwrap();
    let e = &out.record.epochs;
    assert_eq!(e.len(), 50);
    assert!(e[0].train_loss >= 10.0 * e[49].train_loss, "{} -> {}", e[0].train_loss, e[49].train_loss);
}

#[test]
fn audit_shows_only_training_images_augmented() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let out = train::train(&tiny_config(2), &manifest, None).unwrap();
    let train_ids: Vec<_> = manifest.in_split(Split::Train).iter().map(|r| r.id.clone()).collect();
    let audit = &out.record.audit;
    assert_eq!(audit.len(), 2 * (train_ids.len() + manifest.in_split(Split::Val).len()));
    for entry in audit {
        assert_eq!(entry.augmented, entry.split == Split::Train);
        assert_ne!(entry.split, Split::Test);
        assert_eq!(train_ids.contains(&entry.id), entry.split == Split::Train);
    }
}

#[test]
fn divergence_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let mut config = tiny_config(5);
    config.adam.learning_rate = 1e38;
    assert!(matches!(
        train::train(&config, &manifest, None),
        Err(TrainError::Diverged { .. })
    ));
}

fn recount(jsonl: &str) -> f64 {
    let preds: Vec<Prediction> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    preds.iter().filter(|p| p.label == p.predicted).count() as f64 / preds.len() as f64
}

#[test]
fn evaluation_matches_a_recount_of_its_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let out = train::train(&tiny_config(2), &manifest, None).unwrap();
    let report = train::evaluate(&out.network, &manifest, Split::Test, &manifest.classes()).unwrap();
    assert_eq!(report.accuracy, recount(&report.predictions_jsonl()));
    let rows: Vec<usize> = report.confusion.iter().map(|r| r.iter().sum()).collect();
    assert_eq!(rows, [1, 1, 1]);
    assert!(report.mean_latency_secs > 0.0);
}

#[test]
fn constant_classifier_scores_one_third() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let mut net = Network::build(tiny_spec()).unwrap();
    net.init_gaussian(1).unwrap();
    for name in NetworkSpec::head_names() {
        let t = net.state_mut().get_mut(&name).unwrap();
        let bias = t.shape().len() == 1;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = if bias && i == 0 { 1.0 } else { 0.0 };
        }
    }
    let report = train::evaluate(&net, &manifest, Split::Test, &manifest.classes()).unwrap();
    assert!((report.accuracy - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(report.confusion, [[1, 0, 0], [1, 0, 0], [1, 0, 0]]);
    assert_eq!(report.accuracy, recount(&report.predictions_jsonl()));
    let empty = Manifest::new(vec![]).unwrap();
    assert!(matches!(
        train::evaluate(&net, &empty, Split::Test, &manifest.classes()),
        Err(TrainError::EmptySplit(Split::Test))
    ));
}

#[test]
fn grid_table_and_tie_break() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let base = tiny_config(1);
    let grid = Grid {
        learning_rate: vec![0.001, 0.01],
        batch_size: vec![3, 5],
        ..Grid::default()
    };
    let result = train::grid_search(&base, &grid, &manifest, None).unwrap();
    assert_eq!(result.table_csv().lines().count(), 5);
    assert_eq!(result.table_csv().matches(",true").count(), 1);

    let twins = Grid { learning_rate: vec![0.002, 0.002], ..Grid::default() };
    let result = train::grid_search(&base, &twins, &manifest, None).unwrap();
    assert_eq!(result.trials[0].best_val_accuracy, result.trials[1].best_val_accuracy);
    assert_eq!(result.best, 0);

    let single = train::grid_search(&base, &Grid::default(), &manifest, None).unwrap();
    assert_eq!(single.trials.len(), 1);
    assert_eq!(single.best_trial().config, base);
}

#[test]
fn comparison_pairs_two_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let mut donor = Network::build(tiny_spec()).unwrap();
    donor.init_gaussian(5).unwrap();
    let config = tiny_config(2);
    let c = train::compare_init_modes(&config, &manifest, &donor).unwrap();
    assert_eq!(c.gaussian.record.epochs.len(), c.frozen.record.epochs.len());
    assert_eq!(c.gaussian.record.init_mode, InitMode::Gaussian);
    assert_eq!(c.frozen.record.init_mode, InitMode::PretrainedFrozen);
    let alone = train::train(&config, &manifest, None).unwrap();
    assert_eq!(alone.record.epochs, c.gaussian.record.epochs);
    let v = &c.verdict;
    assert_eq!(v.accuracy_difference, v.gaussian_final_val_accuracy - v.frozen_final_val_accuracy);
    assert_eq!(v.table().lines().count(), 4);
}
