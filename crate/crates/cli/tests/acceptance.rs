//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs the full-size benchmark, so expect tens of minutes
//! on a single core.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use hipnet::data::{self, Manifest, Record, Split};
use hipnet::densenet::Network;
use hipnet::dicom::{self, PhiPolicy};
use hipnet::gradcheck::CheckedOp;
use hipnet::phantom;
use hipnet::saliency;
use hipnet::train::{self, AdamConfig, EvalReport, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Epochs of the end-to-end benchmark run.
const BENCHMARK_EPOCHS: usize = 30;
const BENCHMARK_BUDGET_SECS: f64 = 15.0 * 60.0;

/// Reduced setting for the initialization comparison: 48-px phantoms and
/// shapes, otherwise the desk architecture and optimizer.
const COMPARE_SIZE: usize = 48;
const COMPARE_EPOCHS: usize = 15;
const DONOR_EPOCHS: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for op in CheckedOp::ALL {
        let mut op_worst = 0.0f64;
        for trial in 0..100 {
            match op.check(7_000 + trial, 32) {
                Ok(r) => op_worst = op_worst.max(r.max_rel_error),
                Err(e) => failures.push(format!("{} trial {trial}: {e}", op.name())),
            }
        }
        if op_worst >= 1e-4 {
            failures.push(format!("{} max relative error {op_worst:.2e}", op.name()));
        }
        if op_worst > worst.0 {
            worst = (op_worst, op.name());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    outcome(
        pass,
        format!(
            "{} ops x 100 trials, worst {:.2e} ({}), {secs:.1} s{}",
            CheckedOp::ALL.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn optimizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let cfg = AdamConfig {
            learning_rate: rng.random_range(1e-5..0.1),
            beta1: rng.random_range(0.5..0.999),
            beta2: rng.random_range(0.9..0.99999),
            epsilon: rng.random_range(1e-10..1e-4),
        };
        let steps = rng.random_range(1..=12usize);
        let grads: Vec<f64> = (0..steps).map(|_| rng.random_range(-5.0..5.0)).collect();
        let start = rng.random_range(-3.0..3.0);
        let mut p = [start];
        let (mut m, mut v) = ([0.0], [0.0]);
        for (t, g) in grads.iter().enumerate() {
            train::adam_step(&mut p, &[*g], &mut m, &mut v, t as u64 + 1, &cfg).expect("valid step");
        }
        let mut expected = start;
        for t in 1..=steps {
            let m_t: f64 = (1..=t).map(|i| (1.0 - cfg.beta1) * cfg.beta1.powi((t - i) as i32) * grads[i - 1]).sum();
            let v_t: f64 = (1..=t)
                .map(|i| (1.0 - cfg.beta2) * cfg.beta2.powi((t - i) as i32) * grads[i - 1].powi(2))
                .sum();
            let m_hat = m_t / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v_t / (1.0 - cfg.beta2.powi(t as i32));
            expected -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        worst = worst.max((p[0] - expected).abs());
    }
    let mut p = [1.0f64];
    let (mut m, mut v) = ([0.0], [0.0]);
    train::adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &AdamConfig::default()).expect("valid step");
    let first = 1.0 - 0.001 / (1.0 + 1e-8);
    let pass = worst < 1e-12 && (p[0] - first).abs() < 1e-12 && (p[0] - 0.999).abs() < 1e-10;
    outcome(pass, format!("1000 probes, worst deviation {worst:.1e}; first step {:.12}", p[0]))
}

fn split_arithmetic() -> Outcome {
    let mut records = Vec::new();
    for (label, n) in ["A", "B", "C"].iter().zip(phantom::DEFAULT_COUNTS) {
        for i in 0..n {
            records.push(Record::new(format!("{label}{i}"), PathBuf::from("x.png"), *label));
        }
    }
    let manifest = Manifest::new(records).expect("unique ids");
    let mut counts = Vec::new();
    let mut assignments = std::collections::BTreeSet::new();
    for seed in 0..100 {
        let split = data::stratified_split(&manifest, data::DEFAULT_RATIOS, seed).expect("valid split");
        let per_class: Vec<usize> = ["A", "B", "C"]
            .iter()
            .map(|l| split.in_split(Split::Test).iter().filter(|r| r.label == *l).count())
            .collect();
        counts.push((per_class, split.in_split(Split::Train).len(), split.in_split(Split::Val).len()));
        let test_ids: Vec<String> = split.in_split(Split::Test).iter().map(|r| r.id.clone()).collect();
        assignments.insert(test_ids);
    }
    let first = counts[0].clone();
    let invariant = counts.iter().all(|c| *c == first);
    let pass = invariant && first.0 == [13, 9, 3] && first.1 == 202 && first.2 == 25 && assignments.len() > 90;
    outcome(
        pass,
        format!(
            "test {:?} (total {}), train {}, val {}; counts invariant over 100 seeds: {invariant}; {} distinct test sets",
            first.0,
            first.0.iter().sum::<usize>(),
            first.1,
            first.2,
            assignments.len()
        ),
    )
}

struct Benchmark {
    network: Network,
    manifest: Manifest,
    report: EvalReport,
}

fn benchmark(root: &Path) -> (Outcome, Option<Benchmark>) {
    let started = Instant::now();
    let dir = root.join("benchmark");
    let run = || -> Result<Benchmark, String> {
        let m = phantom::generate_dataset(phantom::DEFAULT_COUNTS, phantom::DEFAULT_SIZE, 42, &dir).map_err(|e| e.to_string())?;
        let m = data::stratified_split(&m.with_base_dir(&dir), data::DEFAULT_RATIOS, 42).map_err(|e| e.to_string())?;
        let config = TrainConfig {
            epochs: BENCHMARK_EPOCHS,
            ..TrainConfig::default()
        };
        let out = train::train(&config, &m, None).map_err(|e| e.to_string())?;
        let report = train::evaluate(&out.network, &m, Split::Test, &m.classes()).map_err(|e| e.to_string())?;
        Ok(Benchmark {
            network: out.network,
            manifest: m,
            report,
        })
    };
    match run() {
        Ok(b) => {
            let secs = started.elapsed().as_secs_f64();
            let diag: Vec<usize> = (0..b.report.confusion.len()).map(|i| b.report.confusion[i][i]).collect();
            let pass = b.report.accuracy >= 0.96 && secs <= BENCHMARK_BUDGET_SECS;
            let detail = format!(
                "test accuracy {:.4} (confusion diagonal {diag:?} of 25), {BENCHMARK_EPOCHS} epochs, wall {secs:.0} s (budget {BENCHMARK_BUDGET_SECS:.0} s)",
                b.report.accuracy
            );
            (outcome(pass, detail), Some(b))
        }
        Err(e) => (outcome(false, format!("benchmark run failed: {e}")), None),
    }
}

fn comparison(root: &Path) -> Outcome {
    let run = || -> Result<String, String> {
        let shapes_dir = root.join("shapes");
        let shapes = phantom::generate_shapes([60, 60, 60], COMPARE_SIZE, 7, &shapes_dir).map_err(|e| e.to_string())?;
        let shapes = data::stratified_split(&shapes.with_base_dir(&shapes_dir), data::DEFAULT_RATIOS, 7).map_err(|e| e.to_string())?;
        let dir = root.join("compare");
        let m = phantom::generate_dataset(phantom::DEFAULT_COUNTS, COMPARE_SIZE, 42, &dir).map_err(|e| e.to_string())?;
        let m = data::stratified_split(&m.with_base_dir(&dir), data::DEFAULT_RATIOS, 42).map_err(|e| e.to_string())?;
        let mut config = TrainConfig {
            epochs: DONOR_EPOCHS,
            ..TrainConfig::default()
        };
        config.spec.input_size = COMPARE_SIZE;
        let donor = train::pretrain_donor(&config, &shapes).map_err(|e| e.to_string())?;
        let donor_report = train::evaluate(&donor.network, &shapes, Split::Test, &shapes.classes()).map_err(|e| e.to_string())?;
        config.epochs = COMPARE_EPOCHS;
        let c = train::compare_init_modes(&config, &m, &donor.network).map_err(|e| e.to_string())?;
        let v = &c.verdict;
        let pass = v.gaussian_final_val_accuracy > v.frozen_final_val_accuracy
            && v.gaussian_loss_reduction >= 5.0
            && v.frozen_loss_reduction < 2.0;
        let detail = format!(
            "final val accuracy gaussian {:.3} vs frozen {:.3}; loss reduction gaussian {:.2}x, frozen {:.2}x; donor shape accuracy {:.3}",
            v.gaussian_final_val_accuracy,
            v.frozen_final_val_accuracy,
            v.gaussian_loss_reduction,
            v.frozen_loss_reduction,
            donor_report.accuracy
        );
        if pass {
            Ok(detail)
        } else {
            Err(detail)
        }
    };
    match run() {
        Ok(d) => outcome(true, d),
        Err(d) => outcome(false, d),
    }
}

fn localization(b: Option<&Benchmark>) -> Outcome {
    let Some(b) = b else {
        return outcome(false, "no benchmark model".into());
    };
    let mut scores = Vec::new();
    let mut null_gap = 0.0f64;
    let mut max_area = 0.0f64;
    for p in b.report.predictions.iter().filter(|p| p.label == p.predicted) {
        let record = b.manifest.records().iter().find(|r| r.id == p.id).expect("prediction ids come from the manifest");
        let path = b.manifest.resolve(record);
        let run = || -> Result<(f64, f64, f64), String> {
            let img = hipnet::image::load_gray(&path).map_err(|e| e.to_string())?;
            let map = saliency::compute_saliency(&b.network, &data::normalize(&img), None).map_err(|e| e.to_string())?;
            let union = phantom::load_masks(&path).map_err(|e| e.to_string())?.union();
            let score = saliency::localization_score(&map, &union, saliency::DEFAULT_TOP_FRACTION).map_err(|e| e.to_string())?;
            let null = saliency::permutation_null(&map, &union, saliency::DEFAULT_TOP_FRACTION, 100, 5).map_err(|e| e.to_string())?;
            let area = union.count() as f64 / union.bits().len() as f64;
            Ok((score, null, area))
        };
        match run() {
            Ok((score, null, area)) => {
                scores.push(score);
                null_gap = null_gap.max((null - area).abs());
                max_area = max_area.max(area);
            }
            Err(e) => return outcome(false, format!("{}: {e}", p.id)),
        }
    }
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    let pass = scores.len() >= 20 && mean >= 0.60 && null_gap <= 0.05 && max_area < 0.25;
    outcome(
        pass,
        format!(
            "mean localization {mean:.3} over {} correct test images (need >= 0.60); permutation null within {null_gap:.3} of mask area; largest mask area {max_area:.3}",
            scores.len()
        ),
    )
}

fn latency(b: Option<&Benchmark>) -> Outcome {
    match b {
        Some(b) => outcome(
            b.report.mean_latency_secs <= 5.0,
            format!("mean {:.4} s per image over {} test images", b.report.mean_latency_secs, b.report.predictions.len()),
        ),
        None => outcome(false, "no benchmark model".into()),
    }
}

fn checksum(bytes: &[u8]) -> Vec<u8> {
    Sha256::digest(bytes).to_vec()
}

fn dicom_corpus() -> Outcome {
    let policy = PhiPolicy::default();
    let mut problems = Vec::new();
    let mut removed_total = 0;
    for seed in 0..500 {
        let file = dicom::synthetic_file(seed);
        let check = || -> Result<usize, String> {
            let bytes = dicom::write(&file).map_err(|e| e.to_string())?;
            let parsed = dicom::parse(&bytes).map_err(|e| e.to_string())?;
            if parsed != file || dicom::write(&parsed).map_err(|e| e.to_string())? != bytes {
                return Err("round trip differs".into());
            }
            let (clean, removed) = dicom::anonymize(&parsed, &policy);
            let reparsed = dicom::parse(&dicom::write(&clean).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            if reparsed.elements.iter().any(|e| policy.removes(e.tag)) {
                return Err("PHI tag survived".into());
            }
            if checksum(reparsed.pixel_data().unwrap_or_default()) != checksum(file.pixel_data().unwrap_or_default()) {
                return Err("pixel checksum changed".into());
            }
            if dicom::anonymize(&clean, &policy).0 != clean {
                return Err("anonymize is not idempotent".into());
            }
            Ok(removed.len())
        };
        match check() {
            Ok(n) => removed_total += n,
            Err(e) => problems.push(format!("file {seed}: {e}")),
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "500 synthetic files, {removed_total} PHI elements removed, {} problems{}",
            problems.len(),
            problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    )
}

fn hipnet_cli(dir: &Path, threads: &str, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hipnet"))
        .args(["--threads", threads])
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable run directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).expect("readable output");
                out.push((path.strip_prefix(dir).expect("inside run dir").to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Outcome {
    let config = "input_size = 48\nepochs = 2\n";
    let pipeline = |threads: &str| -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
        let dir = root.join(format!("pipeline-{threads}"));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        std::fs::write(dir.join("run.txt"), config).map_err(|e| e.to_string())?;
        hipnet_cli(&dir, threads, &["phantoms", "--out", "corpus", "--counts", "10,10,10", "--size", "48"])?;
        hipnet_cli(&dir, threads, &["split", "--manifest", "corpus/manifest.jsonl"])?;
        hipnet_cli(&dir, threads, &["train", "--config", "run.txt", "--manifest", "corpus/manifest.jsonl", "--out", "run"])?;
        hipnet_cli(
            &dir,
            threads,
            &[
                "eval", "--weights", "run/weights.thrw", "--config", "run.txt", "--manifest", "corpus/manifest.jsonl",
                "--predictions", "eval.jsonl", "--localize",
            ],
        )?;
        for id in ["phantom_0000", "phantom_0015", "phantom_0029"] {
            hipnet_cli(
                &dir,
                threads,
                &[
                    "saliency", "--weights", "run/weights.thrw", "--config", "run.txt", "--image",
                    &format!("corpus/{id}.png"), "--out", &format!("saliency_{id}.png"), "--masks", "corpus",
                ],
            )?;
        }
        Ok(tree(&dir))
    };
    match (pipeline("1"), pipeline("4")) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<String> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| x.0.display().to_string())
                .collect();
            let same = a.len() == b.len() && differing.is_empty();
            outcome(
                same,
                format!(
                    "{} files compared between --threads 1 and --threads 4, {} differ{}",
                    a.len(),
                    differing.len(),
                    differing.first().map(|d| format!(" (first: {d})")).unwrap_or_default()
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("pipeline failed: {e}")),
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut results = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };
    report(1, "gradient checks", gradients());
    report(2, "adam closed form", optimizer());
    report(3, "stratified split", split_arithmetic());
    let (o, bench) = benchmark(root);
    report(4, "end-to-end benchmark", o);
    report(5, "gaussian vs pretrained-frozen", comparison(root));
    report(6, "saliency localization", localization(bench.as_ref()));
    report(7, "inference latency", latency(bench.as_ref()));
    report(8, "dicom round trip and anonymization", dicom_corpus());
    report(9, "pipeline determinism", determinism(root));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
