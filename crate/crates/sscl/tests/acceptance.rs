//! The acceptance suite: one PASS/FAIL line per criterion on stdout.
//!
//! Criteria 5 to 8 train the full detector on the default synthetic stream
//! and take several minutes. Criterion 11 needs a real feature export and
//! only runs when `SSCL_BODMAS_CSV` points at one; it never gates.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sscl::active::Ranking;
use sscl::config;
use sscl::metrics::{aut, pr_auc, ScoredBatch};
use sscl::trainer::{run_experiment, write_run_dir, write_selections, ExperimentConfig, RunArtifacts, StreamSource};

use common::*;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: u32,
    pass: bool,
    gating: bool,
    detail: String,
}

fn emit(o: &Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let tag = if o.gating { "" } else { " (non-gating)" };
    // Straight to the process stdout so the line survives output capture.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {:>2}: {verdict}{tag} {}", o.id, o.detail);
    let _ = out.flush();
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut done, mut skipped, mut worst) = (0, 0, 0.0f64);
    while done < 100 {
        match fd_instance(&mut rng) {
            Some(err) => {
                worst = worst.max(err);
                done += 1;
            }
            None => skipped += 1,
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 1,
        pass: worst <= FD_TOLERANCE && within(elapsed, 10),
        gating: true,
        detail: format!(
            "gradient oracle: max relative error {worst:.2e} over {done} instances ({skipped} near kinks redrawn), {:.2}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let pos = (trial % 2) as u8;
        let (scores, labels) = random_scored_batch(&mut rng, pos);
        let batch = ScoredBatch::new(scores.clone(), labels.clone()).expect("valid batch");
        let got = pr_auc(&batch, pos).expect("has positives");
        worst = worst.max((got - brute_pr_auc(&scores, &labels, pos)).abs());
    }
    let hand = aut(&[0.3; 7]).ok() == Some(0.3)
        && aut(&[1.0, 0.0]).ok() == Some(0.5)
        && aut(&[0.8, 0.6, 0.7]).map(|v| (v - 0.675).abs() < 1e-15).unwrap_or(false);
    let elapsed = start.elapsed();
    Outcome {
        id: 2,
        pass: worst <= 1e-9 && hand && within(elapsed, 30),
        gating: true,
        detail: format!(
            "metric oracles: max |pr_auc - brute force| {worst:.1e} over 1000 batches, aut hand cases {}, {:.2}s",
            if hand { "exact" } else { "wrong" },
            elapsed.as_secs_f64()
        ),
    }
}

fn gpm_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let failure = (0..500).find_map(|_| gpm_trial(&mut rng).err());
    let elapsed = start.elapsed();
    Outcome {
        id: 3,
        pass: failure.is_none() && within(elapsed, 10),
        gating: true,
        detail: format!(
            "projection memory: 500 trials, {}, {:.2}s",
            failure.unwrap_or_else(|| "orthogonal, non-expanding, idempotent".into()),
            elapsed.as_secs_f64()
        ),
    }
}

fn buffer_laws() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let failure = (0..200)
        .find_map(|_| chunk_law(&mut rng).err())
        .or_else(|| (0..1000).find_map(|_| retrieval_draw(&mut rng).err()))
        .or_else(|| (0..300).find_map(|_| delay_schedule(&mut rng).err()));
    let elapsed = start.elapsed();
    Outcome {
        id: 4,
        pass: failure.is_none() && within(elapsed, 10),
        gating: true,
        detail: format!(
            "buffer laws: {}, {:.2}s",
            failure.unwrap_or_else(|| {
                "2T chunks, exact counts over 1000 draws, queue conserved".into()
            }),
            elapsed.as_secs_f64()
        ),
    }
}

fn base_config(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seeds: SEEDS.to_vec(),
        ..ExperimentConfig::default()
    }
}

struct Timed {
    run: RunArtifacts,
    secs_per_seed: f64,
}

fn run(cfg: &ExperimentConfig) -> Timed {
    let start = Instant::now();
    let run = run_experiment(cfg).unwrap_or_else(|e| panic!("{}: {e}", cfg.name));
    Timed {
        secs_per_seed: start.elapsed().as_secs_f64() / cfg.seeds.len() as f64,
        run,
    }
}

fn unseen_a(t: &Timed) -> f64 {
    t.run.mean.unseen.malware
}

fn per_seed(t: &Timed) -> String {
    let v: Vec<String> = t
        .run
        .seeds
        .iter()
        .map(|s| format!("{:.3}", s.aut.unseen.malware))
        .collect();
    v.join("/")
}

fn compare(id: u32, what: &str, a: (&str, &Timed), b: (&str, &Timed), margin: f64) -> Outcome {
    let (ua, ub) = (unseen_a(a.1), unseen_a(b.1));
    Outcome {
        id,
        pass: ua >= ub + margin,
        gating: true,
        detail: format!(
            "{what}: unseen-AUT(A) {} {ua:.4} [{}] vs {} {ub:.4} [{}], difference {:+.4} (needs >= {margin:+.2})",
            a.0,
            per_seed(a.1),
            b.0,
            per_seed(b.1),
            ua - ub
        ),
    }
}

fn determinism() -> Outcome {
    let text = "name = determinism\nseeds = 3,4\nstream.n_tasks = 6\nseen_tasks = 3\n\
                stream.feature_dim = 40\nstream.samples_per_task = 300\nbudget = 40\n";
    let cfg = config::parse(text).expect("valid config");
    let root = tempfile::tempdir().expect("tempdir");
    let mut bytes = Vec::new();
    for k in 0..2 {
        let dir = root.path().join(format!("run{k}"));
        let run = run_experiment(&cfg).expect("run");
        write_run_dir(&dir, &cfg, &run).expect("write run dir");
        bytes.push(std::fs::read(dir.join("metrics.csv")).expect("metrics.csv"));
    }
    Outcome {
        id: 9,
        pass: bytes[0] == bytes[1] && !bytes[0].is_empty(),
        gating: true,
        detail: format!("determinism: two runs of 2 seeds, metrics.csv {} bytes, identical {}", bytes[0].len(), bytes[0] == bytes[1]),
    }
}

fn budget_accounting(full: &Timed, cfg: &ExperimentConfig) -> Outcome {
    let mut buf = Vec::new();
    write_selections(&mut buf, &full.run).expect("selections");
    let mut reader = csv::Reader::from_reader(buf.as_slice());
    let mut counts = std::collections::BTreeMap::<(u64, usize), usize>::new();
    for rec in reader.records() {
        let rec = rec.expect("selection row");
        let seed: u64 = rec[0].parse().expect("seed");
        let task: usize = rec[1].parse().expect("task");
        *counts.entry((seed, task)).or_default() += 1;
    }
    let n_tasks = match &cfg.stream {
        StreamSource::Synthetic(s) => s.n_tasks,
        StreamSource::Csv(_) => unreachable!("synthetic stream"),
    };
    let mut wrong = Vec::new();
    for &seed in &cfg.seeds {
        for task in cfg.seen_tasks..n_tasks {
            let n = counts.get(&(seed, task)).copied().unwrap_or(0);
            if n != cfg.budget {
                wrong.push(format!("seed {seed} task {task}: {n}"));
            }
        }
    }
    let audited = cfg.seeds.len() * (n_tasks - cfg.seen_tasks);
    Outcome {
        id: 10,
        pass: wrong.is_empty() && audited > 0,
        gating: true,
        detail: if wrong.is_empty() {
            format!("budget accounting: {audited} unseen tasks each logged exactly {} oracle calls", cfg.budget)
        } else {
            format!("budget accounting: off-budget tasks {}", wrong.join(", "))
        },
    }
}

fn real_data_integration() -> Outcome {
    let Some(path) = std::env::var_os("SSCL_BODMAS_CSV").map(PathBuf::from) else {
        return Outcome {
            id: 11,
            pass: true,
            gating: false,
            detail: "real-data integration: skipped, set SSCL_BODMAS_CSV to a feature export to run it".into(),
        };
    };
    let mut cfg = config::preset("bodmas-like").expect("preset");
    cfg.name = "bodmas".into();
    cfg.stream = StreamSource::Csv(path);
    cfg.seen_tasks = 5;
    cfg.label_ratio = 0.2;
    cfg.budget = 100;
    let mut ablated = cfg.clone();
    ablated.name = "bodmas-ablated".into();
    ablated.memory.replay = false;
    ablated.gpm.enabled = false;
    match (run_experiment(&cfg), run_experiment(&ablated)) {
        (Ok(full), Ok(abl)) => {
            let (a, b) = (full.mean.unseen.malware, abl.mean.unseen.malware);
            Outcome {
                id: 11,
                pass: a > b,
                gating: false,
                detail: format!("real-data integration: unseen-AUT(A) full {a:.4} vs ablated {b:.4}"),
            }
        }
        (Err(e), _) | (_, Err(e)) => Outcome {
            id: 11,
            pass: false,
            gating: false,
            detail: format!("real-data integration: {e}"),
        },
    }
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        emit(&o);
        outcomes.push(o);
    };
    record(gradient_oracle());
    record(metric_oracles());
    record(gpm_invariants());
    record(buffer_laws());

    let full_cfg = base_config("full");
    let full = run(&full_cfg);

    let mut ablated = base_config("no-memory-no-gpm");
    ablated.memory.replay = false;
    ablated.gpm.enabled = false;
    let ablated = run(&ablated);
    let mut c5 = compare(5, "ablation", ("full", &full), ("no memory, no GPM", &ablated), 0.05);
    c5.pass &= full.secs_per_seed <= 300.0;
    c5.detail.push_str(&format!(", full run {:.0}s per seed", full.secs_per_seed));
    record(c5);

    let mut no_svd = base_config("no-svd");
    no_svd.svd_enabled = false;
    record(compare(6, "svd", ("svd", &full), ("no svd", &run(&no_svd)), -0.01));

    let mut farthest = base_config("farthest");
    farthest.ranking = Ranking::Farthest;
    record(compare(7, "ranking", ("closest", &full), ("farthest", &run(&farthest)), 0.0));

    let mut delayed = base_config("noise-delay-1");
    delayed.noise.ratio = 0.6;
    delayed.delay.unseen = 1;
    let mut immediate = delayed.clone();
    immediate.name = "noise-delay-0".into();
    immediate.delay.unseen = 0;
    record(compare(
        8,
        "label noise 0.6",
        ("delay 1", &run(&delayed)),
        ("delay 0", &run(&immediate)),
        0.10,
    ));

    record(determinism());
    record(budget_accounting(&full, &full_cfg));
    record(real_data_integration());

    let failed: Vec<u32> = outcomes.iter().filter(|o| o.gating && !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
