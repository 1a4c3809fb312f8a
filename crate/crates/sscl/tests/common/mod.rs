//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sscl::data::Sample;
use sscl::gpm::{GpmMode, GpmStore};
use sscl::memory::{BufferMemory, DelayPolicy};
use sscl::model::{Architecture, BnStats, Gradients, ModelParams, Objective, Pair, SupTerm};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients below this size are compared absolutely.
const FD_FLOOR: f64 = 1e-6;
/// Instances with a relu input or a class probability this close to a kink
/// are redrawn.
const KINK_MARGIN: f64 = 1e-3;

pub fn toy_architecture() -> Architecture {
    Architecture {
        input_dim: 4,
        hidden: vec![6, 4],
        batchnorm: true,
        dropout: 0.0,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn total_loss(model: &ModelParams, x: &Array2<f64>, objective: &Objective) -> f64 {
    let out = model
        .forward_with(x.view(), BnStats::Batch, None::<&mut ChaCha8Rng>)
        .expect("toy forward");
    objective.evaluate(out.probs.view()).expect("toy objective").total()
}

/// Maximum relative error between analytic and central-difference gradients
/// of `L_sup + L_bce` on one random batch of 3, or `None` when the instance
/// sits near a relu kink or the probability clamp.
pub fn fd_instance(rng: &mut ChaCha8Rng) -> Option<f64> {
    let mut model = ModelParams::init(toy_architecture(), rng.random()).expect("toy init");
    // Perturb every tensor so the batchnorm affine terms are not all (1, 0).
    for t in model.tensors_mut().iter_mut() {
        let noise = random_matrix(rng, t.nrows(), t.ncols(), 0.5);
        *t += &noise;
    }
    let x = random_matrix(rng, 3, 4, 2.0);
    let objective = Objective {
        sup: vec![
            SupTerm { row: 0, label: rng.random_range(0..2) },
            SupTerm { row: 1, label: rng.random_range(0..2) },
        ],
        pairs: vec![
            Pair { anchor: 2, exemplar: 0 },
            Pair { anchor: 1, exemplar: 2 },
        ],
        stop_grad_exemplar: false,
    };
    let out = model
        .forward_with(x.view(), BnStats::Batch, None::<&mut ChaCha8Rng>)
        .ok()?;
    let near_relu = model
        .relu_inputs(&out.trace)
        .iter()
        .any(|a| a.iter().any(|v| v.abs() < KINK_MARGIN));
    let near_clamp = out.probs.iter().any(|&p| p < 1e-9);
    if near_relu || near_clamp {
        return None;
    }
    let value = objective.evaluate(out.probs.view()).ok()?;
    let grads = model.backward(&out.trace, value.dlogits.view()).ok()?;

    let mut worst = 0.0f64;
    for k in 0..grads.tensors.len() {
        let (rows, cols) = grads.tensors[k].dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = model.tensors()[k][[i, j]];
                model.tensors_mut()[k][[i, j]] = orig + FD_STEP;
                let up = total_loss(&model, &x, &objective);
                model.tensors_mut()[k][[i, j]] = orig - FD_STEP;
                let down = total_loss(&model, &x, &objective);
                model.tensors_mut()[k][[i, j]] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let analytic = grads.tensors[k][[i, j]];
                let scale = analytic.abs().max(numeric.abs()).max(FD_FLOOR);
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
    }
    Some(worst)
}

/// Area under the precision-recall curve by exhaustive thresholding: every
/// distinct score is tried as a cut, precision and recall are counted
/// directly, and the points are joined by trapezoids from (0, 1).
pub fn brute_pr_auc(scores: &[f64], labels: &[u8], pos: u8) -> f64 {
    let s: Vec<f64> = scores
        .iter()
        .map(|&v| if pos == 1 { v } else { 1.0 - v })
        .collect();
    let positives = labels.iter().filter(|&&l| l == pos).count() as f64;
    let mut cuts = s.clone();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let mut points = vec![(0.0, 1.0)];
    for &cut in &cuts {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        for (v, &l) in s.iter().zip(labels) {
            if *v >= cut {
                predicted += 1.0;
                if l == pos {
                    tp += 1.0;
                }
            }
        }
        points.push((tp / positives, tp / predicted));
    }
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// A random batch of 2..=12 scores with at least one sample of `pos`.
pub fn random_scored_batch(rng: &mut ChaCha8Rng, pos: u8) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = rng.random_range(2..=12);
        // Coarse scores make ties common.
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..5) as f64 / 4.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if labels.contains(&pos) {
            return (scores, labels);
        }
    }
}

fn group_vectors(store: &GpmStore, g: &Gradients) -> Vec<Array1<f64>> {
    match store.mode() {
        GpmMode::Layerwise => g.tensors.iter().map(|t| t.iter().copied().collect()).collect(),
        GpmMode::Global => vec![g.tensors.iter().flat_map(|t| t.iter().copied()).collect()],
    }
}

fn random_gradients(rng: &mut ChaCha8Rng, model: &ModelParams) -> Gradients {
    Gradients {
        tensors: model
            .tensors()
            .iter()
            .map(|t| random_matrix(rng, t.nrows(), t.ncols(), 1.0))
            .collect(),
    }
}

/// One randomized GPM trial: a store built from a few random updates, then
/// orthogonality and non-expansion of a projected gradient, and idempotence
/// of a repeated update.
pub fn gpm_trial(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let arch = Architecture {
        input_dim: rng.random_range(2..6),
        hidden: vec![rng.random_range(2..6), rng.random_range(2..5)],
        batchnorm: rng.random_bool(0.5),
        dropout: 0.0,
    };
    let model = ModelParams::init(arch, rng.random()).map_err(|e| e.to_string())?;
    let mode = if rng.random_bool(0.5) { GpmMode::Layerwise } else { GpmMode::Global };
    let energy = [0.5, 0.9, 0.99, 1.0][rng.random_range(0..4)];
    let mut store = GpmStore::new(&model, mode, energy).map_err(|e| e.to_string())?;
    let mut last = Vec::new();
    for _ in 0..rng.random_range(1..4) {
        let n = rng.random_range(1..6);
        last = store
            .group_dims()
            .iter()
            .map(|&d| random_matrix(rng, n, d, 1.0))
            .collect::<Vec<_>>();
        store.update_basis(&last).map_err(|e| e.to_string())?;
    }

    let g = random_gradients(rng, &model);
    let projected = store.project_orthogonal(&g).map_err(|e| e.to_string())?;
    let before = group_vectors(&store, &g);
    let after = group_vectors(&store, &projected);
    for (k, (u, v)) in before.iter().zip(&after).enumerate() {
        let nv = v.dot(v).sqrt();
        let nu = u.dot(u).sqrt();
        if nv > nu * (1.0 + 1e-12) + 1e-15 {
            return Err(format!("group {k}: projection expanded {nu} to {nv}"));
        }
        for b in store.basis(k).rows() {
            let ip = b.dot(v).abs();
            if ip > 1e-6 * nv + 1e-12 {
                return Err(format!("group {k}: inner product {ip:e} with a stored direction"));
            }
        }
    }

    let snapshot: Vec<Array2<f64>> = (0..store.group_dims().len())
        .map(|k| store.basis(k).to_owned())
        .collect();
    store.update_basis(&last).map_err(|e| e.to_string())?;
    for (k, old) in snapshot.iter().enumerate() {
        if store.basis(k) != old.view() {
            return Err(format!("group {k}: repeated update changed the basis"));
        }
    }
    Ok(())
}

fn sample(id: u64, label: u8, task: usize) -> Sample {
    Sample::labeled(id, Array1::from(vec![id as f64]), label, task)
}

/// Storing T tasks gives 2T chunks whose sizes are the labeled class counts.
pub fn chunk_law(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut mem = BufferMemory::new();
    let tasks = rng.random_range(1..8);
    let mut id = 0;
    for t in 0..tasks {
        let (b, m) = (rng.random_range(0..20), rng.random_range(0..5));
        let mut samples = Vec::new();
        for _ in 0..b {
            samples.push(sample(id, 0, t));
            id += 1;
        }
        for _ in 0..m {
            samples.push(sample(id, 1, t));
            id += 1;
        }
        mem.store_task_chunks(t, samples).map_err(|e| e.to_string())?;
        let c = mem.chunks();
        if c.len() != 2 * (t + 1) {
            return Err(format!("{} chunks after {} tasks", c.len(), t + 1));
        }
        let (bc, mc) = (&c[2 * t], &c[2 * t + 1]);
        if (bc.label, mc.label, bc.samples.len(), mc.samples.len()) != (0, 1, b, m) {
            return Err(format!("task {t}: chunk sizes do not match ({b}, {m})"));
        }
    }
    Ok(())
}

/// One retrieval draw against an independently stated count rule: the
/// draw size is `min(b_m, |pool|)` and malware fills `round(bma * b_m)`
/// slots unless the benign pool runs short or the malware pool does.
pub fn retrieval_draw(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut mem = BufferMemory::new();
    let nb = rng.random_range(0..40);
    let nm = rng.random_range(0..15);
    if nb + nm == 0 {
        return Ok(());
    }
    let mut samples: Vec<Sample> = (0..nb).map(|i| sample(i as u64, 0, 0)).collect();
    samples.extend((0..nm).map(|i| sample((nb + i) as u64, 1, 0)));
    mem.store_task_chunks(0, samples).map_err(|e| e.to_string())?;
    let b_m = rng.random_range(0..50);
    let bma: f64 = rng.random();
    let got = mem.retrieve_balanced(b_m, bma, rng).map_err(|e| e.to_string())?;
    let total = b_m.min(nb + nm);
    let want_mal = (bma * b_m as f64).round() as usize;
    let exp_mal = nm.min(want_mal.max(total.saturating_sub(nb)));
    let mal = got.iter().filter(|s| s.observed_label == Some(1)).count();
    let mut ids: Vec<u64> = got.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if got.len() != total || mal != exp_mal || ids.len() != got.len() {
        return Err(format!(
            "pool ({nb}, {nm}), b_m {b_m}, bma {bma:.3}: got {} with {mal} malware, expected {total} with {exp_mal}",
            got.len()
        ));
    }
    Ok(())
}

/// A random schedule of delayed labelings: at every point the samples in
/// the buffer plus those queued equal those labeled, each sample enters
/// exactly at its admission task, and samples that waited in the queue
/// carry their true label once admitted.
pub fn delay_schedule(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut mem = BufferMemory::new();
    let mut labeled = 0usize;
    let mut id = 0u64;
    let tasks = rng.random_range(2..12);
    let mut due: Vec<(usize, usize)> = Vec::new();
    let mut waited = std::collections::HashSet::new();
    for t in 0..tasks {
        mem.advance_delay_queue(t, |s| s.true_label).map_err(|e| e.to_string())?;
        let admitted: usize = due.iter().filter(|(at, _)| *at <= t).map(|(_, n)| n).sum();
        if mem.len() != admitted {
            return Err(format!("task {t}: {} in buffer, {admitted} due", mem.len()));
        }
        let n = rng.random_range(0..6);
        let delta = rng.random_range(0..4);
        let batch: Vec<Sample> = (0..n)
            .map(|_| {
                let label = rng.random_range(0..2);
                let mut s = sample(id, label, t);
                if delta > 0 {
                    waited.insert(id);
                }
                id += 1;
                // A noisy answer that admission must undo.
                if rng.random_bool(0.5) {
                    s.observed_label = Some(1 - label);
                }
                s
            })
            .collect();
        labeled += n;
        due.push((t + delta, n));
        mem.enqueue_delayed(batch, t, DelayPolicy { delta_tasks: delta })
            .map_err(|e| e.to_string())?;
        let queued: usize = mem.delay_queue().iter().map(|e| e.samples.len()).sum();
        if mem.len() + queued != labeled {
            return Err(format!("task {t}: {} stored + {queued} queued != {labeled}", mem.len()));
        }
    }
    for c in mem.chunks() {
        for s in &c.samples {
            if s.observed_label != Some(c.label) {
                return Err(format!("sample {} filed under the wrong class", s.id));
            }
            if waited.contains(&s.id) && s.observed_label != Some(s.true_label) {
                return Err(format!("sample {} admitted without its true label", s.id));
            }
        }
    }
    Ok(())
}
