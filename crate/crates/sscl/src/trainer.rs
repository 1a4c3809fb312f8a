//! Seen-task training, unseen-task active learning, and the experiment
//! runner that evaluates after every task.
//!
//! A seen task first copies its labeled samples into the buffer, then
//! trains on batches made of replayed buffer samples (`B_m`), labeled task
//! samples (`B_l`) and unlabeled task samples (`B_u`). Every anchor in
//! `B_l` and `B_u` is matched to a buffered exemplar in the representation
//! space; matched exemplars join the batch and each pair contributes a
//! similarity term to the loss. After the task, gradients of its labeled
//! malware samples extend the projection memory.
//!
//! An unseen task buys labels for part of its pool with the monthly budget
//! and is then trained like a seen task.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::active::{
    label_with_oracle, pool_distances, select_for_labeling, DistanceStrategy, GroupLatents,
    OracleKind, Ranking, SelectionRecord, SELECTION_HEADER,
};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{
    feature_matrix, flip_labels, gen_synthetic_samples, load_csv_dataset, make_tasks, mask_labels,
    NoiseRecord, Sample, StreamConfig, TaskData,
};
use crate::error::{Error, Result};
use crate::gpm::{GpmMode, GpmScope, GpmStore};
use crate::memory::{BufferMemory, DelayPolicy, Occupancy};
use crate::metrics::{mean_std, pr_auc, tpr_at_fpr, AutSummary, ScoredBatch, AUT_COLUMNS};
use crate::model::{
    Architecture, BnStats, Mode, ModelParams, Objective, OptimizerConfig, Pair, SupTerm,
    DEFAULT_HIDDEN,
};
use crate::repspace::{Anchor, PairingStats, RepSpace, ThresholdConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum StreamSource {
    Synthetic(StreamConfig),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryConfig {
    /// Draw `B_m` from the buffer. When off, the buffer still feeds the
    /// representation space and the active-learning distances.
    pub replay: bool,
    /// Share of each batch taken from the buffer.
    pub b_m_frac: f64,
    /// Share of `B_m` that is malware.
    pub bma: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            replay: true,
            b_m_frac: 0.5,
            bma: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpmConfig {
    pub enabled: bool,
    pub energy: f64,
    pub layerwise: bool,
    pub max_rank: Option<usize>,
    pub scope: GpmScope,
}

impl Default for GpmConfig {
    fn default() -> Self {
        GpmConfig {
            enabled: true,
            energy: 0.99,
            layerwise: true,
            max_rank: None,
            scope: GpmScope::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSettings {
    pub tau_max: f64,
    pub beta: f64,
    /// Defaults to a fifth of the decayed maximum.
    pub tau_init: Option<f64>,
    /// Defaults to a fifth of the decayed maximum.
    pub step: Option<f64>,
}

impl Default for ThresholdSettings {
    fn default() -> Self {
        ThresholdSettings {
            tau_max: 0.09,
            beta: 1.0,
            tau_init: None,
            step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DelayConfig {
    /// Admission delay, in tasks, for seen-task labels.
    pub seen: usize,
    /// Admission delay for labels bought on unseen tasks.
    pub unseen: usize,
    /// While a labeled batch waits for admission its labels are not trusted
    /// for the current task either: the samples train as unlabeled.
    pub pending_as_unlabeled: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseConfig {
    /// Fraction of bought labels flipped on each unseen task.
    pub ratio: f64,
    /// Also flip that fraction of each seen task's labels.
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Score an unseen task before training on its bought labels.
    pub pre_adaptation: bool,
    /// After every task, also re-score the test splits of all earlier tasks.
    pub retrospective: bool,
    pub fpr_target: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pre_adaptation: false,
            retrospective: false,
            fpr_target: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointConfig {
    /// Save the model (without the projection memory) after every task.
    pub every_task: bool,
    /// Include the projection memory in the final checkpoint.
    pub gpm: bool,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig {
            every_task: false,
            gpm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub stream: StreamSource,
    pub seen_tasks: usize,
    pub label_ratio: f64,
    /// Labels bought per unseen task.
    pub budget: usize,
    pub oracle: OracleKind,
    pub noise: NoiseConfig,
    pub delay: DelayConfig,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub batchnorm: bool,
    pub optimizer: OptimizerConfig,
    pub threshold: ThresholdSettings,
    pub gpm: GpmConfig,
    pub memory: MemoryConfig,
    pub repspace_energy: f64,
    pub svd_enabled: bool,
    pub distance: DistanceStrategy,
    pub ranking: Ranking,
    pub stop_grad_exemplar: bool,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
    pub checkpoint: CheckpointConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            stream: StreamSource::Synthetic(StreamConfig::default()),
            seen_tasks: 5,
            label_ratio: 0.2,
            budget: 100,
            oracle: OracleKind::GroundTruth,
            noise: NoiseConfig::default(),
            delay: DelayConfig {
                pending_as_unlabeled: true,
                ..DelayConfig::default()
            },
            hidden: DEFAULT_HIDDEN.to_vec(),
            dropout: 0.2,
            batchnorm: true,
            optimizer: OptimizerConfig::default(),
            threshold: ThresholdSettings::default(),
            gpm: GpmConfig::default(),
            memory: MemoryConfig::default(),
            repspace_energy: crate::numerics::DEFAULT_ENERGY,
            svd_enabled: true,
            distance: DistanceStrategy::AllSamples,
            ranking: Ranking::Closest,
            stop_grad_exemplar: false,
            seeds: vec![0],
            eval: EvalConfig::default(),
            checkpoint: CheckpointConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fraction = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        fraction("label_ratio", self.label_ratio)?;
        fraction("noise.ratio", self.noise.ratio)?;
        fraction("memory.b_m_frac", self.memory.b_m_frac)?;
        fraction("memory.bma", self.memory.bma)?;
        fraction("eval.fpr_target", self.eval.fpr_target)?;
        if !(self.repspace_energy > 0.0 && self.repspace_energy <= 1.0) {
            return Err(invalid("repspace.energy must lie in (0, 1]"));
        }
        if !(self.gpm.energy > 0.0 && self.gpm.energy <= 1.0) {
            return Err(invalid("gpm.energy must lie in (0, 1]"));
        }
        if self.seen_tasks == 0 {
            return Err(invalid("seen_tasks must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must not be empty"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("model.hidden needs at least one positive width"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("model.dropout must lie in [0, 1)"));
        }
        self.oracle.validate().map_err(|e| invalid(e.to_string()))?;
        self.optimizer.validate()?;
        self.threshold_config().validate()?;
        if let StreamSource::Synthetic(s) = &self.stream {
            s.validate()?;
            if self.seen_tasks > s.n_tasks {
                return Err(invalid("seen_tasks exceeds stream.n_tasks"));
            }
        }
        Ok(())
    }

    pub fn threshold_config(&self) -> ThresholdConfig {
        let t = &self.threshold;
        let mut cfg = ThresholdConfig::new(t.tau_max, t.beta, self.label_ratio);
        if let Some(v) = t.tau_init {
            cfg.tau_init = v;
        }
        if let Some(v) = t.step {
            cfg.step = v;
        }
        cfg
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            batchnorm: self.batchnorm,
            dropout: self.dropout,
        }
    }
}

/// splitmix64 over `seed ^ tag`, to give every random stream of a run its
/// own seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = (seed ^ tag).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, tag))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub svd_secs: f64,
    pub gpm_secs: f64,
    pub buffer_secs: f64,
    pub total_secs: f64,
}

/// Ids of every sample whose features entered a training forward pass or
/// a projection-memory update during one task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsumedIds {
    ids: BTreeSet<u64>,
    max_task: Option<usize>,
}

impl ConsumedIds {
    fn record(&mut self, s: &Sample) {
        self.ids.insert(s.id);
        self.max_task = Some(self.max_task.map_or(s.task_index, |m| m.max(s.task_index)));
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    /// Largest task index among consumed samples.
    pub fn max_task(&self) -> Option<usize> {
        self.max_task
    }

    /// FNV-1a over the sorted ids.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in &self.ids {
            for b in id.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// What happened while training one task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    pub seen: bool,
    pub labeled: usize,
    pub unlabeled: usize,
    pub admitted: usize,
    pub pairing: PairingStats,
    pub selections: Vec<SelectionRecord>,
    pub oracle_calls: usize,
    /// Budget left unspent because the pool was smaller.
    pub oracle_shortfall: usize,
    pub noise_flips: usize,
    pub epochs_run: usize,
    pub steps: usize,
    pub consumed: ConsumedIds,
    pub timings: PhaseTimings,
}

fn secs(since: Instant) -> f64 {
    since.elapsed().as_secs_f64()
}

/// Labeled samples waiting on a delay train as unlabeled when configured.
fn training_split(
    labeled: &[Sample],
    unlabeled: &[Sample],
    delay: usize,
    pending_as_unlabeled: bool,
) -> (Vec<Sample>, Vec<Sample>) {
    if delay > 0 && pending_as_unlabeled {
        let mut pool = unlabeled.to_vec();
        pool.extend(labeled.iter().cloned().map(|mut s| {
            s.observed_label = None;
            s
        }));
        (Vec::new(), pool)
    } else {
        (labeled.to_vec(), unlabeled.to_vec())
    }
}

/// Sizes of `B_l` and `B_u` sharing `rest` slots in proportion to the pool
/// sizes, each at least one when its pool is non-empty.
fn split_rest(rest: usize, n_l: usize, n_u: usize) -> (usize, usize) {
    if n_l + n_u == 0 {
        return (0, 0);
    }
    let mut bl = (rest as f64 * n_l as f64 / (n_l + n_u) as f64).round() as usize;
    if n_l > 0 {
        bl = bl.max(1);
    }
    if n_u > 0 && rest > 1 {
        bl = bl.min(rest - 1);
    }
    let bl = bl.min(rest);
    let bu = if n_u > 0 { rest - bl } else { 0 };
    (bl, bu)
}

/// Model, buffer and projection memory of one seeded run.
#[derive(Debug, Clone)]
pub struct TrainerState<'c> {
    cfg: &'c ExperimentConfig,
    threshold: ThresholdConfig,
    model: ModelParams,
    memory: BufferMemory,
    gpm: Option<GpmStore>,
    rng_batch: ChaCha8Rng,
    rng_dropout: ChaCha8Rng,
    rng_replay: ChaCha8Rng,
    rng_oracle: ChaCha8Rng,
    rng_noise: ChaCha8Rng,
    noise: NoiseRecord,
    tasks_trained: usize,
}

impl<'c> TrainerState<'c> {
    pub fn new(cfg: &'c ExperimentConfig, seed: u64, input_dim: usize) -> Result<Self> {
        let mut model = ModelParams::init(cfg.architecture(input_dim), sub_seed(seed, 1))?;
        model.set_mode(Mode::Train);
        let gpm = if cfg.gpm.enabled {
            let mode = if cfg.gpm.layerwise {
                GpmMode::Layerwise
            } else {
                GpmMode::Global
            };
            let tracked = Some(cfg.gpm.scope.mask(&model));
            Some(
                GpmStore::new(&model, mode, cfg.gpm.energy)?
                    .with_max_rank(cfg.gpm.max_rank)
                    .with_tracked(tracked),
            )
        } else {
            None
        };
        Ok(TrainerState {
            cfg,
            threshold: cfg.threshold_config(),
            model,
            memory: BufferMemory::new(),
            gpm,
            rng_batch: rng_for(seed, 2),
            rng_dropout: rng_for(seed, 3),
            rng_replay: rng_for(seed, 4),
            rng_oracle: rng_for(seed, 5),
            rng_noise: rng_for(seed, 6),
            noise: NoiseRecord::default(),
            tasks_trained: 0,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn memory(&self) -> &BufferMemory {
        &self.memory
    }

    pub fn gpm(&self) -> Option<&GpmStore> {
        self.gpm.as_ref()
    }

    pub fn noise_record(&self) -> &NoiseRecord {
        &self.noise
    }

    /// Removes the projection memory; later tasks train unprojected and
    /// nothing new is recorded.
    pub fn detach_gpm(&mut self) -> Option<GpmStore> {
        self.gpm.take()
    }

    /// Admits due delayed labels with their ground-truth labels.
    fn admit_due(&mut self, task: usize, report: &mut TaskReport) -> Result<()> {
        let t0 = Instant::now();
        report.admitted = self.memory.advance_delay_queue(task, |s| s.true_label)?;
        report.timings.buffer_secs += secs(t0);
        Ok(())
    }

    fn store_labels(&mut self, task: usize, labeled: &[Sample], delay: usize, report: &mut TaskReport) -> Result<()> {
        let t0 = Instant::now();
        self.memory
            .enqueue_delayed(labeled.to_vec(), task, DelayPolicy { delta_tasks: delay })?;
        report.timings.buffer_secs += secs(t0);
        Ok(())
    }

    /// Trains on a task whose training split carries some labels.
    pub fn train_seen_task(&mut self, task: &TaskData) -> Result<TaskReport> {
        let start = Instant::now();
        let t = task.task_index;
        let mut report = TaskReport {
            task: t,
            seen: true,
            ..TaskReport::default()
        };
        self.admit_due(t, &mut report)?;
        self.store_labels(t, &task.labeled, self.cfg.delay.seen, &mut report)?;
        let (labeled, unlabeled) = training_split(
            &task.labeled,
            &task.unlabeled,
            self.cfg.delay.seen,
            self.cfg.delay.pending_as_unlabeled,
        );
        self.train_on_task(&labeled, &unlabeled, &task.validation, &mut report)?;
        self.update_projection_memory(&labeled, &mut report)?;
        report.timings.total_secs = secs(start);
        Ok(report)
    }

    /// Buys labels for part of an unlabeled task, then trains on it.
    pub fn run_unseen_task(&mut self, task: &TaskData) -> Result<TaskReport> {
        let start = Instant::now();
        let t = task.task_index;
        let cfg = self.cfg;
        let mut report = TaskReport {
            task: t,
            seen: false,
            ..TaskReport::default()
        };
        self.admit_due(t, &mut report)?;

        let mut pool: Vec<Sample> = task.unlabeled.clone();
        pool.extend(task.labeled.iter().cloned());
        pool.sort_by_key(|s| s.id);
        for s in &mut pool {
            s.observed_label = None;
        }
        let groups = GroupLatents::from_memory(&self.memory, &self.model)?;
        let distances = pool_distances(&pool, &groups, &self.model, cfg.distance)?;
        let picked = select_for_labeling(&distances, cfg.budget, cfg.ranking);
        report.oracle_shortfall = cfg.budget.saturating_sub(picked.len());
        if report.oracle_shortfall > 0 {
            log::info!(
                "task {t}: pool of {} is smaller than the budget {}",
                pool.len(),
                cfg.budget
            );
        }
        let position: BTreeMap<u64, usize> = picked.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut selected: Vec<Option<Sample>> = vec![None; picked.len()];
        let mut rest = Vec::with_capacity(pool.len() - picked.len());
        for s in pool {
            match position.get(&s.id) {
                Some(&i) => selected[i] = Some(s),
                None => rest.push(s),
            }
        }
        let selected: Vec<Sample> = selected.into_iter().map(|s| s.expect("picked id in pool")).collect();
        let mut selected = label_with_oracle(selected, cfg.oracle, &self.model, &mut self.rng_oracle)?;
        report.oracle_calls = selected.len();
        if cfg.noise.ratio > 0.0 {
            let record = flip_labels(&mut selected, cfg.noise.ratio, &mut self.rng_noise)?;
            report.noise_flips = record.len();
            self.noise.merge(record);
        }
        let by_id: BTreeMap<u64, (f64, f64)> = distances.iter().map(|g| (g.sample_id, (g.d0, g.d1))).collect();
        report.selections = selected
            .iter()
            .map(|s| {
                let (d0, d1) = by_id[&s.id];
                SelectionRecord {
                    seed: 0,
                    task: t,
                    sample_id: s.id,
                    d0,
                    d1,
                    label_source: cfg.oracle.source_name().to_string(),
                    label: s.observed_label.expect("oracle assigned a label"),
                }
            })
            .collect();

        self.store_labels(t, &selected, cfg.delay.unseen, &mut report)?;
        let (labeled, unlabeled) =
            training_split(&selected, &rest, cfg.delay.unseen, cfg.delay.pending_as_unlabeled);
        self.train_on_task(&labeled, &unlabeled, &task.validation, &mut report)?;
        self.update_projection_memory(&labeled, &mut report)?;
        report.timings.total_secs = secs(start);
        Ok(report)
    }

    fn update_projection_memory(&mut self, labeled: &[Sample], report: &mut TaskReport) -> Result<()> {
        let Some(store) = self.gpm.as_mut() else {
            return Ok(());
        };
        let t0 = Instant::now();
        let malware: Vec<&Sample> = labeled.iter().filter(|s| s.observed_label == Some(1)).collect();
        if malware.is_empty() {
            log::warn!("task {}: no labeled malware, projection memory unchanged", report.task);
        } else {
            for s in &malware {
                report.consumed.record(s);
            }
            let grads = store.collect_gradients(&self.model, &malware)?;
            let t1 = Instant::now();
            store.update_basis(&grads)?;
            log::debug!(
                "task {}: {} malware gradients, collect {:.3}s, update {:.3}s",
                report.task,
                malware.len(),
                (t1 - t0).as_secs_f64(),
                secs(t1)
            );
        }
        report.timings.gpm_secs += secs(t0);
        Ok(())
    }

    fn validation_score(&self, validation: &[Sample]) -> Result<f64> {
        let (_, malware) = self.score(validation)?;
        Ok(malware)
    }

    /// (benign, malware) PR-AUC of the current model; NaN for a class
    /// without positives.
    pub fn score(&self, samples: &[Sample]) -> Result<(f64, f64)> {
        if samples.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let batch = self.scored_batch(samples)?;
        let auc = |label| match pr_auc(&batch, label) {
            Ok(v) => Ok(v),
            Err(Error::NoPositives) => Ok(f64::NAN),
            Err(e) => Err(e),
        };
        Ok((auc(0)?, auc(1)?))
    }

    fn scored_batch(&self, samples: &[Sample]) -> Result<ScoredBatch> {
        let x = feature_matrix(samples.iter(), self.model.architecture().input_dim);
        let scores = self.model.predict_malware(x.view())?;
        ScoredBatch::new(scores, samples.iter().map(|s| s.true_label).collect())
    }

    /// Full evaluation of a test split.
    pub fn evaluate(&self, task: usize, seen: bool, samples: &[Sample]) -> Result<TaskMetrics> {
        let (benign, malware) = self.score(samples)?;
        let tpr = match self.scored_batch(samples).and_then(|b| tpr_at_fpr(&b, self.cfg.eval.fpr_target)) {
            Ok(p) => p.tpr,
            Err(Error::DegenerateBatch) => f64::NAN,
            Err(e) => return Err(e),
        };
        Ok(TaskMetrics {
            task,
            seen,
            pr_auc_benign: benign,
            pr_auc_malware: malware,
            tpr_at_fpr: tpr,
        })
    }

    fn train_on_task(
        &mut self,
        labeled: &[Sample],
        unlabeled: &[Sample],
        validation: &[Sample],
        report: &mut TaskReport,
    ) -> Result<()> {
        let cfg = self.cfg;
        report.labeled = labeled.len();
        report.unlabeled = unlabeled.len();

        let t0 = Instant::now();
        let exemplars: Vec<Sample> = self.memory.exemplars().cloned().collect();
        let refs: Vec<&Sample> = exemplars.iter().collect();
        let space = match RepSpace::build(&refs, &self.model, cfg.repspace_energy, cfg.svd_enabled) {
            Ok(s) => Some(s),
            Err(e @ (Error::EmptyMemory | Error::MissingClass(_))) => {
                log::warn!("task {}: no representation space ({e}); pairing disabled", report.task);
                None
            }
            Err(e) => return Err(e),
        };
        report.timings.svd_secs += secs(t0);

        let n_train = labeled.len() + unlabeled.len();
        if n_train == 0 {
            return Ok(());
        }
        let b = cfg.optimizer.batch_size;
        let n_m = if cfg.memory.replay {
            ((cfg.memory.b_m_frac * b as f64).round() as usize).min(b.saturating_sub(1))
        } else {
            0
        };
        let rest = b - n_m;
        let (n_l, n_u) = split_rest(rest, labeled.len(), unlabeled.len());
        let steps = n_train.div_ceil(rest);
        let early_stop = cfg.optimizer.patience > 0 && validation.iter().any(|s| s.true_label == 1);
        let mut best: Option<(f64, ModelParams)> = None;
        let mut bad_epochs = 0;
        let mut l_order: Vec<usize> = (0..labeled.len()).collect();
        let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
        for _ in 0..cfg.optimizer.epochs_per_task {
            l_order.shuffle(&mut self.rng_batch);
            u_order.shuffle(&mut self.rng_batch);
            for s in 0..steps {
                let bl: Vec<&Sample> = l_order.iter().skip(s * n_l).take(n_l).map(|&i| &labeled[i]).collect();
                let bu: Vec<&Sample> = u_order.iter().skip(s * n_u).take(n_u).map(|&i| &unlabeled[i]).collect();
                self.train_step(&bl, &bu, n_m, space.as_ref(), &exemplars, report)?;
            }
            report.epochs_run += 1;
            if early_stop {
                let score = self.validation_score(validation)?;
                match &best {
                    Some((top, _)) if !(score > *top) => {
                        bad_epochs += 1;
                        if bad_epochs >= cfg.optimizer.patience {
                            break;
                        }
                    }
                    _ => {
                        best = Some((score, self.model.clone()));
                        bad_epochs = 0;
                    }
                }
            }
        }
        if let Some((_, model)) = best {
            self.model = model;
        }
        self.tasks_trained += 1;
        Ok(())
    }

    fn train_step(
        &mut self,
        bl: &[&Sample],
        bu: &[&Sample],
        n_m: usize,
        space: Option<&RepSpace>,
        exemplars: &[Sample],
        report: &mut TaskReport,
    ) -> Result<()> {
        let cfg = self.cfg;
        let dim = self.model.architecture().input_dim;
        let t0 = Instant::now();
        let bm = if n_m > 0 && !self.memory.is_empty() {
            self.memory
                .retrieve_balanced(n_m, cfg.memory.bma, &mut self.rng_replay)?
        } else {
            Vec::new()
        };
        report.timings.buffer_secs += secs(t0);

        let mut rows: Vec<&Sample> = Vec::with_capacity(bl.len() + bm.len() + 2 * bu.len());
        rows.extend(bl.iter().copied());
        rows.extend(bm.iter());
        let sup: Vec<SupTerm> = rows
            .iter()
            .enumerate()
            .filter_map(|(row, s)| s.observed_label.map(|label| SupTerm { row, label }))
            .collect();
        let bu_start = rows.len();
        rows.extend(bu.iter().copied());

        let mut pairs = Vec::new();
        if let Some(space) = space {
            let anchors: Vec<(usize, Anchor)> = bl
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.observed_label.map(|label| (i, Anchor::Labeled { id: s.id, label })))
                .chain((0..bu.len()).map(|i| (bu_start + i, Anchor::Unlabeled)))
                .collect();
            if !anchors.is_empty() {
                let x = feature_matrix(anchors.iter().map(|&(row, _)| rows[row]), dim);
                let z = self.model.encode(x.view())?;
                let mut exemplar_rows: BTreeMap<usize, usize> = BTreeMap::new();
                for (&(row, anchor), zi) in anchors.iter().zip(z.rows()) {
                    let outcome = space.find_with_stats(zi, &self.threshold, anchor, &mut report.pairing)?;
                    if let Some(m) = outcome.matched() {
                        let exemplar = *exemplar_rows.entry(m.index).or_insert_with(|| {
                            rows.push(&exemplars[m.index]);
                            rows.len() - 1
                        });
                        pairs.push(Pair { anchor: row, exemplar });
                    }
                }
            }
        }
        if sup.is_empty() && pairs.is_empty() {
            return Ok(());
        }
        if self.model.architecture().batchnorm && rows.len() < 2 {
            log::debug!("skipping a single-row batch");
            return Ok(());
        }
        for s in &rows {
            report.consumed.record(s);
        }
        let x = feature_matrix(rows.iter().copied(), dim);
        let out = self
            .model
            .forward_with(x.view(), BnStats::Batch, Some(&mut self.rng_dropout))?;
        let objective = Objective {
            sup,
            pairs,
            stop_grad_exemplar: cfg.stop_grad_exemplar,
        };
        let value = objective.evaluate(out.probs.view())?;
        let mut grads = self.model.backward(&out.trace, value.dlogits.view())?;
        self.model.commit_batch_stats(&out.trace);
        if let Some(store) = self.gpm.as_ref().filter(|s| !s.is_empty()) {
            let t1 = Instant::now();
            grads = store.project_orthogonal(&grads)?;
            report.timings.gpm_secs += secs(t1);
        }
        self.model.sgd_step(&grads, &cfg.optimizer, None)?;
        report.steps += 1;
        Ok(())
    }
}

/// Test-split scores of one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    pub task: usize,
    pub seen: bool,
    pub pr_auc_benign: f64,
    pub pr_auc_malware: f64,
    pub tpr_at_fpr: f64,
}

/// A re-score of an earlier task's test split after training `after`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetroMetrics {
    pub after: usize,
    pub metrics: TaskMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub task: usize,
    pub seen: bool,
    pub occupancy: Occupancy,
    pub gpm_rank: usize,
    pub gpm_values: usize,
    pub report: TaskReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub tasks: Vec<TaskMetrics>,
    pub retro: Vec<RetroMetrics>,
    pub aut: AutSummary,
    pub memory: Vec<MemoryRecord>,
    pub noise: NoiseRecord,
}

impl SeedArtifacts {
    pub fn selections(&self) -> impl Iterator<Item = &SelectionRecord> {
        self.memory.iter().flat_map(|m| m.report.selections.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub name: String,
    pub seeds: Vec<SeedArtifacts>,
    pub mean: AutSummary,
    pub std: AutSummary,
}

/// The stream's tasks for one seed, before label masking.
fn build_tasks(cfg: &ExperimentConfig, seed: u64, csv: Option<&[Sample]>) -> Result<Vec<TaskData>> {
    match (&cfg.stream, csv) {
        (StreamSource::Synthetic(s), _) => {
            let mut s = s.clone();
            s.seed = s.seed.wrapping_add(seed);
            make_tasks(gen_synthetic_samples(&s)?, sub_seed(seed, 7))
        }
        (StreamSource::Csv(_), Some(samples)) => make_tasks(samples.to_vec(), sub_seed(seed, 7)),
        (StreamSource::Csv(path), None) => Err(Error::DatasetMissing(path.clone())),
    }
}

fn input_dim(tasks: &[TaskData]) -> Result<usize> {
    tasks
        .iter()
        .flat_map(|t| t.all_samples())
        .map(|s| s.features.len())
        .next()
        .ok_or_else(|| invalid("stream has no samples"))
}

/// Runs every task of one seed in order, evaluating after each.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    tasks: Vec<TaskData>,
    checkpoints: Option<&Path>,
) -> Result<SeedArtifacts> {
    if cfg.seen_tasks > tasks.len() {
        return Err(invalid(format!(
            "seen_tasks {} exceeds the {} tasks in the stream",
            cfg.seen_tasks,
            tasks.len()
        )));
    }
    let dim = input_dim(&tasks)?;
    let mut state = TrainerState::new(cfg, seed, dim)?;
    let mut mask_rng = rng_for(seed, 8);
    let mut seen_noise_rng = rng_for(seed, 9);
    let mut metrics = Vec::with_capacity(tasks.len());
    let mut retro = Vec::new();
    let mut memory = Vec::with_capacity(tasks.len());
    let mut tests: Vec<(usize, bool, Vec<Sample>)> = Vec::new();
    for task in tasks {
        let t = task.task_index;
        let seen = t < cfg.seen_tasks;
        let (report, pre) = if seen {
            let mut task = mask_labels(task, cfg.label_ratio, &mut mask_rng)?;
            if cfg.noise.seen && cfg.noise.ratio > 0.0 {
                let record = flip_labels(&mut task.labeled, cfg.noise.ratio, &mut seen_noise_rng)?;
                state.noise.merge(record);
            }
            let report = state.train_seen_task(&task)?;
            tests.push((t, true, task.test));
            (report, None)
        } else {
            let task = task.into_unlabeled();
            let pre = if cfg.eval.pre_adaptation {
                Some(state.evaluate(t, false, &task.test)?)
            } else {
                None
            };
            let report = state.run_unseen_task(&task)?;
            tests.push((t, false, task.test));
            (report, pre)
        };
        let (_, _, test) = tests.last().expect("just pushed");
        let m = match pre {
            Some(m) => m,
            None => state.evaluate(t, seen, test)?,
        };
        metrics.push(m);
        if cfg.eval.retrospective {
            for (et, eseen, etest) in &tests[..tests.len() - 1] {
                retro.push(RetroMetrics {
                    after: t,
                    metrics: state.evaluate(*et, *eseen, etest)?,
                });
            }
        }
        let mut report = report;
        for s in &mut report.selections {
            s.seed = seed;
        }
        memory.push(MemoryRecord {
            task: t,
            seen,
            occupancy: state.memory.occupancy(),
            gpm_rank: state.gpm.as_ref().map_or(0, |g| g.ranks().iter().sum()),
            gpm_values: state.gpm.as_ref().map_or(0, |g| g.stored_values()),
            report,
        });
        log::info!(
            "seed {seed} task {t} ({}): PR-AUC benign {:.4} malware {:.4}",
            if seen { "seen" } else { "unseen" },
            m.pr_auc_benign,
            m.pr_auc_malware
        );
        if let Some(dir) = checkpoints.filter(|_| cfg.checkpoint.every_task) {
            let ckpt = Checkpoint {
                task: t,
                model: state.model.clone(),
                gpm: None,
            };
            checkpoint::save(&dir.join(format!("seed{seed}-task{t}.ckpt")), &ckpt)?;
        }
    }
    if let Some(dir) = checkpoints {
        let last = metrics.last().map_or(0, |m| m.task);
        let ckpt = Checkpoint {
            task: last,
            model: state.model.clone(),
            gpm: if cfg.checkpoint.gpm { state.gpm.clone() } else { None },
        };
        checkpoint::save(&dir.join(format!("seed{seed}-final.ckpt")), &ckpt)?;
    }
    let benign: Vec<f64> = metrics.iter().map(|m| m.pr_auc_benign).collect();
    let malware: Vec<f64> = metrics.iter().map(|m| m.pr_auc_malware).collect();
    Ok(SeedArtifacts {
        seed,
        aut: AutSummary::from_series(&benign, &malware, cfg.seen_tasks),
        tasks: metrics,
        retro,
        memory,
        noise: state.noise,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    run_experiment_in(cfg, None)
}

/// Runs every seed; with a directory, checkpoints go to its `checkpoints/`.
pub fn run_experiment_in(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let csv = match &cfg.stream {
        StreamSource::Csv(path) => {
            if !path.exists() {
                return Err(Error::DatasetMissing(path.clone()));
            }
            Some(load_csv_dataset(path)?.samples)
        }
        StreamSource::Synthetic(_) => None,
    };
    let ckpt_dir = match dir {
        Some(d) => {
            let c = d.join("checkpoints");
            std::fs::create_dir_all(&c)?;
            Some(c)
        }
        None => None,
    };
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let tasks = build_tasks(cfg, seed, csv.as_deref())?;
        seeds.push(run_seed(cfg, seed, tasks, ckpt_dir.as_deref())?);
    }
    let (mean, std) = summarize(&seeds);
    Ok(RunArtifacts {
        name: cfg.name.clone(),
        seeds,
        mean,
        std,
    })
}

fn summarize(seeds: &[SeedArtifacts]) -> (AutSummary, AutSummary) {
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for k in 0..6 {
        let vals: Vec<f64> = seeds.iter().map(|s| s.aut.values()[k]).collect();
        (mean[k], std[k]) = mean_std(&vals);
    }
    (AutSummary::from_values(mean), AutSummary::from_values(std))
}

/// Float formatting that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub const METRICS_HEADER: [&str; 6] = ["section", "seed", "task", "split", "metric", "value"];

fn split_name(seen: bool) -> &'static str {
    if seen {
        "seen"
    } else {
        "unseen"
    }
}

pub fn write_metrics<W: Write>(out: W, run: &RunArtifacts) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    let task_rows = |w: &mut csv::Writer<W>, section: &str, seed: u64, split: &str, m: &TaskMetrics| -> Result<()> {
        for (metric, v) in [
            ("pr_auc_benign", m.pr_auc_benign),
            ("pr_auc_malware", m.pr_auc_malware),
            ("tpr_at_fpr", m.tpr_at_fpr),
        ] {
            w.write_record([section, &seed.to_string(), &m.task.to_string(), split, metric, &fmt_f64(v)])?;
        }
        Ok(())
    };
    for s in &run.seeds {
        for m in &s.tasks {
            task_rows(&mut w, "task", s.seed, split_name(m.seen), m)?;
        }
        for r in &s.retro {
            task_rows(&mut w, "retro", s.seed, &format!("after_{}", r.after), &r.metrics)?;
        }
        for (col, v) in AUT_COLUMNS.iter().zip(s.aut.values()) {
            w.write_record(["aut", &s.seed.to_string(), "", "", col, &fmt_f64(v)])?;
        }
    }
    for (label, summary) in [("mean", &run.mean), ("std", &run.std)] {
        for (col, v) in AUT_COLUMNS.iter().zip(summary.values()) {
            w.write_record(["summary", label, "", "", col, &fmt_f64(v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_selections<W: Write>(out: W, run: &RunArtifacts) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SELECTION_HEADER)?;
    for s in &run.seeds {
        for r in s.selections() {
            w.write_record(r.fields())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const MEMORY_HEADER: [&str; 23] = [
    "seed",
    "task",
    "split",
    "chunks",
    "benign",
    "malware",
    "queue_entries",
    "queued_samples",
    "admitted",
    "labeled",
    "unlabeled",
    "pairs_accepted",
    "pairs_rejected",
    "label_ties",
    "gpm_rank",
    "gpm_values",
    "oracle_calls",
    "oracle_shortfall",
    "noise_flips",
    "epochs",
    "consumed_count",
    "consumed_checksum",
    "max_consumed_task",
];

pub fn write_memory<W: Write>(out: W, run: &RunArtifacts) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MEMORY_HEADER)?;
    for s in &run.seeds {
        for m in &s.memory {
            let r = &m.report;
            let o = &m.occupancy;
            let row: Vec<String> = vec![
                s.seed.to_string(),
                m.task.to_string(),
                split_name(m.seen).to_string(),
                o.chunks.to_string(),
                o.benign.to_string(),
                o.malware.to_string(),
                o.queue_entries.to_string(),
                o.queued_samples.to_string(),
                r.admitted.to_string(),
                r.labeled.to_string(),
                r.unlabeled.to_string(),
                r.pairing.accepted.to_string(),
                r.pairing.rejected.to_string(),
                r.pairing.label_ties.to_string(),
                m.gpm_rank.to_string(),
                m.gpm_values.to_string(),
                r.oracle_calls.to_string(),
                r.oracle_shortfall.to_string(),
                r.noise_flips.to_string(),
                r.epochs_run.to_string(),
                r.consumed.count().to_string(),
                format!("{:016x}", r.consumed.checksum()),
                r.consumed.max_task().map_or(String::new(), |t| t.to_string()),
            ];
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const TIMINGS_HEADER: [&str; 6] = ["seed", "task", "svd_secs", "gpm_secs", "buffer_secs", "total_secs"];

pub fn write_timings<W: Write>(out: W, run: &RunArtifacts) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TIMINGS_HEADER)?;
    for s in &run.seeds {
        for m in &s.memory {
            let t = &m.report.timings;
            w.write_record([
                s.seed.to_string(),
                m.task.to_string(),
                format!("{:.6}", t.svd_secs),
                format!("{:.6}", t.gpm_secs),
                format!("{:.6}", t.buffer_secs),
                format!("{:.6}", t.total_secs),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `config.snapshot` and the four CSV files into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, run: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::write(dir.join("config.snapshot"), crate::config::to_snapshot(cfg))?;
    let file = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
    };
    write_metrics(file("metrics.csv")?, run)?;
    write_selections(file("selections.csv")?, run)?;
    write_memory(file("memory.csv")?, run)?;
    write_timings(file("timings.csv")?, run)?;
    Ok(())
}
