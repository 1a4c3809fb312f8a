//! Samples, tasks, and the stream they come in.
//!
//! A task is one month of data. Each task is shuffled with a fixed seed and
//! split into train (70%), validation (5%) and test (the remaining 25%).
//! The train part is then divided into a labeled and an unlabeled pool by
//! [`mask_labels`].
//!
//! CSV interchange format (UTF-8, LF, no quoting):
//!
//! ```text
//! id,month,label,f0,f1,...,f{d-1}
//! 17,2019-08,1,0.25,-1.5,...
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VALIDATION_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Array1<f64>,
    /// Ground truth; only oracles and evaluation read it.
    pub true_label: u8,
    /// The label training sees, if any. May differ from `true_label` under
    /// injected noise.
    pub observed_label: Option<u8>,
    pub task_index: usize,
}

impl Sample {
    pub fn labeled(id: u64, features: Array1<f64>, label: u8, task_index: usize) -> Self {
        Sample {
            id,
            features,
            true_label: label,
            observed_label: Some(label),
            task_index,
        }
    }
}

/// Stacks sample features into a batch matrix.
pub fn feature_matrix<'a, I>(samples: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a Sample>,
    I::IntoIter: ExactSizeIterator,
{
    let iter = samples.into_iter();
    let mut out = Array2::zeros((iter.len(), dim));
    for (mut row, s) in out.rows_mut().into_iter().zip(iter) {
        row.assign(&s.features);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskData {
    pub task_index: usize,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    pub fn train_len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Every sample of the task, partition by partition.
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.labeled
            .iter()
            .chain(&self.unlabeled)
            .chain(&self.validation)
            .chain(&self.test)
    }

    /// Drops every training label, turning the task into an unseen one.
    pub fn into_unlabeled(mut self) -> Self {
        let mut pool = std::mem::take(&mut self.labeled);
        pool.append(&mut self.unlabeled);
        pool.sort_by_key(|s| s.id);
        for s in &mut pool {
            s.observed_label = None;
        }
        self.unlabeled = pool;
        self
    }
}

/// Loaded CSV: samples in `(month, id)` order plus the month of each task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub months: Vec<String>,
    pub feature_dim: usize,
}

fn parse_month(s: &str) -> Option<(u32, u32)> {
    let (y, m) = s.split_once('-')?;
    if y.len() != 4 || m.len() != 2 {
        return None;
    }
    let y: u32 = y.parse().ok()?;
    let m: u32 = m.parse().ok()?;
    (1..=12).contains(&m).then_some((y, m))
}

/// Reads the CSV format above. Months map to consecutive task indices in
/// chronological order; gaps between months collapse.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::DatasetMissing(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    for (i, name) in ["id", "month", "label"].iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(Error::MissingColumn((*name).to_string()));
        }
    }
    let dim = headers.len() - 3;
    for j in 0..dim {
        let expected = format!("f{j}");
        if headers.get(j + 3) != Some(expected.as_str()) {
            return Err(Error::MissingColumn(expected));
        }
    }
    let mut rows: Vec<((u32, u32), String, Sample)> = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::MalformedRow {
                line,
                reason: format!("{} fields, header has {}", record.len(), headers.len()),
            });
        }
        let id: u64 = record[0].parse().map_err(|_| Error::MalformedRow {
            line,
            reason: format!("bad id `{}`", &record[0]),
        })?;
        if !seen_ids.insert(id) {
            return Err(Error::MalformedRow {
                line,
                reason: format!("duplicate id {id}"),
            });
        }
        let month = parse_month(&record[1]).ok_or_else(|| Error::MalformedRow {
            line,
            reason: format!("bad month `{}`", &record[1]),
        })?;
        let label = match &record[2] {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::MalformedRow {
                    line,
                    reason: format!("label `{other}` not in {{0,1}}"),
                })
            }
        };
        let mut features = Array1::zeros(dim);
        for j in 0..dim {
            let v: f64 = record[j + 3]
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::NonNumericFeature {
                    line,
                    column: headers[j + 3].to_string(),
                })?;
            features[j] = v;
        }
        rows.push((month, record[1].to_string(), Sample::labeled(id, features, label, 0)));
    }
    rows.sort_by(|a, b| (a.0, a.2.id).cmp(&(b.0, b.2.id)));
    let mut months: Vec<String> = Vec::new();
    let mut last = None;
    let mut samples = Vec::with_capacity(rows.len());
    for (key, name, mut sample) in rows {
        if last != Some(key) {
            months.push(name);
            last = Some(key);
        }
        sample.task_index = months.len() - 1;
        samples.push(sample);
    }
    Ok(Dataset {
        samples,
        months,
        feature_dim: dim,
    })
}

/// `YYYY-MM` for task `t` counted from `start`.
/// First month label given to a synthetic stream.
pub const SYNTHETIC_START: (u32, u32) = (2019, 8);

pub fn month_name(start: (u32, u32), t: usize) -> String {
    let total = start.0 as usize * 12 + (start.1 as usize - 1) + t;
    format!("{:04}-{:02}", total / 12, total % 12 + 1)
}

/// Writes samples in the CSV format, using `months[task_index]`.
pub fn write_csv_dataset<W: Write>(
    out: W,
    samples: &[Sample],
    months: &[String],
    dim: usize,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(out);
    let mut header = String::from("id,month,label");
    for j in 0..dim {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{header}")?;
    for s in samples {
        let month = months.get(s.task_index).ok_or_else(|| {
            Error::InvalidArgument(format!("no month for task {}", s.task_index))
        })?;
        write!(w, "{},{},{}", s.id, month, s.true_label)?;
        for v in s.features.iter() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Sizes of (train, validation, test) for a task of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (TRAIN_FRACTION * n as f64 + 1e-9).floor() as usize;
    let val = (VALIDATION_FRACTION * n as f64 + 1e-9).floor() as usize;
    (train, val, n - train - val)
}

/// Shuffles a task's samples with `seed` and splits them 70/5/25. All
/// train samples keep their labels; see [`mask_labels`].
pub fn split_task(task_index: usize, mut samples: Vec<Sample>, seed: u64) -> TaskData {
    samples.sort_by_key(|s| s.id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    use rand::seq::SliceRandom;
    samples.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(samples.len());
    let test = samples.split_off(n_train + n_val);
    let validation = samples.split_off(n_train);
    let mut labeled = samples;
    labeled.sort_by_key(|s| s.id);
    for s in &mut labeled {
        s.observed_label = Some(s.true_label);
    }
    TaskData {
        task_index,
        labeled,
        unlabeled: Vec::new(),
        validation,
        test,
    }
}

/// Groups samples by task index and splits every task.
pub fn make_tasks(samples: Vec<Sample>, seed: u64) -> Result<Vec<TaskData>> {
    let mut by_task: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        by_task.entry(s.task_index).or_default().push(s);
    }
    let n_tasks = by_task.keys().next_back().map_or(0, |&k| k + 1);
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let samples = by_task.remove(&t).ok_or(Error::EmptyTask(t))?;
        tasks.push(split_task(t, samples, seed));
    }
    Ok(tasks)
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
    }
    Ok(())
}

/// Keeps labels on `round(ratio * |train|)` train samples chosen uniformly;
/// the rest become unlabeled. Validation and test are untouched.
pub fn mask_labels<R: Rng + ?Sized>(task: TaskData, label_ratio: f64, rng: &mut R) -> Result<TaskData> {
    check_fraction("label_ratio", label_ratio)?;
    let TaskData {
        task_index,
        mut labeled,
        mut unlabeled,
        validation,
        test,
    } = task;
    labeled.append(&mut unlabeled);
    labeled.sort_by_key(|s| s.id);
    let n = labeled.len();
    let keep = (label_ratio * n as f64).round() as usize;
    let chosen: BTreeSet<usize> = index::sample(rng, n, keep.min(n)).into_iter().collect();
    let mut out_l = Vec::with_capacity(keep);
    let mut out_u = Vec::with_capacity(n - keep);
    for (i, mut s) in labeled.into_iter().enumerate() {
        if chosen.contains(&i) {
            s.observed_label = Some(s.observed_label.unwrap_or(s.true_label));
            out_l.push(s);
        } else {
            s.observed_label = None;
            out_u.push(s);
        }
    }
    Ok(TaskData {
        task_index,
        labeled: out_l,
        unlabeled: out_u,
        validation,
        test,
    })
}

/// Which labels were flipped: id -> (original, flipped).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseRecord {
    pub flips: BTreeMap<u64, (u8, u8)>,
}

impl NoiseRecord {
    pub fn len(&self) -> usize {
        self.flips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }

    pub fn merge(&mut self, other: NoiseRecord) {
        self.flips.extend(other.flips);
    }
}

/// Flips the observed label of `round(ratio * n)` samples chosen uniformly.
pub fn flip_labels<R: Rng + ?Sized>(
    samples: &mut [Sample],
    noise_ratio: f64,
    rng: &mut R,
) -> Result<NoiseRecord> {
    check_fraction("noise_ratio", noise_ratio)?;
    let n = samples.len();
    let k = ((noise_ratio * n as f64).round() as usize).min(n);
    let mut record = NoiseRecord::default();
    let mut picks: Vec<usize> = index::sample(rng, n, k).into_vec();
    picks.sort_unstable();
    for i in picks {
        let s = &mut samples[i];
        let original = s.observed_label.unwrap_or(s.true_label);
        let flipped = 1 - original;
        s.observed_label = Some(flipped);
        record.flips.insert(s.id, (original, flipped));
    }
    Ok(record)
}

/// Label noise on a task's labeled pool only.
pub fn inject_label_noise<R: Rng + ?Sized>(
    mut task: TaskData,
    noise_ratio: f64,
    rng: &mut R,
) -> Result<(TaskData, NoiseRecord)> {
    let record = flip_labels(&mut task.labeled, noise_ratio, rng)?;
    Ok((task, record))
}

/// Synthetic drifting stream: two Gaussian clusters per task whose means
/// translate linearly with the task index.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub n_tasks: usize,
    pub seen_tasks: usize,
    pub samples_per_task: usize,
    /// Benign:malware count ratio, e.g. `(9, 1)`.
    pub class_imbalance: (u32, u32),
    pub feature_dim: usize,
    pub label_ratio: f64,
    pub noise_ratio: f64,
    /// Per-task translation of each class mean.
    pub shift: f64,
    /// Standard deviation of every feature around its class mean.
    pub spread: f64,
    /// Distance between the two class means at task 0.
    pub separation: f64,
    /// Cosine between the malware drift direction and the direction from the
    /// malware mean to the benign mean at task 0. Zero gives a uniformly
    /// random direction.
    pub malware_drift_alignment: f64,
    /// Share of the benign drift direction in the rest of the malware
    /// drift. One moves both classes together, zero makes the rest
    /// orthogonal to the benign drift.
    pub drift_coupling: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            n_tasks: 12,
            seen_tasks: 5,
            samples_per_task: 1200,
            class_imbalance: (9, 1),
            feature_dim: 200,
            label_ratio: 0.2,
            noise_ratio: 0.0,
            shift: 0.35,
            spread: 1.0,
            separation: 4.0,
            malware_drift_alignment: 0.6,
            drift_coupling: 0.9,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_tasks == 0 {
            return bad("n_tasks must be >= 1");
        }
        if self.seen_tasks > self.n_tasks {
            return bad("seen_tasks exceeds n_tasks");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if self.samples_per_task < 2 {
            return bad("samples_per_task must be >= 2");
        }
        if self.class_imbalance.0 + self.class_imbalance.1 == 0 {
            return bad("class_imbalance must have a positive part");
        }
        if !(0.0..=1.0).contains(&self.label_ratio) {
            return bad("label_ratio outside [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return bad("noise_ratio outside [0, 1]");
        }
        if !(self.shift >= 0.0 && self.spread > 0.0 && self.separation >= 0.0) {
            return bad("shift and separation must be >= 0, spread > 0");
        }
        if !(-1.0..=1.0).contains(&self.malware_drift_alignment) {
            return bad("malware_drift_alignment outside [-1, 1]");
        }
        if !(-1.0..=1.0).contains(&self.drift_coupling) {
            return bad("drift_coupling outside [-1, 1]");
        }
        Ok(())
    }

    /// (benign, malware) counts per task.
    pub fn class_counts(&self) -> (usize, usize) {
        let (b, m) = self.class_imbalance;
        let benign = (self.samples_per_task as f64 * b as f64 / (b + m) as f64).round() as usize;
        (benign, self.samples_per_task - benign)
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// `v` with its components along `against` removed, normalized. Falls back
/// to `v` itself when nothing is left, which only happens for tiny `d`.
fn orthonormal_to(v: &Array1<f64>, against: &[&Array1<f64>]) -> Array1<f64> {
    let mut w = v.clone();
    for b in against {
        let n2 = b.dot(*b);
        if n2 > 0.0 {
            w = &w - &(*b * (w.dot(*b) / n2));
        }
    }
    let n = w.dot(&w).sqrt();
    if n > 1e-9 {
        w / n
    } else {
        v.clone()
    }
}

/// Class means of the synthetic stream at task `t`: (benign, malware).
#[derive(Debug, Clone)]
pub struct SyntheticGeometry {
    pub benign_origin: Array1<f64>,
    pub malware_origin: Array1<f64>,
    pub benign_drift: Array1<f64>,
    pub malware_drift: Array1<f64>,
    pub shift: f64,
}

impl SyntheticGeometry {
    pub fn new(cfg: &StreamConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.feature_dim;
        let axis = random_unit(&mut rng, d);
        let benign_drift = random_unit(&mut rng, d);
        let free = random_unit(&mut rng, d);
        let a = cfg.malware_drift_alignment;
        let c = cfg.drift_coupling;
        let u = orthonormal_to(&benign_drift, &[&axis]);
        let v = orthonormal_to(&free, &[&axis, &u]);
        let rest = &u * c + &v * (1.0 - c * c).max(0.0).sqrt();
        let malware_drift = &axis * (-a) + &rest * (1.0 - a * a).max(0.0).sqrt();
        SyntheticGeometry {
            benign_origin: &axis * (-cfg.separation / 2.0),
            malware_origin: &axis * (cfg.separation / 2.0),
            benign_drift,
            malware_drift,
            shift: cfg.shift,
        }
    }

    pub fn means(&self, t: usize) -> (Array1<f64>, Array1<f64>) {
        let k = self.shift * t as f64;
        (
            &self.benign_origin + &(&self.benign_drift * k),
            &self.malware_origin + &(&self.malware_drift * k),
        )
    }
}

/// Raw samples of the synthetic stream, ordered by task then id.
pub fn gen_synthetic_samples(cfg: &StreamConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let geometry = SyntheticGeometry::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let (n_benign, n_malware) = cfg.class_counts();
    let mut samples = Vec::with_capacity(cfg.n_tasks * cfg.samples_per_task);
    let mut next_id = 0u64;
    for t in 0..cfg.n_tasks {
        let (mb, mm) = geometry.means(t);
        let mut labels: Vec<u8> = std::iter::repeat_n(0u8, n_benign)
            .chain(std::iter::repeat_n(1u8, n_malware))
            .collect();
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
        for label in labels {
            let mean = if label == 0 { &mb } else { &mm };
            let features: Array1<f64> = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + cfg.spread * z
                })
                .collect();
            samples.push(Sample::labeled(next_id, features, label, t));
            next_id += 1;
        }
    }
    Ok(samples)
}

/// The synthetic stream split into tasks (train fully labeled).
pub fn gen_synthetic_stream(cfg: &StreamConfig) -> Result<Vec<TaskData>> {
    make_tasks(gen_synthetic_samples(cfg)?, cfg.seed)
}
