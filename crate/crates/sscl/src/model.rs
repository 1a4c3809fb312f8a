//! The detector: an MLP encoder producing latents followed by a linear
//! two-class classifier, with hand-written backpropagation.
//!
//! Every encoder layer is `linear -> batchnorm -> dropout -> relu`. The
//! latent is the output of the last encoder layer; the classifier maps it to
//! two logits (benign, malware).
//!
//! Parameters are kept as a flat list of matrices (biases and batchnorm
//! affine terms are `1 x n`), which is the granularity used by the gradient
//! projection memory and the optimizer:
//!
//! ```text
//! for each encoder layer: weight (out x in), bias (1 x out), [gamma, beta (1 x out)]
//! classifier:             weight (2 x latent), bias (1 x 2)
//! ```
//!
//! `forward_batch` is pure. In train mode it returns the batch statistics in
//! its trace and the caller commits them to the running averages with
//! [`ModelParams::commit_batch_stats`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Probability clamp used by both losses.
pub const PROB_EPS: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NUM_CLASSES: usize = 2;

/// Encoder widths used for the detector.
pub const DEFAULT_HIDDEN: [usize; 5] = [100, 250, 500, 150, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub batchnorm: bool,
    pub dropout: f64,
}

impl Architecture {
    pub fn detector(input_dim: usize) -> Self {
        Architecture {
            input_dim,
            hidden: DEFAULT_HIDDEN.to_vec(),
            batchnorm: true,
            dropout: 0.2,
        }
    }

    /// Width of the latent (the classifier's input).
    pub fn latent_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 1e-9,
            batch_size: 64,
            epochs_per_task: 5,
            patience: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs_per_task == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and epochs_per_task must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter tensors in the flat layout described in the module docs.
/// Gradients share the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(m: &ModelParams) -> Self {
        Gradients {
            tensors: m.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch("gradient tensor count".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.dim() != b.dim() {
                return Err(Error::ShapeMismatch("gradient tensor shape".into()));
            }
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RunningStats {
    mean: Array1<f64>,
    var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    seed: u64,
    params: Vec<Array2<f64>>,
    running: Vec<RunningStats>,
    mode: Mode,
}

/// Which statistics batchnorm normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnStats {
    Batch,
    Running,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer input (previous activation).
    input: Array2<f64>,
    /// Normalized pre-activation (or the raw pre-activation without batchnorm).
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    bn_stats: BnStats,
    /// Dropout scale per entry (0 or 1/(1-p)); `None` when dropout is off.
    mask: Option<Array2<f64>>,
    /// Output after relu.
    output: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Array2<f64>,
    layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub latent: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub trace: ForwardTrace,
}

/// Row-wise max-shifted softmax. The losses clamp its outputs, not this.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl ModelParams {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases,
    /// identity batchnorm.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut fan_in = arch.input_dim;
        let kaiming = |rng: &mut ChaCha8Rng, out: usize, inp: usize| {
            let bound = (6.0 / inp as f64).sqrt();
            Array2::from_shape_simple_fn((out, inp), || rng.random_range(-bound..=bound))
        };
        for &width in &arch.hidden {
            params.push(kaiming(&mut rng, width, fan_in));
            params.push(Array2::zeros((1, width)));
            if arch.batchnorm {
                params.push(Array2::ones((1, width)));
                params.push(Array2::zeros((1, width)));
                running.push(RunningStats {
                    mean: Array1::zeros(width),
                    var: Array1::ones(width),
                });
            }
            fan_in = width;
        }
        params.push(kaiming(&mut rng, NUM_CLASSES, fan_in));
        params.push(Array2::zeros((1, NUM_CLASSES)));
        Ok(ModelParams {
            arch,
            seed,
            params,
            running,
            mode: Mode::Train,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Names of the parameter tensors in layout order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.arch.hidden.len() {
            names.push(format!("enc{i}.weight"));
            names.push(format!("enc{i}.bias"));
            if self.arch.batchnorm {
                names.push(format!("enc{i}.bn_scale"));
                names.push(format!("enc{i}.bn_shift"));
            }
        }
        names.push("cls.weight".into());
        names.push("cls.bias".into());
        names
    }

    /// Batchnorm running (mean, variance) of encoder layer `layer`.
    pub fn running_stats(&self, layer: usize) -> Option<(ArrayView1<'_, f64>, ArrayView1<'_, f64>)> {
        self.running.get(layer).map(|r| (r.mean.view(), r.var.view()))
    }

    #[cfg(test)]
    pub(crate) fn running_stats_mut(&mut self, layer: usize) -> Option<(&mut Array1<f64>, &mut Array1<f64>)> {
        self.running.get_mut(layer).map(|r| (&mut r.mean, &mut r.var))
    }

    fn per_layer(&self) -> usize {
        if self.arch.batchnorm {
            4
        } else {
            2
        }
    }

    fn classifier_index(&self) -> usize {
        self.arch.hidden.len() * self.per_layer()
    }

    /// Forward pass over a batch (rows are samples) in the model's mode.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        match self.mode {
            Mode::Train => self.forward_with(x, BnStats::Batch, Some(rng)),
            Mode::Eval => self.forward_with(x, BnStats::Running, None::<&mut R>),
        }
    }

    /// Deterministic eval-mode forward regardless of the stored mode.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<ForwardOutput> {
        self.forward_with(x, BnStats::Running, None::<&mut ChaCha8Rng>)
    }

    /// Forward with explicit batchnorm statistics; dropout is applied only
    /// when an rng is supplied.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        bn_stats: BnStats,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        let (batch, dim) = x.dim();
        if dim != self.arch.input_dim {
            return Err(Error::DimMismatch {
                expected: self.arch.input_dim,
                got: dim,
            });
        }
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if bn_stats == BnStats::Batch && self.arch.batchnorm && batch < 2 {
            return Err(Error::TrainModeSingleSample);
        }
        let per = self.per_layer();
        let mut layers = Vec::with_capacity(self.arch.hidden.len());
        let mut act = x.to_owned();
        for (li, &width) in self.arch.hidden.iter().enumerate() {
            let w = &self.params[li * per];
            let b = &self.params[li * per + 1];
            let mut h = act.dot(&w.t());
            h += &b.row(0);
            let (xhat, inv_std, batch_mean, batch_var, y) = if self.arch.batchnorm {
                let gamma = self.params[li * per + 2].row(0);
                let beta = self.params[li * per + 3].row(0);
                let (mean, var) = match bn_stats {
                    BnStats::Batch => {
                        let mean = h.mean_axis(Axis(0)).expect("non-empty batch");
                        let var = h.var_axis(Axis(0), 0.0);
                        (mean, var)
                    }
                    BnStats::Running => {
                        let r = &self.running[li];
                        (r.mean.clone(), r.var.clone())
                    }
                };
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let mut xhat = h;
                xhat -= &mean;
                xhat *= &inv_std;
                let mut y = xhat.clone();
                y *= &gamma;
                y += &beta;
                (xhat, inv_std, mean, var, y)
            } else {
                let y = h.clone();
                (h, Array1::ones(width), Array1::zeros(width), Array1::zeros(width), y)
            };
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.arch.dropout > 0.0 => {
                    let keep = 1.0 - self.arch.dropout;
                    let scale = 1.0 / keep;
                    Some(Array2::from_shape_simple_fn((batch, width), || {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            0.0
                        }
                    }))
                }
                _ => None,
            };
            let mut out = y;
            if let Some(m) = &mask {
                out *= m;
            }
            out.mapv_inplace(|v| v.max(0.0));
            layers.push(LayerTrace {
                input: act,
                xhat,
                inv_std,
                batch_mean,
                batch_var,
                bn_stats,
                mask,
                output: out.clone(),
            });
            act = out;
        }
        let ci = self.classifier_index();
        let mut logits = act.dot(&self.params[ci].t());
        logits += &self.params[ci + 1].row(0);
        let probs = softmax_rows(logits.view());
        Ok(ForwardOutput {
            latent: act,
            logits,
            probs,
            trace: ForwardTrace {
                input: x.to_owned(),
                layers,
            },
        })
    }

    /// Latents of a batch in eval mode.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_eval(x)?.latent)
    }

    /// Malware-class probabilities of a batch in eval mode.
    pub fn predict_malware(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let out = self.forward_eval(x)?;
        Ok(out.probs.column(1).to_vec())
    }

    /// Folds a train-mode trace's batch statistics into the running
    /// averages (momentum 0.1, unbiased variance).
    pub fn commit_batch_stats(&mut self, trace: &ForwardTrace) {
        for (r, lt) in self.running.iter_mut().zip(&trace.layers) {
            if lt.bn_stats != BnStats::Batch {
                continue;
            }
            let n = lt.input.nrows() as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            Zip::from(&mut r.mean)
                .and(&lt.batch_mean)
                .for_each(|m, &b| *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b);
            Zip::from(&mut r.var)
                .and(&lt.batch_var)
                .for_each(|v, &b| *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbiased);
        }
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the logits.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: ArrayView2<f64>) -> Result<Gradients> {
        if trace.layers.len() != self.arch.hidden.len() {
            return Err(Error::ShapeMismatch("trace layer count".into()));
        }
        let latent = match trace.layers.last() {
            Some(l) => l.output.view(),
            None => trace.input.view(),
        };
        if dlogits.dim() != (latent.nrows(), NUM_CLASSES) {
            return Err(Error::ShapeMismatch(format!(
                "dlogits {:?} vs batch {}",
                dlogits.dim(),
                latent.nrows()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let per = self.per_layer();
        let ci = self.classifier_index();
        grads.tensors[ci] = dlogits.t().dot(&latent);
        grads.tensors[ci + 1].row_mut(0).assign(&dlogits.sum_axis(Axis(0)));
        let mut dact = dlogits.dot(&self.params[ci]);

        for li in (0..self.arch.hidden.len()).rev() {
            let lt = &trace.layers[li];
            // relu
            Zip::from(&mut dact)
                .and(&lt.output)
                .for_each(|d, &o| {
                    if o <= 0.0 {
                        *d = 0.0
                    }
                });
            if let Some(m) = &lt.mask {
                dact *= m;
            }
            let dh = if self.arch.batchnorm {
                let gamma = self.params[li * per + 2].row(0);
                grads.tensors[li * per + 2]
                    .row_mut(0)
                    .assign(&(&dact * &lt.xhat).sum_axis(Axis(0)));
                grads.tensors[li * per + 3]
                    .row_mut(0)
                    .assign(&dact.sum_axis(Axis(0)));
                let mut dxhat = dact;
                dxhat *= &gamma;
                match lt.bn_stats {
                    BnStats::Running => {
                        dxhat *= &lt.inv_std;
                        dxhat
                    }
                    BnStats::Batch => {
                        let n = dxhat.nrows() as f64;
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * &lt.xhat).sum_axis(Axis(0));
                        let mut dh = dxhat;
                        Zip::from(dh.rows_mut()).and(lt.xhat.rows()).for_each(|mut d, xh| {
                            Zip::from(&mut d)
                                .and(&xh)
                                .and(&sum_d)
                                .and(&sum_dx)
                                .and(&lt.inv_std)
                                .for_each(|d, &x, &sd, &sdx, &is| {
                                    *d = is / n * (n * *d - sd - x * sdx);
                                });
                        });
                        dh
                    }
                }
            } else {
                dact
            };
            grads.tensors[li * per] = dh.t().dot(&lt.input);
            grads.tensors[li * per + 1]
                .row_mut(0)
                .assign(&dh.sum_axis(Axis(0)));
            dact = dh.dot(&self.params[li * per]);
        }
        Ok(grads)
    }

    /// `w <- w - lr * (g + wd * w)` on every tensor, after the optional
    /// gradient transform. Batchnorm running statistics are not touched.
    pub fn sgd_step(
        &mut self,
        grads: &Gradients,
        cfg: &OptimizerConfig,
        transform: Option<&dyn Fn(&Gradients) -> Result<Gradients>>,
    ) -> Result<()> {
        if grads.tensors.len() != self.params.len() {
            return Err(Error::ShapeMismatch("gradient tensor count".into()));
        }
        for (p, g) in self.params.iter().zip(&grads.tensors) {
            if p.dim() != g.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
        }
        let transformed;
        let g = match transform {
            Some(f) => {
                transformed = f(grads)?;
                &transformed
            }
            None => grads,
        };
        let lr = cfg.learning_rate;
        let wd = cfg.weight_decay;
        for (p, g) in self.params.iter_mut().zip(&g.tensors) {
            Zip::from(p).and(g).for_each(|w, &gi| *w -= lr * (gi + wd * *w));
        }
        Ok(())
    }

    /// Reassembles a model from stored parts (used by checkpoint loading).
    pub(crate) fn from_parts(
        arch: Architecture,
        seed: u64,
        params: Vec<Array2<f64>>,
        running: Vec<(Array1<f64>, Array1<f64>)>,
        mode: Mode,
    ) -> Result<Self> {
        arch.validate()?;
        let template = ModelParams::init(arch.clone(), seed)?;
        if params.len() != template.params.len()
            || params.iter().zip(&template.params).any(|(a, b)| a.dim() != b.dim())
            || running.len() != template.running.len()
        {
            return Err(Error::Checkpoint("tensor shapes do not match architecture".into()));
        }
        Ok(ModelParams {
            arch,
            seed,
            params,
            running: running
                .into_iter()
                .map(|(mean, var)| RunningStats { mean, var })
                .collect(),
            mode,
        })
    }

    /// Logits for a batch of latents through the classifier only.
    pub fn classify_latents(&self, latents: ArrayView2<f64>) -> Array2<f64> {
        let ci = self.classifier_index();
        let mut logits = latents.dot(&self.params[ci].t());
        logits += &self.params[ci + 1].row(0);
        logits
    }

    /// The value entering each relu of a traced forward pass, for kink
    /// detection in finite-difference checks.
    pub fn relu_inputs(&self, trace: &ForwardTrace) -> Vec<Array2<f64>> {
        let per = self.per_layer();
        trace
            .layers
            .iter()
            .enumerate()
            .map(|(li, l)| {
                let mut y = l.xhat.clone();
                if self.arch.batchnorm {
                    y *= &self.params[li * per + 2].row(0);
                    y += &self.params[li * per + 3].row(0);
                }
                if let Some(m) = &l.mask {
                    y *= m;
                }
                y
            })
            .collect()
    }
}

/// Supervised cross-entropy term: a batch row and its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupTerm {
    pub row: usize,
    pub label: u8,
}

/// A positive pair: an anchor row and the row of its matched exemplar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub anchor: usize,
    pub exemplar: usize,
}

/// `<p, q>` for two softmax outputs.
pub fn similarity_score(probs_a: ArrayView1<f64>, probs_b: ArrayView1<f64>) -> f64 {
    probs_a.dot(&probs_b)
}

/// Mean of `-ln p_true`, probabilities clamped to `[eps, 1 - eps]`.
pub fn loss_sup(probs: ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.nrows() != labels.len() {
        return Err(Error::ShapeMismatch("probs rows vs labels".into()));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y as usize]].clamp(PROB_EPS, 1.0 - PROB_EPS).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean over pairs of `-ln max(ss, eps)`.
pub fn loss_bce(probs: ArrayView2<f64>, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    let total: f64 = pairs
        .iter()
        .map(|p| -similarity_score(probs.row(p.anchor), probs.row(p.exemplar)).max(PROB_EPS).ln())
        .sum();
    Ok(total / pairs.len() as f64)
}

/// The combined objective `L_sup + L_bce` over one forwarded batch.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    pub sup: Vec<SupTerm>,
    pub pairs: Vec<Pair>,
    /// Treat the exemplar side of each pair as a constant target.
    pub stop_grad_exemplar: bool,
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss_sup: f64,
    pub loss_bce: f64,
    pub dlogits: Array2<f64>,
}

impl ObjectiveValue {
    pub fn total(&self) -> f64 {
        self.loss_sup + self.loss_bce
    }
}

impl Objective {
    /// Loss values and their gradient with respect to the logits. Either
    /// term may be empty, in which case it contributes zero.
    pub fn evaluate(&self, probs: ArrayView2<f64>) -> Result<ObjectiveValue> {
        let rows = probs.nrows();
        let check = |r: usize| {
            if r >= rows {
                Err(Error::ShapeMismatch(format!("row {r} outside batch of {rows}")))
            } else {
                Ok(())
            }
        };
        let mut dlogits = Array2::zeros((rows, NUM_CLASSES));
        let mut loss_sup = 0.0;
        if !self.sup.is_empty() {
            let n = self.sup.len() as f64;
            for t in &self.sup {
                check(t.row)?;
                let y = t.label as usize;
                let p = probs[[t.row, y]];
                loss_sup -= p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln();
                if p > PROB_EPS && p < 1.0 - PROB_EPS {
                    for j in 0..NUM_CLASSES {
                        let target = if j == y { 1.0 } else { 0.0 };
                        dlogits[[t.row, j]] += (probs[[t.row, j]] - target) / n;
                    }
                }
            }
            loss_sup /= n;
        }
        let mut loss_bce = 0.0;
        if !self.pairs.is_empty() {
            let n = self.pairs.len() as f64;
            for pair in &self.pairs {
                check(pair.anchor)?;
                check(pair.exemplar)?;
                let pa = probs.row(pair.anchor);
                let pe = probs.row(pair.exemplar);
                let ss = similarity_score(pa, pe);
                loss_bce -= ss.max(PROB_EPS).ln();
                if ss <= PROB_EPS {
                    continue;
                }
                // d(-ln ss)/dp_a = -p_e / ss, then through the softmax.
                let mut push = |row: usize, own: ArrayView1<f64>, other: ArrayView1<f64>| {
                    let g: Vec<f64> = other.iter().map(|o| -o / (ss * n)).collect();
                    let gp: f64 = g.iter().zip(own.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..NUM_CLASSES {
                        dlogits[[row, j]] += own[j] * (g[j] - gp);
                    }
                };
                push(pair.anchor, pa, pe);
                if !self.stop_grad_exemplar {
                    push(pair.exemplar, pe, pa);
                }
            }
            loss_bce /= n;
        }
        Ok(ObjectiveValue {
            loss_sup,
            loss_bce,
            dlogits,
        })
    }
}

/// Copies the given rows of a matrix into an owned batch.
pub fn gather_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    out
}
