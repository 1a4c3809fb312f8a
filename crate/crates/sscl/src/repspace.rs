//! Representation space of the buffered exemplars and the threshold sweep
//! that matches a latent to a suitable labeled exemplar.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::{feature_matrix, Sample};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{cosine_distance, project_onto_span, svd_basis, Basis};

/// Thresholds for the exemplar search.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdConfig {
    pub tau_init: f64,
    pub step: f64,
    pub tau_max: f64,
    /// Temperature of the label-ratio decay.
    pub beta: f64,
    pub label_ratio: f64,
}

impl ThresholdConfig {
    /// Sweep of five equal steps up to the decayed maximum.
    pub fn new(tau_max: f64, beta: f64, label_ratio: f64) -> Self {
        let dynamic = tau_max * (-label_ratio * beta).exp();
        ThresholdConfig {
            tau_init: 0.2 * dynamic,
            step: 0.2 * dynamic,
            tau_max,
            beta,
            label_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_init > 0.0 && self.tau_init <= self.tau_max) {
            return Err(Error::InvalidConfig(format!(
                "threshold: need 0 < tau_init ({}) <= tau_max ({})",
                self.tau_init, self.tau_max
            )));
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidConfig("threshold: step must be > 0".into()));
        }
        if !(self.beta >= 0.0) || !(0.0..=1.0).contains(&self.label_ratio) {
            return Err(Error::InvalidConfig(
                "threshold: beta must be >= 0 and label_ratio in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// `tau_max * exp(-r * beta)`.
    pub fn dynamic_tau_max(&self) -> f64 {
        self.tau_max * (-self.label_ratio * self.beta).exp()
    }

    /// Thresholds visited by the sweep, in order.
    pub fn sweep(&self) -> Vec<f64> {
        let limit = self.dynamic_tau_max() * (1.0 + 1e-12);
        let mut out = Vec::new();
        let mut i = 0usize;
        loop {
            let tau = self.tau_init + i as f64 * self.step;
            if tau > limit {
                break;
            }
            out.push(tau);
            i += 1;
        }
        out
    }
}

/// Encoder latents of the buffered exemplars and the basis they span.
#[derive(Debug, Clone)]
pub struct RepSpace {
    /// `None` when the SVD stage is disabled: latents are matched as-is.
    basis: Option<Basis>,
    memory_latents: Array2<f64>,
    memory_labels: Vec<u8>,
    exemplar_ids: Vec<u64>,
    /// Index into the exemplar list handed to `build`.
    exemplar_index: Vec<usize>,
}

/// Who is looking for a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Unlabeled,
    /// A labeled sample: only same-label exemplars, never itself.
    Labeled { id: u64, label: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExemplarMatch {
    /// Position of the exemplar in the list the space was built from.
    pub index: usize,
    pub id: u64,
    pub label: u8,
    pub distance: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchOutcome {
    Matched(ExemplarMatch),
    Rejected,
}

impl MatchOutcome {
    pub fn matched(self) -> Option<ExemplarMatch> {
        match self {
            MatchOutcome::Matched(m) => Some(m),
            MatchOutcome::Rejected => None,
        }
    }
}

/// Accepted/rejected counts, per task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairingStats {
    pub accepted: usize,
    pub rejected: usize,
    pub label_ties: usize,
}

impl PairingStats {
    pub fn record(&mut self, outcome: &MatchOutcome) {
        match outcome {
            MatchOutcome::Matched(_) => self.accepted += 1,
            MatchOutcome::Rejected => self.rejected += 1,
        }
    }
}

impl RepSpace {
    /// Encodes the exemplars with the model in eval mode and takes the
    /// SVD basis of their latents (or skips it when `svd` is false).
    pub fn build(
        exemplars: &[&Sample],
        model: &ModelParams,
        energy: f64,
        svd: bool,
    ) -> Result<Self> {
        if exemplars.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let labels: Vec<u8> = exemplars
            .iter()
            .map(|s| s.observed_label.unwrap_or(s.true_label))
            .collect();
        for class in [0u8, 1] {
            if !labels.contains(&class) {
                return Err(Error::MissingClass(class));
            }
        }
        let x = feature_matrix(exemplars.iter().copied(), model.architecture().input_dim);
        let latents = model.encode(x.view())?;
        let basis = if svd {
            Some(svd_basis(latents.view(), energy)?)
        } else {
            None
        };
        Ok(RepSpace {
            basis,
            memory_latents: latents,
            memory_labels: labels,
            exemplar_ids: exemplars.iter().map(|s| s.id).collect(),
            exemplar_index: (0..exemplars.len()).collect(),
        })
    }

    pub fn basis(&self) -> Option<&Basis> {
        self.basis.as_ref()
    }

    pub fn len(&self) -> usize {
        self.exemplar_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplar_ids.is_empty()
    }

    pub fn latent(&self, i: usize) -> ArrayView1<'_, f64> {
        self.memory_latents.row(i)
    }

    pub fn label(&self, i: usize) -> u8 {
        self.memory_labels[i]
    }

    pub fn id(&self, i: usize) -> u64 {
        self.exemplar_ids[i]
    }

    /// Projection of a latent into the space (identity without SVD).
    pub fn project(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        match &self.basis {
            Some(b) => project_onto_span(b, z),
            None => {
                let d = self.memory_latents.ncols();
                if z.len() != d {
                    return Err(Error::DimMismatch {
                        expected: d,
                        got: z.len(),
                    });
                }
                Ok(z.to_owned())
            }
        }
    }

    /// Threshold sweep: at each threshold, the candidates strictly below it
    /// are grouped by label, the larger group wins (ties go to benign), and
    /// its nearest member is returned. Rejected when the sweep runs out.
    pub fn find_suitable_exemplar(
        &self,
        z: ArrayView1<f64>,
        cfg: &ThresholdConfig,
        anchor: Anchor,
    ) -> Result<MatchOutcome> {
        self.find_with_stats(z, cfg, anchor, &mut PairingStats::default())
    }

    pub fn find_with_stats(
        &self,
        z: ArrayView1<f64>,
        cfg: &ThresholdConfig,
        anchor: Anchor,
        stats: &mut PairingStats,
    ) -> Result<MatchOutcome> {
        let zp = self.project(z)?;
        if zp.iter().all(|&v| v == 0.0) {
            log::debug!("projected latent has zero norm; rejecting");
            let out = MatchOutcome::Rejected;
            stats.record(&out);
            return Ok(out);
        }
        let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            if let Anchor::Labeled { id, label } = anchor {
                if self.exemplar_ids[i] == id || self.memory_labels[i] != label {
                    continue;
                }
            }
            match cosine_distance(zp.view(), self.memory_latents.row(i)) {
                Ok(d) => candidates.push((d, i)),
                // A dead (all-zero) latent matches nothing.
                Err(Error::ZeroVector) => continue,
                Err(e) => return Err(e),
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for tau in cfg.sweep() {
            let below = candidates.partition_point(|c| c.0 < tau);
            if below == 0 {
                continue;
            }
            let within = &candidates[..below];
            let n1 = within.iter().filter(|c| self.memory_labels[c.1] == 1).count();
            let n0 = below - n1;
            if n0 == n1 {
                stats.label_ties += 1;
                log::trace!("group tie at tau {tau}: {n0} each, preferring benign");
            }
            let target = if n1 > n0 { 1 } else { 0 };
            let &(distance, i) = within
                .iter()
                .find(|c| self.memory_labels[c.1] == target)
                .expect("winning group is non-empty");
            let out = MatchOutcome::Matched(ExemplarMatch {
                index: self.exemplar_index[i],
                id: self.exemplar_ids[i],
                label: target,
                distance,
                tau,
            });
            stats.record(&out);
            return Ok(out);
        }
        let out = MatchOutcome::Rejected;
        stats.record(&out);
        Ok(out)
    }

    /// Test hook: a space over explicit latents.
    pub fn from_latents(
        latents: Array2<f64>,
        labels: Vec<u8>,
        ids: Vec<u64>,
        basis: Option<Basis>,
    ) -> Result<Self> {
        if latents.nrows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::ShapeMismatch("latents, labels and ids differ in length".into()));
        }
        let n = ids.len();
        Ok(RepSpace {
            basis,
            memory_latents: latents,
            memory_labels: labels,
            exemplar_ids: ids,
            exemplar_index: (0..n).collect(),
        })
    }
}
