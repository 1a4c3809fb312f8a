//! Budgeted selection of unlabeled samples for labeling.
//!
//! Each candidate is scored by its mean cosine distance to the benign and
//! malware latents in the buffer. Half the budget goes to the candidates
//! closest to the benign group, half to those closest to the malware group.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::data::{feature_matrix, Sample};
use crate::error::{Error, Result};
use crate::memory::BufferMemory;
use crate::model::ModelParams;
use crate::numerics::cosine_distance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupDistances {
    pub sample_id: u64,
    pub d0: f64,
    pub d1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceStrategy {
    #[default]
    AllSamples,
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ranking {
    #[default]
    Closest,
    Farthest,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum OracleKind {
    #[default]
    GroundTruth,
    SelfLabel,
    Noisy(f64),
}

impl OracleKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OracleKind::Noisy(p) if !(0.0..=1.0).contains(&p) => Err(Error::InvalidArgument(
                format!("flip probability {p} outside [0, 1]"),
            )),
            _ => Ok(()),
        }
    }

    /// Name written to the `label_source` column of the selection log.
    pub fn source_name(&self) -> &'static str {
        match self {
            OracleKind::GroundTruth => "ground_truth",
            OracleKind::SelfLabel => "self_label",
            OracleKind::Noisy(_) => "noisy",
        }
    }
}

/// Cosine distance that treats a zero vector as orthogonal to everything.
/// Post-ReLU latents can be all zero, and such a sample carries no
/// direction to compare.
fn distance_or_orthogonal(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    match cosine_distance(u, v) {
        Err(Error::ZeroVector) => Ok(1.0),
        other => other,
    }
}

/// Eval-mode latents of the buffer, split by label.
#[derive(Debug, Clone)]
pub struct GroupLatents {
    groups: [Array2<f64>; 2],
    centroids: [Array1<f64>; 2],
}

impl GroupLatents {
    pub fn from_latents(benign: Array2<f64>, malware: Array2<f64>) -> Result<Self> {
        for (label, g) in [(0u8, &benign), (1u8, &malware)] {
            if g.nrows() == 0 {
                return Err(Error::MissingClass(label));
            }
        }
        if benign.ncols() != malware.ncols() {
            return Err(Error::DimMismatch {
                expected: benign.ncols(),
                got: malware.ncols(),
            });
        }
        let centroid = |g: &Array2<f64>| g.mean_axis(Axis(0)).expect("non-empty group");
        Ok(GroupLatents {
            centroids: [centroid(&benign), centroid(&malware)],
            groups: [benign, malware],
        })
    }

    /// Encodes every buffered exemplar with the model in eval mode.
    pub fn from_memory(memory: &BufferMemory, model: &ModelParams) -> Result<Self> {
        let dim = model.architecture().input_dim;
        let encode = |label: u8| -> Result<Array2<f64>> {
            let pool: Vec<&Sample> = memory.class_pool(label).collect();
            if pool.is_empty() {
                return Err(Error::MissingClass(label));
            }
            model.encode(feature_matrix(pool.iter().copied(), dim).view())
        };
        let benign = encode(0)?;
        let malware = encode(1)?;
        Self::from_latents(benign, malware)
    }

    pub fn group(&self, label: u8) -> &Array2<f64> {
        &self.groups[label as usize]
    }

    pub fn distances(
        &self,
        sample_id: u64,
        z: ArrayView1<f64>,
        strategy: DistanceStrategy,
    ) -> Result<GroupDistances> {
        let mut d = [0.0; 2];
        for (k, slot) in d.iter_mut().enumerate() {
            *slot = match strategy {
                DistanceStrategy::AllSamples => {
                    let g = &self.groups[k];
                    let mut sum = 0.0;
                    for row in g.rows() {
                        sum += distance_or_orthogonal(z, row)?;
                    }
                    sum / g.nrows() as f64
                }
                DistanceStrategy::Centroid => distance_or_orthogonal(z, self.centroids[k].view())?,
            };
        }
        Ok(GroupDistances {
            sample_id,
            d0: d[0],
            d1: d[1],
        })
    }
}

/// Mean cosine distances from latent `z` to the benign and malware groups
/// of the buffer.
pub fn group_distances(
    sample_id: u64,
    z: ArrayView1<f64>,
    memory: &BufferMemory,
    model: &ModelParams,
    strategy: DistanceStrategy,
) -> Result<GroupDistances> {
    GroupLatents::from_memory(memory, model)?.distances(sample_id, z, strategy)
}

/// Distances for a whole unlabeled pool, encoding it in one batch.
pub fn pool_distances(
    pool: &[Sample],
    groups: &GroupLatents,
    model: &ModelParams,
    strategy: DistanceStrategy,
) -> Result<Vec<GroupDistances>> {
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let latents = model.encode(feature_matrix(pool.iter(), model.architecture().input_dim).view())?;
    pool.iter()
        .zip(latents.rows())
        .map(|(s, z)| groups.distances(s.id, z, strategy))
        .collect()
}

fn ranked(distances: &[GroupDistances], key: fn(&GroupDistances) -> f64, ranking: Ranking) -> Vec<u64> {
    let mut order: Vec<&GroupDistances> = distances.iter().collect();
    order.sort_by(|a, b| {
        let by_dist = match ranking {
            Ranking::Closest => key(a).total_cmp(&key(b)),
            Ranking::Farthest => key(b).total_cmp(&key(a)),
        };
        by_dist.then(a.sample_id.cmp(&b.sample_id))
    });
    order.into_iter().map(|g| g.sample_id).collect()
}

/// Picks `ceil(budget/2)` ids by `d0` rank, then `floor(budget/2)` by `d1`
/// rank skipping ids already taken. Any shortfall is back-filled from the
/// `d1` ranking, then the `d0` ranking. Ties go to the smaller id.
pub fn select_for_labeling(distances: &[GroupDistances], budget: usize, ranking: Ranking) -> Vec<u64> {
    if budget >= distances.len() {
        let mut all: Vec<u64> = distances.iter().map(|g| g.sample_id).collect();
        all.sort_unstable();
        return all;
    }
    let by_d0 = ranked(distances, |g| g.d0, ranking);
    let by_d1 = ranked(distances, |g| g.d1, ranking);
    let mut taken = std::collections::HashSet::with_capacity(budget);
    let mut selected = Vec::with_capacity(budget);
    let mut take_from = |ranking: &[u64], quota: usize, selected: &mut Vec<u64>| {
        let mut got = 0;
        for &id in ranking {
            if got == quota {
                break;
            }
            if taken.insert(id) {
                selected.push(id);
                got += 1;
            }
        }
    };
    take_from(&by_d0, budget.div_ceil(2), &mut selected);
    take_from(&by_d1, budget / 2, &mut selected);
    let short = budget - selected.len();
    take_from(&by_d1, short, &mut selected);
    let short = budget - selected.len();
    take_from(&by_d0, short, &mut selected);
    selected
}

/// Assigns `observed_label` to each selected sample according to the oracle.
pub fn label_with_oracle<R: Rng + ?Sized>(
    mut selected: Vec<Sample>,
    oracle: OracleKind,
    model: &ModelParams,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    oracle.validate()?;
    match oracle {
        OracleKind::GroundTruth => {
            for s in &mut selected {
                s.observed_label = Some(s.true_label);
            }
        }
        OracleKind::Noisy(p) => {
            for s in &mut selected {
                let flip = rng.random::<f64>() < p;
                s.observed_label = Some(if flip { 1 - s.true_label } else { s.true_label });
            }
        }
        OracleKind::SelfLabel => {
            if selected.is_empty() {
                return Ok(selected);
            }
            let x = feature_matrix(selected.iter(), model.architecture().input_dim);
            let probs = model.forward_eval(x.view())?.probs;
            for (s, p) in selected.iter_mut().zip(probs.rows()) {
                s.observed_label = Some(if p[1] > p[0] { 1 } else { 0 });
            }
        }
    }
    Ok(selected)
}

/// One row of `selections.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub seed: u64,
    pub task: usize,
    pub sample_id: u64,
    pub d0: f64,
    pub d1: f64,
    pub label_source: String,
    pub label: u8,
}

pub const SELECTION_HEADER: [&str; 7] = ["seed", "task", "sample_id", "d0", "d1", "label_source", "label"];

impl SelectionRecord {
    pub fn fields(&self) -> [String; 7] {
        [
            self.seed.to_string(),
            self.task.to_string(),
            self.sample_id.to_string(),
            format!("{:?}", self.d0),
            format!("{:?}", self.d1),
            self.label_source.clone(),
            self.label.to_string(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gd(id: u64, d0: f64, d1: f64) -> GroupDistances {
        GroupDistances { sample_id: id, d0, d1 }
    }

    #[test]
    fn identical_latent_is_at_distance_zero() {
        let g = GroupLatents::from_latents(array![[1.0, 2.0]], array![[0.0, 1.0]]).unwrap();
        let d = g.distances(7, array![1.0, 2.0].view(), DistanceStrategy::AllSamples).unwrap();
        assert_abs_diff_eq!(d.d0, 0.0, epsilon = 1e-15);
        assert_eq!(d.sample_id, 7);
    }

    #[test]
    fn strategies_agree_on_single_member_groups() {
        let g = GroupLatents::from_latents(array![[1.0, 2.0, 0.5]], array![[0.3, 1.0, -1.0]]).unwrap();
        let z = array![0.2, -0.4, 1.0];
        let a = g.distances(0, z.view(), DistanceStrategy::AllSamples).unwrap();
        let c = g.distances(0, z.view(), DistanceStrategy::Centroid).unwrap();
        assert_eq!((a.d0, a.d1), (c.d0, c.d1));
    }

    #[test]
    fn strategies_differ_on_two_orthogonal_members() {
        let g = GroupLatents::from_latents(array![[1.0, 0.0], [0.0, 1.0]], array![[1.0, 1.0]]).unwrap();
        let z = array![1.0, 0.0];
        let a = g.distances(0, z.view(), DistanceStrategy::AllSamples).unwrap();
        let c = g.distances(0, z.view(), DistanceStrategy::Centroid).unwrap();
        assert_abs_diff_eq!(a.d0, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(c.d0, 1.0 - 1.0 / 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn missing_class_is_reported() {
        let err = GroupLatents::from_latents(array![[1.0]], Array2::zeros((0, 1))).unwrap_err();
        assert!(matches!(err, Error::MissingClass(1)));
        let model = ModelParams::init(Architecture::detector(2), 0).unwrap();
        let err = group_distances(0, array![1.0, 1.0].view(), &BufferMemory::new(), &model, DistanceStrategy::Centroid)
            .unwrap_err();
        assert!(matches!(err, Error::MissingClass(0)));
    }

    #[test]
    fn budget_edge_cases() {
        let pool = vec![gd(3, 0.1, 0.2), gd(1, 0.3, 0.4)];
        assert!(select_for_labeling(&pool, 0, Ranking::Closest).is_empty());
        assert_eq!(select_for_labeling(&pool, 2, Ranking::Closest), vec![1, 3]);
        assert_eq!(select_for_labeling(&pool, 9, Ranking::Closest), vec![1, 3]);
    }

    #[test]
    fn one_pick_per_group_without_overlap() {
        // d0 order a,b,c,d; d1 order c,d,a,b.
        let (a, b, c, d) = (10, 11, 12, 13);
        let pool = vec![gd(a, 0.1, 0.3), gd(b, 0.2, 0.4), gd(c, 0.3, 0.1), gd(d, 0.4, 0.2)];
        assert_eq!(select_for_labeling(&pool, 2, Ranking::Closest), vec![a, c]);
        assert_eq!(select_for_labeling(&pool, 2, Ranking::Farthest), vec![d, b]);
    }

    #[test]
    fn overlapping_rankings_are_back_filled() {
        // Same ranking on both sides: the d1 half skips the d0 picks.
        let pool = vec![gd(1, 0.1, 0.1), gd(2, 0.2, 0.2), gd(3, 0.3, 0.3), gd(4, 0.4, 0.4)];
        assert_eq!(select_for_labeling(&pool, 3, Ranking::Closest), vec![1, 2, 3]);
    }

    #[test]
    fn ties_break_by_id() {
        let pool = vec![gd(9, 0.5, 0.5), gd(2, 0.5, 0.5), gd(5, 0.5, 0.5)];
        assert_eq!(select_for_labeling(&pool, 2, Ranking::Closest), vec![2, 5]);
    }

    #[test]
    fn oracles() {
        let model = ModelParams::init(Architecture::detector(2), 0).unwrap();
        let samples: Vec<Sample> = (0..6)
            .map(|i| {
                let mut s = Sample::labeled(i, array![i as f64, 1.0], (i % 2) as u8, 0);
                s.observed_label = None;
                s
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = label_with_oracle(samples.clone(), OracleKind::GroundTruth, &model, &mut rng).unwrap();
        assert!(gt.iter().all(|s| s.observed_label == Some(s.true_label)));
        let flipped = label_with_oracle(samples.clone(), OracleKind::Noisy(1.0), &model, &mut rng).unwrap();
        assert!(flipped.iter().all(|s| s.observed_label == Some(1 - s.true_label)));
        let own = label_with_oracle(samples.clone(), OracleKind::SelfLabel, &model, &mut rng).unwrap();
        let probs = model
            .forward_eval(feature_matrix(samples.iter(), 2).view())
            .unwrap()
            .probs;
        for (s, p) in own.iter().zip(probs.rows()) {
            assert_eq!(s.observed_label, Some((p[1] > p[0]) as u8));
        }
        assert!(OracleKind::Noisy(1.5).validate().is_err());
    }

    #[test]
    fn self_label_tie_goes_to_benign() {
        // Zero classifier weights give equal logits for every input.
        let mut model = ModelParams::init(Architecture::detector(2), 3).unwrap();
        let n = model.tensors().len();
        model.tensors_mut()[n - 2].fill(0.0);
        let s = Sample::labeled(0, array![0.9, 0.1], 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = label_with_oracle(vec![s], OracleKind::SelfLabel, &model, &mut rng).unwrap();
        assert_eq!(out[0].observed_label, Some(0));
    }

    fn pools() -> impl Strategy<Value = Vec<GroupDistances>> {
        proptest::collection::vec((0.0f64..2.0, 0.0f64..2.0), 0..30).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (d0, d1))| gd(i as u64 * 3 + 1, d0, d1))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn selection_size_and_uniqueness(pool in pools(), budget in 0usize..40) {
            let sel = select_for_labeling(&pool, budget, Ranking::Closest);
            prop_assert_eq!(sel.len(), budget.min(pool.len()));
            let unique: std::collections::HashSet<_> = sel.iter().collect();
            prop_assert_eq!(unique.len(), sel.len());
        }

        #[test]
        fn closer_newcomer_displaces_one_group0_pick(pool in pools(), budget in 2usize..20) {
            prop_assume!(budget < pool.len());
            let before = select_for_labeling(&pool, budget, Ranking::Closest);
            let mut grown = pool.clone();
            // Far from group1 so it cannot be a group1 pick already.
            grown.push(gd(0, -1.0, 3.0));
            let after = select_for_labeling(&grown, budget, Ranking::Closest);
            prop_assert!(after.contains(&0));
            let kept = before.iter().filter(|id| after.contains(id)).count();
            prop_assert_eq!(kept, budget - 1);
        }

        #[test]
        fn farthest_mirrors_closest(pool in pools(), budget in 0usize..10) {
            let mirrored: Vec<GroupDistances> =
                pool.iter().map(|g| gd(g.sample_id, 2.0 - g.d0, 2.0 - g.d1)).collect();
            // Distinct distances keep the tie-break out of the picture.
            let mut seen = std::collections::HashSet::new();
            prop_assume!(pool.iter().all(|g| seen.insert(g.d0.to_bits())));
            let mut seen = std::collections::HashSet::new();
            prop_assume!(pool.iter().all(|g| seen.insert(g.d1.to_bits())));
            prop_assert_eq!(
                select_for_labeling(&pool, budget, Ranking::Farthest),
                select_for_labeling(&mirrored, budget, Ranking::Closest)
            );
        }
    }
}
