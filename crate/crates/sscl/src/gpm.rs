//! Gradient projection memory.
//!
//! The store keeps, per parameter tensor (or once for the whole flattened
//! parameter vector in global mode), an orthonormal basis of gradient
//! directions collected on earlier tasks. Training gradients are projected
//! onto the orthogonal complement of that span before the optimizer step.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::data::{feature_matrix, Sample};
use crate::error::{Error, Result};
use crate::model::{BnStats, Gradients, ModelParams, Objective, SupTerm};
use crate::numerics::thin_svd;

/// Singular values at or below this (relative to the gradient matrix norm
/// when that exceeds one) are numerical noise.
pub const SINGULAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpmMode {
    /// One basis per parameter tensor.
    Layerwise,
    /// One basis over all parameters concatenated.
    Global,
}

/// Which parameter tensors the store protects. Untracked tensors
/// contribute no gradient directions and are never projected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GpmScope {
    /// Every tensor, batchnorm and biases included.
    All,
    /// Weight matrices of the encoder and the classifier.
    #[default]
    Weights,
    /// Encoder weight matrices only; the classifier stays free.
    EncoderWeights,
}

impl GpmScope {
    pub fn name(self) -> &'static str {
        match self {
            GpmScope::All => "all",
            GpmScope::Weights => "weights",
            GpmScope::EncoderWeights => "encoder-weights",
        }
    }

    /// Per-tensor mask for a model's layout.
    pub fn mask(self, model: &ModelParams) -> Vec<bool> {
        model
            .tensor_names()
            .iter()
            .map(|n| match self {
                GpmScope::All => true,
                GpmScope::Weights => n.ends_with(".weight"),
                GpmScope::EncoderWeights => n.starts_with("enc") && n.ends_with(".weight"),
            })
            .collect()
    }
}

impl std::str::FromStr for GpmScope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(GpmScope::All),
            "weights" => Ok(GpmScope::Weights),
            "encoder-weights" => Ok(GpmScope::EncoderWeights),
            _ => Err(format!("expected all, weights or encoder-weights, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpmStore {
    mode: GpmMode,
    energy: f64,
    /// Flattened size of each group.
    group_dims: Vec<usize>,
    /// Orthonormal rows per group.
    bases: Vec<Array2<f64>>,
    max_rank: Option<usize>,
    /// Per-tensor collection mask; `None` tracks every tensor.
    tracked: Option<Vec<bool>>,
}

/// What one `update_basis` call did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    pub added: Vec<usize>,
    pub skipped_empty: bool,
}

impl GpmStore {
    /// An empty store for the model's parameter layout.
    pub fn new(model: &ModelParams, mode: GpmMode, energy: f64) -> Result<Self> {
        if !(energy > 0.0 && energy <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gpm energy {energy} outside (0, 1]"
            )));
        }
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        let group_dims = match mode {
            GpmMode::Layerwise => sizes,
            GpmMode::Global => vec![sizes.iter().sum()],
        };
        Ok(Self::with_dims(mode, energy, group_dims))
    }

    pub(crate) fn with_dims(mode: GpmMode, energy: f64, group_dims: Vec<usize>) -> Self {
        let bases = group_dims.iter().map(|&d| Array2::zeros((0, d))).collect();
        GpmStore {
            mode,
            energy,
            group_dims,
            bases,
            max_rank: None,
            tracked: None,
        }
    }

    /// Caps every group's rank; later directions are dropped on overflow.
    pub fn with_max_rank(mut self, max_rank: Option<usize>) -> Self {
        self.max_rank = max_rank;
        self
    }

    /// Restricts gradient collection to the tensors marked `true`.
    pub fn with_tracked(mut self, tracked: Option<Vec<bool>>) -> Self {
        self.tracked = tracked;
        self
    }

    pub fn tracked(&self) -> Option<&[bool]> {
        self.tracked.as_deref()
    }

    pub fn mode(&self) -> GpmMode {
        self.mode
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn max_rank(&self) -> Option<usize> {
        self.max_rank
    }

    pub fn group_dims(&self) -> &[usize] {
        &self.group_dims
    }

    pub fn basis(&self, group: usize) -> ArrayView2<'_, f64> {
        self.bases[group].view()
    }

    pub(crate) fn set_basis(&mut self, group: usize, basis: Array2<f64>) {
        self.bases[group] = basis;
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.bases.iter().map(|b| b.nrows()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.iter().all(|b| b.nrows() == 0)
    }

    /// Stored floats, for the memory report.
    pub fn stored_values(&self) -> usize {
        self.bases.iter().map(|b| b.len()).sum()
    }

    fn flatten(&self, g: &Gradients) -> Result<Vec<Array1<f64>>> {
        let sizes: Vec<usize> = g.tensors.iter().map(|t| t.len()).collect();
        let matches = match self.mode {
            GpmMode::Layerwise => sizes == self.group_dims,
            GpmMode::Global => sizes.iter().sum::<usize>() == self.group_dims[0],
        };
        if !matches {
            return Err(Error::ShapeMismatch(
                "gradient layout differs from the store's layer registry".into(),
            ));
        }
        Ok(match self.mode {
            GpmMode::Layerwise => g
                .tensors
                .iter()
                .map(|t| t.iter().copied().collect())
                .collect(),
            GpmMode::Global => vec![g.tensors.iter().flat_map(|t| t.iter().copied()).collect()],
        })
    }

    fn unflatten(&self, template: &Gradients, flat: Vec<Array1<f64>>) -> Gradients {
        let mut out = template.clone();
        match self.mode {
            GpmMode::Layerwise => {
                for (t, f) in out.tensors.iter_mut().zip(flat) {
                    let shape = t.raw_dim();
                    *t = f.into_shape_with_order(shape).expect("group sizes checked");
                }
            }
            GpmMode::Global => {
                let mut offset = 0;
                let all = &flat[0];
                for t in out.tensors.iter_mut() {
                    let n = t.len();
                    let shape = t.raw_dim();
                    *t = all
                        .slice(s![offset..offset + n])
                        .to_owned()
                        .into_shape_with_order(shape)
                        .expect("group sizes checked");
                    offset += n;
                }
            }
        }
        out
    }

    /// `g - B B^T g` per group.
    pub fn project_orthogonal(&self, g: &Gradients) -> Result<Gradients> {
        let mut flat = self.flatten(g)?;
        for (f, b) in flat.iter_mut().zip(&self.bases) {
            if b.nrows() == 0 {
                continue;
            }
            let coeffs = b.dot(&*f);
            for (row, &c) in b.rows().into_iter().zip(coeffs.iter()) {
                f.scaled_add(-c, &row);
            }
        }
        Ok(self.unflatten(g, flat))
    }

    /// Adds the new directions of a task's per-sample gradients. Each row
    /// of a group's matrix is one sample's flattened gradient.
    ///
    /// Directions already in the store count toward the energy target;
    /// only the residual's leading singular directions needed to reach it
    /// are appended. Gradients already covered therefore add nothing.
    pub fn update_basis(&mut self, task_gradients: &[Array2<f64>]) -> Result<UpdateReport> {
        if task_gradients.len() != self.bases.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient groups for {} stored groups",
                task_gradients.len(),
                self.bases.len()
            )));
        }
        let mut report = UpdateReport {
            added: vec![0; self.bases.len()],
            skipped_empty: false,
        };
        if task_gradients.iter().all(|g| g.nrows() == 0) {
            log::warn!("no gradients to add to the projection memory; store unchanged");
            report.skipped_empty = true;
            return Ok(report);
        }
        for (gi, g) in task_gradients.iter().enumerate() {
            if g.ncols() != self.group_dims[gi] {
                return Err(Error::ShapeMismatch(format!(
                    "group {gi}: {} columns, expected {}",
                    g.ncols(),
                    self.group_dims[gi]
                )));
            }
            if g.nrows() == 0 {
                continue;
            }
            let basis = &self.bases[gi];
            let total: f64 = g.iter().map(|x| x * x).sum();
            let mut residual = g.to_owned();
            if basis.nrows() > 0 {
                let coeffs = g.dot(&basis.t());
                residual -= &coeffs.dot(basis);
            }
            let resid_energy: f64 = residual.iter().map(|x| x * x).sum();
            let captured = (total - resid_energy).max(0.0);
            if total == 0.0 || captured >= self.energy * total * (1.0 - 1e-12) {
                continue;
            }
            let scale = total.sqrt().max(1.0);
            let svd = thin_svd(residual.view());
            let keep: Vec<f64> = svd
                .singular_values
                .iter()
                .copied()
                .take_while(|&s| s > SINGULAR_FLOOR * scale)
                .collect();
            if keep.is_empty() {
                continue;
            }
            // Smallest k with (captured + sum sigma_i^2) / total >= energy.
            let mut k = 0;
            let mut acc = captured;
            for s in &keep {
                acc += s * s;
                k += 1;
                if acc >= self.energy * total * (1.0 - 1e-12) {
                    break;
                }
            }
            let room = self
                .max_rank
                .unwrap_or(usize::MAX)
                .min(self.group_dims[gi])
                .saturating_sub(basis.nrows());
            // The residual's singular vectors are already orthogonal to the
            // store; two block passes remove what rounding left behind.
            let mut fresh = svd.right_vectors.slice(s![..k, ..]).to_owned();
            if basis.nrows() > 0 {
                for _ in 0..2 {
                    let c = fresh.dot(&basis.t());
                    fresh -= &c.dot(basis);
                }
            }
            let mut kept: Vec<Array1<f64>> = Vec::with_capacity(k.min(room));
            for v in fresh.rows() {
                if kept.len() >= room {
                    break;
                }
                let mut v = v.to_owned();
                for _ in 0..2 {
                    for r in &kept {
                        let c = r.dot(&v);
                        v.scaled_add(-c, r);
                    }
                }
                let n = v.dot(&v).sqrt();
                if n < 1e-8 {
                    continue;
                }
                kept.push(v / n);
            }
            report.added[gi] = kept.len();
            if !kept.is_empty() {
                let mut views = vec![basis.view()];
                views.extend(kept.iter().map(|r| r.view().insert_axis(Axis(0))));
                self.bases[gi] = ndarray::concatenate(Axis(0), &views).expect("equal widths");
            }
        }
        Ok(report)
    }

    /// Flattened per-sample gradients of the supervised loss for the given
    /// samples, grouped like the store. The model is evaluated with its
    /// running batchnorm statistics and no dropout. Untracked tensors are
    /// zeroed.
    pub fn collect_gradients(
        &self,
        model: &ModelParams,
        samples: &[&Sample],
    ) -> Result<Vec<Array2<f64>>> {
        let n = samples.len();
        let mut groups: Vec<Array2<f64>> = self
            .group_dims
            .iter()
            .map(|&d| Array2::zeros((n, d)))
            .collect();
        let dim = model.architecture().input_dim;
        for (i, s) in samples.iter().enumerate() {
            let x = feature_matrix(std::iter::once(*s), dim);
            let out = model.forward_with(x.view(), BnStats::Running, None::<&mut ChaCha8Rng>)?;
            let label = s.observed_label.unwrap_or(s.true_label);
            let obj = Objective {
                sup: vec![SupTerm { row: 0, label }],
                ..Default::default()
            };
            let v = obj.evaluate(out.probs.view())?;
            let mut g = model.backward(&out.trace, v.dlogits.view())?;
            if let Some(mask) = &self.tracked {
                for (t, &keep) in g.tensors.iter_mut().zip(mask) {
                    if !keep {
                        t.fill(0.0);
                    }
                }
            }
            let flat = self.flatten(&g)?;
            for (grp, f) in groups.iter_mut().zip(flat) {
                grp.row_mut(i).assign(&f);
            }
        }
        Ok(groups)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn grads(v: Array1<f64>) -> Gradients {
        let n = v.len();
        Gradients {
            tensors: vec![v.into_shape_with_order((1, n)).unwrap()],
        }
    }

    fn store(dim: usize) -> GpmStore {
        GpmStore::with_dims(GpmMode::Layerwise, 0.99, vec![dim])
    }

    #[test]
    fn empty_store_passes_gradients_through() {
        let s = store(2);
        let g = grads(array![3.0, 4.0]);
        assert_eq!(s.project_orthogonal(&g).unwrap(), g);
    }

    #[test]
    fn coordinate_removal() {
        let mut s = store(2);
        s.update_basis(&[array![[2.0, 0.0]]]).unwrap();
        assert_eq!(s.ranks(), vec![1]);
        let out = s.project_orthogonal(&grads(array![3.0, 4.0])).unwrap();
        assert_abs_diff_eq!(out.tensors[0], array![[0.0, 4.0]], epsilon = 1e-12);
        let inside = s.project_orthogonal(&grads(array![-5.0, 0.0])).unwrap();
        assert_abs_diff_eq!(inside.tensors[0], array![[0.0, 0.0]], epsilon = 1e-12);
    }

    #[test]
    fn repeated_gradients_add_nothing() {
        let mut s = store(2);
        s.update_basis(&[array![[1.0, 0.0], [3.0, 0.0]]]).unwrap();
        let before = s.clone();
        let r = s.update_basis(&[array![[-2.0, 0.0]]]).unwrap();
        assert_eq!(r.added, vec![0]);
        assert_eq!(s, before);
    }

    #[test]
    fn new_direction_is_the_residual() {
        let mut s = store(2);
        s.update_basis(&[array![[1.0, 0.0]]]).unwrap();
        s.update_basis(&[array![[1.0, 1.0]]]).unwrap();
        assert_eq!(s.ranks(), vec![2]);
        let b = s.basis(0);
        assert_abs_diff_eq!(b[[1, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[[1, 1]].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_gradient_set_leaves_store_unchanged() {
        let mut s = store(3);
        let r = s.update_basis(&[Array2::zeros((0, 3))]).unwrap();
        assert!(r.skipped_empty);
        assert!(s.is_empty());
    }

    #[test]
    fn rank_cap_keeps_oldest() {
        let mut s = store(3).with_max_rank(Some(1));
        s.update_basis(&[array![[1.0, 0.0, 0.0]]]).unwrap();
        s.update_basis(&[array![[0.0, 1.0, 0.0]]]).unwrap();
        assert_eq!(s.ranks(), vec![1]);
        assert_abs_diff_eq!(s.basis(0)[[0, 0]].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_checks() {
        let s = store(3);
        assert!(s.project_orthogonal(&grads(array![1.0, 2.0])).is_err());
    }

    #[test]
    fn global_mode_spans_all_tensors() {
        let mut s = GpmStore::with_dims(GpmMode::Global, 1.0, vec![3]);
        s.update_basis(&[array![[1.0, 0.0, 0.0]]]).unwrap();
        let g = Gradients {
            tensors: vec![array![[5.0]], array![[1.0, 2.0]]],
        };
        let out = s.project_orthogonal(&g).unwrap();
        assert_abs_diff_eq!(out.tensors[0], array![[0.0]], epsilon = 1e-12);
        assert_abs_diff_eq!(out.tensors[1], array![[1.0, 2.0]], epsilon = 1e-12);
    }

    fn small_model() -> ModelParams {
        let arch = crate::model::Architecture {
            input_dim: 3,
            hidden: vec![4],
            batchnorm: true,
            dropout: 0.0,
        };
        ModelParams::init(arch, 5).unwrap()
    }

    #[test]
    fn scope_masks_follow_tensor_names() {
        let m = small_model();
        // enc0.weight, enc0.bias, enc0.bn_scale, enc0.bn_shift, cls.weight, cls.bias
        assert_eq!(GpmScope::All.mask(&m), vec![true; 6]);
        assert_eq!(GpmScope::Weights.mask(&m), vec![true, false, false, false, true, false]);
        assert_eq!(
            GpmScope::EncoderWeights.mask(&m),
            vec![true, false, false, false, false, false]
        );
        for scope in [GpmScope::All, GpmScope::Weights, GpmScope::EncoderWeights] {
            assert_eq!(scope.name().parse::<GpmScope>(), Ok(scope));
        }
        assert!("bias".parse::<GpmScope>().is_err());
    }

    #[test]
    fn untracked_tensors_are_never_projected() {
        let m = small_model();
        let mut s = GpmStore::new(&m, GpmMode::Layerwise, 1.0)
            .unwrap()
            .with_tracked(Some(GpmScope::Weights.mask(&m)));
        let x = Array1::from(vec![0.5, -1.0, 2.0]);
        let sample = Sample::labeled(0, x, 1, 0);
        let grads = s.collect_gradients(&m, &[&sample]).unwrap();
        s.update_basis(&grads).unwrap();
        let ranks: Vec<usize> = s.bases.iter().map(|b| b.nrows()).collect();
        assert_eq!(ranks, vec![1, 0, 0, 0, 1, 0]);

        let g = Gradients {
            tensors: m.tensors().iter().map(|t| t.mapv(|_| 1.0)).collect(),
        };
        let out = s.project_orthogonal(&g).unwrap();
        for i in [1, 2, 3, 5] {
            assert_eq!(out.tensors[i], g.tensors[i]);
        }
    }

    proptest! {
        #[test]
        fn projection_is_orthogonal_and_non_expanding(
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 6), 1..5),
            g in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let mut s = GpmStore::with_dims(GpmMode::Layerwise, 0.9, vec![6]);
            let m = Array2::from_shape_vec((rows.len(), 6), rows.concat()).unwrap();
            s.update_basis(&[m.clone()]).unwrap();
            let g = grads(Array1::from(g));
            let out = s.project_orthogonal(&g).unwrap();
            let gp = out.tensors[0].row(0).to_owned();
            let gn = gp.dot(&gp).sqrt();
            for v in s.basis(0).rows() {
                prop_assert!(v.dot(&gp).abs() <= 1e-6 * gn + 1e-12);
            }
            prop_assert!(gn <= g.norm() + 1e-12);
            let again = s.clone();
            s.update_basis(&[m]).unwrap();
            prop_assert_eq!(s.ranks(), again.ranks());
        }
    }
}
