//! Dense vector and matrix primitives shared by the representation space and
//! the gradient projection memory.
//!
//! Vectors are `ndarray::Array1<f64>` and matrices are row-major
//! `ndarray::Array2<f64>`. The thin SVD is a one-sided Jacobi
//! (Hestenes) iteration over whichever side of the matrix is shorter, so
//! a 7 x 125_000 gradient matrix costs the same as a 125_000 x 7 one.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Default cumulative-energy threshold for latent-space bases.
pub const DEFAULT_ENERGY: f64 = 0.95;

const JACOBI_MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 1e-15;

/// An orthonormal row set spanning a subspace, with the singular values
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    vectors: Array2<f64>,
    singular_values: Vec<f64>,
    energy_threshold: f64,
}

impl Basis {
    /// Wraps rows that the caller guarantees are orthonormal.
    pub fn from_parts(
        vectors: Array2<f64>,
        singular_values: Vec<f64>,
        energy_threshold: f64,
    ) -> Result<Self> {
        if vectors.nrows() != singular_values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} basis rows but {} singular values",
                vectors.nrows(),
                singular_values.len()
            )));
        }
        Ok(Basis {
            vectors,
            singular_values,
            energy_threshold,
        })
    }

    /// An empty basis (rank 0) in `dim` dimensions.
    pub fn empty(dim: usize, energy_threshold: f64) -> Self {
        Basis {
            vectors: Array2::zeros((0, dim)),
            singular_values: Vec::new(),
            energy_threshold,
        }
    }

    pub fn rank(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn energy_threshold(&self) -> f64 {
        self.energy_threshold
    }

    /// Largest deviation of the Gram matrix of the rows from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.vectors.dot(&self.vectors.t());
        let mut worst = 0.0f64;
        for ((i, j), g) in gram.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
        worst
    }
}

pub fn dot(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    u.dot(&v)
}

pub fn norm(u: ArrayView1<f64>) -> f64 {
    u.dot(&u).sqrt()
}

/// `1 - <u,v> / (|u| |v|)`, clamped to `[0, 2]`.
pub fn cosine_distance(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = u.dot(&v) / (nu * nv);
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Singular triplets without the left vectors: `(sigma_i, v_i)` sorted by
/// non-increasing sigma. Ties keep their original column order.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub singular_values: Vec<f64>,
    /// Right singular vectors as rows.
    pub right_vectors: Array2<f64>,
}

/// Orthogonalizes the rows of `rows` in place by Jacobi rotations. When
/// `accum` is given, the same rotations are applied to its rows.
fn jacobi_orthogonalize_rows(rows: &mut Array2<f64>, mut accum: Option<&mut Array2<f64>>) {
    let m = rows.nrows();
    if m < 2 {
        return;
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m - 1 {
            for q in p + 1..m {
                let (alpha, beta, gamma) = {
                    let rp = rows.row(p);
                    let rq = rows.row(q);
                    (rp.dot(&rp), rq.dot(&rq), rp.dot(&rq))
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(rows, p, q, c, s);
                if let Some(acc) = accum.as_deref_mut() {
                    rotate_rows(acc, p, q, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

/// The row rotations of [`jacobi_orthogonalize_rows`] driven by the Gram
/// matrix `g` of the rows instead of the rows themselves. Rotations are
/// accumulated into the rows of `rot`.
fn jacobi_gram(g: &mut Array2<f64>, rot: &mut Array2<f64>) {
    let m = g.nrows();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m - 1 {
            for q in p + 1..m {
                let (alpha, beta, gamma) = (g[[p, p]], g[[q, q]], g[[p, q]]);
                if alpha <= 0.0 || beta <= 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(g, p, q, c, s);
                let mut gt = g.view_mut().reversed_axes();
                let (mut left, mut right) = gt.view_mut().split_at(Axis(0), q);
                ndarray::Zip::from(left.row_mut(p)).and(right.row_mut(0)).for_each(|x, y| {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                });
                rotate_rows(rot, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate_rows(a: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64) {
    let (mut top, mut bottom) = a.view_mut().split_at(Axis(0), q);
    let mut rp = top.row_mut(p);
    let mut rq = bottom.row_mut(0);
    ndarray::Zip::from(&mut rp).and(&mut rq).for_each(|x, y| {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    });
}

/// Thin SVD by one-sided Jacobi. Only right singular vectors are returned;
/// directions with a zero singular value on the wide side are dropped.
pub fn thin_svd(z: ArrayView2<f64>) -> ThinSvd {
    let (n, d) = z.dim();
    let mut triplets: Vec<(f64, Array1<f64>)> = if n >= d {
        // Rotating the rows of Z^T is rotating the columns of Z; the
        // accumulated rotation rows are the right singular vectors.
        let mut w = z.t().to_owned();
        let mut v = Array2::<f64>::eye(d);
        jacobi_orthogonalize_rows(&mut w, Some(&mut v));
        (0..d)
            .map(|j| (norm(w.row(j)), v.row(j).to_owned()))
            .collect()
    } else {
        // Rows of U^T Z are sigma_i v_i^T.
        let mut w = if d > 2 * n && n > 1 {
            // Find the rotations on the small Gram matrix first, so the
            // sweeps over the wide rows only polish.
            let mut gram = z.dot(&z.t());
            let mut rot = Array2::<f64>::eye(n);
            jacobi_gram(&mut gram, &mut rot);
            rot.dot(&z)
        } else {
            z.to_owned()
        };
        jacobi_orthogonalize_rows(&mut w, None);
        (0..n)
            .filter_map(|i| {
                let s = norm(w.row(i));
                (s > 0.0).then(|| (s, w.row(i).mapv(|x| x / s)))
            })
            .collect()
    };
    triplets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let k = triplets.len();
    let mut right_vectors = Array2::zeros((k, d));
    let mut singular_values = Vec::with_capacity(k);
    for (i, (s, v)) in triplets.into_iter().enumerate() {
        singular_values.push(s);
        right_vectors.row_mut(i).assign(&v);
    }
    ThinSvd {
        singular_values,
        right_vectors,
    }
}

/// Smallest `k` whose leading squared singular values hold at least
/// `energy` of the total.
pub fn energy_rank(singular_values: &[f64], energy: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 0;
    }
    let mut cum = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        cum += s * s;
        // Relative slack so energy = 1 is reachable despite rounding.
        if cum / total >= energy * (1.0 - 1e-12) {
            return i + 1;
        }
    }
    singular_values.len()
}

fn check_energy(energy: f64) -> Result<()> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "energy threshold {energy} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Leading right singular vectors of `z` holding `energy` of its squared
/// spectrum.
pub fn svd_basis(z: ArrayView2<f64>, energy: f64) -> Result<Basis> {
    check_energy(energy)?;
    if z.nrows() == 0 || z.ncols() == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite matrix entry".into()));
    }
    let svd = thin_svd(z);
    let k = energy_rank(&svd.singular_values, energy);
    if k == 0 {
        return Err(Error::DegenerateMatrix);
    }
    Basis::from_parts(
        svd.right_vectors.slice(ndarray::s![..k, ..]).to_owned(),
        svd.singular_values[..k].to_vec(),
        energy,
    )
}

/// Least-squares projection of `z` onto the span of the basis rows.
pub fn project_onto_span(basis: &Basis, z: ArrayView1<f64>) -> Result<Array1<f64>> {
    if z.len() != basis.dim() {
        return Err(Error::DimMismatch {
            expected: basis.dim(),
            got: z.len(),
        });
    }
    let coeffs = basis.vectors.dot(&z);
    Ok(basis.vectors.t().dot(&coeffs))
}
