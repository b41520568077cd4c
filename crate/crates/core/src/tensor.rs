//! Ragged three-way arrays: `K` slabs sharing the row mode, each with its own
//! column count `J_k`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-way data whose second mode may differ in length from slab to slab.
///
/// Slab `k` is an `I × J_k` matrix. The row count `I` is common to all slabs.
/// Entries are validated finite at construction and the tensor is immutable
/// afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaggedTensor3 {
    slabs: Vec<DMatrix<f64>>,
}

impl RaggedTensor3 {
    pub fn new(slabs: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = slabs.first().ok_or(Error::EmptyInput)?;
        let rows = first.nrows();
        if rows == 0 {
            return Err(Error::ShapeMismatch(1, "slab has zero rows".into()));
        }
        for (k, slab) in slabs.iter().enumerate() {
            if slab.nrows() != rows {
                return Err(Error::RowMismatch(k + 1));
            }
            if slab.ncols() == 0 {
                return Err(Error::ShapeMismatch(k + 1, "slab has zero columns".into()));
            }
            for j in 0..slab.ncols() {
                for i in 0..rows {
                    if !slab[(i, j)].is_finite() {
                        return Err(Error::NonFiniteEntry(k + 1, i + 1, j + 1));
                    }
                }
            }
        }
        Ok(Self { slabs })
    }

    /// Shared row dimension `I`.
    pub fn rows(&self) -> usize {
        self.slabs[0].nrows()
    }

    /// Number of slabs `K`.
    pub fn n_slabs(&self) -> usize {
        self.slabs.len()
    }

    /// Column count `J_k` of slab `k` (0-based).
    pub fn width(&self, k: usize) -> usize {
        self.slabs[k].ncols()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.slabs.iter().map(|s| s.ncols()).collect()
    }

    pub fn min_width(&self) -> usize {
        self.slabs.iter().map(|s| s.ncols()).min().unwrap_or(0)
    }

    pub fn slab(&self, k: usize) -> &DMatrix<f64> {
        &self.slabs[k]
    }

    pub fn slabs(&self) -> &[DMatrix<f64>] {
        &self.slabs
    }

    pub fn into_slabs(self) -> Vec<DMatrix<f64>> {
        self.slabs
    }

    /// Total number of observed entries, `Σ_k I·J_k`.
    pub fn n_entries(&self) -> usize {
        self.rows() * self.slabs.iter().map(|s| s.ncols()).sum::<usize>()
    }

    /// Σ_k ‖X_k‖²_F.
    pub fn frobenius_sq(&self) -> f64 {
        self.slabs.iter().map(|s| s.norm_squared()).sum()
    }

    /// Per-slab squared Frobenius norms.
    pub fn slab_norms_sq(&self) -> Vec<f64> {
        self.slabs.iter().map(|s| s.norm_squared()).collect()
    }

    /// Returns `X_k P_k` for every slab, a rectangular `I × M × K` array stored
    /// slab-wise.
    pub fn project_slabs(&self, projections: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
        if projections.len() != self.n_slabs() {
            return Err(Error::ShapeMismatch(
                projections.len(),
                format!("expected {} projections", self.n_slabs()),
            ));
        }
        let m = projections[0].ncols();
        self.slabs
            .iter()
            .zip(projections)
            .enumerate()
            .map(|(k, (x, p))| {
                if p.nrows() != x.ncols() || p.ncols() != m {
                    Err(Error::ShapeMismatch(
                        k + 1,
                        format!("projection is {}x{}, slab has {} columns", p.nrows(), p.ncols(), x.ncols()),
                    ))
                } else {
                    Ok(x * p)
                }
            })
            .collect()
    }

    /// Elementwise sum of two tensors with identical shapes.
    pub fn add(&self, other: &RaggedTensor3) -> Result<RaggedTensor3> {
        self.check_same_shape(other)?;
        let slabs = self.slabs.iter().zip(&other.slabs).map(|(a, b)| a + b).collect();
        RaggedTensor3::new(slabs)
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &RaggedTensor3) -> Result<RaggedTensor3> {
        self.check_same_shape(other)?;
        let slabs = self.slabs.iter().zip(&other.slabs).map(|(a, b)| a - b).collect();
        RaggedTensor3::new(slabs)
    }

    pub fn scaled(&self, factor: f64) -> RaggedTensor3 {
        RaggedTensor3 { slabs: self.slabs.iter().map(|s| s * factor).collect() }
    }

    pub fn same_shape(&self, other: &RaggedTensor3) -> bool {
        self.rows() == other.rows() && self.widths() == other.widths()
    }

    fn check_same_shape(&self, other: &RaggedTensor3) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(0, "tensors differ in shape".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn smallest_tensor() {
        let t = RaggedTensor3::new(vec![dmatrix![2.0]]).unwrap();
        assert_eq!((t.rows(), t.n_slabs(), t.width(0)), (1, 1, 1));
    }

    #[test]
    fn ragged_widths_accepted() {
        let t = RaggedTensor3::new(vec![DMatrix::zeros(3, 4), DMatrix::zeros(3, 2)]).unwrap();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.widths(), vec![4, 2]);
    }

    #[test]
    fn construction_errors() {
        let err = RaggedTensor3::new(vec![DMatrix::zeros(3, 4), DMatrix::zeros(2, 4)]).unwrap_err();
        assert_eq!(err, Error::RowMismatch(2));
        assert_eq!(RaggedTensor3::new(vec![]).unwrap_err(), Error::EmptyInput);
        let mut bad = DMatrix::zeros(2, 2);
        bad[(1, 0)] = f64::NAN;
        assert_eq!(
            RaggedTensor3::new(vec![DMatrix::zeros(2, 3), bad]).unwrap_err(),
            Error::NonFiniteEntry(2, 2, 1)
        );
    }

    #[test]
    fn frobenius_examples() {
        let zero = RaggedTensor3::new(vec![DMatrix::zeros(2, 3); 2]).unwrap();
        assert_eq!(zero.frobenius_sq(), 0.0);
        let t = RaggedTensor3::new(vec![dmatrix![3.0, 4.0]]).unwrap();
        assert_eq!(t.frobenius_sq(), 25.0);
    }

    #[test]
    fn frobenius_matches_entrywise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let slabs: Vec<_> = (0..3).map(|_| random_matrix(&mut rng, 5, 5)).collect();
        let mut naive = 0.0;
        for s in &slabs {
            for i in 0..5 {
                for j in 0..5 {
                    naive += s[(i, j)] * s[(i, j)];
                }
            }
        }
        let t = RaggedTensor3::new(slabs).unwrap();
        assert!((t.frobenius_sq() - naive).abs() <= 1e-12 * naive);
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 4, 3);
        let t = RaggedTensor3::new(vec![x.clone()]).unwrap();
        let id = t.project_slabs(&[DMatrix::identity(3, 3)]).unwrap();
        assert_eq!(id[0], x);

        let q = random_matrix(&mut rng, 3, 2).qr().q();
        let y = t.project_slabs(&[q.clone()]).unwrap();
        for i in 0..4 {
            for m in 0..2 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += x[(i, j)] * q[(j, m)];
                }
                assert!((y[0][(i, m)] - acc).abs() < 1e-12);
            }
        }

        let z = RaggedTensor3::new(vec![DMatrix::zeros(4, 3)]).unwrap();
        assert_eq!(z.project_slabs(&[q.clone()]).unwrap()[0], DMatrix::zeros(4, 2));
        assert!(matches!(
            t.project_slabs(&[DMatrix::zeros(4, 2)]),
            Err(Error::ShapeMismatch(1, _))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn norm_invariant_under_orthogonal_rotation(seed in 0u64..500, i in 1usize..6, j in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_matrix(&mut rng, i, j);
                let q = random_matrix(&mut rng, j, j).qr().q();
                let before = RaggedTensor3::new(vec![x.clone()]).unwrap().frobenius_sq();
                let after = RaggedTensor3::new(vec![&x * &q]).unwrap().frobenius_sq();
                prop_assert!((before - after).abs() <= 1e-10 * before.max(1e-300));
                prop_assert!(before >= 0.0);
            }

            #[test]
            fn projection_is_non_expansive(seed in 0u64..500, j in 2usize..7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = 1 + (seed as usize) % (j - 1);
                let x = random_matrix(&mut rng, 4, j);
                let p = random_matrix(&mut rng, j, m).qr().q();
                let t = RaggedTensor3::new(vec![x.clone()]).unwrap();
                let y = t.project_slabs(&[p]).unwrap();
                prop_assert!(y[0].norm() <= x.norm() * (1.0 + 1e-10));
            }
        }
    }
}
