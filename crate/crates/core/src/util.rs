use std::hash::{Hash, Hasher};

use nalgebra::DMatrix;

/// Row-major JSON encoding for matrices and vectors, shared by every
/// serialized type that embeds nalgebra storage.
pub(crate) mod matjson {
    use nalgebra::{DMatrix, DVector};
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Mat {
        pub rows: usize,
        pub cols: usize,
        /// Row-major entries, `rows * cols` of them.
        pub data: Vec<f64>,
    }

    impl From<&DMatrix<f64>> for Mat {
        fn from(m: &DMatrix<f64>) -> Self {
            let mut data = Vec::with_capacity(m.nrows() * m.ncols());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    data.push(m[(i, j)]);
                }
            }
            Mat {
                rows: m.nrows(),
                cols: m.ncols(),
                data,
            }
        }
    }

    impl TryFrom<Mat> for DMatrix<f64> {
        type Error = String;

        fn try_from(m: Mat) -> Result<Self, String> {
            if m.data.len() != m.rows * m.cols {
                return Err(format!(
                    "matrix payload has {} entries, expected {}x{}",
                    m.data.len(),
                    m.rows,
                    m.cols
                ));
            }
            Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
        }
    }

    pub fn vec_to_dvector(v: Vec<f64>) -> DVector<f64> {
        DVector::from_vec(v)
    }

    pub fn dvector_to_vec(v: &DVector<f64>) -> Vec<f64> {
        v.iter().copied().collect()
    }
}

/// Short digest of a set of matrices, used to tag derived artifacts
/// (e.g. which (A, B, Q, R) a feedback gain was designed from).
/// Stable within a build; not cryptographic.
pub(crate) fn matrix_digest(mats: &[&DMatrix<f64>]) -> String {
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    for m in mats {
        m.nrows().hash(&mut hasher);
        m.ncols().hash(&mut hasher);
        for v in m.iter() {
            v.to_bits().hash(&mut hasher);
        }
    }
    format!("{:016x}", hasher.finish())
}

pub(crate) fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|v| v.is_finite())
}
