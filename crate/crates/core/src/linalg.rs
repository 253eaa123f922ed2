use nalgebra::{DMatrix, DVector};

/// A square matrix stored either as its diagonal or densely.
#[derive(Clone, Debug, PartialEq)]
pub enum SquareMatrix {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl SquareMatrix {
    pub fn dim(&self) -> usize {
        match self {
            SquareMatrix::Diagonal(d) => d.len(),
            SquareMatrix::Dense(m) => m.nrows(),
        }
    }

    pub fn zeros_diagonal(n: usize) -> Self {
        SquareMatrix::Diagonal(DVector::zeros(n))
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, SquareMatrix::Diagonal(_))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SquareMatrix::Diagonal(d) => DMatrix::from_diagonal(d),
            SquareMatrix::Dense(m) => m.clone(),
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            SquareMatrix::Diagonal(d) => d.clone(),
            SquareMatrix::Dense(m) => m.diagonal(),
        }
    }

    /// `A v`.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SquareMatrix::Diagonal(d) => d.component_mul(v),
            SquareMatrix::Dense(m) => m * v,
        }
    }

    /// `Aᵀ v`.
    pub fn tr_mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SquareMatrix::Diagonal(d) => d.component_mul(v),
            SquareMatrix::Dense(m) => m.tr_mul(v),
        }
    }

    /// `A B` for a dense right-hand side.
    pub fn mul_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SquareMatrix::Diagonal(d) => {
                let mut out = b.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= d[i];
                }
                out
            }
            SquareMatrix::Dense(m) => m * b,
        }
    }

    /// `Aᵀ B` for a dense right-hand side.
    pub fn tr_mul_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SquareMatrix::Diagonal(_) => self.mul_mat(b),
            SquareMatrix::Dense(m) => m.tr_mul(b),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            SquareMatrix::Diagonal(d) => d.iter().all(|v| v.is_finite()),
            SquareMatrix::Dense(m) => m.iter().all(|v| v.is_finite()),
        }
    }
}

pub(crate) fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_dense_agree() {
        let d = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let diag = SquareMatrix::Diagonal(d.clone());
        let dense = SquareMatrix::Dense(DMatrix::from_diagonal(&d));
        let v = DVector::from_vec(vec![0.5, 1.0, -1.0]);
        assert_eq!(diag.mul_vec(&v), dense.mul_vec(&v));
        assert_eq!(diag.tr_mul_vec(&v), dense.tr_mul_vec(&v));
        let b = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(diag.mul_mat(&b), dense.mul_mat(&b));
        assert_eq!(diag.tr_mul_mat(&b), dense.tr_mul_mat(&b));
        assert_eq!(diag.diagonal(), dense.diagonal());
    }
}
