//! JSON layout shared by every persisted artifact.
//!
//! A matrix is stored as `{"rows": r, "cols": c, "data": [...]}` with `data`
//! in row-major order. The `with`-modules below let struct fields hold
//! `nalgebra` matrices directly while serializing to that layout.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m[(r, c)]);
            }
        }
        Self { rows, cols, data }
    }
}

impl TryFrom<MatrixJson> for DMatrix<f64> {
    type Error = String;

    fn try_from(j: MatrixJson) -> Result<Self, Self::Error> {
        if j.data.len() != j.rows * j.cols {
            return Err(format!(
                "matrix data has {} entries, expected {}x{}",
                j.data.len(),
                j.rows,
                j.cols
            ));
        }
        Ok(DMatrix::from_row_slice(j.rows, j.cols, &j.data))
    }
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixJson::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let j = MatrixJson::deserialize(d)?;
        DMatrix::try_from(j).map_err(serde::de::Error::custom)
    }
}

pub mod matrix_vec {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let js: Vec<MatrixJson> = ms.iter().map(MatrixJson::from).collect();
        js.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let js = Vec::<MatrixJson>::deserialize(d)?;
        js.into_iter()
            .map(|j| DMatrix::try_from(j).map_err(serde::de::Error::custom))
            .collect()
    }
}

pub mod vector {
    use nalgebra::DVector;

    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod opt_vector {
    use nalgebra::DVector;

    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<DVector<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|v| v.as_slice().to_vec()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DVector<f64>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(DVector::from_vec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let j = MatrixJson::from(&m);
        assert_eq!(j.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = DMatrix::try_from(j).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_length() {
        let j = MatrixJson {
            rows: 2,
            cols: 2,
            data: vec![1.0],
        };
        assert!(DMatrix::try_from(j).is_err());
    }
}
