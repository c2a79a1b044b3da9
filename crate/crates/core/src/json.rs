//! JSON encodings shared by state documents, model files and trajectory records.
//!
//! Complex numbers are `[re, im]` pairs; matrices are row-major nested arrays of
//! pairs. With `serde_json`'s `float_roundtrip` feature every `f64` survives a
//! write/read cycle bit for bit.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg::{c, CMat, CVec, RMat, RVec};

pub type ComplexRepr = [f64; 2];
pub type MatrixRepr = Vec<Vec<ComplexRepr>>;

pub fn cmat_to_repr(m: &CMat) -> MatrixRepr {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| [m[(i, j)].re, m[(i, j)].im])
                .collect()
        })
        .collect()
}

pub fn cmat_from_repr(rows: &MatrixRepr) -> Result<CMat, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    Ok(CMat::from_fn(nrows, ncols, |i, j| {
        c(rows[i][j][0], rows[i][j][1])
    }))
}

pub fn cvec_to_repr(v: &CVec) -> Vec<ComplexRepr> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

pub fn cvec_from_repr(v: &[ComplexRepr]) -> CVec {
    CVec::from_iterator(v.len(), v.iter().map(|p| c(p[0], p[1])))
}

pub fn rmat_to_repr(m: &RMat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn rmat_from_repr(rows: &[Vec<f64>]) -> Result<RMat, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    Ok(RMat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub mod cmat {
    use super::*;

    pub fn serialize<S: Serializer>(m: &CMat, s: S) -> Result<S::Ok, S::Error> {
        cmat_to_repr(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CMat, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        cmat_from_repr(&repr).map_err(D::Error::custom)
    }
}

pub mod cmat_vec {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[CMat], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(cmat_to_repr).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CMat>, D::Error> {
        let repr = Vec::<MatrixRepr>::deserialize(d)?;
        repr.iter()
            .map(|r| cmat_from_repr(r).map_err(D::Error::custom))
            .collect()
    }
}

pub mod cvec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &CVec, s: S) -> Result<S::Ok, S::Error> {
        cvec_to_repr(v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CVec, D::Error> {
        let repr = Vec::<ComplexRepr>::deserialize(d)?;
        Ok(cvec_from_repr(&repr))
    }
}

pub mod rmat {
    use super::*;

    pub fn serialize<S: Serializer>(m: &RMat, s: S) -> Result<S::Ok, S::Error> {
        rmat_to_repr(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RMat, D::Error> {
        let repr = Vec::<Vec<f64>>::deserialize(d)?;
        rmat_from_repr(&repr).map_err(D::Error::custom)
    }
}

pub mod rvec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &RVec, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RVec, D::Error> {
        Ok(RVec::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Values that have a JSON representation, used by generic containers such as
/// [`crate::field::Field`].
pub trait Repr: Sized {
    type R: Serialize + serde::de::DeserializeOwned;
    fn to_repr(&self) -> Self::R;
    fn from_repr(r: Self::R) -> Result<Self, String>;
}

impl Repr for CMat {
    type R = MatrixRepr;
    fn to_repr(&self) -> MatrixRepr {
        cmat_to_repr(self)
    }
    fn from_repr(r: MatrixRepr) -> Result<Self, String> {
        cmat_from_repr(&r)
    }
}

impl Repr for RMat {
    type R = Vec<Vec<f64>>;
    fn to_repr(&self) -> Self::R {
        rmat_to_repr(self)
    }
    fn from_repr(r: Self::R) -> Result<Self, String> {
        rmat_from_repr(&r)
    }
}

impl Repr for RVec {
    type R = Vec<f64>;
    fn to_repr(&self) -> Self::R {
        self.as_slice().to_vec()
    }
    fn from_repr(r: Self::R) -> Result<Self, String> {
        Ok(RVec::from_vec(r))
    }
}

impl Repr for crate::linalg::C64 {
    type R = ComplexRepr;
    fn to_repr(&self) -> ComplexRepr {
        [self.re, self.im]
    }
    fn from_repr(r: ComplexRepr) -> Result<Self, String> {
        Ok(c(r[0], r[1]))
    }
}
