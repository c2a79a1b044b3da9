//! Coefficient fields over classical space: constant, affine in x, or
//! tabulated on the nodes of a grid.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::json::Repr;
use crate::linalg::{cr, CMat, RMat, RVec, C64};
use crate::state::Grid;

/// Linear-space operations needed to evaluate and interpolate a field.
pub trait FieldValue: Clone + Repr {
    fn axpy(&mut self, a: f64, other: &Self);
    fn zero_like(&self) -> Self;
    fn max_diff(&self, other: &Self) -> f64;
    fn shape(&self) -> (usize, usize);
}

impl FieldValue for CMat {
    fn axpy(&mut self, a: f64, other: &Self) {
        *self += other * cr(a);
    }
    fn zero_like(&self) -> Self {
        CMat::zeros(self.nrows(), self.ncols())
    }
    fn max_diff(&self, other: &Self) -> f64 {
        crate::linalg::max_abs(&(self - other))
    }
    fn shape(&self) -> (usize, usize) {
        (self.nrows(), self.ncols())
    }
}

impl FieldValue for RMat {
    fn axpy(&mut self, a: f64, other: &Self) {
        *self += other * a;
    }
    fn zero_like(&self) -> Self {
        RMat::zeros(self.nrows(), self.ncols())
    }
    fn max_diff(&self, other: &Self) -> f64 {
        (self - other).amax()
    }
    fn shape(&self) -> (usize, usize) {
        (self.nrows(), self.ncols())
    }
}

impl FieldValue for RVec {
    fn axpy(&mut self, a: f64, other: &Self) {
        *self += other * a;
    }
    fn zero_like(&self) -> Self {
        RVec::zeros(self.len())
    }
    fn max_diff(&self, other: &Self) -> f64 {
        (self - other).amax()
    }
    fn shape(&self) -> (usize, usize) {
        (self.len(), 1)
    }
}

impl FieldValue for C64 {
    fn axpy(&mut self, a: f64, other: &Self) {
        *self += other * a;
    }
    fn zero_like(&self) -> Self {
        C64::new(0.0, 0.0)
    }
    fn max_diff(&self, other: &Self) -> f64 {
        (self - other).norm()
    }
    fn shape(&self) -> (usize, usize) {
        (1, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Field<T> {
    Const(T),
    /// `constant + Σ_n x^n slopes[n]`.
    Affine {
        constant: T,
        slopes: Vec<T>,
    },
    /// One value per node of the model grid.
    Table(Vec<T>),
}

impl<T: FieldValue> Field<T> {
    pub fn is_const(&self) -> bool {
        matches!(self, Field::Const(_))
    }

    /// A representative value (for shape checks).
    pub fn sample(&self) -> Option<&T> {
        match self {
            Field::Const(v) => Some(v),
            Field::Affine { constant, .. } => Some(constant),
            Field::Table(t) => t.first(),
        }
    }

    pub fn at_point(&self, x: &[f64], grid: Option<&Grid>) -> Result<T> {
        match self {
            Field::Const(v) => Ok(v.clone()),
            Field::Affine { constant, slopes } => {
                let mut out = constant.clone();
                for (s, &xn) in slopes.iter().zip(x) {
                    out.axpy(xn, s);
                }
                Ok(out)
            }
            Field::Table(t) => {
                let grid = grid.ok_or_else(|| {
                    Error::InvalidArgument("tabulated field needs a model grid".into())
                })?;
                let mut st = grid.interpolation_stencil(x).into_iter();
                let (n0, w0) = st.next().expect("stencil is never empty");
                let mut out = t[n0].zero_like();
                out.axpy(w0, &t[n0]);
                for (n, w) in st {
                    out.axpy(w, &t[n]);
                }
                Ok(out)
            }
        }
    }

    pub fn at_node(&self, node: usize, grid: Option<&Grid>) -> Result<T> {
        match self {
            Field::Table(t) => t.get(node).cloned().ok_or_else(|| {
                Error::ShapeMismatch(format!(
                    "table has {} entries, node {node} requested",
                    t.len()
                ))
            }),
            Field::Const(v) => Ok(v.clone()),
            Field::Affine { .. } => {
                let grid = grid
                    .ok_or_else(|| Error::InvalidArgument("node evaluation needs a grid".into()))?;
                self.at_point(&grid.coord(node), Some(grid))
            }
        }
    }

    /// Check every value has `shape`, and tables match the grid size.
    pub fn check(
        &self,
        what: &str,
        shape: (usize, usize),
        n_classical: usize,
        grid: Option<&Grid>,
    ) -> Result<()> {
        let bad = |v: &T| v.shape() != shape;
        let err = || Error::ShapeMismatch(format!("{what} must be {}x{}", shape.0, shape.1));
        match self {
            Field::Const(v) => {
                if bad(v) {
                    return Err(err());
                }
            }
            Field::Affine { constant, slopes } => {
                if bad(constant) || slopes.iter().any(bad) {
                    return Err(err());
                }
                if slopes.len() != n_classical {
                    return Err(Error::ShapeMismatch(format!(
                        "{what} needs {n_classical} slopes, got {}",
                        slopes.len()
                    )));
                }
            }
            Field::Table(t) => {
                let g = grid.ok_or_else(|| {
                    Error::InvalidArgument(format!("tabulated {what} needs a model grid"))
                })?;
                if t.len() != g.n_nodes() {
                    return Err(Error::ShapeMismatch(format!(
                        "{what} table has {} entries, grid has {} nodes",
                        t.len(),
                        g.n_nodes()
                    )));
                }
                if t.iter().any(bad) {
                    return Err(err());
                }
            }
        }
        Ok(())
    }

    /// Largest deviation between values at different grid nodes (0 for constants).
    pub fn variation(&self, grid: Option<&Grid>) -> Result<f64> {
        match (self, grid) {
            (Field::Const(_), _) => Ok(0.0),
            (Field::Affine { slopes, constant }, None) => Ok(slopes
                .iter()
                .map(|s| s.max_diff(&constant.zero_like()))
                .fold(0.0, f64::max)),
            (_, Some(g)) => {
                let first = self.at_node(0, Some(g))?;
                let mut worst = 0.0f64;
                for n in 1..g.n_nodes() {
                    worst = worst.max(self.at_node(n, Some(g))?.max_diff(&first));
                }
                Ok(worst)
            }
            (Field::Table(_), None) => Err(Error::InvalidArgument(
                "tabulated field needs a grid".into(),
            )),
        }
    }

    /// Tabulate on every node of `grid`.
    pub fn tabulate(&self, grid: &Grid) -> Result<Vec<T>> {
        (0..grid.n_nodes())
            .map(|n| self.at_node(n, Some(grid)))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Tagged<R> {
    Const(R),
    Affine { constant: R, slopes: Vec<R> },
    Table(Vec<R>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyRepr<R> {
    Tagged(Tagged<R>),
    Bare(R),
}

impl<T: FieldValue> Serialize for Field<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Field::Const(v) => Tagged::Const(v.to_repr()),
            Field::Affine { constant, slopes } => Tagged::Affine {
                constant: constant.to_repr(),
                slopes: slopes.iter().map(Repr::to_repr).collect(),
            },
            Field::Table(t) => Tagged::Table(t.iter().map(Repr::to_repr).collect()),
        }
        .serialize(s)
    }
}

/// Accepts `{"const": v}`, `{"affine": {...}}`, `{"table": [...]}` or a bare value.
impl<'de, T: FieldValue> Deserialize<'de> for Field<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let conv = |r| T::from_repr(r).map_err(D::Error::custom);
        Ok(match AnyRepr::<T::R>::deserialize(d)? {
            AnyRepr::Bare(r) | AnyRepr::Tagged(Tagged::Const(r)) => Field::Const(conv(r)?),
            AnyRepr::Tagged(Tagged::Affine { constant, slopes }) => Field::Affine {
                constant: conv(constant)?,
                slopes: slopes
                    .into_iter()
                    .map(conv)
                    .collect::<std::result::Result<_, _>>()?,
            },
            AnyRepr::Tagged(Tagged::Table(t)) => Field::Table(
                t.into_iter()
                    .map(conv)
                    .collect::<std::result::Result<_, _>>()?,
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;

    #[test]
    fn affine_and_table_evaluation() {
        let f = Field::Affine {
            constant: RVec::from_vec(vec![1.0]),
            slopes: vec![RVec::from_vec(vec![2.0])],
        };
        assert_eq!(f.at_point(&[0.5], None).unwrap()[0], 2.0);
        let g = Grid::periodic_1d(4, 0.0, 4.0).unwrap();
        let t = Field::Table(f.tabulate(&g).unwrap());
        assert!((t.at_point(&[1.5], Some(&g)).unwrap()[0] - 4.0).abs() < 1e-15);
        assert_eq!(t.at_node(3, Some(&g)).unwrap()[0], 7.0);
        assert_eq!(t.variation(Some(&g)).unwrap(), 6.0);
    }

    #[test]
    fn json_forms() {
        let bare: Field<CMat> = serde_json::from_str("[[[1,0],[0,-1]],[[0,1],[2,0]]]").unwrap();
        assert_eq!(
            bare,
            Field::Const(CMat::from_row_slice(
                2,
                2,
                &[c(1.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(2.0, 0.0)]
            ))
        );
        let tagged: Field<RVec> = serde_json::from_str(r#"{"table": [[1.0], [2.0]]}"#).unwrap();
        assert!(matches!(tagged, Field::Table(ref t) if t.len() == 2));
        let back: Field<RVec> =
            serde_json::from_str(&serde_json::to_string(&tagged).unwrap()).unwrap();
        assert_eq!(back, tagged);
    }
}
