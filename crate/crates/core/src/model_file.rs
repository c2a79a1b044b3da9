//! JSON model files.
//!
//! ```json
//! {"kind": "discrete", "points": [[0], [1]], "H": [H0, H1],
//!  "generators": [{"entries": [{"to": 1, "from": 0, "op": M}]}]}
//!
//! {"kind": "diffusive", "grid": {...}, "H": F, "generators": [F, ...],
//!  "DQ": F, "DC": F, "G": F, "V": F}
//! ```
//!
//! Matrices are row-major arrays of `[re, im]` pairs (real arrays for `DC` and
//! `V`). A field `F` is either a bare value or one of
//! `{"const": v}`, `{"affine": {"constant": v, "slopes": [v, ...]}}`,
//! `{"table": [v, ...]}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::json;
use crate::linalg::{CMat, RMat, RVec};
use crate::model::{DiffusiveModel, DiscreteModel, Generator};
use crate::state::{Grid, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelFile {
    Discrete {
        points: Vec<Point>,
        #[serde(rename = "H", with = "json::cmat_vec")]
        h: Vec<CMat>,
        generators: Vec<Generator>,
    },
    Diffusive {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid: Option<Grid>,
        #[serde(rename = "H")]
        h: Field<CMat>,
        generators: Vec<Field<CMat>>,
        #[serde(rename = "DQ")]
        dq: Field<CMat>,
        #[serde(rename = "DC")]
        dc: Field<RMat>,
        #[serde(rename = "G")]
        g: Field<CMat>,
        #[serde(rename = "V")]
        v: Field<RVec>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Discrete(DiscreteModel),
    Diffusive(DiffusiveModel),
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Build and validate the model.
    pub fn build(self) -> Result<LoadedModel> {
        match self {
            ModelFile::Discrete {
                points,
                h,
                generators,
            } => Ok(LoadedModel::Discrete(DiscreteModel::new(
                points, h, generators,
            )?)),
            ModelFile::Diffusive {
                grid,
                h,
                generators,
                dq,
                dc,
                g,
                v,
            } => {
                let model = DiffusiveModel::new(grid, h, generators, dq, dc, g, v)?;
                if model.dim == 0 {
                    return Err(Error::ShapeMismatch("H must be a non-empty matrix".into()));
                }
                Ok(LoadedModel::Diffusive(model))
            }
        }
    }

    pub fn from_discrete(m: &DiscreteModel) -> Self {
        ModelFile::Discrete {
            points: m.points.clone(),
            h: m.h.clone(),
            generators: m.generators.clone(),
        }
    }

    pub fn from_diffusive(m: &DiffusiveModel) -> Self {
        ModelFile::Diffusive {
            grid: m.grid.clone(),
            h: m.h.clone(),
            generators: m.generators.clone(),
            dq: m.dq.clone(),
            dc: m.dc.clone(),
            g: m.g.clone(),
            v: m.v.clone(),
        }
    }
}

pub fn load_model(text: &str) -> Result<LoadedModel> {
    ModelFile::parse(text)?.build()
}
