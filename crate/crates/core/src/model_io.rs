//! Versioned model files.
//!
//! A model file is a JSON document. Scalars and settings are stored as plain
//! fields; every matrix is a named entry under `arrays` holding its shape and
//! a base64 payload of row-major little-endian `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeModel, CascadeStage, MODEL_VERSION};
use crate::deformable::DeformableModel;
use crate::error::{Error, Result};
use crate::features::DescriptorSpec;
use crate::geometry::{Shape2D, Shape3D};
use crate::regression::{LandmarkRegressor, VisibilityRegressor};
use crate::solver::SolverConfig;

const DTYPE: &str = "f64le";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayRecord {
    shape: Vec<usize>,
    dtype: String,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: String,
    landmarks: usize,
    components: usize,
    stages: usize,
    descriptor: DescriptorSpec,
    solver: SolverConfig,
    eye_indices: Option<[usize; 2]>,
    arrays: BTreeMap<String, ArrayRecord>,
}

fn encode(values: impl Iterator<Item = f64>, shape: Vec<usize>) -> ArrayRecord {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    ArrayRecord {
        shape,
        dtype: DTYPE.to_string(),
        data: B64.encode(bytes),
    }
}

fn encode_matrix(m: &DMatrix<f64>) -> ArrayRecord {
    let values = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]));
    encode(values, vec![m.nrows(), m.ncols()])
}

fn stage_key(t: usize, name: &str) -> String {
    format!("stage{t}.{name}")
}

pub fn model_to_string(model: &CascadeModel) -> Result<String> {
    model.validate()?;
    let d = model.landmarks();
    let k = model.deformable.n_components();
    let mut arrays = BTreeMap::new();
    arrays.insert(
        "mean_face_2d".to_string(),
        encode(model.mean_face_2d.as_slice().iter().copied(), vec![d, 2]),
    );
    arrays.insert(
        "deformable.mean_shape".to_string(),
        encode(
            model.deformable.mean_shape().as_slice().iter().copied(),
            vec![d, 3],
        ),
    );
    arrays.insert(
        "deformable.basis".to_string(),
        encode_matrix(model.deformable.basis()),
    );
    arrays.insert(
        "deformable.variances".to_string(),
        encode(model.deformable.variances().iter().copied(), vec![k]),
    );
    for (t, s) in model.stages.iter().enumerate() {
        for (name, m) in [
            ("t_a", &s.visibility.t_a),
            ("t_h", &s.visibility.t_h),
            ("r_a", &s.landmark.r_a),
            ("r_h", &s.landmark.r_h),
            ("r_d", &s.landmark.r_d),
        ] {
            arrays.insert(stage_key(t, name), encode_matrix(m));
        }
    }
    let file = ModelFile {
        version: model.version.clone(),
        landmarks: d,
        components: k,
        stages: model.n_stages(),
        descriptor: model.descriptor.clone(),
        solver: model.solver_cfg.clone(),
        eye_indices: model.eye_indices,
        arrays,
    };
    let mut text =
        serde_json::to_string_pretty(&file).map_err(|e| Error::format("model", e.to_string()))?;
    text.push('\n');
    Ok(text)
}

struct Arrays(BTreeMap<String, ArrayRecord>);

impl Arrays {
    fn values(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let field = format!("arrays.{name}");
        let rec = self
            .0
            .get(name)
            .ok_or_else(|| Error::format(&field, "missing array"))?;
        if rec.dtype != DTYPE {
            return Err(Error::format(
                &field,
                format!("unsupported dtype `{}`", rec.dtype),
            ));
        }
        if rec.shape != shape {
            return Err(Error::format(
                &field,
                format!("shape {:?}, expected {:?}", rec.shape, shape),
            ));
        }
        let bytes = B64
            .decode(rec.data.as_bytes())
            .map_err(|e| Error::format(&field, format!("corrupt payload: {e}")))?;
        let n: usize = shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(Error::format(
                &field,
                format!("payload has {} bytes, expected {}", bytes.len(), 8 * n),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(&field, "non-finite value"));
        }
        Ok(values)
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(
            rows,
            cols,
            &self.values(name, &[rows, cols])?,
        ))
    }
}

pub fn model_from_str(text: &str) -> Result<CascadeModel> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::format("model", e.to_string()))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::format("version", "missing version tag"))?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version.to_string(),
            expected: MODEL_VERSION.to_string(),
        });
    }
    let file: ModelFile =
        serde_json::from_value(value).map_err(|e| Error::format("model", e.to_string()))?;
    let (d, k) = (file.landmarks, file.components);
    let l = d * file.descriptor.block_len();
    let arrays = Arrays(file.arrays);

    let mean_face_2d = Shape2D::new(arrays.values("mean_face_2d", &[d, 2])?)
        .map_err(|e| Error::format("arrays.mean_face_2d", e.to_string()))?;
    let deformable = DeformableModel::from_parts(
        Shape3D::new(arrays.values("deformable.mean_shape", &[d, 3])?)?,
        arrays.matrix("deformable.basis", 3 * d, k)?,
        arrays.values("deformable.variances", &[k])?,
    )
    .map_err(|e| Error::format("arrays.deformable", e.to_string()))?;

    let mut stages = Vec::with_capacity(file.stages);
    for t in 0..file.stages {
        stages.push(CascadeStage {
            visibility: VisibilityRegressor {
                t_a: arrays.matrix(&stage_key(t, "t_a"), d, l)?,
                t_h: arrays.matrix(&stage_key(t, "t_h"), d, 3)?,
            },
            landmark: LandmarkRegressor {
                r_a: arrays.matrix(&stage_key(t, "r_a"), 2 * d, l)?,
                r_h: arrays.matrix(&stage_key(t, "r_h"), 2 * d, 3)?,
                r_d: arrays.matrix(&stage_key(t, "r_d"), 2 * d, k)?,
            },
        });
    }
    let model = CascadeModel {
        version: file.version,
        stages,
        deformable,
        mean_face_2d,
        descriptor: file.descriptor,
        solver_cfg: file.solver,
        eye_indices: file.eye_indices,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &CascadeModel) -> Result<()> {
    fs::write(path, model_to_string(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CascadeModel> {
    model_from_str(&fs::read_to_string(path)?)
}
