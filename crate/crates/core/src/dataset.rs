//! Annotated samples and the on-disk dataset directory.
//!
//! ```text
//! <dir>/meta.json          landmark count and eye indices
//! <dir>/images/NNNN.pgm    binary PGM (P5, maxval 255)
//! <dir>/annotations.csv    id, box_u, box_v, box_w, box_h, then u, v, visible, annotated per landmark
//! <dir>/truth_pose.csv     id, pitch, yaw, roll (degrees), scale, t_u, t_v, alpha...   (optional)
//! <dir>/shapes3d.csv       id, x0, y0, z0, ...                                      (optional)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::deformable::DeformCoeffs;
use crate::error::{Error, Result};
use crate::features::ImageRaster;
use crate::geometry::{pose_from_angles, PoseAngles, Shape2D, Shape3D, WeakPerspectivePose};
use crate::regression::AnnotationMask;

/// Face bounding box: top-left corner and size, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub fn new(u: f64, v: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![u, v, w, h].iter().all(|x| x.is_finite()) {
            return Err(Error::invalid(format!(
                "face box ({u}, {v}, {w}, {h}) needs finite values and positive size"
            )));
        }
        Ok(Self { u, v, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.u + 0.5 * self.w, self.v + 0.5 * self.h)
    }

    /// Same center, size multiplied by `scale`, center moved by
    /// `(du, dv)` box sizes.
    pub fn jittered(&self, scale: f64, du: f64, dv: f64) -> Result<Self> {
        let (cu, cv) = self.center();
        let (w, h) = (self.w * scale, self.h * scale);
        Self::new(cu + du * self.w - 0.5 * w, cv + dv * self.h - 0.5 * h, w, h)
    }
}

/// Evaluation-only pose ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTruth {
    pub h: PoseAngles,
    pub alpha: DeformCoeffs,
    pub pose: WeakPerspectivePose,
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: usize,
    pub image: ImageRaster,
    pub face_box: FaceBox,
    pub x_true: Shape2D,
    /// 1 visible, 0 occluded.
    pub c_true: Vec<f64>,
    pub mask: AnnotationMask,
    /// Present for synthetic data; training never reads it.
    pub truth: Option<PoseTruth>,
}

impl TrainingSample {
    pub fn landmarks(&self) -> usize {
        self.x_true.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub landmarks: usize,
    /// Landmark indices used for inter-ocular normalization.
    pub eye_indices: Option<[usize; 2]>,
}

/// Samples plus the 3D training shapes for the deformable model.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<TrainingSample>,
    pub shapes3d: Vec<Shape3D>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let d = self.meta.landmarks;
        for s in &self.samples {
            if s.landmarks() != d || s.c_true.len() != d || s.mask.n_points() != d {
                return Err(Error::invalid(format!(
                    "sample {} does not have {d} landmarks",
                    s.id
                )));
            }
        }
        if let Some(bad) = self.shapes3d.iter().find(|s| s.len() != d) {
            return Err(Error::invalid(format!(
                "3D shape with {} points in a {d}-landmark dataset",
                bad.len()
            )));
        }
        if let Some([l, r]) = self.meta.eye_indices {
            if l >= d || r >= d {
                return Err(Error::invalid("eye index out of range"));
            }
        }
        Ok(())
    }

    /// Splits into the first `n` samples and the rest; both keep the 3D shapes.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.samples.len());
        let part = |samples: &[TrainingSample]| Dataset {
            meta: self.meta.clone(),
            samples: samples.to_vec(),
            shapes3d: self.shapes3d.clone(),
        };
        (part(&self.samples[..n]), part(&self.samples[n..]))
    }
}

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("images").join(format!("{id:04}.pgm"))
}

/// Encodes an image as binary PGM with maxval 255.
pub fn encode_pgm(img: &ImageRaster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.as_slice().iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageRaster> {
    let bad = |reason: &str| Error::format("pgm", reason);
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if tokens[0] != "P5" {
        return Err(bad("only binary P5 images are supported"));
    }
    let parse = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| bad("malformed header number"))
    };
    let (w, h, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("truncated raster"))?;
    let scale = maxval as f64;
    ImageRaster::new(
        w,
        h,
        data.iter().map(|&b| (b as f64 / scale).min(1.0)).collect(),
    )
}

fn csv_err(file: &str, e: csv::Error) -> Error {
    Error::format(file, e.to_string())
}

fn parse_f64(file: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| Error::format(file, format!("not a number: `{v}`")))
}

/// Writes the full dataset directory.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    let d = data.meta.landmarks;
    fs::create_dir_all(dir.join("images"))?;
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&data.meta)
            .map_err(|e| Error::format("meta.json", e.to_string()))?,
    )?;

    let mut ann = csv::Writer::from_path(dir.join("annotations.csv"))
        .map_err(|e| csv_err("annotations.csv", e))?;
    let mut header: Vec<String> = ["id", "box_u", "box_v", "box_w", "box_h"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for k in 0..d {
        header.extend([
            format!("u{k}"),
            format!("v{k}"),
            format!("visible{k}"),
            format!("annotated{k}"),
        ]);
    }
    ann.write_record(&header)
        .map_err(|e| csv_err("annotations.csv", e))?;

    let with_truth = data.samples.iter().all(|s| s.truth.is_some()) && !data.samples.is_empty();
    let mut truth_rows: Vec<Vec<String>> = Vec::new();
    for s in &data.samples {
        let b = &s.face_box;
        let mut row = vec![
            s.id.to_string(),
            b.u.to_string(),
            b.v.to_string(),
            b.w.to_string(),
            b.h.to_string(),
        ];
        for k in 0..d {
            let p = s.x_true.point(k);
            row.extend([
                p[0].to_string(),
                p[1].to_string(),
                (s.c_true[k] as u8).to_string(),
                (s.mask.is_annotated(k) as u8).to_string(),
            ]);
        }
        ann.write_record(&row)
            .map_err(|e| csv_err("annotations.csv", e))?;
        fs::write(image_path(dir, s.id), encode_pgm(&s.image))?;

        if let (true, Some(t)) = (with_truth, &s.truth) {
            let deg = t.h.to_degrees();
            let mut row = vec![s.id.to_string()];
            row.extend(deg.iter().map(|v| v.to_string()));
            row.extend([
                t.pose.scale.to_string(),
                t.pose.t.x.to_string(),
                t.pose.t.y.to_string(),
            ]);
            row.extend(t.alpha.as_slice().iter().map(|v| v.to_string()));
            truth_rows.push(row);
        }
    }
    ann.flush()?;

    if with_truth {
        let k = data.samples[0].truth.as_ref().map_or(0, |t| t.alpha.len());
        let mut w = csv::Writer::from_path(dir.join("truth_pose.csv"))
            .map_err(|e| csv_err("truth_pose.csv", e))?;
        let mut header: Vec<String> = ["id", "pitch", "yaw", "roll", "scale", "t_u", "t_v"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..k).map(|j| format!("alpha{j}")));
        w.write_record(&header)
            .map_err(|e| csv_err("truth_pose.csv", e))?;
        for row in truth_rows {
            w.write_record(&row)
                .map_err(|e| csv_err("truth_pose.csv", e))?;
        }
        w.flush()?;
    }

    if !data.shapes3d.is_empty() {
        let mut w = BufWriter::new(fs::File::create(dir.join("shapes3d.csv"))?);
        let mut header = vec!["id".to_string()];
        for k in 0..d {
            header.extend([format!("x{k}"), format!("y{k}"), format!("z{k}")]);
        }
        writeln!(w, "{}", header.join(","))?;
        for (i, s) in data.shapes3d.iter().enumerate() {
            let vals: Vec<String> = s.as_slice().iter().map(|v| v.to_string()).collect();
            writeln!(w, "{i},{}", vals.join(","))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn read_rows(path: &Path, file: &str) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(file, e))?;
    rdr.records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_err(file, e))
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_text = fs::read_to_string(dir.join("meta.json"))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::format("meta.json", e.to_string()))?;
    let d = meta.landmarks;

    let file = "annotations.csv";
    let mut samples = Vec::new();
    for rec in read_rows(&dir.join(file), file)? {
        if rec.len() != 5 + 4 * d {
            return Err(Error::format(
                file,
                format!("expected {} columns, found {}", 5 + 4 * d, rec.len()),
            ));
        }
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::format(file, format!("bad id `{}`", &rec[0])))?;
        let face_box = FaceBox::new(
            parse_f64(file, &rec[1])?,
            parse_f64(file, &rec[2])?,
            parse_f64(file, &rec[3])?,
            parse_f64(file, &rec[4])?,
        )?;
        let mut coords = Vec::with_capacity(2 * d);
        let mut c_true = Vec::with_capacity(d);
        let mut annotated = Vec::with_capacity(d);
        for k in 0..d {
            let base = 5 + 4 * k;
            coords.push(parse_f64(file, &rec[base])?);
            coords.push(parse_f64(file, &rec[base + 1])?);
            let flag = |v: &str| match v.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::format(
                    file,
                    format!("flag must be 0 or 1, got `{other}`"),
                )),
            };
            c_true.push(if flag(&rec[base + 2])? { 1.0 } else { 0.0 });
            annotated.push(flag(&rec[base + 3])?);
        }
        let image = decode_pgm(&fs::read(image_path(dir, id))?)?;
        samples.push(TrainingSample {
            id,
            image,
            face_box,
            x_true: Shape2D::new(coords)?,
            c_true,
            mask: AnnotationMask::from_points(&annotated),
            truth: None,
        });
    }

    let truth_path = dir.join("truth_pose.csv");
    if truth_path.exists() {
        let file = "truth_pose.csv";
        let rows = read_rows(&truth_path, file)?;
        if rows.len() != samples.len() {
            return Err(Error::format(
                file,
                "row count differs from annotations.csv",
            ));
        }
        for (s, rec) in samples.iter_mut().zip(rows) {
            if rec.len() < 7 || rec[0].trim() != s.id.to_string() {
                return Err(Error::format(
                    file,
                    format!("malformed row for sample {}", s.id),
                ));
            }
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|v| parse_f64(file, v))
                .collect::<Result<_>>()?;
            let h = PoseAngles::from_degrees(vals[0], vals[1], vals[2]);
            let pose = pose_from_angles(&h, vals[3], Vector2::new(vals[4], vals[5]))?;
            s.truth = Some(PoseTruth {
                h,
                alpha: DeformCoeffs::new(vals[6..].to_vec()),
                pose,
            });
        }
    }

    let shapes_path = dir.join("shapes3d.csv");
    let mut shapes3d = Vec::new();
    if shapes_path.exists() {
        let file = "shapes3d.csv";
        for rec in read_rows(&shapes_path, file)? {
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|v| parse_f64(file, v))
                .collect::<Result<_>>()?;
            shapes3d.push(Shape3D::new(vals)?);
        }
    }

    let data = Dataset {
        meta,
        samples,
        shapes3d,
    };
    data.validate()?;
    Ok(data)
}
