//! Co-occurrence prior `T` built from object annotations.
//!
//! Off-diagonal entries are the Jaccard index of the image sets containing
//! each class: `n_kl / (n_k + n_l − n_kl)`. The diagonal holds the fraction of
//! a class's images that contain at least two instances of it. Classes that
//! never appear get an all-zero row and column.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{csv, Matrix};

/// Axis-aligned box in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox([x_min, y_min, x_max, y_max]))
        }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub category_id: i64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: i64,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Category {
    pub id: i64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotations {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<Category>,
}

// COCO-subset wire format. Unknown fields are ignored by serde's default.
#[derive(Serialize, Deserialize)]
pub(crate) struct CocoFile {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct CocoImage {
    pub id: i64,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct CocoAnnotation {
    pub image_id: i64,
    pub category_id: i64,
    pub bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
pub(crate) struct CocoCategory {
    pub id: i64,
    pub name: String,
}

impl Annotations {
    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        let file: CocoFile = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_coco(file)
    }

    pub(crate) fn from_coco(file: CocoFile) -> Result<Self> {
        let categories: Vec<Category> = file
            .categories
            .into_iter()
            .map(|c| Category {
                id: c.id,
                name: c.name,
            })
            .collect();
        let known: HashSet<i64> = categories.iter().map(|c| c.id).collect();

        let mut slot = HashMap::new();
        let mut images = Vec::with_capacity(file.images.len());
        for img in file.images {
            if slot.insert(img.id, images.len()).is_some() {
                return Err(Error::DuplicateImage(img.id));
            }
            images.push(ImageRecord {
                id: img.id,
                objects: Vec::new(),
            });
        }

        for ann in file.annotations {
            if !known.contains(&ann.category_id) {
                return Err(Error::UnknownCategory(ann.category_id));
            }
            let &idx = slot.get(&ann.image_id).ok_or(Error::UnknownImage(ann.image_id))?;
            let [x, y, w, h] = ann.bbox;
            images[idx].objects.push(ObjectRecord {
                category_id: ann.category_id,
                bbox: BBox::from_xywh(x, y, w, h)?,
            });
        }
        Ok(Self { images, categories })
    }

    pub(crate) fn to_coco(&self) -> CocoFile {
        CocoFile {
            images: self.images.iter().map(|i| CocoImage { id: i.id }).collect(),
            annotations: self
                .images
                .iter()
                .flat_map(|img| {
                    img.objects.iter().map(move |o| CocoAnnotation {
                        image_id: img.id,
                        category_id: o.category_id,
                        bbox: o.bbox.to_xywh(),
                    })
                })
                .collect(),
            categories: self
                .categories
                .iter()
                .map(|c| CocoCategory {
                    id: c.id,
                    name: c.name.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_coco()).expect("annotations serialize")
    }

    pub fn num_objects(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Annotations> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Annotations::from_json_str(&text, path)
}

pub fn save_annotations(ann: &Annotations, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ann.to_json_string()).map_err(|e| Error::io(path, e))
}

/// Symmetric `C x C` co-occurrence likelihoods in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMatrix {
    values: Matrix,
}

impl PriorMatrix {
    /// Validates squareness, `[0, 1]` bounds and exact symmetry.
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::Shape {
                op: "PriorMatrix::new",
                left: values.shape(),
                right: (values.rows(), values.rows()),
            });
        }
        let n = values.rows();
        for i in 0..n {
            for j in 0..n {
                let v = values[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::PriorBounds {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (values[(i, j)], values[(j, i)]);
                if (a - b).abs() > 1e-12 {
                    return Err(Error::PriorAsymmetric { row: i, col: j, a, b });
                }
            }
        }
        Ok(Self { values })
    }

    pub fn num_classes(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[(k, l)]
    }

    /// Fraction of exactly-zero entries.
    pub fn sparsity(&self) -> f64 {
        let zeros = self.values.as_slice().iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / self.values.len().max(1) as f64
    }

    /// `(1 − eps)·T + eps`, keeping every entry in `[0, 1]`.
    pub fn smoothed(&self, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Config(format!("prior smoothing eps {eps} outside [0, 1]")));
        }
        if eps == 0.0 {
            return Ok(self.clone());
        }
        Self::new(self.values.map(|v| (1.0 - eps) * v + eps))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct CooccurrenceCounts {
    /// images containing class k
    present: Vec<u64>,
    /// images containing at least two instances of class k
    repeated: Vec<u64>,
    /// images containing both k and l, upper triangle used
    pairs: Vec<u64>,
}

impl CooccurrenceCounts {
    fn new(c: usize) -> Self {
        Self {
            present: vec![0; c],
            repeated: vec![0; c],
            pairs: vec![0; c * c],
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.present.iter_mut().zip(other.present) {
            *a += b;
        }
        for (a, b) in self.repeated.iter_mut().zip(other.repeated) {
            *a += b;
        }
        for (a, b) in self.pairs.iter_mut().zip(other.pairs) {
            *a += b;
        }
        self
    }
}

pub fn build_prior(ann: &Annotations, num_classes: usize) -> Result<PriorMatrix> {
    build_prior_smoothed(ann, num_classes, 0.0)
}

/// [`build_prior`] followed by [`PriorMatrix::smoothed`].
pub fn build_prior_smoothed(
    ann: &Annotations,
    num_classes: usize,
    smoothing_eps: f64,
) -> Result<PriorMatrix> {
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be at least 1".into()));
    }
    let c = num_classes;
    for img in &ann.images {
        for o in &img.objects {
            if o.category_id < 0 || o.category_id as usize >= c {
                return Err(Error::ClassOutOfRange {
                    index: o.category_id,
                    num_classes: c,
                });
            }
        }
    }

    // Per-image counts merge associatively, so the partitioning rayon picks
    // cannot change the result.
    let counts = ann
        .images
        .par_iter()
        .fold(
            || CooccurrenceCounts::new(c),
            |mut acc, img| {
                let mut per_class = vec![0u32; c];
                for o in &img.objects {
                    per_class[o.category_id as usize] += 1;
                }
                let present: Vec<usize> = (0..c).filter(|&k| per_class[k] > 0).collect();
                for (a, &k) in present.iter().enumerate() {
                    acc.present[k] += 1;
                    if per_class[k] >= 2 {
                        acc.repeated[k] += 1;
                    }
                    for &l in &present[a + 1..] {
                        acc.pairs[k * c + l] += 1;
                    }
                }
                acc
            },
        )
        .reduce(|| CooccurrenceCounts::new(c), CooccurrenceCounts::merge);

    let mut t = Matrix::zeros(c, c);
    for k in 0..c {
        let nk = counts.present[k];
        if nk == 0 {
            continue;
        }
        t[(k, k)] = counts.repeated[k] as f64 / nk as f64;
        for l in k + 1..c {
            let nl = counts.present[l];
            let nkl = counts.pairs[k * c + l];
            if nkl == 0 {
                continue;
            }
            let jaccard = nkl as f64 / (nk + nl - nkl) as f64;
            t[(k, l)] = jaccard;
            t[(l, k)] = jaccard;
        }
    }
    PriorMatrix::new(t)?.smoothed(smoothing_eps)
}

pub fn save_prior(t: &PriorMatrix, path: impl AsRef<Path>) -> Result<()> {
    csv::write_csv(t.values(), path)
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<PriorMatrix> {
    PriorMatrix::new(csv::read_csv(path)?)
}
