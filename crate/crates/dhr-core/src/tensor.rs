//! Dense array types shared by the whole pipeline.
//!
//! Scores and features are stored as f64 in memory for numerical headroom;
//! the on-disk representation is float32 (see [`crate::npy`]). All types are
//! immutable after construction and safe to share across workers.

use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::npy::{NpyArray, NpyData};

/// Sentinel label for pixels excluded from evaluation.
pub const IGNORE: u8 = 255;

/// Per-class soft score field over an image grid, shape (C, H, W), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStack {
    values: Array3<f64>,
}

impl ScoreStack {
    /// Validates range and finiteness. Values within 1e-9 outside [0, 1] are
    /// clamped (cosine and resampling round-off), anything further is an error.
    pub fn new(mut values: Array3<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFinite("score stack".into()));
            }
            if *v < -1e-9 || *v > 1.0 + 1e-9 {
                return Err(Error::Domain(format!("score {v} outside [0, 1]")));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(ScoreStack { values })
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        ScoreStack { values: Array3::zeros((classes, height, width)) }
    }

    pub fn classes(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn from_npy(array: &NpyArray) -> Result<Self> {
        let values = npy_to_array3(array)?;
        ScoreStack::new(values)
    }

    pub fn to_npy(&self) -> NpyArray {
        array3_to_npy(&self.values)
    }
}

/// Dense embedding field, shape (D, H, W). Spatial size may differ from the
/// mask grid; consumers resample explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(FeatureMap { values })
    }

    pub fn dim(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Embedding vector at a pixel, length D.
    pub fn pixel(&self, row: usize, col: usize) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![.., row, col])
    }

    pub fn from_npy(array: &NpyArray) -> Result<Self> {
        FeatureMap::new(npy_to_array3(array)?)
    }

    pub fn to_npy(&self) -> NpyArray {
        array3_to_npy(&self.values)
    }

    /// Bilinear resample to a new spatial size (no-op when sizes match).
    pub fn resampled(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height() && width == self.width() {
            return Ok(self.clone());
        }
        Ok(FeatureMap { values: resample_bilinear(&self.values, height, width)? })
    }
}

/// Hard class index per pixel; 255 is IGNORE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    labels: Array2<u8>,
}

impl LabelMask {
    pub fn new(labels: Array2<u8>) -> Self {
        LabelMask { labels }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        let labels = Array2::from_shape_vec((height, width), data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(LabelMask { labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMask { labels: Array2::from_elem((height, width), label) }
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[(row, col)]
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn as_slice(&self) -> &[u8] {
        self.labels.as_slice().expect("label mask is standard layout")
    }

    /// Ensures every non-IGNORE label is below `classes`.
    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        for &l in self.labels.iter() {
            if l != IGNORE && (l as usize) >= classes {
                return Err(Error::Domain(format!("label {l} out of range for {classes} classes")));
            }
        }
        Ok(())
    }

    /// Number of pixels carrying each label, indexed by class; IGNORE excluded.
    pub fn class_areas(&self, classes: usize) -> Vec<usize> {
        let mut areas = vec![0usize; classes];
        for &l in self.labels.iter() {
            if l != IGNORE && (l as usize) < classes {
                areas[l as usize] += 1;
            }
        }
        areas
    }

    /// Nearest-neighbor resample to a new size.
    pub fn resampled(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Domain("resample target size must be nonzero".into()));
        }
        if height == self.height() && width == self.width() {
            return Ok(self.clone());
        }
        let (src_h, src_w) = self.labels.dim();
        let mut out = Array2::zeros((height, width));
        for r in 0..height {
            let sr = nearest_source(r, height, src_h);
            for c in 0..width {
                let sc = nearest_source(c, width, src_w);
                out[(r, c)] = self.labels[(sr, sc)];
            }
        }
        Ok(LabelMask { labels: out })
    }
}

/// 8-bit RGB image, shape (H, W, 3), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    data: Array3<u8>,
}

impl RgbImage {
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        let data = Array3::from_shape_vec((height, width, 3), data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(RgbImage { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn as_slice(&self) -> &[u8] {
        self.data.as_slice().expect("rgb image is standard layout")
    }

    /// Color at a pixel scaled to [0, 1].
    pub fn unit_color(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.data[(row, col, 0)] as f64 / 255.0,
            self.data[(row, col, 1)] as f64 / 255.0,
            self.data[(row, col, 2)] as f64 / 255.0,
        ]
    }
}

/// Per pixel, the smallest class index attaining the maximum score.
pub fn argmax_labels(scores: &ScoreStack) -> LabelMask {
    let (classes, height, width) = scores.values().dim();
    debug_assert!(classes >= 1);
    let mut labels = Array2::zeros((height, width));
    for r in 0..height {
        for c in 0..width {
            let mut best = 0usize;
            let mut best_score = scores.values()[(0, r, c)];
            for k in 1..classes {
                let s = scores.values()[(k, r, c)];
                if s > best_score {
                    best_score = s;
                    best = k;
                }
            }
            labels[(r, c)] = best as u8;
        }
    }
    LabelMask::new(labels)
}

/// Exact 0/1 stack from a hard mask; IGNORE pixels become all-zero columns.
pub fn one_hot(mask: &LabelMask, classes: usize) -> Result<ScoreStack> {
    mask.validate_labels(classes)?;
    let (height, width) = mask.labels().dim();
    let mut values = Array3::zeros((classes, height, width));
    for r in 0..height {
        for c in 0..width {
            let l = mask.get(r, c);
            if l != IGNORE {
                values[(l as usize, r, c)] = 1.0;
            }
        }
    }
    Ok(ScoreStack { values })
}

/// Bilinear resample of a (C, H, W) field with pixel-center alignment.
pub fn resample_bilinear(values: &Array3<f64>, height: usize, width: usize) -> Result<Array3<f64>> {
    let (channels, src_h, src_w) = values.dim();
    if height == 0 || width == 0 {
        return Err(Error::Domain("resample target size must be nonzero".into()));
    }
    if src_h == 0 || src_w == 0 {
        return Err(Error::Domain("resample source must be nonempty".into()));
    }
    if height == src_h && width == src_w {
        return Ok(values.clone());
    }
    let mut out = Array3::zeros((channels, height, width));
    let row_coords: Vec<(usize, usize, f64)> = (0..height).map(|r| bilinear_source(r, height, src_h)).collect();
    let col_coords: Vec<(usize, usize, f64)> = (0..width).map(|c| bilinear_source(c, width, src_w)).collect();
    for k in 0..channels {
        let plane = values.index_axis(Axis(0), k);
        for (r, &(r0, r1, fr)) in row_coords.iter().enumerate() {
            for (c, &(c0, c1, fc)) in col_coords.iter().enumerate() {
                let top = plane[(r0, c0)] * (1.0 - fc) + plane[(r0, c1)] * fc;
                let bottom = plane[(r1, c0)] * (1.0 - fc) + plane[(r1, c1)] * fc;
                out[(k, r, c)] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    Ok(out)
}

/// Maps an output index to (floor, ceil, frac) source coordinates with pixel
/// centers aligned: x_src = (i + 0.5) * src / dst - 0.5, clamped to the grid.
fn bilinear_source(i: usize, dst: usize, src: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, x - lo as f64)
}

fn nearest_source(i: usize, dst: usize, src: usize) -> usize {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    (x + 0.5).floor() as usize
}

fn npy_to_array3(array: &NpyArray) -> Result<Array3<f64>> {
    let shape = match array.shape.len() {
        3 => (array.shape[0], array.shape[1], array.shape[2]),
        other => return Err(Error::ShapeMismatch(format!("expected rank-3 npy array, got rank {other}"))),
    };
    let values: Vec<f64> = match &array.data {
        NpyData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        NpyData::U8(v) => v.iter().map(|&x| x as f64).collect(),
    };
    Array3::from_shape_vec(shape, values).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

fn array3_to_npy(values: &Array3<f64>) -> NpyArray {
    let (a, b, c) = values.dim();
    let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    NpyArray::f32(vec![a, b, c], data)
}
