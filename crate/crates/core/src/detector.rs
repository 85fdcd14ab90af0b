//! Detector generator and bounding-box regression algebra.
//!
//! A phrase embedding `v` is mapped to a linear classifier `w_c = W v` and
//! to four regressor weight vectors produced by a one-hidden-layer MLP whose
//! hidden layer is shared by the x, y, w and h heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::PhraseEmbedding;
use crate::error::{Error, Result};

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|c| c.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Box regression deltas `(d_x, d_y, d_w, d_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Deltas(pub [f64; 4]);

/// Deltas that map `proposal` onto `gt`.
pub fn regression_targets(proposal: &BBox, gt: &BBox) -> Deltas {
    let (pw, ph) = (proposal.width(), proposal.height());
    Deltas([
        (gt.cx() - proposal.cx()) / pw,
        (gt.cy() - proposal.cy()) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ])
}

/// Inverse of [`regression_targets`].
pub fn apply_deltas(b: &BBox, deltas: &Deltas) -> BBox {
    let [dx, dy, dw, dh] = deltas.0;
    let (pw, ph) = (b.width(), b.height());
    BBox::from_center(
        b.cx() + pw * dx,
        b.cy() + ph * dy,
        pw * dw.exp(),
        ph * dh.exp(),
    )
}

/// A region proposal with its precomputed feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub image_id: u64,
    pub region_id: u32,
    pub bbox: BBox,
    pub feature: Vec<f32>,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data.chunks_exact(self.cols).map(|row| dot(row, x)).collect()
    }

    /// `y = A^T x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (row, &xi) in self.data.chunks_exact(self.cols).zip(x) {
            if xi != 0.0 {
                y.iter_mut().zip(row).for_each(|(yj, a)| *yj += a * xi);
            }
        }
        y
    }

    /// `A += scale * u v^T`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        for (row, &ui) in self.data.chunks_exact_mut(self.cols).zip(u) {
            let s = ui * scale;
            if s != 0.0 {
                row.iter_mut().zip(v).for_each(|(a, vj)| *a += s * vj);
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot_f32(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * y as f64).sum()
}

/// Trainable weights of the detector generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// Classifier map, `feat_dim × dim`.
    pub w: Matrix,
    /// Shared hidden layer, `hidden_dim × dim`.
    pub h1: Matrix,
    pub b1: Vec<f64>,
    /// Output heads for x, y, w, h; each `feat_dim × hidden_dim`.
    pub h2: [Matrix; 4],
    pub b2: [Vec<f64>; 4],
}

/// Names of the parameter tensors in [`GeneratorParams::tensors`] order.
pub const TENSOR_NAMES: [&str; 11] = [
    "W", "H1", "b1", "H2_x", "H2_y", "H2_w", "H2_h", "b2_x", "b2_y", "b2_w", "b2_h",
];

impl GeneratorParams {
    pub fn zeros(dim: usize, feat_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w: Matrix::zeros(feat_dim, dim),
            h1: Matrix::zeros(hidden_dim, dim),
            b1: vec![0.0; hidden_dim],
            h2: std::array::from_fn(|_| Matrix::zeros(feat_dim, hidden_dim)),
            b2: std::array::from_fn(|_| vec![0.0; feat_dim]),
        }
    }

    /// Gaussian initialization scaled by fan-in; biases start at zero
    /// except a small positive hidden bias so no unit starts dead.
    pub fn random(dim: usize, feat_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dim, feat_dim, hidden_dim);
        let fill = |m: &mut Matrix, std: f64, rng: &mut dyn rand::RngCore| {
            let normal = Normal::new(0.0, std).expect("positive std");
            m.data.iter_mut().for_each(|x| *x = normal.sample(rng));
        };
        fill(&mut p.w, 1.0 / (dim as f64).sqrt(), rng);
        fill(&mut p.h1, 1.0 / (dim as f64).sqrt(), rng);
        p.b1.iter_mut().for_each(|b| *b = 0.1);
        for h in &mut p.h2 {
            fill(h, 0.01 / (hidden_dim as f64).sqrt(), rng);
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.w.cols
    }

    pub fn feat_dim(&self) -> usize {
        self.w.rows
    }

    pub fn hidden_dim(&self) -> usize {
        self.h1.rows
    }

    /// Number of regressor parameters: `dim·h + h + 4·(h·D_feat + D_feat)`.
    pub fn regressor_param_count(&self) -> usize {
        let (d, h, f) = (self.dim(), self.hidden_dim(), self.feat_dim());
        d * h + h + 4 * (h * f + f)
    }

    pub fn tensors(&self) -> [&[f64]; 11] {
        [
            &self.w.data,
            &self.h1.data,
            &self.b1,
            &self.h2[0].data,
            &self.h2[1].data,
            &self.h2[2].data,
            &self.h2[3].data,
            &self.b2[0],
            &self.b2[1],
            &self.b2[2],
            &self.b2[3],
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 11] {
        let [h2x, h2y, h2w, h2h] = &mut self.h2;
        let [b2x, b2y, b2w, b2h] = &mut self.b2;
        [
            &mut self.w.data,
            &mut self.h1.data,
            &mut self.b1,
            &mut h2x.data,
            &mut h2y.data,
            &mut h2w.data,
            &mut h2h.data,
            b2x,
            b2y,
            b2w,
            b2h,
        ]
    }

    /// Hidden pre-activation and activation for `v`.
    pub(crate) fn hidden(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = self.h1.matvec(v);
        pre.iter_mut().zip(&self.b1).for_each(|(p, b)| *p += b);
        let act = pre.iter().map(|&p| p.max(0.0)).collect();
        (pre, act)
    }
}

/// Per-query classifier and regressor weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub w_c: Vec<f64>,
    pub w_r: [Vec<f64>; 4],
}

impl Detector {
    pub fn regress(&self, feature: &[f32]) -> Deltas {
        Deltas(std::array::from_fn(|k| dot_f32(&self.w_r[k], feature)))
    }
}

pub fn generate_detector(params: &GeneratorParams, v: &PhraseEmbedding) -> Result<Detector> {
    if v.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: v.dim(),
        });
    }
    let v = v.as_slice();
    let w_c = params.w.matvec(v);
    let (_, hidden) = params.hidden(v);
    let w_r = std::array::from_fn(|k| {
        let mut out = params.h2[k].matvec(&hidden);
        out.iter_mut().zip(&params.b2[k]).for_each(|(o, b)| *o += b);
        out
    });
    Ok(Detector { w_c, w_r })
}

/// Raw classification logit `w_c · f`.
pub fn score_region(det: &Detector, f: &[f32]) -> Result<f64> {
    if f.len() != det.w_c.len() {
        return Err(Error::DimensionMismatch {
            expected: det.w_c.len(),
            got: f.len(),
        });
    }
    Ok(dot_f32(&det.w_c, f))
}
