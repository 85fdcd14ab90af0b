//! Inverted-file index with product-quantized residuals, searched by inner
//! product against a linear classifier.
//!
//! Vectors are assigned to the nearest (Euclidean) coarse centroid and the
//! residual is encoded with a product quantizer. At query time the lists
//! whose centroids score highest under the classifier are probed, and each
//! posting is scored as `w·c + Σ_j T[j][code_j]` where `T[j][i]` is the
//! inner product of the classifier's j-th sub-vector with the i-th codeword
//! of subspace j. That sum equals `w·(c + decode(code))` exactly, up to
//! floating-point rounding.

use std::cmp::Ordering;

use log::{debug, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detector::{dot_f32, BBox, RegionFeature};
use crate::error::{Error, Result};

const ASSIGN_CHUNK: usize = 1024;

/// Squared Euclidean distance.
#[inline]
pub fn l2_squared(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let (ac, ar) = a.split_at(a.len() - a.len() % 8);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut sum: f32 = acc.iter().sum();
    for (x, y) in ar.iter().zip(br) {
        let d = x - y;
        sum += d * d;
    }
    sum
}

/// Index of the nearest centroid (lowest index on ties) and its distance.
#[inline]
fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = l2_squared(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign_all(points: &[f32], centroids: &[f32], dim: usize) -> Vec<(usize, f32)> {
    points
        .par_chunks(dim * ASSIGN_CHUNK)
        .flat_map_iter(|chunk| chunk.chunks_exact(dim).map(|p| nearest(p, centroids, dim)))
        .collect()
}

/// Output of [`kmeans`].
#[derive(Debug, Clone)]
pub struct KMeans {
    pub dim: usize,
    pub k: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    /// Sum of squared distances after each assignment step.
    pub distortion: Vec<f64>,
    /// Set when there were fewer distinct points than `k` and some
    /// centroids are copies of one another.
    pub duplicated: bool,
}

impl KMeans {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }
}

/// Lloyd's algorithm with k-means++ seeding. `points` is a flat
/// `n × dim` buffer. Empty clusters are re-seeded from the point farthest
/// from its centroid.
pub fn kmeans(points: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "point buffer of length {} is not a multiple of dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if n == 0 {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut dist: Vec<f32> = (0..n).map(|i| l2_squared(point(i), point(first))).collect();
    let mut duplicated = false;
    let mut fill_cursor = 0usize;
    for _ in 1..k {
        let total: f64 = dist.iter().map(|&d| d as f64).sum();
        let chosen = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                target -= d as f64;
                if target < 0.0 && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            if dist[chosen] == 0.0 {
                chosen = dist
                    .iter()
                    .rposition(|&d| d > 0.0)
                    .expect("positive total has a positive entry");
            }
            chosen
        } else {
            duplicated = true;
            fill_cursor = (fill_cursor + 1) % n;
            fill_cursor
        };
        let c = point(chosen).to_vec();
        centroids.extend_from_slice(&c);
        dist.par_chunks_mut(ASSIGN_CHUNK)
            .enumerate()
            .for_each(|(ci, chunk)| {
                for (j, d) in chunk.iter_mut().enumerate() {
                    let nd = l2_squared(point(ci * ASSIGN_CHUNK + j), &c);
                    if nd < *d {
                        *d = nd;
                    }
                }
            });
    }
    if duplicated {
        warn!("k-means: fewer than {k} distinct points; duplicated centroids");
    }

    let mut distortion = Vec::with_capacity(iters + 1);
    let mut assignment = assign_all(points, &centroids, dim);
    distortion.push(assignment.iter().map(|a| a.1 as f64).sum());
    for it in 0..iters {
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(point(i))
                .for_each(|(s, &x)| *s += x as f64);
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            let row = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                row.iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                    .for_each(|(x, s)| *x = (s / inv) as f32);
            } else {
                // Re-seed from the farthest point not already used.
                let far = assignment
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .expect("n >= 1");
                taken[far] = true;
                row.copy_from_slice(point(far));
            }
        }
        let next = assign_all(points, &centroids, dim);
        let changed = next.iter().zip(&assignment).any(|(a, b)| a.0 != b.0);
        assignment = next;
        distortion.push(assignment.iter().map(|a| a.1 as f64).sum());
        if !changed && counts.iter().all(|&c| c > 0) {
            debug!("k-means converged after {} iterations", it + 1);
            break;
        }
    }
    Ok(KMeans {
        dim,
        k,
        centroids,
        distortion,
        duplicated,
    })
}

/// Coarse partition of the feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseQuantizer {
    pub dim: usize,
    pub nlist: usize,
    pub centroids: Vec<f32>,
}

impl CoarseQuantizer {
    pub fn centroid(&self, list: usize) -> &[f32] {
        &self.centroids[list * self.dim..(list + 1) * self.dim]
    }

    pub fn assign(&self, x: &[f32]) -> usize {
        nearest(x, &self.centroids, self.dim).0
    }
}

/// Per-subspace codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    pub dim: usize,
    pub m: usize,
    pub ksub: usize,
    /// `m × ksub × dsub`.
    pub codebooks: Vec<f32>,
}

impl ProductQuantizer {
    pub fn new(dim: usize, m: usize, ksub: usize, codebooks: Vec<f32>) -> Result<Self> {
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!("m={m} must divide dim={dim}")));
        }
        if !(1..=256).contains(&ksub) {
            return Err(Error::InvalidArgument(format!("ksub={ksub} must be in 1..=256")));
        }
        if codebooks.len() != dim * ksub {
            return Err(Error::DimensionMismatch {
                expected: dim * ksub,
                got: codebooks.len(),
            });
        }
        Ok(Self {
            dim,
            m,
            ksub,
            codebooks,
        })
    }

    pub fn dsub(&self) -> usize {
        self.dim / self.m
    }

    pub fn codeword(&self, subspace: usize, i: usize) -> &[f32] {
        let dsub = self.dsub();
        let start = (subspace * self.ksub + i) * dsub;
        &self.codebooks[start..start + dsub]
    }

    /// Trains one k-means codebook per subspace on a flat `n × dim` buffer.
    pub fn train(data: &[f32], dim: usize, m: usize, ksub: usize, iters: usize, seed: u64) -> Result<Self> {
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!("m={m} must divide dim={dim}")));
        }
        if !(1..=256).contains(&ksub) {
            return Err(Error::InvalidArgument(format!("ksub={ksub} must be in 1..=256")));
        }
        let n = data.len() / dim;
        if n < ksub {
            return Err(Error::InsufficientPoints { needed: ksub, got: n });
        }
        let dsub = dim / m;
        let books: Vec<Vec<f32>> = (0..m)
            .into_par_iter()
            .map(|j| {
                let sub: Vec<f32> = data
                    .chunks_exact(dim)
                    .flat_map(|x| x[j * dsub..(j + 1) * dsub].iter().copied())
                    .collect();
                kmeans(&sub, dsub, ksub, iters, seed.wrapping_add(1 + j as u64)).map(|km| km.centroids)
            })
            .collect::<Result<_>>()?;
        Self::new(dim, m, ksub, books.concat())
    }

    /// Nearest codeword per subspace.
    pub fn encode(&self, residual: &[f32]) -> Vec<u8> {
        let mut code = vec![0u8; self.m];
        self.encode_into(residual, &mut code);
        code
    }

    fn encode_into(&self, residual: &[f32], code: &mut [u8]) {
        let dsub = self.dsub();
        for (j, c) in code.iter_mut().enumerate() {
            let book = &self.codebooks[j * self.ksub * dsub..(j + 1) * self.ksub * dsub];
            *c = nearest(&residual[j * dsub..(j + 1) * dsub], book, dsub).0 as u8;
        }
    }

    pub fn decode(&self, code: &[u8]) -> Result<Vec<f32>> {
        if code.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                got: code.len(),
            });
        }
        let mut out = Vec::with_capacity(self.dim);
        for (j, &c) in code.iter().enumerate() {
            if c as usize >= self.ksub {
                return Err(Error::InvalidCode {
                    subspace: j,
                    value: c,
                    ksub: self.ksub,
                });
            }
            out.extend_from_slice(self.codeword(j, c as usize));
        }
        Ok(out)
    }

    /// `T[j][i] = w_j · codeword(j, i)`, flattened `m × ksub`.
    pub fn inner_product_table(&self, w: &[f64]) -> Vec<f64> {
        let dsub = self.dsub();
        let mut table = Vec::with_capacity(self.m * self.ksub);
        for j in 0..self.m {
            let wj = &w[j * dsub..(j + 1) * dsub];
            for i in 0..self.ksub {
                table.push(dot_f32(wj, self.codeword(j, i)));
            }
        }
        table
    }
}

/// Postings of one coarse cell, stored column-wise.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvertedList {
    pub ids: Vec<(u64, u32)>,
    pub boxes: Vec<[f32; 4]>,
    /// `len × m` bytes.
    pub codes: Vec<u8>,
}

impl InvertedList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, image_id: u64, region_id: u32, bbox: [f32; 4], code: &[u8]) {
        self.ids.push((image_id, region_id));
        self.boxes.push(bbox);
        self.codes.extend_from_slice(code);
    }
}

/// Index build settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexParams {
    pub nlist: usize,
    pub m: usize,
    pub ksub: usize,
    pub iters: usize,
    pub seed: u64,
    /// Upper bound on vectors used to train the quantizers; all vectors are
    /// still encoded.
    pub max_train_points: usize,
}

impl IndexParams {
    pub fn new(nlist: usize, m: usize, ksub: usize, seed: u64) -> Self {
        Self {
            nlist,
            m,
            ksub,
            iters: 25,
            seed,
            max_train_points: 64 * nlist.max(ksub).max(1024),
        }
    }

    /// Defaults for `n` vectors: `nlist = √n` rounded to a power of two,
    /// `m = 8`, `ksub = 256`.
    pub fn for_size(n: usize, seed: u64) -> Self {
        Self::new(default_nlist(n), 8, 256, seed)
    }
}

pub fn default_nlist(n: usize) -> usize {
    let root = (n as f64).sqrt().max(1.0);
    let exp = root.log2().round() as u32;
    (1usize << exp).min(n.max(1))
}

/// A region proposal to be indexed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostingMeta {
    pub image_id: u64,
    pub region_id: u32,
    pub bbox: [f32; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfadcIndex {
    pub coarse: CoarseQuantizer,
    pub pq: ProductQuantizer,
    pub lists: Vec<InvertedList>,
}

/// Where a search hit came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitSource {
    Posting { list: usize, offset: usize },
    Feature(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub image_id: u64,
    pub region_id: u32,
    pub bbox: BBox,
    pub score: f64,
    pub source: HitSource,
}

/// Descending score, then ascending `(image_id, region_id)`.
fn rank_order(a: &(f64, u64, u32), b: &(f64, u64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Keeps the best `topk` of `(key, payload)` pairs in rank order.
fn top_k<T>(mut items: Vec<((f64, u64, u32), T)>, topk: usize) -> Vec<((f64, u64, u32), T)> {
    if items.len() > topk && topk > 0 {
        items.select_nth_unstable_by(topk - 1, |a, b| rank_order(&a.0, &b.0));
        items.truncate(topk);
    } else if topk == 0 {
        items.clear();
    }
    items.sort_by(|a, b| rank_order(&a.0, &b.0));
    items
}

fn stored_box(b: &[f32; 4]) -> BBox {
    BBox {
        x1: b[0] as f64,
        y1: b[1] as f64,
        x2: b[2] as f64,
        y2: b[3] as f64,
    }
}

impl IvfadcIndex {
    pub fn dim(&self) -> usize {
        self.coarse.dim
    }

    pub fn nlist(&self) -> usize {
        self.coarse.nlist
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(InvertedList::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds an index over region features.
    pub fn build(features: &[RegionFeature], params: &IndexParams) -> Result<Self> {
        let dim = features.first().map_or(0, |f| f.feature.len());
        let mut data = Vec::with_capacity(features.len() * dim);
        let mut meta = Vec::with_capacity(features.len());
        for f in features {
            if f.feature.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: f.feature.len(),
                });
            }
            data.extend_from_slice(&f.feature);
            meta.push(PostingMeta {
                image_id: f.image_id,
                region_id: f.region_id,
                bbox: f.bbox.to_array().map(|c| c as f32),
            });
        }
        Self::build_flat(dim, &meta, &data, params)
    }

    /// Builds an index from a flat `n × dim` feature buffer.
    pub fn build_flat(dim: usize, meta: &[PostingMeta], data: &[f32], params: &IndexParams) -> Result<Self> {
        let n = meta.len();
        if dim == 0 || data.len() != n * dim {
            return Err(Error::InvalidArgument(format!(
                "feature buffer of length {} does not hold {n} vectors of dim {dim}",
                data.len()
            )));
        }
        let needed = params.nlist.max(params.ksub);
        if n < needed || params.nlist == 0 {
            return Err(Error::InsufficientPoints { needed: needed.max(1), got: n });
        }
        if params.m == 0 || !dim.is_multiple_of(params.m) {
            return Err(Error::InvalidArgument(format!(
                "m={} must divide dim={dim}",
                params.m
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let train_cap = params.max_train_points.max(needed);
        let train: Vec<f32> = if n > train_cap {
            let mut idx = sample(&mut rng, n, train_cap).into_vec();
            idx.sort_unstable();
            idx.iter()
                .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
                .collect()
        } else {
            data.to_vec()
        };
        debug!("training coarse quantizer on {} vectors", train.len() / dim);
        let coarse_km = kmeans(&train, dim, params.nlist, params.iters, params.seed)?;
        let coarse = CoarseQuantizer {
            dim,
            nlist: params.nlist,
            centroids: coarse_km.centroids,
        };

        let residuals: Vec<f32> = train
            .par_chunks(dim)
            .flat_map_iter(|x| {
                let c = coarse.centroid(coarse.assign(x));
                x.iter().zip(c).map(|(a, b)| a - b).collect::<Vec<_>>()
            })
            .collect();
        debug!("training product quantizer");
        let pq = ProductQuantizer::train(&residuals, dim, params.m, params.ksub, params.iters, params.seed)?;
        drop(residuals);

        debug!("encoding {n} vectors");
        let encoded: Vec<(usize, Vec<u8>)> = data
            .par_chunks(dim)
            .map(|x| {
                let list = coarse.assign(x);
                let c = coarse.centroid(list);
                let r: Vec<f32> = x.iter().zip(c).map(|(a, b)| a - b).collect();
                (list, pq.encode(&r))
            })
            .collect();
        let mut lists = vec![InvertedList::default(); params.nlist];
        for ((list, code), m) in encoded.into_iter().zip(meta) {
            lists[list].push(m.image_id, m.region_id, m.bbox, &code);
        }
        Ok(Self { coarse, pq, lists })
    }

    /// `centroid + decode(code)` of a posting, in double precision.
    pub fn reconstruct(&self, list: usize, offset: usize) -> Vec<f64> {
        let m = self.pq.m;
        let code = &self.lists[list].codes[offset * m..(offset + 1) * m];
        let c = self.coarse.centroid(list);
        let dsub = self.pq.dsub();
        let mut out = Vec::with_capacity(self.dim());
        for (j, &ci) in code.iter().enumerate() {
            let word = self.pq.codeword(j, ci as usize);
            out.extend(
                c[j * dsub..(j + 1) * dsub]
                    .iter()
                    .zip(word)
                    .map(|(&a, &b)| a as f64 + b as f64),
            );
        }
        out
    }

    pub fn code(&self, list: usize, offset: usize) -> &[u8] {
        let m = self.pq.m;
        &self.lists[list].codes[offset * m..(offset + 1) * m]
    }

    /// Lists ordered by `w · centroid`, best first (ties by list index).
    pub fn probe_order(&self, w: &[f64]) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.nlist())
            .map(|l| (l, dot_f32(w, self.coarse.centroid(l))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }

    /// Approximate top-`topk` postings by inner product with `w`.
    pub fn search(&self, w: &[f64], topk: usize, nprobe: usize) -> Result<Vec<SearchHit>> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: w.len(),
            });
        }
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::InvalidArgument(format!(
                "nprobe={nprobe} must be in 1..={}",
                self.nlist()
            )));
        }
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let table = self.pq.inner_product_table(w);
        let (m, ksub) = (self.pq.m, self.pq.ksub);
        let mut candidates = Vec::new();
        for (list, base) in self.probe_order(w).into_iter().take(nprobe) {
            let inv = &self.lists[list];
            for (offset, (code, &(image_id, region_id))) in
                inv.codes.chunks_exact(m).zip(&inv.ids).enumerate()
            {
                let mut score = base;
                for (j, &c) in code.iter().enumerate() {
                    score += table[j * ksub + c as usize];
                }
                candidates.push(((score, image_id, region_id), (list, offset)));
            }
        }
        Ok(top_k(candidates, topk)
            .into_iter()
            .map(|((score, image_id, region_id), (list, offset))| SearchHit {
                image_id,
                region_id,
                bbox: stored_box(&self.lists[list].boxes[offset]),
                score,
                source: HitSource::Posting { list, offset },
            })
            .collect())
    }

    /// Byte size of the serialized index.
    pub fn serialized_len(&self) -> u64 {
        crate::store::index_layout_size(self.dim(), self.nlist(), self.pq.m, self.pq.ksub, self.len())
    }
}

/// Exhaustive ranking of raw features by `w · f`.
pub fn search_exact(features: &[RegionFeature], w: &[f64], topk: usize) -> Vec<SearchHit> {
    let scored: Vec<_> = features
        .iter()
        .enumerate()
        .map(|(i, f)| ((dot_f32(w, &f.feature), f.image_id, f.region_id), i))
        .collect();
    top_k(scored, topk)
        .into_iter()
        .map(|((score, image_id, region_id), i)| SearchHit {
            image_id,
            region_id,
            bbox: features[i].bbox,
            score,
            source: HitSource::Feature(i),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn feature(image_id: u64, v: Vec<f32>) -> RegionFeature {
        RegionFeature {
            image_id,
            region_id: 0,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            feature: v,
        }
    }

    fn gaussian(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        (0..n * dim).map(|_| normal.sample(&mut rng)).collect()
    }

    #[test]
    fn kmeans_separable_clusters() {
        let mut pts = Vec::new();
        for _ in 0..10 {
            pts.extend([0.0, 0.0]);
        }
        for _ in 0..10 {
            pts.extend([10.0, 10.0]);
        }
        let km = kmeans(&pts, 2, 2, 10, 1).unwrap();
        let mut cs: Vec<_> = (0..2).map(|i| km.centroid(i).to_vec()).collect();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        assert_eq!(*km.distortion.last().unwrap(), 0.0);
        assert!(!km.duplicated);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        let km = kmeans(&pts, 2, 1, 5, 0).unwrap();
        assert_eq!(km.centroid(0), &[3.0, 5.0]);
    }

    #[test]
    fn kmeans_flags_duplicates() {
        let pts = [1.0, 1.0, 1.0, 1.0, 2.0, 2.0];
        let km = kmeans(&pts, 2, 4, 5, 0).unwrap();
        assert!(km.duplicated);
        assert_eq!(km.k, 4);
        assert_eq!(*km.distortion.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_distortion_never_increases() {
        for seed in 0..5 {
            let pts = gaussian(2000, 6, seed);
            let km = kmeans(&pts, 6, 17, 30, seed).unwrap();
            for w in km.distortion.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn kmeans_rejects_bad_input() {
        assert!(kmeans(&[], 2, 1, 1, 0).is_err());
        assert!(kmeans(&[1.0, 2.0, 3.0], 2, 1, 1, 0).is_err());
        assert!(kmeans(&[1.0, 2.0], 2, 0, 1, 0).is_err());
    }

    #[test]
    fn pq_round_trips_codewords() {
        let pq = ProductQuantizer::new(4, 2, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let r = [2.0, 3.0, 4.0, 5.0];
        assert_eq!(pq.encode(&r), vec![1, 0]);
        assert_eq!(pq.decode(&pq.encode(&r)).unwrap(), r.to_vec());
        assert!(matches!(pq.decode(&[2, 0]), Err(Error::InvalidCode { subspace: 0, .. })));
        assert!(pq.decode(&[0]).is_err());
    }

    #[test]
    fn pq_single_codeword() {
        let pq = ProductQuantizer::new(2, 2, 1, vec![0.5, -1.5]).unwrap();
        for r in [[0.0, 0.0], [9.0, -3.0]] {
            assert_eq!(pq.encode(&r), vec![0, 0]);
            assert_eq!(pq.decode(&[0, 0]).unwrap(), vec![0.5, -1.5]);
        }
    }

    #[test]
    fn pq_encoding_is_optimal_over_all_codes() {
        let data = gaussian(200, 4, 3);
        let pq = ProductQuantizer::train(&data, 4, 2, 5, 10, 3).unwrap();
        for r in data.chunks_exact(4).take(50) {
            let best = l2_squared(r, &pq.decode(&pq.encode(r)).unwrap());
            for a in 0..5u8 {
                for b in 0..5u8 {
                    let other = l2_squared(r, &pq.decode(&[a, b]).unwrap());
                    assert!(best <= other);
                }
            }
        }
    }

    #[test]
    fn pq_validates_shape() {
        assert!(ProductQuantizer::new(5, 2, 4, vec![0.0; 20]).is_err());
        assert!(ProductQuantizer::new(4, 2, 0, vec![]).is_err());
        assert!(ProductQuantizer::new(4, 2, 257, vec![0.0; 4 * 257]).is_err());
        assert!(ProductQuantizer::train(&gaussian(3, 4, 0), 4, 2, 4, 5, 0).is_err());
    }

    #[test]
    fn orthogonal_vectors_get_one_list_each() {
        let feats: Vec<_> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                feature(i as u64, v)
            })
            .collect();
        let idx = IvfadcIndex::build(&feats, &IndexParams::new(4, 2, 1, 0)).unwrap();
        assert!(idx.lists.iter().all(|l| l.len() == 1));
    }

    #[test]
    fn postings_partition_the_input() {
        let data = gaussian(500, 8, 1);
        let feats: Vec<_> = data
            .chunks_exact(8)
            .enumerate()
            .map(|(i, v)| feature(i as u64, v.to_vec()))
            .collect();
        let idx = IvfadcIndex::build(&feats, &IndexParams::new(8, 4, 16, 2)).unwrap();
        assert_eq!(idx.len(), 500);
        let mut ids: Vec<u64> = idx.lists.iter().flat_map(|l| l.ids.iter().map(|i| i.0)).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..500).collect::<Vec<_>>());
        for l in &idx.lists {
            assert_eq!(l.codes.len(), l.len() * 4);
            assert!(l.codes.iter().all(|&c| (c as usize) < 16));
        }
    }

    #[test]
    fn lattice_data_is_lossless() {
        // Every coordinate takes one of two values; with one list and one
        // subspace per coordinate the codebooks hold exactly those values.
        let mut feats = Vec::new();
        for i in 0..16u64 {
            let v: Vec<f32> = (0..4).map(|b| if i >> b & 1 == 1 { 2.0 } else { -1.0 }).collect();
            feats.push(feature(i, v));
        }
        let idx = IvfadcIndex::build(&feats, &IndexParams::new(1, 4, 2, 5)).unwrap();
        for (off, &(id, _)) in idx.lists[0].ids.iter().enumerate() {
            let orig: Vec<f64> = feats[id as usize].feature.iter().map(|&x| x as f64).collect();
            let rec = idx.reconstruct(0, off);
            for (a, b) in orig.iter().zip(&rec) {
                assert!((a - b).abs() < 1e-6, "{orig:?} vs {rec:?}");
            }
        }
        let w = [0.3, -1.2, 0.7, 0.05];
        let approx: Vec<u64> = idx.search(&w, 16, 1).unwrap().iter().map(|h| h.image_id).collect();
        let exact: Vec<u64> = search_exact(&feats, &w, 16).iter().map(|h| h.image_id).collect();
        assert_eq!(approx, exact);
    }

    #[test]
    fn adc_hand_example() {
        let idx = IvfadcIndex {
            coarse: CoarseQuantizer {
                dim: 2,
                nlist: 1,
                centroids: vec![0.0, 0.0],
            },
            pq: ProductQuantizer {
                dim: 2,
                m: 2,
                ksub: 2,
                // Second subspace has a single meaningful codeword (3.0);
                // the padding entry is never referenced.
                codebooks: vec![1.0, 2.0, 3.0, 3.0],
            },
            lists: vec![{
                let mut l = InvertedList::default();
                l.push(1, 0, [0.0, 0.0, 1.0, 1.0], &[1, 0]);
                l
            }],
        };
        let hits = idx.search(&[0.5, 2.0], 1, 1).unwrap();
        assert_eq!(hits[0].score, 7.0);
    }

    #[test]
    fn adc_score_matches_reconstruction() {
        let data = gaussian(400, 8, 7);
        let feats: Vec<_> = data
            .chunks_exact(8)
            .enumerate()
            .map(|(i, v)| feature(i as u64, v.to_vec()))
            .collect();
        let idx = IvfadcIndex::build(&feats, &IndexParams::new(4, 4, 8, 1)).unwrap();
        let w: Vec<f64> = gaussian(1, 8, 99).iter().map(|&x| x as f64).collect();
        for hit in idx.search(&w, 400, 4).unwrap() {
            let HitSource::Posting { list, offset } = hit.source else {
                panic!("index hit without posting")
            };
            let rec = idx.reconstruct(list, offset);
            let direct: f64 = rec.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((direct - hit.score).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn zero_query_ranks_by_id() {
        let data = gaussian(50, 4, 2);
        let feats: Vec<_> = data
            .chunks_exact(4)
            .enumerate()
            .map(|(i, v)| feature(49 - i as u64, v.to_vec()))
            .collect();
        let idx = IvfadcIndex::build(&feats, &IndexParams::new(2, 2, 4, 1)).unwrap();
        let hits = idx.search(&[0.0; 4], 5, 2).unwrap();
        assert!(hits.iter().all(|h| h.score == 0.0));
        let ids: Vec<u64> = hits.iter().map(|h| h.image_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn search_validates_arguments() {
        let data = gaussian(20, 4, 2);
        let feats: Vec<_> = data
            .chunks_exact(4)
            .enumerate()
            .map(|(i, v)| feature(i as u64, v.to_vec()))
            .collect();
        let idx = IvfadcIndex::build(&feats, &IndexParams::new(2, 2, 4, 1)).unwrap();
        assert!(idx.search(&[0.0; 4], 5, 0).is_err());
        assert!(idx.search(&[0.0; 4], 5, 3).is_err());
        assert!(idx.search(&[0.0; 3], 5, 1).is_err());
        let mut empty = idx.clone();
        empty.lists.iter_mut().for_each(|l| *l = InvertedList::default());
        assert!(matches!(empty.search(&[0.0; 4], 5, 1), Err(Error::EmptyIndex)));
        assert!(IvfadcIndex::build(&feats[..3], &IndexParams::new(2, 2, 4, 1)).is_err());
    }

    #[test]
    fn exact_search_examples() {
        let one = vec![feature(3, vec![1.0, 2.0])];
        assert_eq!(search_exact(&one, &[1.0, 1.0], 5)[0].image_id, 3);
        let two = vec![feature(0, vec![0.0, 1.0]), feature(1, vec![1.0, 0.0])];
        assert_eq!(search_exact(&two, &[1.0, 0.0], 2)[0].image_id, 1);
    }

    #[test]
    fn default_nlist_is_power_of_two_near_sqrt() {
        assert_eq!(default_nlist(1_000_000), 1024);
        assert_eq!(default_nlist(10_000), 128);
        assert_eq!(default_nlist(1), 1);
    }
}
