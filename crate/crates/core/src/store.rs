//! On-disk formats.
//!
//! All binary formats are little-endian and start with a four-byte magic and
//! a `u32` version:
//!
//! * `QARF` region features: `D_feat u32, count u64`, then per record
//!   `image_id u64, region_id u32, box 4×f32, feature D_feat×f32`.
//! * `QARW` generator parameters: `dim u32, D_feat u32, hidden u32`, then
//!   `W, H1, b1, H2_x..H2_h, b2_x..b2_h` as row-major `f32`.
//! * `QARX` IVFADC index: `D_feat u32, nlist u32, m u32, ksub u32, N u64`,
//!   coarse centroids and codebooks as `f32`, then per list a `u64` length
//!   followed by postings `image_id u64, region_id u32, box 4×f32, code m×u8`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{BBox, GeneratorParams, RegionFeature};
use crate::error::{Error, Result};
use crate::ivfadc::{CoarseQuantizer, InvertedList, IvfadcIndex, ProductQuantizer};

pub const FEATURE_MAGIC: [u8; 4] = *b"QARF";
pub const PARAMS_MAGIC: [u8; 4] = *b"QARW";
pub const INDEX_MAGIC: [u8; 4] = *b"QARX";
pub const FORMAT_VERSION: u32 = 1;

const FEATURE_HEADER_LEN: u64 = 4 + 4 + 4 + 8;

/// Reader that tracks its byte offset so truncation errors can name it.
struct Source<R> {
    inner: R,
    path: PathBuf,
    offset: u64,
}

impl<R: Read> Source<R> {
    fn new(inner: R, path: &Path) -> Self {
        Self {
            inner,
            path: path.to_path_buf(),
            offset: 0,
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::Truncated {
                path: self.path.clone(),
                offset: self.offset,
            }),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.fill(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn magic(&mut self, expected: [u8; 4], format: &'static str) -> Result<()> {
        let mut found = [0u8; 4];
        self.fill(&mut found)?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected,
                found,
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { format, version });
        }
        Ok(())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::parse(
                &self.path,
                0,
                format!("trailing data at byte offset {}", self.offset),
            )),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

struct Sink<W> {
    inner: W,
    path: PathBuf,
}

impl<W: Write> Sink<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(|e| Error::io(&self.path, e))
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f32s(&mut self, v: impl IntoIterator<Item = f32>) -> Result<()> {
        for x in v {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn create(path: &Path) -> Result<Sink<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(Sink {
        inner: BufWriter::new(file),
        path: path.to_path_buf(),
    })
}

fn open(path: &Path) -> Result<Source<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(Source::new(BufReader::new(file), path))
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

/// Streaming reader over a `QARF` feature file.
pub struct FeatureReader<R> {
    src: Source<R>,
    dim: usize,
    count: u64,
    read: u64,
}

impl FeatureReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(open(path.as_ref())?)
    }
}

impl<R: Read> FeatureReader<R> {
    fn new(mut src: Source<R>) -> Result<Self> {
        src.magic(FEATURE_MAGIC, "feature")?;
        let dim = src.u32()? as usize;
        let count = src.u64()?;
        Ok(Self {
            src,
            dim,
            count,
            read: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn record_count(&self) -> u64 {
        self.count
    }

    fn record(&mut self) -> Result<RegionFeature> {
        let image_id = self.src.u64()?;
        let region_id = self.src.u32()?;
        let b = self.src.f32s(4)?;
        let bbox = BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64)?;
        let feature = self.src.f32s(self.dim)?;
        if feature.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(
                &self.src.path,
                0,
                format!("non-finite feature in record {}", self.read),
            ));
        }
        Ok(RegionFeature {
            image_id,
            region_id,
            bbox,
            feature,
        })
    }
}

impl<R: Read> Iterator for FeatureReader<R> {
    type Item = Result<RegionFeature>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read == self.count {
            return None;
        }
        self.read += 1;
        let rec = self.record();
        if rec.is_err() {
            self.read = self.count;
        }
        Some(rec)
    }
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Vec<RegionFeature>> {
    let mut reader = FeatureReader::open(path)?;
    let mut out = Vec::with_capacity(reader.record_count().min(1 << 24) as usize);
    for rec in reader.by_ref() {
        out.push(rec?);
    }
    reader.src.expect_eof()?;
    Ok(out)
}

/// Writes a `QARF` file. All features must have length `dim`.
pub fn write_feature_file(path: impl AsRef<Path>, dim: usize, features: &[RegionFeature]) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    out.bytes(&FEATURE_MAGIC)?;
    out.u32(FORMAT_VERSION)?;
    out.u32(u32_field(dim, "feature dim")?)?;
    out.u64(features.len() as u64)?;
    for f in features {
        if f.feature.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.feature.len(),
            });
        }
        out.u64(f.image_id)?;
        out.u32(f.region_id)?;
        out.f32s(f.bbox.to_array().map(|c| c as f32))?;
        out.f32s(f.feature.iter().copied())?;
    }
    out.finish()
}

pub fn feature_file_len(dim: usize, count: usize) -> u64 {
    FEATURE_HEADER_LEN + count as u64 * (8 + 4 + 16 + 4 * dim as u64)
}

pub fn write_params(path: impl AsRef<Path>, params: &GeneratorParams) -> Result<()> {
    let mut out = create(path.as_ref())?;
    out.bytes(&PARAMS_MAGIC)?;
    out.u32(FORMAT_VERSION)?;
    out.u32(u32_field(params.dim(), "dim")?)?;
    out.u32(u32_field(params.feat_dim(), "feature dim")?)?;
    out.u32(u32_field(params.hidden_dim(), "hidden dim")?)?;
    for t in params.tensors() {
        out.f32s(t.iter().map(|&x| x as f32))?;
    }
    out.finish()
}

pub fn read_params(path: impl AsRef<Path>) -> Result<GeneratorParams> {
    let path = path.as_ref();
    let mut src = open(path)?;
    src.magic(PARAMS_MAGIC, "params")?;
    let dim = src.u32()? as usize;
    let feat = src.u32()? as usize;
    let hidden = src.u32()? as usize;
    if dim == 0 || feat == 0 || hidden == 0 {
        return Err(Error::parse(path, 0, "zero dimension in params header"));
    }
    let mut params = GeneratorParams::zeros(dim, feat, hidden);
    for t in params.tensors_mut() {
        let vals = src.f32s(t.len())?;
        t.iter_mut().zip(vals).for_each(|(p, v)| *p = v as f64);
    }
    src.expect_eof()?;
    Ok(params)
}

/// Rounds every parameter to single precision, matching what
/// [`write_params`] stores.
pub fn round_params_to_f32(params: &GeneratorParams) -> GeneratorParams {
    let mut p = params.clone();
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
    p
}

pub fn index_layout_size(dim: usize, nlist: usize, m: usize, ksub: usize, n: usize) -> u64 {
    let header = 4 + 4 * 5 + 8;
    let centroids = 4 * (nlist * dim) as u64;
    let codebooks = 4 * (ksub * dim) as u64;
    let lists = 8 * nlist as u64;
    let postings = n as u64 * (8 + 4 + 16 + m as u64);
    header + centroids + codebooks + lists + postings
}

pub fn write_index(path: impl AsRef<Path>, index: &IvfadcIndex) -> Result<()> {
    let mut out = create(path.as_ref())?;
    out.bytes(&INDEX_MAGIC)?;
    out.u32(FORMAT_VERSION)?;
    out.u32(u32_field(index.dim(), "feature dim")?)?;
    out.u32(u32_field(index.nlist(), "nlist")?)?;
    out.u32(u32_field(index.pq.m, "m")?)?;
    out.u32(u32_field(index.pq.ksub, "ksub")?)?;
    out.u64(index.len() as u64)?;
    out.f32s(index.coarse.centroids.iter().copied())?;
    out.f32s(index.pq.codebooks.iter().copied())?;
    let m = index.pq.m;
    for list in &index.lists {
        out.u64(list.len() as u64)?;
        for (i, &(image_id, region_id)) in list.ids.iter().enumerate() {
            out.u64(image_id)?;
            out.u32(region_id)?;
            out.f32s(list.boxes[i])?;
            out.bytes(&list.codes[i * m..(i + 1) * m])?;
        }
    }
    out.finish()
}

pub fn read_index(path: impl AsRef<Path>) -> Result<IvfadcIndex> {
    let path = path.as_ref();
    let mut src = open(path)?;
    src.magic(INDEX_MAGIC, "index")?;
    let dim = src.u32()? as usize;
    let nlist = src.u32()? as usize;
    let m = src.u32()? as usize;
    let ksub = src.u32()? as usize;
    let n = src.u64()?;
    if dim == 0 || nlist == 0 {
        return Err(Error::parse(path, 0, "zero dimension in index header"));
    }
    let centroids = src.f32s(nlist * dim)?;
    let codebooks = src.f32s(ksub * dim)?;
    let pq = ProductQuantizer::new(dim, m, ksub, codebooks)?;
    let mut lists = Vec::with_capacity(nlist);
    let mut total = 0u64;
    for _ in 0..nlist {
        let len = src.u64()?;
        total += len;
        if total > n {
            return Err(Error::parse(path, 0, "list lengths exceed header count"));
        }
        let mut list = InvertedList::default();
        let mut code = vec![0u8; m];
        for _ in 0..len {
            let image_id = src.u64()?;
            let region_id = src.u32()?;
            let b = src.f32s(4)?;
            src.fill(&mut code)?;
            if let Some(j) = code.iter().position(|&c| c as usize >= ksub) {
                return Err(Error::InvalidCode {
                    subspace: j,
                    value: code[j],
                    ksub,
                });
            }
            list.push(image_id, region_id, [b[0], b[1], b[2], b[3]], &code);
        }
        lists.push(list);
    }
    if total != n {
        return Err(Error::parse(path, 0, "list lengths disagree with header count"));
    }
    src.expect_eof()?;
    Ok(IvfadcIndex {
        coarse: CoarseQuantizer {
            dim,
            nlist,
            centroids,
        },
        pq,
        lists,
    })
}

/// One phrase instance: `{"image_id", "phrase", "box": [x1, y1, x2, y2]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: u64,
    pub phrase: String,
    pub bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: u64,
    phrase: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = create(path)?;
    for item in items {
        let line = serde_json::to_string(&item)?;
        out.bytes(line.as_bytes())?;
        out.bytes(b"\n")?;
    }
    out.finish()
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let records: Vec<AnnotationRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let bbox = BBox::from_array(r.bbox).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            Ok(Annotation {
                image_id: r.image_id,
                phrase: r.phrase,
                bbox,
            })
        })
        .collect()
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        annotations.iter().map(|a| AnnotationRecord {
            image_id: a.image_id,
            phrase: a.phrase.clone(),
            bbox: a.bbox.to_array(),
        }),
    )
}

/// One line of query output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub rank: usize,
    pub image_id: u64,
    pub region_id: u32,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

pub fn write_results(out: &mut impl Write, results: &[ResultRecord]) -> io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads one query per non-empty line.
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_queries(path: impl AsRef<Path>, queries: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut text = queries.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
