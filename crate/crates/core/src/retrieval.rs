//! Text query → generated detector → index search → box regression.

use std::collections::{BTreeMap, BTreeSet};

use crate::detector::{apply_deltas, dot, generate_detector, BBox, Deltas, GeneratorParams, RegionFeature};
use crate::embedding::{embed_phrase, Phrase, WordVectorTable};
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, localization_accuracy, mean_average_precision, precision_at_k, EvalReport, GroundTruth,
    QueryReport, RankedRegion, LOCALIZATION_THRESHOLDS,
};
use crate::ivfadc::{search_exact, HitSource, IvfadcIndex, SearchHit};
use crate::store::{Annotation, ResultRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub image_id: u64,
    pub region_id: u32,
    pub score: f64,
    pub proposal_box: BBox,
    pub regressed_box: BBox,
}

impl QueryResult {
    pub fn to_record(&self, rank: usize) -> ResultRecord {
        ResultRecord {
            rank,
            image_id: self.image_id,
            region_id: self.region_id,
            score: self.score,
            bbox: self.regressed_box.to_array(),
        }
    }
}

/// Where candidates come from.
#[derive(Debug, Clone, Copy)]
pub enum SearchMode<'a> {
    /// IVFADC search probing `nprobe` lists; regression uses reconstructed
    /// features.
    Approximate { index: &'a IvfadcIndex, nprobe: usize },
    /// Full scan of raw features; regression uses the raw feature.
    Exact { features: &'a [RegionFeature] },
}

/// Runs a text query end to end. Results are in descending score order.
pub fn retrieve(
    mode: SearchMode<'_>,
    params: &GeneratorParams,
    words: &WordVectorTable,
    query: &str,
    topk: usize,
) -> Result<Vec<QueryResult>> {
    if topk == 0 {
        return Err(Error::InvalidArgument("topk must be at least 1".into()));
    }
    let v = embed_phrase(words, &Phrase::new(query)?)?;
    let det = generate_detector(params, &v)?;
    let hits: Vec<SearchHit> = match mode {
        SearchMode::Approximate { index, nprobe } => index.search(&det.w_c, topk, nprobe)?,
        SearchMode::Exact { features } => {
            if features.is_empty() {
                return Err(Error::EmptyIndex);
            }
            if features[0].feature.len() != det.w_c.len() {
                return Err(Error::DimensionMismatch {
                    expected: det.w_c.len(),
                    got: features[0].feature.len(),
                });
            }
            search_exact(features, &det.w_c, topk)
        }
    };
    Ok(hits
        .into_iter()
        .map(|hit| {
            let deltas = match (mode, hit.source) {
                (SearchMode::Approximate { index, .. }, HitSource::Posting { list, offset }) => {
                    let f = index.reconstruct(list, offset);
                    Deltas(std::array::from_fn(|k| dot(&det.w_r[k], &f)))
                }
                (SearchMode::Exact { features }, HitSource::Feature(i)) => det.regress(&features[i].feature),
                _ => unreachable!("hit source matches search mode"),
            };
            QueryResult {
                image_id: hit.image_id,
                region_id: hit.region_id,
                score: hit.score,
                proposal_box: hit.bbox,
                regressed_box: apply_deltas(&hit.bbox, &deltas),
            }
        })
        .collect())
}

/// `(region_id, proposal box, feature seen by the regressor)`.
type ImageRegion = (u32, BBox, Vec<f64>);

/// All regions of each image.
fn regions_by_image(mode: SearchMode<'_>) -> BTreeMap<u64, Vec<ImageRegion>> {
    let mut out: BTreeMap<u64, Vec<ImageRegion>> = BTreeMap::new();
    match mode {
        SearchMode::Approximate { index, .. } => {
            for (l, list) in index.lists.iter().enumerate() {
                for (o, (&(image_id, region_id), b)) in list.ids.iter().zip(&list.boxes).enumerate() {
                    let bbox = BBox {
                        x1: b[0] as f64,
                        y1: b[1] as f64,
                        x2: b[2] as f64,
                        y2: b[3] as f64,
                    };
                    out.entry(image_id).or_default().push((region_id, bbox, index.reconstruct(l, o)));
                }
            }
        }
        SearchMode::Exact { features } => {
            for f in features {
                let v = f.feature.iter().map(|&x| x as f64).collect();
                out.entry(f.image_id).or_default().push((f.region_id, f.bbox, v));
            }
        }
    }
    for regions in out.values_mut() {
        regions.sort_by_key(|r| r.0);
    }
    out
}

/// Ranks every indexed region for each query and scores the rankings
/// against the annotations, then measures top-1 localization of every
/// annotated phrase within its own image.
///
/// A query's positives are the annotations whose head noun (over the
/// lexicon of query head nouns) matches the query's. Phrases with no
/// embeddable token, or whose image has no regions, count as misses.
pub fn evaluate(
    mode: SearchMode<'_>,
    params: &GeneratorParams,
    words: &WordVectorTable,
    annotations: &[Annotation],
    queries: &[String],
    iou_threshold: f64,
) -> Result<EvalReport> {
    let total = match mode {
        SearchMode::Approximate { index, .. } => index.len(),
        SearchMode::Exact { features } => features.len(),
    };
    let full = match mode {
        SearchMode::Approximate { index, .. } => SearchMode::Approximate {
            index,
            nprobe: index.nlist(),
        },
        exact => exact,
    };
    let query_phrases: Vec<Phrase> = queries.iter().map(|q| Phrase::new(q)).collect::<Result<_>>()?;
    let lexicon: BTreeSet<String> = query_phrases
        .iter()
        .filter_map(|p| p.tokens().last().cloned())
        .collect();
    let mut reports = Vec::new();
    for (query, phrase) in queries.iter().zip(&query_phrases) {
        let head = phrase.head_noun(&lexicon);
        let gt: GroundTruth = annotations
            .iter()
            .filter(|a| Phrase::new(&a.phrase).is_ok_and(|p| p.head_noun(&lexicon) == head))
            .map(|a| (a.image_id, a.bbox))
            .collect();
        if gt.is_empty() {
            continue;
        }
        let ranked: Vec<RankedRegion> = retrieve(full, params, words, query, total.max(1))?
            .into_iter()
            .map(|r| RankedRegion {
                image_id: r.image_id,
                region_id: r.region_id,
                bbox: r.proposal_box,
            })
            .collect();
        reports.push(QueryReport {
            query: query.clone(),
            positives: gt.len(),
            ap: average_precision(&ranked, &gt, iou_threshold)?,
            pr_at_10: precision_at_k(&ranked, &gt, 10, iou_threshold)?,
            pr_at_100: precision_at_k(&ranked, &gt, 100, iou_threshold)?,
        });
    }
    let map = mean_average_precision(reports.iter().map(|r| Some(r.ap)));

    let images = regions_by_image(mode);
    let mut predictions = Vec::with_capacity(annotations.len());
    let mut gts = Vec::with_capacity(annotations.len());
    for a in annotations {
        let predicted = localize(params, words, &a.phrase, images.get(&a.image_id));
        // A miss is represented by a box disjoint from the ground truth.
        let miss = BBox {
            x1: a.bbox.x2 + 1.0,
            y1: a.bbox.y2 + 1.0,
            x2: a.bbox.x2 + 2.0,
            y2: a.bbox.y2 + 2.0,
        };
        predictions.push(predicted.unwrap_or(miss));
        gts.push(a.bbox);
    }
    let mut localization = BTreeMap::new();
    if !annotations.is_empty() {
        for t in LOCALIZATION_THRESHOLDS {
            localization.insert(format!("{t:.1}"), localization_accuracy(&predictions, &gts, t)?);
        }
    }
    Ok(EvalReport {
        queries: reports,
        map,
        localization_accuracy: localization,
        phrases: annotations.len(),
        iou_threshold,
    })
}

/// Regressed box of the best-scoring region of one image for a phrase.
fn localize(
    params: &GeneratorParams,
    words: &WordVectorTable,
    phrase: &str,
    regions: Option<&Vec<ImageRegion>>,
) -> Option<BBox> {
    let v = embed_phrase(words, &Phrase::new(phrase).ok()?).ok()?;
    let det = generate_detector(params, &v).ok()?;
    let (_, bbox, f) = regions?
        .iter()
        .map(|r| (dot(&det.w_c, &r.2), r))
        .fold(None, |best: Option<(f64, &ImageRegion)>, (s, r)| match best {
            Some((bs, _)) if bs >= s => best,
            _ => Some((s, r)),
        })?
        .1;
    let deltas = Deltas(std::array::from_fn(|k| dot(&det.w_r[k], f)));
    Some(apply_deltas(bbox, &deltas))
}
