//! Negative phrase augmentation.
//!
//! A confusion table maps each category to the categories whose objects its
//! generated classifier scores highest on a labelled validation set, after
//! removing every category that is not mutually exclusive with it. Training
//! minibatches are then augmented with phrases whose head noun is swapped
//! for a sampled confusing category; those phrases are labelled negative on
//! exactly the regions where the source phrase is positive.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::detector::{dot_f32, generate_detector, GeneratorParams};
use crate::embedding::{embed_phrase, substitute_head_noun, Phrase, WordVectorTable};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::store::Annotation;
use crate::training::{AnnotatedImage, Label, LabelMatrix};
use crate::RegionFeature;

/// Default candidate list length used for mining.
pub const DEFAULT_TOP_K: usize = 500;
/// Default co-occurrence ratio above which two categories are considered
/// compatible.
pub const DEFAULT_COOCCURRENCE_RATIO: f64 = 0.01;

/// Child → parent category edges.
#[derive(Debug, Clone, Default)]
pub struct Taxonomy {
    parents: BTreeMap<String, BTreeSet<String>>,
    ancestors: BTreeMap<String, BTreeSet<String>>,
}

impl Taxonomy {
    pub fn from_edges<I, S>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: AsRef<str>,
    {
        let mut parents: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (child, parent) in edges {
            parents
                .entry(child.as_ref().to_lowercase())
                .or_default()
                .insert(parent.as_ref().to_lowercase());
        }
        let mut ancestors = BTreeMap::new();
        for node in parents.keys() {
            let mut seen = BTreeSet::new();
            let mut stack: Vec<&String> = parents[node].iter().collect();
            while let Some(p) = stack.pop() {
                if p == node {
                    return Err(Error::CyclicTaxonomy(node.clone()));
                }
                if seen.insert(p.clone()) {
                    if let Some(next) = parents.get(p) {
                        stack.extend(next.iter());
                    }
                }
            }
            ancestors.insert(node.clone(), seen);
        }
        Ok(Self { parents, ancestors })
    }

    pub fn is_ancestor(&self, ancestor: &str, of: &str) -> bool {
        self.ancestors
            .get(of)
            .is_some_and(|set| set.contains(ancestor))
    }

    /// Whether one category is an ancestor of the other.
    pub fn related(&self, a: &str, b: &str) -> bool {
        self.is_ancestor(a, b) || self.is_ancestor(b, a)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.parents
            .iter()
            .flat_map(|(c, ps)| ps.iter().map(move |p| (c.as_str(), p.as_str())))
    }

    /// Every category named by an edge.
    pub fn nodes(&self) -> BTreeSet<String> {
        self.edges()
            .flat_map(|(c, p)| [c.to_string(), p.to_string()])
            .collect()
    }

    /// Reads `child<TAB>parent` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = read_tsv(path, 2)?;
        Self::from_edges(rows.into_iter().map(|mut r| {
            let parent = r.pop().unwrap_or_default();
            let child = r.pop().unwrap_or_default();
            (child, parent)
        }))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_lines(
            path.as_ref(),
            self.edges().map(|(c, p)| format!("{c}\t{p}")),
        )
    }
}

/// Object counts per category and co-annotation counts per category pair.
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceStats {
    total: BTreeMap<String, u64>,
    pair: BTreeMap<(String, String), u64>,
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl CooccurrenceStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_total(&mut self, category: &str, count: u64) {
        self.total.insert(category.to_lowercase(), count);
    }

    pub fn set_pair(&mut self, a: &str, b: &str, count: u64) {
        self.pair
            .insert(pair_key(&a.to_lowercase(), &b.to_lowercase()), count);
    }

    pub fn add_total(&mut self, category: &str, count: u64) {
        *self.total.entry(category.to_lowercase()).or_default() += count;
    }

    pub fn add_pair(&mut self, a: &str, b: &str, count: u64) {
        *self
            .pair
            .entry(pair_key(&a.to_lowercase(), &b.to_lowercase()))
            .or_default() += count;
    }

    pub fn total(&self, category: &str) -> u64 {
        self.total.get(category).copied().unwrap_or(0)
    }

    pub fn pair(&self, a: &str, b: &str) -> u64 {
        self.pair.get(&pair_key(a, b)).copied().unwrap_or(0)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.total.keys().map(String::as_str)
    }

    /// Pair counts must not exceed either category's total when both are
    /// known.
    pub fn validate(&self) -> Result<()> {
        for ((a, b), &n) in &self.pair {
            for c in [a, b] {
                if let Some(&t) = self.total.get(c) {
                    if n > t {
                        return Err(Error::InvalidArgument(format!(
                            "pair ({a}, {b}) count {n} exceeds total {t} of {c}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads `category<TAB>count` totals and `a<TAB>b<TAB>count` pairs.
    pub fn load(totals: impl AsRef<Path>, pairs: impl AsRef<Path>) -> Result<Self> {
        let mut stats = Self::new();
        let totals = totals.as_ref();
        for (i, row) in read_tsv(totals, 2)?.into_iter().enumerate() {
            let n = row[1]
                .parse()
                .map_err(|_| Error::parse(totals, i + 1, "bad count"))?;
            stats.set_total(&row[0], n);
        }
        let pairs = pairs.as_ref();
        for (i, row) in read_tsv(pairs, 3)?.into_iter().enumerate() {
            let n = row[2]
                .parse()
                .map_err(|_| Error::parse(pairs, i + 1, "bad count"))?;
            stats.set_pair(&row[0], &row[1], n);
        }
        stats.validate()?;
        Ok(stats)
    }

    pub fn save(&self, totals: impl AsRef<Path>, pairs: impl AsRef<Path>) -> Result<()> {
        write_lines(
            totals.as_ref(),
            self.total.iter().map(|(c, n)| format!("{c}\t{n}")),
        )?;
        write_lines(
            pairs.as_ref(),
            self.pair.iter().map(|((a, b), n)| format!("{a}\t{b}\t{n}")),
        )
    }
}

fn read_tsv(path: &Path, fields: usize) -> Result<Vec<Vec<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<String> = line.split('\t').map(|s| s.trim().to_lowercase()).collect();
        if row.len() != fields || row.iter().any(String::is_empty) {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected {fields} tab-separated fields"),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in lines {
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Which evidence sources the exclusivity test consults.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExclusivityFilters<'a> {
    pub taxonomy: Option<&'a Taxonomy>,
    pub cooccurrence: Option<&'a CooccurrenceStats>,
    pub ratio: f64,
}

impl<'a> ExclusivityFilters<'a> {
    pub fn new(taxonomy: Option<&'a Taxonomy>, cooccurrence: Option<&'a CooccurrenceStats>) -> Self {
        Self {
            taxonomy,
            cooccurrence,
            ratio: DEFAULT_COOCCURRENCE_RATIO,
        }
    }

    pub fn exclusive(&self, a: &str, b: &str) -> bool {
        is_mutually_exclusive(a, b, self.taxonomy, self.cooccurrence, self.ratio)
    }
}

/// Two categories are mutually exclusive unless they are equal, related by
/// ancestry in `tax`, or co-annotated on at least `ratio` of either
/// category's objects. A missing filter is skipped.
pub fn is_mutually_exclusive(
    a: &str,
    b: &str,
    tax: Option<&Taxonomy>,
    cooc: Option<&CooccurrenceStats>,
    ratio: f64,
) -> bool {
    if a == b {
        return false;
    }
    if tax.is_some_and(|t| t.related(a, b)) {
        return false;
    }
    if let Some(stats) = cooc {
        let pair = stats.pair(a, b) as f64;
        if pair >= ratio * stats.total(a) as f64 || pair >= ratio * stats.total(b) as f64 {
            return false;
        }
    }
    true
}

/// An annotated validation object: a region feature and its category.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledObject {
    pub object_id: u64,
    pub label: String,
    pub feature: Vec<f32>,
}

/// Builds labelled objects from validation regions and annotations. Each
/// annotation takes the region with the highest IoU (which must exceed 0.5);
/// its label is the annotation's head noun.
pub fn labeled_objects(
    regions: &[RegionFeature],
    annotations: &[Annotation],
    lexicon: &BTreeSet<String>,
) -> Result<Vec<LabeledObject>> {
    let mut by_image: HashMap<u64, Vec<&RegionFeature>> = HashMap::new();
    for r in regions {
        by_image.entry(r.image_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for ann in annotations {
        let phrase = Phrase::new(&ann.phrase)?;
        let best = by_image.get(&ann.image_id).and_then(|rs| {
            rs.iter()
                .map(|r| (r, iou(&r.bbox, &ann.bbox)))
                .filter(|(_, o)| *o > 0.5)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.region_id.cmp(&a.0.region_id)))
        });
        if let Some((r, _)) = best {
            out.push(LabeledObject {
                object_id: out.len() as u64,
                label: phrase.head_noun(lexicon).to_string(),
                feature: r.feature.clone(),
            });
        }
    }
    Ok(out)
}

/// A ranked candidate label (ranks are 1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub label: String,
    pub rank: usize,
}

/// Scores every validation object with the classifier generated for
/// `category` and returns the labels of the top `k`.
pub fn mine_candidates(
    params: &GeneratorParams,
    words: &WordVectorTable,
    valset: &[LabeledObject],
    category: &str,
    k: usize,
) -> Result<Vec<Candidate>> {
    let v = embed_phrase(words, &Phrase::new(category)?)?;
    let det = generate_detector(params, &v)?;
    let mut scored: Vec<(f64, u64, &str)> = valset
        .iter()
        .map(|o| (dot_f32(&det.w_c, &o.feature), o.object_id, o.label.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (_, _, label))| Candidate {
            label: label.to_string(),
            rank: i + 1,
        })
        .collect())
}

/// Category → weighted hard-negative categories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfusionTable {
    entries: BTreeMap<String, Vec<(String, f64)>>,
}

impl ConfusionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an entry after normalizing its weights. Non-positive weights
    /// and self references are dropped; an entry left empty is not stored.
    pub fn insert(&mut self, category: &str, negatives: impl IntoIterator<Item = (String, f64)>) {
        let mut list: Vec<(String, f64)> = negatives
            .into_iter()
            .filter(|(n, w)| n != category && *w > 0.0)
            .collect();
        let sum: f64 = list.iter().map(|(_, w)| w).sum();
        if list.is_empty() || !sum.is_finite() {
            return;
        }
        list.iter_mut().for_each(|(_, w)| *w /= sum);
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        self.entries.insert(category.to_string(), list);
    }

    pub fn get(&self, category: &str) -> Option<&[(String, f64)]> {
        self.entries.get(category).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Draws one negative category for `category` by the entry's weights.
    pub fn sample(&self, category: &str, rng: &mut impl Rng) -> Option<&str> {
        let entry = self.entries.get(category)?;
        let dist = WeightedIndex::new(entry.iter().map(|(_, w)| *w)).ok()?;
        Some(entry[dist.sample(rng)].0.as_str())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, BTreeMap<&str, f64>> = self
            .entries
            .iter()
            .map(|(c, list)| {
                (
                    c.as_str(),
                    list.iter().map(|(n, w)| (n.as_str(), *w)).collect(),
                )
            })
            .collect();
        serde_json::to_value(map).expect("string-keyed map serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, BTreeMap<String, f64>> = serde_json::from_value(value)?;
        let mut table = Self::new();
        for (c, negs) in map {
            if negs.values().any(|w| w.is_nan() || *w <= 0.0) || negs.contains_key(&c) {
                return Err(Error::InvalidArgument(format!(
                    "confusion entry {c:?} has a non-positive weight or lists itself"
                )));
            }
            table.insert(&c, negs);
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(serde_json::from_str(&text)?)
    }
}

/// Aggregated raw weight `Σ (k − rank)` per exclusive label. Ranks at or
/// beyond `k` contribute nothing.
pub fn rank_weights(candidates: &[Candidate], k: usize) -> BTreeMap<String, u64> {
    let mut weights: BTreeMap<String, u64> = BTreeMap::new();
    for c in candidates {
        *weights.entry(c.label.clone()).or_default() += k.saturating_sub(c.rank) as u64;
    }
    weights.retain(|_, w| *w > 0);
    weights
}

/// Builds the confusion table for `categories`. Categories that cannot be
/// embedded, or whose candidates are all filtered out, get no entry.
pub fn build_confusion_table(
    params: &GeneratorParams,
    words: &WordVectorTable,
    valset: &[LabeledObject],
    filters: &ExclusivityFilters<'_>,
    categories: &[String],
    k: usize,
) -> ConfusionTable {
    let entries: Vec<(String, BTreeMap<String, u64>)> = categories
        .par_iter()
        .filter_map(|c| {
            let candidates = mine_candidates(params, words, valset, c, k).ok()?;
            let exclusive: Vec<Candidate> = candidates
                .into_iter()
                .filter(|cand| filters.exclusive(c, &cand.label))
                .collect();
            Some((c.clone(), rank_weights(&exclusive, k)))
        })
        .collect();
    let mut table = ConfusionTable::new();
    for (c, weights) in entries {
        table.insert(&c, weights.into_iter().map(|(n, w)| (n, w as f64)));
    }
    table
}

/// Appends up to `n_neg` negative phrases per original phrase. Each
/// appended row is NEG where the source row is POS and IGNORE elsewhere.
pub fn augment_minibatch(
    image: &AnnotatedImage,
    labels: &LabelMatrix,
    table: &ConfusionTable,
    lexicon: &BTreeSet<String>,
    n_neg: usize,
    rng: &mut impl Rng,
) -> (Vec<Phrase>, LabelMatrix) {
    let mut phrases: Vec<Phrase> = image.phrases.iter().map(|(p, _)| p.clone()).collect();
    let mut out = labels.clone();
    for (c, (phrase, _)) in image.phrases.iter().enumerate().take(labels.original_rows()) {
        let source = labels.row(c);
        if !source.contains(&Label::Pos) {
            continue;
        }
        let head = phrase.head_noun(lexicon);
        if table.get(head).is_none() {
            continue;
        }
        let masked: Vec<Label> = source
            .iter()
            .map(|l| if *l == Label::Pos { Label::Neg } else { Label::Ignore })
            .collect();
        for _ in 0..n_neg {
            let Some(negative) = table.sample(head, rng) else {
                break;
            };
            let (neg_phrase, _) = substitute_head_noun(phrase, lexicon, negative);
            phrases.push(neg_phrase);
            out.push_augmented(masked.clone());
        }
    }
    (phrases, out)
}
