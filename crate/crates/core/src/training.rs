//! Label assignment, the minibatch loss with analytic gradients, and the
//! training loop (optionally with negative phrase augmentation).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{dot_f32, regression_targets, BBox, GeneratorParams, RegionFeature};
use crate::embedding::{embed_phrase, Phrase, PhraseEmbedding, WordVectorTable};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::npa::{self, ConfusionTable, CooccurrenceStats, ExclusivityFilters, LabeledObject, Taxonomy};

/// IoU above which a region is a positive for a phrase.
pub const POSITIVE_IOU: f64 = 0.5;

/// One training image: its region proposals and annotated phrases.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: u64,
    pub regions: Vec<RegionFeature>,
    pub phrases: Vec<(Phrase, BBox)>,
}

impl AnnotatedImage {
    pub fn new(image_id: u64, regions: Vec<RegionFeature>, phrases: Vec<(Phrase, BBox)>) -> Result<Self> {
        if regions.is_empty() || phrases.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "image {image_id} needs at least one region and one phrase"
            )));
        }
        if let Some(r) = regions.iter().find(|r| r.image_id != image_id) {
            return Err(Error::InvalidArgument(format!(
                "region {} belongs to image {}, not {image_id}",
                r.region_id, r.image_id
            )));
        }
        Ok(Self {
            image_id,
            regions,
            phrases,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Pos,
    Neg,
    Ignore,
}

/// Phrase × region label grid. The first `original_rows` rows belong to
/// annotated phrases; later rows come from augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    n_regions: usize,
    original_rows: usize,
    cells: Vec<Vec<Label>>,
}

impl LabelMatrix {
    pub fn from_rows(cells: Vec<Vec<Label>>, n_regions: usize) -> Result<Self> {
        if cells.iter().any(|r| r.len() != n_regions) {
            return Err(Error::InvalidArgument("ragged label matrix".into()));
        }
        if cells.iter().flatten().any(|l| *l == Label::Ignore) {
            return Err(Error::InvalidArgument(
                "original phrase rows cannot contain IGNORE".into(),
            ));
        }
        Ok(Self {
            n_regions,
            original_rows: cells.len(),
            cells,
        })
    }

    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn original_rows(&self) -> usize {
        self.original_rows
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn row(&self, r: usize) -> &[Label] {
        &self.cells[r]
    }

    pub(crate) fn push_augmented(&mut self, row: Vec<Label>) {
        debug_assert_eq!(row.len(), self.n_regions);
        debug_assert!(!row.contains(&Label::Pos));
        self.cells.push(row);
    }

    pub fn count(&self, label: Label) -> usize {
        self.cells.iter().flatten().filter(|l| **l == label).count()
    }
}

/// POS where a region overlaps the phrase's box by more than 0.5 IoU, NEG
/// elsewhere.
pub fn assign_labels(image: &AnnotatedImage) -> LabelMatrix {
    let cells = image
        .phrases
        .iter()
        .map(|(_, gt)| {
            image
                .regions
                .iter()
                .map(|r| {
                    if iou(&r.bbox, gt) > POSITIVE_IOU {
                        Label::Pos
                    } else {
                        Label::Neg
                    }
                })
                .collect()
        })
        .collect();
    LabelMatrix {
        n_regions: image.regions.len(),
        original_rows: image.phrases.len(),
        cells,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub regression_weight: f64,
    pub smooth_l1_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            regression_weight: 1.0,
            smooth_l1_delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Loss {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
}

fn smooth_l1(x: f64, delta: f64) -> (f64, f64) {
    if x.abs() < delta {
        (0.5 * x * x / delta, x / delta)
    } else {
        (x.abs() - 0.5 * delta, x.signum())
    }
}

/// `ln(1 + e^s)` without overflow.
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid cross-entropy over non-IGNORE cells plus smooth-L1 box
/// regression over POS cells of the original rows, each averaged over its
/// contributing cells. Returns the loss and its gradient with respect to
/// every generator parameter.
///
/// `embeddings[c]` is the phrase embedding for label row `c`; the
/// regression target of original row `c` is `image.phrases[c].1`.
pub fn minibatch_loss(
    params: &GeneratorParams,
    image: &AnnotatedImage,
    embeddings: &[PhraseEmbedding],
    labels: &LabelMatrix,
    config: &LossConfig,
) -> Result<(Loss, GeneratorParams)> {
    if embeddings.len() != labels.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings for {} label rows",
            embeddings.len(),
            labels.rows()
        )));
    }
    if labels.n_regions() != image.regions.len() || labels.original_rows() > image.phrases.len() {
        return Err(Error::InvalidArgument(
            "label matrix does not match the image".into(),
        ));
    }
    let n_cls = labels.rows() * labels.n_regions() - labels.count(Label::Ignore);
    if n_cls == 0 {
        return Err(Error::DegenerateBatch);
    }
    let n_pos = (0..labels.original_rows())
        .map(|c| labels.row(c).iter().filter(|l| **l == Label::Pos).count())
        .sum::<usize>();

    let feat_dim = params.feat_dim();
    let mut grad = GeneratorParams::zeros(params.dim(), feat_dim, params.hidden_dim());
    let mut loss = Loss::default();

    for (c, emb) in embeddings.iter().enumerate() {
        if emb.dim() != params.dim() {
            return Err(Error::DimensionMismatch {
                expected: params.dim(),
                got: emb.dim(),
            });
        }
        let v = emb.as_slice();
        let row = labels.row(c);
        let w_c = params.w.matvec(v);

        let mut g_wc = vec![0.0; feat_dim];
        for (r, label) in row.iter().enumerate() {
            let y = match label {
                Label::Pos => 1.0,
                Label::Neg => 0.0,
                Label::Ignore => continue,
            };
            let f = &image.regions[r].feature;
            if f.len() != feat_dim {
                return Err(Error::DimensionMismatch {
                    expected: feat_dim,
                    got: f.len(),
                });
            }
            let s = dot_f32(&w_c, f);
            loss.classification += (softplus(s) - y * s) / n_cls as f64;
            let g = (sigmoid(s) - y) / n_cls as f64;
            g_wc.iter_mut().zip(f).for_each(|(a, &x)| *a += g * x as f64);
        }
        grad.w.add_outer(&g_wc, v, 1.0);

        if c >= labels.original_rows() || !row.contains(&Label::Pos) {
            continue;
        }
        let gt = &image.phrases[c].1;
        let (pre, hidden) = params.hidden(v);
        let w_r: [Vec<f64>; 4] = std::array::from_fn(|k| {
            let mut out = params.h2[k].matvec(&hidden);
            out.iter_mut().zip(&params.b2[k]).for_each(|(o, b)| *o += b);
            out
        });
        let mut g_wr: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; feat_dim]);
        for (r, _) in row.iter().enumerate().filter(|(_, l)| **l == Label::Pos) {
            let region = &image.regions[r];
            let target = regression_targets(&region.bbox, gt).0;
            for k in 0..4 {
                let diff = dot_f32(&w_r[k], &region.feature) - target[k];
                let (l, d) = smooth_l1(diff, config.smooth_l1_delta);
                loss.regression += l / n_pos as f64;
                let g = config.regression_weight * d / n_pos as f64;
                g_wr[k]
                    .iter_mut()
                    .zip(&region.feature)
                    .for_each(|(a, &x)| *a += g * x as f64);
            }
        }
        let mut d_hidden = vec![0.0; params.hidden_dim()];
        for k in 0..4 {
            grad.h2[k].add_outer(&g_wr[k], &hidden, 1.0);
            grad.b2[k].iter_mut().zip(&g_wr[k]).for_each(|(a, g)| *a += g);
            let back = params.h2[k].matvec_t(&g_wr[k]);
            d_hidden.iter_mut().zip(back).for_each(|(a, b)| *a += b);
        }
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&pre)
            .map(|(d, &p)| if p > 0.0 { *d } else { 0.0 })
            .collect();
        grad.h1.add_outer(&d_pre, v, 1.0);
        grad.b1.iter_mut().zip(&d_pre).for_each(|(a, g)| *a += g);
    }
    loss.total = loss.classification + config.regression_weight * loss.regression;
    Ok((loss, grad))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &GeneratorParams, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut GeneratorParams, grad: &GeneratorParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub npa_enabled: bool,
    pub npa_negatives_per_phrase: usize,
    pub confusion_refresh_interval: usize,
    pub confusion_min_frequency: usize,
    /// Candidate list length used when mining hard negatives.
    pub npa_top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            iterations: 0,
            loss: LossConfig::default(),
            seed: 0,
            npa_enabled: false,
            npa_negatives_per_phrase: 1,
            confusion_refresh_interval: 10_000,
            confusion_min_frequency: 50,
            npa_top_k: npa::DEFAULT_TOP_K,
        }
    }
}

/// Data the confusion table is built from.
#[derive(Debug, Clone)]
pub struct NpaInputs {
    pub taxonomy: Option<Taxonomy>,
    pub cooccurrence: Option<CooccurrenceStats>,
    pub cooccurrence_ratio: f64,
    pub valset: Vec<LabeledObject>,
    /// Category nouns used to locate the head noun of a phrase.
    pub lexicon: BTreeSet<String>,
}

impl NpaInputs {
    pub fn new(
        taxonomy: Option<Taxonomy>,
        cooccurrence: Option<CooccurrenceStats>,
        valset: Vec<LabeledObject>,
        lexicon: BTreeSet<String>,
    ) -> Self {
        Self {
            taxonomy,
            cooccurrence,
            cooccurrence_ratio: npa::DEFAULT_COOCCURRENCE_RATIO,
            valset,
            lexicon,
        }
    }

    /// Lexicon made of every category named by the validation labels, the
    /// taxonomy and the co-occurrence totals.
    pub fn default_lexicon(
        valset: &[LabeledObject],
        taxonomy: Option<&Taxonomy>,
        cooccurrence: Option<&CooccurrenceStats>,
    ) -> BTreeSet<String> {
        let mut lex: BTreeSet<String> = valset.iter().map(|o| o.label.clone()).collect();
        if let Some(t) = taxonomy {
            lex.extend(t.nodes());
        }
        if let Some(s) = cooccurrence {
            lex.extend(s.categories().map(str::to_string));
        }
        lex
    }

    fn filters(&self) -> ExclusivityFilters<'_> {
        ExclusivityFilters {
            taxonomy: self.taxonomy.as_ref(),
            cooccurrence: self.cooccurrence.as_ref(),
            ratio: self.cooccurrence_ratio,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GeneratorParams,
    /// Total loss of each iteration's minibatch, before its update.
    pub losses: Vec<f64>,
    /// Augmented rows added to each iteration's minibatch.
    pub npa_rows: Vec<usize>,
    /// Iterations after which the confusion table was rebuilt.
    pub confusion_rebuilds: Vec<usize>,
    pub confusion: Option<ConfusionTable>,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

fn head_counts<'a>(
    images: impl Iterator<Item = &'a AnnotatedImage>,
    lexicon: &BTreeSet<String>,
) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for image in images {
        for (p, _) in &image.phrases {
            *counts.entry(p.head_noun(lexicon).to_string()).or_default() += 1;
        }
    }
    counts
}

fn frequent(counts: &HashMap<String, usize>, min: usize) -> Vec<String> {
    let mut cats: Vec<String> = counts
        .iter()
        .filter(|(_, n)| **n >= min)
        .map(|(c, _)| c.clone())
        .collect();
    cats.sort();
    cats
}

/// Trains the generator one image per step in a seeded shuffled order.
///
/// With NPA enabled the confusion table is rebuilt after every
/// `confusion_refresh_interval` iterations from the categories seen at
/// least `confusion_min_frequency` times in that window (or in the whole
/// dataset when it is no larger than the window); minibatches are augmented
/// once a table exists.
pub fn train(
    params: &GeneratorParams,
    words: &WordVectorTable,
    dataset: &[AnnotatedImage],
    config: &TrainConfig,
    npa_inputs: Option<&NpaInputs>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let npa_inputs = if config.npa_enabled {
        Some(npa_inputs.ok_or_else(|| {
            Error::InvalidArgument("NPA enabled without taxonomy/co-occurrence/validation inputs".into())
        })?)
    } else {
        None
    };
    let interval = config.confusion_refresh_interval.max(1);

    // Embeddings of the annotated phrases never change.
    let embedded: Vec<Vec<PhraseEmbedding>> = dataset
        .iter()
        .map(|img| {
            img.phrases
                .iter()
                .map(|(p, _)| embed_phrase(words, p))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let labels: Vec<LabelMatrix> = dataset.iter().map(assign_labels).collect();
    let whole_dataset_counts = npa_inputs
        .filter(|_| dataset.len() <= interval)
        .map(|n| head_counts(dataset.iter(), &n.lexicon));

    let mut params = params.clone();
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut window: HashMap<String, usize> = HashMap::new();
    let mut table: Option<ConfusionTable> = None;
    let mut outcome = TrainOutcome {
        params: params.clone(),
        losses: Vec::with_capacity(config.iterations),
        npa_rows: Vec::with_capacity(config.iterations),
        confusion_rebuilds: Vec::new(),
        confusion: None,
    };

    for it in 1..=config.iterations {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let image = &dataset[idx];

        let (loss, grad, added) = match (npa_inputs, table.as_ref()) {
            (Some(inputs), Some(table)) => {
                let mut rng = iteration_rng(config.seed, it);
                let (phrases, ext) = npa::augment_minibatch(
                    image,
                    &labels[idx],
                    table,
                    &inputs.lexicon,
                    config.npa_negatives_per_phrase,
                    &mut rng,
                );
                let (rows, embs) = embed_augmented(words, &phrases, &ext, &embedded[idx]);
                let added = rows.rows() - rows.original_rows();
                let (loss, grad) = minibatch_loss(&params, image, &embs, &rows, &config.loss)?;
                (loss, grad, added)
            }
            _ => {
                let (loss, grad) =
                    minibatch_loss(&params, image, &embedded[idx], &labels[idx], &config.loss)?;
                (loss, grad, 0)
            }
        };
        adam.update(&mut params, &grad);
        outcome.losses.push(loss.total);
        outcome.npa_rows.push(added);

        if let Some(inputs) = npa_inputs {
            if whole_dataset_counts.is_none() {
                for (p, _) in &image.phrases {
                    *window.entry(p.head_noun(&inputs.lexicon).to_string()).or_default() += 1;
                }
            }
            if it % interval == 0 {
                let counts = whole_dataset_counts.as_ref().unwrap_or(&window);
                let categories = frequent(counts, config.confusion_min_frequency);
                let built = npa::build_confusion_table(
                    &params,
                    words,
                    &inputs.valset,
                    &inputs.filters(),
                    &categories,
                    config.npa_top_k,
                );
                info!(
                    "iteration {it}: rebuilt confusion table ({} of {} categories have entries)",
                    built.len(),
                    categories.len()
                );
                table = Some(built);
                window.clear();
                outcome.confusion_rebuilds.push(it);
            }
        }
        if it % 1000 == 0 {
            debug!("iteration {it}: loss {:.5}", loss.total);
        }
    }
    outcome.params = params;
    outcome.confusion = table;
    Ok(outcome)
}

/// Embeds augmented rows, dropping any whose phrase has no in-vocabulary
/// token.
fn embed_augmented(
    words: &WordVectorTable,
    phrases: &[Phrase],
    labels: &LabelMatrix,
    original: &[PhraseEmbedding],
) -> (LabelMatrix, Vec<PhraseEmbedding>) {
    let n_orig = labels.original_rows();
    let mut embs = original.to_vec();
    let mut out = LabelMatrix {
        n_regions: labels.n_regions(),
        original_rows: n_orig,
        cells: labels.cells[..n_orig].to_vec(),
    };
    for r in n_orig..labels.rows() {
        if let Ok(e) = embed_phrase(words, &phrases[r]) {
            embs.push(e);
            out.cells.push(labels.cells[r].clone());
        }
    }
    (out, embs)
}

/// Groups region features and phrase annotations into training images.
/// Images lacking either regions or phrases are dropped.
pub fn assemble_images(
    regions: Vec<RegionFeature>,
    annotations: &[crate::store::Annotation],
) -> Result<Vec<AnnotatedImage>> {
    let mut by_image: BTreeMap<u64, (Vec<RegionFeature>, Vec<(Phrase, BBox)>)> = BTreeMap::new();
    for r in regions {
        by_image.entry(r.image_id).or_default().0.push(r);
    }
    for a in annotations {
        if let Some(entry) = by_image.get_mut(&a.image_id) {
            entry.1.push((Phrase::new(&a.phrase)?, a.bbox));
        }
    }
    by_image
        .into_iter()
        .filter(|(_, (r, p))| !r.is_empty() && !p.is_empty())
        .map(|(id, (r, p))| AnnotatedImage::new(id, r, p))
        .collect()
}
