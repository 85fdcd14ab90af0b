//! Seeded synthetic worlds of confusable categories.
//!
//! Categories are grouped into superclusters. Within a supercluster the
//! categories have nearby feature centers and nearby word vectors but are
//! mutually exclusive, so a classifier trained only against background
//! regions confuses them. Every image holds one object of one category; its
//! single object proposal is the ground-truth box with random jitter, and
//! the proposal's feature carries a linear encoding of the jitter so that a
//! regressor can undo it. The remaining proposals are background clutter.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::detector::{regression_targets, BBox, RegionFeature};
use crate::embedding::WordVectorTable;
use crate::error::{Error, Result};
use crate::eval::{iou, GroundTruth, GroundTruthSet};
use crate::npa::{CooccurrenceStats, LabeledObject, Taxonomy};
use crate::store::{self, Annotation};
use crate::training::AnnotatedImage;

const NAMED_GROUPS: [(&str, [&str; 3]); 5] = [
    ("animal", ["horse", "zebra", "cow"]),
    ("vehicle", ["car", "truck", "bus"]),
    ("board", ["skateboard", "surfboard", "snowboard"]),
    ("seat", ["chair", "sofa", "bench"]),
    ("fruit", ["apple", "orange", "peach"]),
];
const ADJECTIVES: [&str; 6] = ["small", "large", "old", "young", "dark", "bright"];
const ROOT: &str = "entity";
const IMAGE_W: f64 = 640.0;
const IMAGE_H: f64 = 480.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldSpec {
    pub superclusters: usize,
    pub categories_per_supercluster: usize,
    /// Training images.
    pub images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub regions_per_image: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// Norm of each supercluster's feature center and of the background
    /// center.
    pub supercluster_scale: f64,
    /// Distance of a category center from its supercluster center.
    pub intra_supercluster_separation: f64,
    /// Per-coordinate standard deviation of object feature noise.
    pub feature_noise: f64,
    /// Per-coordinate standard deviation of background features around
    /// their shared center.
    pub background_noise: f64,
    /// Gain of the box-geometry encoding carried by object features.
    pub geometry_scale: f64,
    /// Distance of a category word vector from its supercluster word vector.
    pub word_separation: f64,
    /// Maximum relative shift/log-scale jitter of object proposals.
    pub proposal_jitter: f64,
    /// Probability that a phrase carries an adjective.
    pub adjective_rate: f64,
    /// Probability that a validation object is also annotated with its
    /// supercluster name.
    pub generic_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            superclusters: 5,
            categories_per_supercluster: 3,
            images: 900,
            val_images: 300,
            test_images: 1800,
            regions_per_image: 8,
            feature_dim: 32,
            embed_dim: 32,
            supercluster_scale: 6.0,
            intra_supercluster_separation: 1.0,
            feature_noise: 0.3,
            background_noise: 0.6,
            geometry_scale: 8.0,
            word_separation: 0.5,
            proposal_jitter: 0.15,
            adjective_rate: 0.5,
            generic_rate: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("superclusters", self.superclusters),
            ("categories_per_supercluster", self.categories_per_supercluster),
            ("images", self.images),
            ("val_images", self.val_images),
            ("test_images", self.test_images),
            ("regions_per_image", self.regions_per_image),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        let reals = [
            self.supercluster_scale,
            self.intra_supercluster_separation,
            self.feature_noise,
            self.background_noise,
            self.geometry_scale,
            self.word_separation,
            self.proposal_jitter,
            self.adjective_rate,
            self.generic_rate,
        ];
        if reals.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument("scales must be finite and non-negative".into()));
        }
        if self.proposal_jitter >= 0.5 {
            return Err(Error::InvalidArgument("proposal_jitter must be below 0.5".into()));
        }
        if self.adjective_rate > 1.0 || self.generic_rate > 1.0 {
            return Err(Error::InvalidArgument("rates must be at most 1".into()));
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.superclusters * self.categories_per_supercluster
    }
}

/// One data split: region features and phrase annotations.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub regions: Vec<RegionFeature>,
    pub annotations: Vec<Annotation>,
    /// Category of each image, by image id.
    pub image_category: BTreeMap<u64, usize>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: SyntheticWorldSpec,
    /// Category names, grouped by supercluster.
    pub categories: Vec<String>,
    pub supercluster_of: Vec<usize>,
    pub supercluster_names: Vec<String>,
    pub words: WordVectorTable,
    pub taxonomy: Taxonomy,
    pub cooccurrence: CooccurrenceStats,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn add_scaled(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

/// Boxes are stored in single precision; snapping keeps in-memory worlds
/// identical to what a reader gets back.
fn snapped(b: BBox) -> BBox {
    BBox::from_array(b.to_array().map(|v| v as f32 as f64)).expect("snapping keeps a box valid")
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(80.0..300.0);
    let h = rng.random_range(80.0..300.0);
    let x = rng.random_range(0.0..IMAGE_W - w);
    let y = rng.random_range(0.0..IMAGE_H - h);
    snapped(BBox::new(x, y, x + w, y + h).expect("positive size"))
}

fn jittered(gt: &BBox, jitter: f64, rng: &mut impl Rng) -> BBox {
    if jitter == 0.0 {
        return *gt;
    }
    loop {
        let mut u = || rng.random_range(-jitter..jitter);
        let (dx, dy, dw, dh) = (u(), u(), u(), u());
        let b = snapped(BBox::from_center(
            gt.cx() + dx * gt.width(),
            gt.cy() + dy * gt.height(),
            gt.width() * dw.exp(),
            gt.height() * dh.exp(),
        ));
        if iou(&b, gt) > 0.55 {
            return b;
        }
    }
}

impl World {
    pub fn generate(spec: &SyntheticWorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (n_sc, n_per) = (spec.superclusters, spec.categories_per_supercluster);
        let named = n_sc <= NAMED_GROUPS.len() && n_per <= 3;
        let mut categories = Vec::new();
        let mut supercluster_of = Vec::new();
        let mut supercluster_names = Vec::new();
        for s in 0..n_sc {
            supercluster_names.push(if named {
                NAMED_GROUPS[s].0.to_string()
            } else {
                format!("group{s}")
            });
            for c in 0..n_per {
                categories.push(if named {
                    NAMED_GROUPS[s].1[c].to_string()
                } else {
                    format!("object{s}x{c}")
                });
                supercluster_of.push(s);
            }
        }

        // Feature-space geometry.
        let fd = spec.feature_dim;
        let sc_centers: Vec<Vec<f64>> = (0..n_sc)
            .map(|_| unit_vector(fd, &mut rng).iter().map(|x| x * spec.supercluster_scale).collect())
            .collect();
        let cat_centers: Vec<Vec<f64>> = supercluster_of
            .iter()
            .map(|&s| add_scaled(&sc_centers[s], &unit_vector(fd, &mut rng), spec.intra_supercluster_separation))
            .collect();
        let background: Vec<f64> = unit_vector(fd, &mut rng)
            .iter()
            .map(|x| x * spec.supercluster_scale)
            .collect();
        let geometry: Vec<Vec<f64>> = (0..4)
            .map(|_| unit_vector(fd, &mut rng).iter().map(|x| x * spec.geometry_scale).collect())
            .collect();

        // Word vectors.
        let ed = spec.embed_dim;
        let mut words = WordVectorTable::new(ed);
        let sc_words: Vec<Vec<f64>> = (0..n_sc).map(|_| unit_vector(ed, &mut rng)).collect();
        for (c, name) in categories.iter().enumerate() {
            let v = add_scaled(&sc_words[supercluster_of[c]], &unit_vector(ed, &mut rng), spec.word_separation);
            words.insert(name, v)?;
        }
        for (s, name) in supercluster_names.iter().enumerate() {
            words.insert(name, add_scaled(&sc_words[s], &unit_vector(ed, &mut rng), 0.1))?;
        }
        for adj in ADJECTIVES {
            words.insert(adj, unit_vector(ed, &mut rng).iter().map(|x| x * 0.3).collect())?;
        }
        words.insert(ROOT, unit_vector(ed, &mut rng))?;

        let taxonomy = Taxonomy::from_edges(
            categories
                .iter()
                .zip(&supercluster_of)
                .map(|(c, &s)| (c.clone(), supercluster_names[s].clone()))
                .chain(supercluster_names.iter().map(|s| (s.clone(), ROOT.to_string()))),
        )?;

        let mut world = Self {
            spec: spec.clone(),
            categories,
            supercluster_of,
            supercluster_names,
            words,
            taxonomy,
            cooccurrence: CooccurrenceStats::new(),
            train: Split::default(),
            val: Split::default(),
            test: Split::default(),
        };
        let ctx = GenContext {
            cat_centers: &cat_centers,
            background: &background,
            geometry: &geometry,
        };
        let mut next_image = 0u64;
        world.train = world.split(&ctx, spec.images, &mut next_image, false, &mut rng);
        world.val = world.split(&ctx, spec.val_images, &mut next_image, true, &mut rng);
        world.test = world.split(&ctx, spec.test_images, &mut next_image, false, &mut rng);
        world.cooccurrence = world.count_cooccurrence();
        Ok(world)
    }

    fn split(
        &self,
        ctx: &GenContext<'_>,
        n_images: usize,
        next_image: &mut u64,
        generic_labels: bool,
        rng: &mut ChaCha8Rng,
    ) -> Split {
        let spec = &self.spec;
        let obj_noise = Normal::new(0.0, spec.feature_noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let bg_noise = Normal::new(0.0, spec.background_noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let n_cat = self.categories.len();
        let mut split = Split::default();
        for i in 0..n_images {
            let image_id = *next_image;
            *next_image += 1;
            // Balanced categories, cycled in order.
            let cat = i % n_cat;
            split.image_category.insert(image_id, cat);
            let gt = random_box(rng);
            let proposal = jittered(&gt, spec.proposal_jitter, rng);
            let t = regression_targets(&proposal, &gt).0;
            let object_slot = rng.random_range(0..spec.regions_per_image);
            for slot in 0..spec.regions_per_image {
                let (bbox, feature): (BBox, Vec<f32>) = if slot == object_slot {
                    let f = (0..spec.feature_dim)
                        .map(|d| {
                            let geo: f64 = (0..4).map(|k| ctx.geometry[k][d] * t[k]).sum();
                            let noise = if spec.feature_noise > 0.0 { obj_noise.sample(rng) } else { 0.0 };
                            (ctx.cat_centers[cat][d] + geo + noise) as f32
                        })
                        .collect();
                    (proposal, f)
                } else {
                    let b = loop {
                        let b = random_box(rng);
                        if iou(&b, &gt) < 0.3 {
                            break b;
                        }
                    };
                    let f = ctx
                        .background
                        .iter()
                        .map(|&c| {
                            let noise = if spec.background_noise > 0.0 { bg_noise.sample(rng) } else { 0.0 };
                            (c + noise) as f32
                        })
                        .collect();
                    (b, f)
                };
                split.regions.push(RegionFeature {
                    image_id,
                    region_id: slot as u32,
                    bbox,
                    feature,
                });
            }
            let name = &self.categories[cat];
            let phrase = if rng.random_bool(spec.adjective_rate) {
                format!("{} {name}", ADJECTIVES[rng.random_range(0..ADJECTIVES.len())])
            } else {
                name.clone()
            };
            split.annotations.push(Annotation {
                image_id,
                phrase,
                bbox: gt,
            });
            if generic_labels && rng.random_bool(spec.generic_rate) {
                split.annotations.push(Annotation {
                    image_id,
                    phrase: self.supercluster_names[self.supercluster_of[cat]].clone(),
                    bbox: gt,
                });
            }
        }
        split
    }

    /// Object totals and same-box co-annotation counts over the validation
    /// split.
    fn count_cooccurrence(&self) -> CooccurrenceStats {
        let lex = self.lexicon();
        let mut stats = CooccurrenceStats::new();
        for name in lex.iter() {
            stats.set_total(name, 0);
        }
        let mut per_object: BTreeMap<(u64, [u64; 4]), BTreeSet<String>> = BTreeMap::new();
        for a in &self.val.annotations {
            let key = (a.image_id, a.bbox.to_array().map(f64::to_bits));
            let head = crate::embedding::Phrase::new(&a.phrase)
                .map(|p| p.head_noun(&lex).to_string())
                .unwrap_or_default();
            per_object.entry(key).or_default().insert(head);
        }
        for labels in per_object.values() {
            let labels: Vec<&String> = labels.iter().collect();
            for (i, a) in labels.iter().enumerate() {
                stats.add_total(a, 1);
                for b in &labels[i + 1..] {
                    stats.add_pair(a, b, 1);
                }
            }
        }
        stats
    }

    /// Category, supercluster and root names.
    pub fn lexicon(&self) -> BTreeSet<String> {
        self.categories
            .iter()
            .chain(&self.supercluster_names)
            .cloned()
            .chain(std::iter::once(ROOT.to_string()))
            .collect()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn training_images(&self) -> Result<Vec<AnnotatedImage>> {
        crate::training::assemble_images(self.train.regions.clone(), &self.train.annotations)
    }

    pub fn test_images(&self) -> Result<Vec<AnnotatedImage>> {
        crate::training::assemble_images(self.test.regions.clone(), &self.test.annotations)
    }

    pub fn valset(&self) -> Result<Vec<LabeledObject>> {
        crate::npa::labeled_objects(&self.val.regions, &self.val.annotations, &self.lexicon())
    }

    /// Test-split positives per category.
    pub fn test_ground_truth(&self) -> GroundTruthSet {
        let lex = self.lexicon();
        let mut set: GroundTruthSet = self
            .categories
            .iter()
            .map(|c| (c.clone(), GroundTruth::new()))
            .collect();
        for a in &self.test.annotations {
            if let Ok(p) = crate::embedding::Phrase::new(&a.phrase) {
                if let Some(gt) = set.get_mut(p.head_noun(&lex)) {
                    gt.insert(a.image_id, a.bbox);
                }
            }
        }
        set
    }

    /// Category of the object a test region covers (IoU ≥ 0.5 with its
    /// image's ground-truth box), or `None` for background.
    pub fn test_region_category(&self, image_id: u64, bbox: &BBox) -> Option<usize> {
        let cat = *self.test.image_category.get(&image_id)?;
        let gt = self
            .test
            .annotations
            .iter()
            .find(|a| a.image_id == image_id)?;
        (iou(bbox, &gt.bbox) >= 0.5).then_some(cat)
    }

    /// Writes every artifact into `dir` and returns the file paths.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<FixturePaths> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = FixturePaths::in_dir(dir);
        let fd = self.spec.feature_dim;
        store::write_feature_file(&paths.train_features, fd, &self.train.regions)?;
        store::write_annotations(&paths.train_annotations, &self.train.annotations)?;
        store::write_feature_file(&paths.val_features, fd, &self.val.regions)?;
        store::write_annotations(&paths.val_annotations, &self.val.annotations)?;
        store::write_feature_file(&paths.test_features, fd, &self.test.regions)?;
        store::write_annotations(&paths.test_annotations, &self.test.annotations)?;
        self.words.save(&paths.word_vectors)?;
        self.taxonomy.save(&paths.taxonomy)?;
        self.cooccurrence.save(&paths.cooc_totals, &paths.cooc_pairs)?;
        store::write_queries(&paths.queries, &self.categories)?;
        Ok(paths)
    }
}

struct GenContext<'a> {
    cat_centers: &'a [Vec<f64>],
    background: &'a [f64],
    geometry: &'a [Vec<f64>],
}

/// File names written by [`World::save`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub train_features: std::path::PathBuf,
    pub train_annotations: std::path::PathBuf,
    pub val_features: std::path::PathBuf,
    pub val_annotations: std::path::PathBuf,
    pub test_features: std::path::PathBuf,
    pub test_annotations: std::path::PathBuf,
    pub word_vectors: std::path::PathBuf,
    pub taxonomy: std::path::PathBuf,
    pub cooc_totals: std::path::PathBuf,
    pub cooc_pairs: std::path::PathBuf,
    pub queries: std::path::PathBuf,
}

impl FixturePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_features: dir.join("train_features.qarf"),
            train_annotations: dir.join("train_annotations.jsonl"),
            val_features: dir.join("val_features.qarf"),
            val_annotations: dir.join("val_annotations.jsonl"),
            test_features: dir.join("test_features.qarf"),
            test_annotations: dir.join("test_annotations.jsonl"),
            word_vectors: dir.join("word_vectors.txt"),
            taxonomy: dir.join("taxonomy.tsv"),
            cooc_totals: dir.join("cooc_totals.tsv"),
            cooc_pairs: dir.join("cooc_pairs.tsv"),
            queries: dir.join("queries.txt"),
        }
    }

    pub fn all(&self) -> [&Path; 11] {
        [
            &self.train_features,
            &self.train_annotations,
            &self.val_features,
            &self.val_annotations,
            &self.test_features,
            &self.test_annotations,
            &self.word_vectors,
            &self.taxonomy,
            &self.cooc_totals,
            &self.cooc_pairs,
            &self.queries,
        ]
    }
}
