//! Acceptance criteria, run serially so that timings are not skewed by
//! concurrent work. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use qarcnn::detector::{apply_deltas, generate_detector, regression_targets};
use qarcnn::eval::{self, iou, localization_accuracy, EvalReport, GroundTruth, RankedRegion};
use qarcnn::fixtures::{SyntheticWorldSpec, World};
use qarcnn::ivfadc::{search_exact, IndexParams, PostingMeta};
use qarcnn::npa::{self, Candidate, ConfusionTable};
use qarcnn::retrieval::{self, SearchMode};
use qarcnn::store;
use qarcnn::training::{self, assign_labels, minibatch_loss, LossConfig, NpaInputs};
use qarcnn::{
    AnnotatedImage, BBox, CooccurrenceStats, GeneratorParams, IvfadcIndex, Phrase, PhraseEmbedding, RegionFeature,
    Taxonomy, TrainConfig,
};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

/// Runs a criterion and checks its runtime budget.
fn run(name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(o) => (o.ok && elapsed < budget, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "{} {name} ({:.2}s of {:.0}s budget): {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    ok
}

// ---------------------------------------------------------------------------
// Gradient correctness

fn random_gradient_instance(
    rng: &mut ChaCha8Rng,
    eps: f64,
) -> (GeneratorParams, AnnotatedImage, Vec<PhraseEmbedding>, qarcnn::LabelMatrix) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let dim = rng.random_range(3..=8);
        let feat = rng.random_range(4..=16);
        let hidden = rng.random_range(2..=4);
        let mut params = GeneratorParams::random(dim, feat, hidden, rng);
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|x| *x = normal.sample(rng) * 0.3);
        }
        let n_phrases = rng.random_range(1..=3);
        let n_regions = rng.random_range(3..=6);
        let gts: Vec<BBox> = (0..n_phrases)
            .map(|i| {
                let x = 100.0 * i as f64;
                BBox::new(x, 0.0, x + 40.0, 50.0).unwrap()
            })
            .collect();
        let regions: Vec<RegionFeature> = (0..n_regions)
            .map(|r| {
                // Half the regions are jittered copies of a gt box.
                let bbox = if r % 2 == 0 {
                    let g = gts[(r / 2) % n_phrases];
                    BBox::from_center(
                        g.cx() + rng.random_range(-4.0..4.0),
                        g.cy() + rng.random_range(-4.0..4.0),
                        g.width() * rng.random_range(0.9..1.1),
                        g.height() * rng.random_range(0.9..1.1),
                    )
                } else {
                    BBox::new(1000.0 + r as f64, 1000.0, 1030.0 + r as f64, 1040.0).unwrap()
                };
                RegionFeature {
                    image_id: 1,
                    region_id: r as u32,
                    bbox,
                    feature: (0..feat).map(|_| normal.sample(rng) as f32).collect(),
                }
            })
            .collect();
        let names = ["dog", "cat", "horse"];
        let phrases = gts
            .iter()
            .enumerate()
            .map(|(i, g)| (Phrase::new(names[i]).unwrap(), *g))
            .collect();
        let image = AnnotatedImage::new(1, regions, phrases).unwrap();
        let labels = assign_labels(&image);
        // Augment with a negative row so IGNORE cells take part.
        let mut table = ConfusionTable::new();
        for n in names {
            table.insert(n, [("zebra".to_string(), 1.0)]);
        }
        let lexicon: BTreeSet<String> = names.iter().map(|s| s.to_string()).collect();
        let (_, labels) = npa::augment_minibatch(&image, &labels, &table, &lexicon, 1, rng);
        let embs: Vec<PhraseEmbedding> = (0..labels.rows())
            .map(|_| PhraseEmbedding((0..dim).map(|_| normal.sample(rng)).collect()))
            .collect();

        // Finite differences are meaningless across a kink; resample if any
        // rectifier input or smooth-L1 residual sits within reach of one.
        let margin = 1e3 * eps;
        let near_kink = embs.iter().enumerate().any(|(c, v)| {
            let pre = params.h1.matvec(&v.0);
            if pre.iter().zip(&params.b1).any(|(p, b)| (p + b).abs() < margin) {
                return true;
            }
            if c >= labels.original_rows() {
                return false;
            }
            let det = generate_detector(&params, v).unwrap();
            image.regions.iter().enumerate().any(|(r, reg)| {
                labels.row(c)[r] == qarcnn::Label::Pos && {
                    let t = regression_targets(&reg.bbox, &image.phrases[c].1).0;
                    let d = det.regress(&reg.feature).0;
                    (0..4).any(|k| ((d[k] - t[k]).abs() - 1.0).abs() < margin)
                }
            })
        });
        if !near_kink && labels.count(qarcnn::Label::Ignore) > 0 {
            return (params, image, embs, labels);
        }
    }
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfg = LossConfig::default();
    let eps = 1e-5;
    let instances = 25;
    let mut worst = 0f64;
    for _ in 0..instances {
        let (params, image, embs, labels) = random_gradient_instance(&mut rng, eps);
        let (_, grad) = minibatch_loss(&params, &image, &embs, &labels, &cfg).unwrap();
        for (t, g) in grad.tensors().iter().enumerate() {
            for i in 0..g.len() {
                let mut plus = params.clone();
                plus.tensors_mut()[t][i] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[t][i] -= eps;
                let lp = minibatch_loss(&plus, &image, &embs, &labels, &cfg).unwrap().0.total;
                let lm = minibatch_loss(&minus, &image, &embs, &labels, &cfg).unwrap().0.total;
                let fd = (lp - lm) / (2.0 * eps);
                // Relative error, with a floor on the scale so that entries
                // that are zero up to rounding compare absolutely.
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    outcome(worst < 1e-5, format!("{instances} instances, max relative error {worst:.2e} (< 1e-5)"))
}

// ---------------------------------------------------------------------------
// Regression round trip

fn regression_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let random_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(-500.0..500.0);
        let y = rng.random_range(-500.0..500.0);
        BBox::new(x, y, x + rng.random_range(1.0..400.0), y + rng.random_range(1.0..400.0)).unwrap()
    };
    let mut worst = 0f64;
    for _ in 0..1000 {
        let p = random_box(&mut rng);
        let g = random_box(&mut rng);
        let back = apply_deltas(&p, &regression_targets(&p, &g));
        for (a, b) in back.to_array().iter().zip(g.to_array()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    outcome(worst < 1e-6, format!("1000 pairs, max relative coordinate error {worst:.2e} (< 1e-6)"))
}

// ---------------------------------------------------------------------------
// IVFADC reconstruction oracle

/// Clustered vectors, flattened: Gaussian cluster centers with spread
/// confined to a shared rank-8 subspace, loosely like pooled CNN features.
fn mixture(n: usize, dim: usize, clusters: usize, seed: u64) -> Vec<f32> {
    let rank = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let centers: Vec<Vec<f32>> = (0..clusters)
        .map(|_| (0..dim).map(|_| 3.0 * normal.sample(&mut rng)).collect())
        .collect();
    let basis: Vec<Vec<f32>> = (0..rank)
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng) * 2.0 / (rank as f32).sqrt()).collect())
        .collect();
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = &centers[rng.random_range(0..clusters)];
        let z: Vec<f32> = (0..rank).map(|_| normal.sample(&mut rng)).collect();
        out.extend((0..dim).map(|d| c[d] + z.iter().zip(&basis).map(|(z, b)| z * b[d]).sum::<f32>()));
    }
    out
}

fn ivfadc_oracle() -> Outcome {
    let (n, dim) = (10_000, 64);
    let data = mixture(n, dim, 64, 3);
    let features: Vec<RegionFeature> = data
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, f)| RegionFeature {
            image_id: (i / 10) as u64,
            region_id: (i % 10) as u32,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            feature: f.to_vec(),
        })
        .collect();
    let index = IvfadcIndex::build(&features, &IndexParams::new(16, 8, 16, 7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let queries: Vec<Vec<f64>> = (0..100).map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect()).collect();

    let mut mismatches = 0;
    for w in &queries {
        let hits = index.search(w, 100, 16).unwrap();
        let mut oracle: Vec<(f64, u64, u32)> = Vec::with_capacity(n);
        for (l, list) in index.lists.iter().enumerate() {
            for (o, &(img, reg)) in list.ids.iter().enumerate() {
                let f = index.reconstruct(l, o);
                oracle.push((f.iter().zip(w).map(|(a, b)| a * b).sum(), img, reg));
            }
        }
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let got: Vec<(u64, u32)> = hits.iter().map(|h| (h.image_id, h.region_id)).collect();
        let want: Vec<(u64, u32)> = oracle[..100].iter().map(|o| (o.1, o.2)).collect();
        if got != want {
            mismatches += 1;
        }
    }

    let nprobes = [1, 2, 4, 8, 16];
    let recalls: Vec<f64> = nprobes
        .iter()
        .map(|&np| {
            let total: f64 = queries
                .iter()
                .map(|w| {
                    let exact: BTreeSet<(u64, u32)> =
                        search_exact(&features, w, 10).iter().map(|h| (h.image_id, h.region_id)).collect();
                    let approx = index.search(w, 10, np).unwrap();
                    approx.iter().filter(|h| exact.contains(&(h.image_id, h.region_id))).count() as f64 / 10.0
                })
                .sum();
            total / queries.len() as f64
        })
        .collect();
    let monotone = recalls.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        mismatches == 0 && monotone,
        format!(
            "top-100 ranking mismatches {mismatches}/{}; recall@10 by nprobe {:?} = {:?}",
            queries.len(),
            nprobes,
            recalls.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------
// Synthetic-world experiments

const WORLD_SEEDS: [u64; 3] = [0, 1, 2];

fn experiment_config(seed: u64, npa_enabled: bool) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        iterations: 40_000,
        seed,
        npa_enabled,
        confusion_refresh_interval: 2_000,
        confusion_min_frequency: 50,
        ..TrainConfig::default()
    }
}

struct SeedResult {
    seed: u64,
    map_baseline: f64,
    map_npa: f64,
    /// Same-supercluster false positives in each query's top 100.
    fp_baseline: Vec<usize>,
    fp_npa: Vec<usize>,
    /// Categories whose heaviest confusion-table negative shares their
    /// supercluster.
    confusion_same_supercluster: usize,
    categories: usize,
    loc_regressed: EvalReport,
    loc_proposal: EvalReport,
    baseline_time: Duration,
}

fn same_supercluster_fps(world: &World, params: &GeneratorParams) -> Vec<usize> {
    let mode = SearchMode::Exact {
        features: &world.test.regions,
    };
    world
        .categories
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            retrieval::retrieve(mode, params, &world.words, q, 100)
                .unwrap()
                .iter()
                .filter(|r| {
                    world
                        .test_region_category(r.image_id, &r.proposal_box)
                        .is_some_and(|c| c != qi && world.supercluster_of[c] == world.supercluster_of[qi])
                })
                .count()
        })
        .collect()
}

fn without_regressor(params: &GeneratorParams) -> GeneratorParams {
    let mut p = params.clone();
    p.h2.iter_mut().for_each(|h| h.data.iter_mut().for_each(|x| *x = 0.0));
    p.b2.iter_mut().for_each(|b| b.iter_mut().for_each(|x| *x = 0.0));
    p
}

fn run_world(seed: u64) -> SeedResult {
    let start = Instant::now();
    let spec = SyntheticWorldSpec {
        seed,
        ..SyntheticWorldSpec::default()
    };
    let world = World::generate(&spec).unwrap();
    let images = world.training_images().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = GeneratorParams::random(spec.embed_dim, spec.feature_dim, 16, &mut rng);
    let mode = SearchMode::Exact {
        features: &world.test.regions,
    };
    let evaluate = |p: &GeneratorParams| {
        retrieval::evaluate(mode, p, &world.words, &world.test.annotations, &world.categories, 0.5).unwrap()
    };

    let baseline = training::train(&init, &world.words, &images, &experiment_config(seed, false), None).unwrap();
    let baseline_report = evaluate(&baseline.params);
    let loc_proposal = evaluate(&without_regressor(&baseline.params));
    let baseline_time = start.elapsed();

    let inputs = NpaInputs::new(
        Some(world.taxonomy.clone()),
        Some(world.cooccurrence.clone()),
        world.valset().unwrap(),
        world.lexicon(),
    );
    let npa = training::train(&init, &world.words, &images, &experiment_config(seed, true), Some(&inputs)).unwrap();
    let npa_report = evaluate(&npa.params);
    let table = npa.confusion.as_ref().expect("NPA run builds a table");
    let confusion_same_supercluster = world
        .categories
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            table
                .get(c)
                .and_then(|negs| negs.first())
                .and_then(|(n, _)| world.category_index(n))
                .is_some_and(|j| world.supercluster_of[j] == world.supercluster_of[*i])
        })
        .count();

    SeedResult {
        seed,
        map_baseline: baseline_report.map.unwrap(),
        map_npa: npa_report.map.unwrap(),
        fp_baseline: same_supercluster_fps(&world, &baseline.params),
        fp_npa: same_supercluster_fps(&world, &npa.params),
        confusion_same_supercluster,
        categories: world.categories.len(),
        loc_regressed: baseline_report,
        loc_proposal,
        baseline_time,
    }
}

fn npa_map(results: &[SeedResult]) -> Outcome {
    let ok = results.iter().all(|r| r.map_npa > r.map_baseline);
    let detail = results
        .iter()
        .map(|r| {
            format!(
                "seed {}: mAP {:.4} -> {:.4} ({:+.1}%)",
                r.seed,
                r.map_baseline,
                r.map_npa,
                100.0 * (r.map_npa / r.map_baseline - 1.0)
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(ok, detail)
}

fn npa_confusions(results: &[SeedResult]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in results {
        let decreased = r.fp_baseline.iter().zip(&r.fp_npa).filter(|(b, n)| n < b).count();
        let fraction = decreased as f64 / r.fp_baseline.len() as f64;
        ok &= fraction >= 0.8;
        parts.push(format!(
            "seed {}: {decreased}/{} queries decreased ({} -> {} total)",
            r.seed,
            r.fp_baseline.len(),
            r.fp_baseline.iter().sum::<usize>(),
            r.fp_npa.iter().sum::<usize>()
        ));
    }
    outcome(ok, parts.join("; "))
}

fn confusion_targets(results: &[SeedResult]) -> Outcome {
    let ok = results
        .iter()
        .all(|r| r.confusion_same_supercluster as f64 >= 0.8 * r.categories as f64);
    outcome(
        ok,
        results
            .iter()
            .map(|r| format!("seed {}: {}/{}", r.seed, r.confusion_same_supercluster, r.categories))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

fn regressor_gain(results: &[SeedResult]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in results {
        let acc = |rep: &EvalReport, t: &str| rep.localization_accuracy[t];
        let (reg8, raw8) = (acc(&r.loc_regressed, "0.8"), acc(&r.loc_proposal, "0.8"));
        let (reg5, raw5) = (acc(&r.loc_regressed, "0.5"), acc(&r.loc_proposal, "0.5"));
        ok &= reg8 > raw8 && (reg5 - raw5).abs() * 100.0 < 5.0;
        parts.push(format!(
            "seed {}: acc@0.8 {:.3} vs {:.3} unregressed, acc@0.5 {:.3} vs {:.3}",
            r.seed, reg8, raw8, reg5, raw5
        ));
    }
    outcome(ok, parts.join("; "))
}

// ---------------------------------------------------------------------------
// Table arithmetic and metrics

fn npa_arithmetic() -> Outcome {
    let candidates = [
        Candidate {
            label: "a".into(),
            rank: 1,
        },
        Candidate {
            label: "b".into(),
            rank: 2,
        },
        Candidate {
            label: "a".into(),
            rank: 3,
        },
    ];
    let weights = npa::rank_weights(&candidates, 500);
    let mut table = ConfusionTable::new();
    table.insert("q", weights.into_iter().map(|(n, w)| (n, w as f64)));
    let entries = table.get("q").unwrap();
    let weight = |n: &str| entries.iter().find(|e| e.0 == n).map(|e| e.1).unwrap();
    let (a, b) = (weight("a"), weight("b"));
    let weights_ok = (a - 996.0 / 1494.0).abs() < 1e-9 && (b - 498.0 / 1494.0).abs() < 1e-9;

    let mut cooc = CooccurrenceStats::new();
    cooc.set_total("skier", 1000);
    cooc.set_pair("skier", "man", 20);
    let cooc_ok = !npa::is_mutually_exclusive("skier", "man", None, Some(&cooc), 0.01);

    let tax = Taxonomy::from_edges([("dog", "animal")]).unwrap();
    let tax_ok = !npa::is_mutually_exclusive("dog", "animal", Some(&tax), None, 0.01)
        && !npa::is_mutually_exclusive("animal", "dog", Some(&tax), None, 0.01);
    outcome(
        weights_ok && cooc_ok && tax_ok,
        format!(
            "weights a={a:.4} b={b:.4}; skier/man exclusive={}; dog/animal exclusive={}",
            !cooc_ok, !tax_ok
        ),
    )
}

fn metric_fixtures() -> Outcome {
    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).unwrap();
    let gt: GroundTruth = [(1, b(0.0, 0.0, 10.0, 10.0)), (3, b(0.0, 0.0, 10.0, 10.0))]
        .into_iter()
        .collect();
    let ranked = [
        RankedRegion {
            image_id: 1,
            region_id: 0,
            bbox: b(0.0, 0.0, 10.0, 10.0),
        },
        RankedRegion {
            image_id: 2,
            region_id: 0,
            bbox: b(0.0, 0.0, 10.0, 10.0),
        },
        RankedRegion {
            image_id: 3,
            region_id: 0,
            bbox: b(0.0, 0.0, 10.0, 10.0),
        },
    ];
    let ap = eval::average_precision(&ranked, &gt, 0.5).unwrap();
    let iou_v = iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 5.0, 15.0, 15.0));

    // Predictions overlapping their gts at IoU 0.6, 0.55 and 0.4: width w
    // out of 10 shares the gt's height, so IoU = w / 10.
    let gts = vec![b(0.0, 0.0, 10.0, 10.0); 3];
    let preds = vec![b(0.0, 0.0, 6.0, 10.0), b(0.0, 0.0, 5.5, 10.0), b(0.0, 0.0, 4.0, 10.0)];
    let loc = localization_accuracy(&preds, &gts, 0.5).unwrap();
    let ok = (ap - 0.8333333333333334).abs() < 1e-9
        && (iou_v - 25.0 / 175.0).abs() < 1e-12
        && (loc - 2.0 / 3.0).abs() < 1e-12;
    outcome(ok, format!("AP {ap:.6}, IoU {iou_v:.6}, localization {loc:.6}"))
}

// ---------------------------------------------------------------------------
// Desk-scale performance

fn desk_scale() -> Outcome {
    let (n, dim) = (1_000_000, 64);
    let data = mixture(n, dim, 256, 9);
    let meta: Vec<PostingMeta> = (0..n)
        .map(|i| PostingMeta {
            image_id: (i / 100) as u64,
            region_id: (i % 100) as u32,
            bbox: [0.0, 0.0, 16.0, 16.0],
        })
        .collect();
    let start = Instant::now();
    let index = IvfadcIndex::build_flat(dim, &meta, &data, &IndexParams::new(1024, 8, 256, 11)).unwrap();
    let build = start.elapsed();
    drop(data);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.qarx");
    store::write_index(&path, &index).unwrap();
    let file_size = std::fs::metadata(&path).unwrap().len();
    let layout = store::index_layout_size(dim, 1024, 8, 256, n);
    let size_ratio = file_size as f64 / layout as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut latencies: Vec<Duration> = (0..20)
        .map(|_| {
            let w: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let t = Instant::now();
            let hits = index.search(&w, 100, 16).unwrap();
            let elapsed = t.elapsed();
            assert_eq!(hits.len(), 100);
            elapsed
        })
        .collect();
    latencies.sort();
    let median = (latencies[9] + latencies[10]) / 2;
    let ok = median < Duration::from_millis(100)
        && build < Duration::from_secs(600)
        && (size_ratio - 1.0).abs() <= 0.1;
    outcome(
        ok,
        format!(
            "build {:.1}s; median query {:.2}ms at nprobe 16; file {file_size} bytes vs layout {layout} ({:.4}x)",
            build.as_secs_f64(),
            median.as_secs_f64() * 1e3,
            size_ratio
        ),
    )
}

// ---------------------------------------------------------------------------
// Determinism

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticWorldSpec {
        images: 150,
        val_images: 60,
        test_images: 60,
        seed: 17,
        ..SyntheticWorldSpec::default()
    };
    let pipeline = |tag: &str, threads: usize| -> Vec<Vec<u8>> {
        in_pool(threads, || {
            let out = dir.path().join(tag);
            let world = World::generate(&spec).unwrap();
            let paths = world.save(&out).unwrap();
            let mut files: Vec<Vec<u8>> = paths.all().iter().map(|p| std::fs::read(p).unwrap()).collect();

            // Train from the written files, as the command line does.
            let regions = store::read_feature_file(&paths.train_features).unwrap();
            let anns = store::read_annotations(&paths.train_annotations).unwrap();
            let images = training::assemble_images(regions, &anns).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let init = GeneratorParams::random(spec.embed_dim, spec.feature_dim, 16, &mut rng);
            let inputs = NpaInputs::new(
                Some(world.taxonomy.clone()),
                Some(world.cooccurrence.clone()),
                world.valset().unwrap(),
                world.lexicon(),
            );
            let config = TrainConfig {
                learning_rate: 1e-3,
                iterations: 600,
                seed: spec.seed,
                npa_enabled: true,
                confusion_refresh_interval: 200,
                confusion_min_frequency: 5,
                ..TrainConfig::default()
            };
            let trained = training::train(&init, &world.words, &images, &config, Some(&inputs)).unwrap();
            store::write_params(out.join("params.qarw"), &trained.params).unwrap();
            files.push(std::fs::read(out.join("params.qarw")).unwrap());

            let index = IvfadcIndex::build(&world.test.regions, &IndexParams::new(8, 4, 16, 3)).unwrap();
            store::write_index(out.join("index.qarx"), &index).unwrap();
            files.push(std::fs::read(out.join("index.qarx")).unwrap());
            files
        })
    };
    let first = pipeline("a", 2);
    let second = pipeline("b", 2);
    let single = pipeline("c", 1);
    let same = first == second;
    outcome(
        same,
        format!(
            "{} output files identical across runs: {same}; identical with one thread: {}",
            first.len(),
            first == single
        ),
    )
}

fn main() {
    let mut all_ok = true;
    let secs = Duration::from_secs;
    all_ok &= run("criterion 1 gradient correctness", secs(10), gradient_correctness);
    all_ok &= run("criterion 2 regression round trip", secs(1), regression_round_trip);
    all_ok &= run("criterion 3 IVFADC reconstruction oracle", secs(30), ivfadc_oracle);

    let start = Instant::now();
    let results: Vec<SeedResult> = WORLD_SEEDS.iter().map(|&s| run_world(s)).collect();
    let world_time = start.elapsed();
    let baseline_time: Duration = results.iter().map(|r| r.baseline_time).sum();
    let results_ref = &results;
    all_ok &= run("criterion 4 NPA improves mAP", secs(600).saturating_sub(world_time), || {
        npa_map(results_ref)
    });
    all_ok &= run("criterion 5 NPA reduces same-supercluster false positives", secs(600).saturating_sub(world_time), || {
        npa_confusions(results_ref)
    });
    all_ok &= run("fixture confusion table targets same-supercluster categories", secs(600).saturating_sub(world_time), || {
        confusion_targets(results_ref)
    });
    all_ok &= run("criterion 6 regressor improves high-IoU localization", secs(300).saturating_sub(baseline_time), || {
        regressor_gain(results_ref)
    });
    println!(
        "     synthetic-world runs took {:.1}s ({:.1}s for the no-NPA runs used by criterion 6)",
        world_time.as_secs_f64(),
        baseline_time.as_secs_f64()
    );

    all_ok &= run("criterion 7 NPA table arithmetic", secs(1), npa_arithmetic);
    all_ok &= run("criterion 8 metric fixtures", secs(1), metric_fixtures);
    all_ok &= run("criterion 9 desk-scale performance", secs(900), desk_scale);
    all_ok &= run("criterion 10 determinism", secs(300), determinism);
    if !all_ok {
        println!("acceptance: some criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
