use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qarcnn::fixtures::{SyntheticWorldSpec, World};
use qarcnn::ivfadc::IndexParams;
use qarcnn::npa::{self, ExclusivityFilters};
use qarcnn::retrieval::{self, SearchMode};
use qarcnn::store;
use qarcnn::training::{self, NpaInputs};
use qarcnn::{CooccurrenceStats, GeneratorParams, IvfadcIndex, Taxonomy, TrainConfig, WordVectorTable};

/// Thread count for parallel work; unset means all cores.
const THREADS_VAR: &str = "QAR_THREADS";

#[derive(Parser)]
#[command(name = "qarcnn", version, about = "Text-query region detection and retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world of confusable categories.
    GenFixtures(GenFixtures),
    /// Train the detector generator.
    Train(Train),
    /// Build a confusion table from trained parameters.
    BuildConfusion(BuildConfusion),
    /// Build an IVFADC index over region features.
    BuildIndex(BuildIndex),
    /// Run one text query and print JSON-lines results.
    Query(Query),
    /// Evaluate retrieval and localization over annotated queries.
    Eval(Eval),
}

#[derive(Args)]
struct GenFixtures {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    superclusters: usize,
    #[arg(long, default_value_t = 3)]
    categories_per_supercluster: usize,
    #[arg(long, default_value_t = 900)]
    images: usize,
    #[arg(long, default_value_t = 300)]
    val_images: usize,
    #[arg(long, default_value_t = 1800)]
    test_images: usize,
    #[arg(long, default_value_t = 8)]
    regions_per_image: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long)]
    intra_supercluster_separation: Option<f64>,
    #[arg(long)]
    feature_noise: Option<f64>,
    #[arg(long)]
    background_noise: Option<f64>,
    #[arg(long)]
    proposal_jitter: Option<f64>,
}

#[derive(Args)]
struct CoocArgs {
    /// Totals TSV followed by pairs TSV.
    #[arg(long, num_args = 2, value_names = ["TOTALS", "PAIRS"])]
    cooc: Option<Vec<PathBuf>>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

impl CoocArgs {
    fn load(&self) -> anyhow::Result<(Option<Taxonomy>, Option<CooccurrenceStats>)> {
        let tax = self.taxonomy.as_ref().map(Taxonomy::load).transpose()?;
        let cooc = match self.cooc.as_deref() {
            Some([totals, pairs]) => Some(CooccurrenceStats::load(totals, pairs)?),
            _ => None,
        };
        Ok((tax, cooc))
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    word_vectors: PathBuf,
    /// Enable negative phrase augmentation.
    #[arg(long)]
    npa: bool,
    #[command(flatten)]
    exclusivity: CoocArgs,
    #[arg(long)]
    val_features: Option<PathBuf>,
    #[arg(long)]
    val_annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 10_000)]
    refresh_interval: usize,
    #[arg(long, default_value_t = 50)]
    min_frequency: usize,
    #[arg(long, default_value_t = npa::DEFAULT_TOP_K)]
    top_k: usize,
    /// Parameter file to write; the confusion table, if any, goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildConfusion {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    word_vectors: PathBuf,
    #[arg(long)]
    val_features: PathBuf,
    #[arg(long)]
    val_annotations: PathBuf,
    #[command(flatten)]
    exclusivity: CoocArgs,
    #[arg(long, default_value_t = npa::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildIndex {
    #[arg(long)]
    features: PathBuf,
    /// Defaults to √n rounded to a power of two.
    #[arg(long)]
    nlist: Option<usize>,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, default_value_t = 256)]
    ksub: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Query {
    #[arg(long, required_unless_present = "exact")]
    index: Option<PathBuf>,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    word_vectors: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 100)]
    topk: usize,
    #[arg(long, default_value_t = 16)]
    nprobe: usize,
    /// Rank the raw features in this file instead of searching the index.
    #[arg(long)]
    exact: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    index: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    word_vectors: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_VAR}={raw:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn gen_fixtures(args: GenFixtures) -> anyhow::Result<()> {
    let d = SyntheticWorldSpec::default();
    let spec = SyntheticWorldSpec {
        superclusters: args.superclusters,
        categories_per_supercluster: args.categories_per_supercluster,
        images: args.images,
        val_images: args.val_images,
        test_images: args.test_images,
        regions_per_image: args.regions_per_image,
        feature_dim: args.feature_dim,
        embed_dim: args.embed_dim,
        intra_supercluster_separation: args.intra_supercluster_separation.unwrap_or(d.intra_supercluster_separation),
        feature_noise: args.feature_noise.unwrap_or(d.feature_noise),
        background_noise: args.background_noise.unwrap_or(d.background_noise),
        proposal_jitter: args.proposal_jitter.unwrap_or(d.proposal_jitter),
        seed: args.seed,
        ..d
    };
    let world = World::generate(&spec)?;
    world.save(&args.out)?;
    log::info!("wrote {} categories to {}", world.categories.len(), args.out.display());
    Ok(())
}

fn valset(
    features: &Path,
    annotations: &Path,
    tax: Option<&Taxonomy>,
    cooc: Option<&CooccurrenceStats>,
) -> anyhow::Result<(Vec<npa::LabeledObject>, std::collections::BTreeSet<String>)> {
    let regions = store::read_feature_file(features)?;
    let anns = store::read_annotations(annotations)?;
    // The lexicon must be known before labelling, so seed it with the
    // last token of every annotation plus the exclusivity vocabularies.
    let mut lexicon = NpaInputs::default_lexicon(&[], tax, cooc);
    lexicon.extend(
        anns.iter()
            .filter_map(|a| qarcnn::Phrase::new(&a.phrase).ok())
            .filter_map(|p| p.tokens().last().cloned()),
    );
    Ok((npa::labeled_objects(&regions, &anns, &lexicon)?, lexicon))
}

fn confusion_path(params_out: &Path) -> PathBuf {
    params_out.with_extension("confusion.json")
}

fn train(args: Train) -> anyhow::Result<()> {
    let words = WordVectorTable::load(&args.word_vectors)?;
    let regions = store::read_feature_file(&args.features)?;
    let anns = store::read_annotations(&args.annotations)?;
    let dataset = training::assemble_images(regions, &anns)?;
    let Some(feat_dim) = dataset.iter().find_map(|i| i.regions.first()).map(|r| r.feature.len()) else {
        bail!("no annotated image has regions");
    };
    let npa_inputs = if args.npa {
        let (Some(vf), Some(va)) = (&args.val_features, &args.val_annotations) else {
            bail!("--npa needs --val-features and --val-annotations");
        };
        let (tax, cooc) = args.exclusivity.load()?;
        let (objects, lexicon) = valset(vf, va, tax.as_ref(), cooc.as_ref())?;
        Some(NpaInputs::new(tax, cooc, objects, lexicon))
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let init = GeneratorParams::random(words.dim(), feat_dim, args.hidden, &mut rng);
    let config = TrainConfig {
        learning_rate: args.lr,
        iterations: args.iters,
        seed: args.seed,
        npa_enabled: args.npa,
        confusion_refresh_interval: args.refresh_interval,
        confusion_min_frequency: args.min_frequency,
        npa_top_k: args.top_k,
        ..TrainConfig::default()
    };
    let outcome = training::train(&init, &words, &dataset, &config, npa_inputs.as_ref())?;
    store::write_params(&args.out, &outcome.params)?;
    if let Some(table) = &outcome.confusion {
        table.save(confusion_path(&args.out))?;
    }
    if let Some(last) = outcome.losses.last() {
        log::info!("final minibatch loss {last:.6}");
    }
    Ok(())
}

fn build_confusion(args: BuildConfusion) -> anyhow::Result<()> {
    let params = store::read_params(&args.params)?;
    let words = WordVectorTable::load(&args.word_vectors)?;
    let (tax, cooc) = args.exclusivity.load()?;
    let (objects, _) = valset(&args.val_features, &args.val_annotations, tax.as_ref(), cooc.as_ref())?;
    let categories: Vec<String> = objects
        .iter()
        .map(|o| o.label.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let filters = ExclusivityFilters::new(tax.as_ref(), cooc.as_ref());
    let table = npa::build_confusion_table(&params, &words, &objects, &filters, &categories, args.top_k);
    table.save(&args.out)?;
    Ok(())
}

fn build_index(args: BuildIndex) -> anyhow::Result<()> {
    let features = store::read_feature_file(&args.features)?;
    let nlist = args.nlist.unwrap_or_else(|| qarcnn::ivfadc::default_nlist(features.len()));
    let index = IvfadcIndex::build(&features, &IndexParams::new(nlist, args.m, args.ksub, args.seed))?;
    store::write_index(&args.out, &index)?;
    Ok(())
}

fn query(args: Query) -> anyhow::Result<()> {
    let params = store::read_params(&args.params)?;
    let words = WordVectorTable::load(&args.word_vectors)?;
    let results = match (&args.exact, &args.index) {
        (Some(path), _) => {
            let features = store::read_feature_file(path)?;
            retrieval::retrieve(SearchMode::Exact { features: &features }, &params, &words, &args.text, args.topk)?
        }
        (None, Some(path)) => {
            let index = store::read_index(path)?;
            let mode = SearchMode::Approximate {
                index: &index,
                nprobe: args.nprobe.min(index.nlist()),
            };
            retrieval::retrieve(mode, &params, &words, &args.text, args.topk)?
        }
        (None, None) => bail!("one of --index or --exact is required"),
    };
    let records: Vec<_> = results.iter().enumerate().map(|(i, r)| r.to_record(i + 1)).collect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    store::write_results(&mut out, &records)?;
    out.flush()?;
    Ok(())
}

fn eval(args: Eval) -> anyhow::Result<()> {
    let params = store::read_params(&args.params)?;
    let words = WordVectorTable::load(&args.word_vectors)?;
    let annotations = store::read_annotations(&args.annotations)?;
    let queries = store::read_queries(&args.queries)?;
    let report = if let Some(path) = &args.index {
        let index = store::read_index(path)?;
        let mode = SearchMode::Approximate {
            index: &index,
            nprobe: index.nlist(),
        };
        retrieval::evaluate(mode, &params, &words, &annotations, &queries, args.iou)?
    } else {
        let path = args.features.as_ref().expect("clap enforces one source");
        let features = store::read_feature_file(path)?;
        retrieval::evaluate(SearchMode::Exact { features: &features }, &params, &words, &annotations, &queries, args.iou)?
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenFixtures(a) => gen_fixtures(a),
        Command::Train(a) => train(a),
        Command::BuildConfusion(a) => build_confusion(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            // Keep the diagnostic on one line; drop the usage block.
            let rendered = e.to_string();
            let msg: Vec<&str> = rendered
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", msg.join(" "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
