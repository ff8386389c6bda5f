//! The `xmodal` command line: encode, train, embed, retrieve, evaluate,
//! synth and the end-to-end pipeline.
//!
//! Exit codes: 0 success, 1 runtime or metric failure, 2 usage or
//! validation failure.

mod config;
mod manifest;
mod projection;

pub use config::{ConfigError, RunConfig, Source, KNOWN_KEYS};
pub use manifest::{
    load_manifest, manifest_to_text, parse_manifest, ManifestError, ManifestRow, Payload,
    MANIFEST_HEADER,
};
pub use projection::{project_2d, projection_tsv};

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::embedding::{load_embedding_set, save_embedding_set, EmbeddingSet, Modality};
use crate::encoder::{
    encode_description, tokenize, Canvas, EncodeError, EncoderConfig, Vocabulary,
};
use crate::io::write_atomic;
use crate::metrics::{evaluate, parse_ks, render_report, MetricConfig, ReportStyle, Scale};
use crate::model::{
    embed_dataset, load_checkpoint, save_checkpoint, train, EmbedItem, ModelParams,
    TrainAugmentation, TrainItem, TrainLog,
};
use crate::retrieval::{ranked_to_tsv, retrieve};
use crate::synthgen::{generate, score_overlap, SynthContent, SynthDataset};

#[derive(Debug, Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Single-stream cross-modal retrieval toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// key=value run configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated K values, e.g. 1,5,10
    #[arg(long)]
    k: Option<String>,
    /// unit or percent
    #[arg(long)]
    scale: Option<Scale>,
    /// Add pair-excluded λ@K rows
    #[arg(long)]
    exclude_pairs: bool,
    /// i2t, t2i or both
    #[arg(long)]
    direction: Option<String>,
    /// cfg-std, cfg-2 or cfg-3
    #[arg(long)]
    aug: Option<TrainAugmentation>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the text rows of a manifest as PPM canvases
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model on a manifest and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Embed the items of a manifest with a checkpoint
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Rank gallery items for every query of an embedding file
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Print R@K and λ@K for an embedding file
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Write a synthetic dataset (PPM images, vocabulary, manifests)
    Synth {
        #[command(flatten)]
        common: Common,
        /// Fraction of class pairs sharing a concept
        #[arg(long)]
        rho: Option<f64>,
    },
    /// encode, train, embed, retrieve and evaluate in one run
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// synth or manifest
        #[arg(long)]
        source: Option<Source>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn stage(name: &'static str) -> impl Fn(String) -> Failure {
    move |e| Failure::Runtime(format!("stage `{name}` failed: {e}"))
}

type CliResult<T> = Result<T, Failure>;

/// Runs the binary with the process arguments.
pub fn run() -> ExitCode {
    ExitCode::from(run_from(std::env::args_os()))
}

/// Runs with explicit arguments (the first is the program name) and returns the exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            f.code()
        }
    }
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(k) = &common.k {
        cfg.metric.ks = parse_ks(k).map_err(usage)?;
    }
    if let Some(s) = common.scale {
        cfg.metric.scale = s;
    }
    if common.exclude_pairs {
        cfg.metric.exclude_pairs = true;
    }
    if let Some(d) = &common.direction {
        cfg.metric.directions = config::parse_directions(d).map_err(usage)?;
    }
    if let Some(a) = common.aug {
        cfg.train.augmentation = a;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| usage("an output directory is required (--out or `out`)"))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| usage(format!("no {what} given")))
}

fn load_vocab(path: &Option<PathBuf>) -> CliResult<Option<Vocabulary>> {
    path.as_ref()
        .map(|p| Vocabulary::load(p).map_err(usage))
        .transpose()
}

/// Loads image rows and encodes text rows, in manifest order.
fn manifest_canvases(
    rows: &[ManifestRow],
    vocab: Option<&Vocabulary>,
    enc: &EncoderConfig,
) -> CliResult<Vec<Canvas>> {
    if vocab.is_none() && rows.iter().any(|r| r.modality() == Modality::Text) {
        return Err(usage(
            "the manifest has text rows but no vocabulary was given",
        ));
    }
    rows.par_iter()
        .map(|r| match &r.payload {
            Payload::ImagePath(p) => Canvas::load_ppm(p).map_err(usage),
            Payload::Text(t) => {
                let tokens = tokenize(t);
                encode_description(&tokens, vocab.expect("checked above"), enc)
                    .map(|d| d.image)
                    .map_err(|e| Failure::Runtime(format!("item {}: {e}", r.id)))
            }
        })
        .collect()
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Encode {
            common,
            vocab,
            manifest,
        } => cmd_encode(&common, vocab, manifest),
        Command::Train {
            common,
            vocab,
            manifest,
        } => cmd_train(&common, vocab, manifest),
        Command::Embed {
            common,
            checkpoint,
            vocab,
            manifest,
        } => cmd_embed(&common, &checkpoint, vocab, manifest),
        Command::Retrieve { common, embeddings } => cmd_retrieve(&common, &embeddings),
        Command::Evaluate { common, embeddings } => cmd_evaluate(&common, &embeddings),
        Command::Synth { common, rho } => cmd_synth(&common, rho),
        Command::Pipeline { common, source } => cmd_pipeline(&common, source),
    }
}

fn cmd_encode(common: &Common, vocab: Option<PathBuf>, manifest: Option<PathBuf>) -> CliResult<()> {
    let cfg = resolve(common)?;
    let rows = load_manifest(&pick(&manifest, &cfg.train_manifest, "manifest")?).map_err(usage)?;
    let vocab = load_vocab(&Some(pick(&vocab, &cfg.vocab, "vocabulary")?))?.expect("path given");
    cfg.encoder.validate(vocab.dim()).map_err(usage)?;
    let dir = out_dir(&cfg)?;
    let texts: Vec<(&ManifestRow, &String)> = rows
        .iter()
        .filter_map(|r| match &r.payload {
            Payload::Text(t) => Some((r, t)),
            Payload::ImagePath(_) => None,
        })
        .collect();
    let encoded = texts
        .par_iter()
        .map(|(r, t)| {
            encode_description(&tokenize(t), &vocab, &cfg.encoder).map_err(|e| match e {
                EncodeError::Config(_) => usage(e),
                other => Failure::Runtime(format!("item {}: {other}", r.id)),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut oov = 0;
    let mut distinct = std::collections::BTreeSet::new();
    for ((r, _), d) in texts.iter().zip(&encoded) {
        oov += d.out_of_vocabulary.len();
        distinct.extend(d.out_of_vocabulary.iter().cloned());
        write_file(&dir.join(format!("{}.ppm", r.id)), &d.image.to_ppm())?;
    }
    println!(
        "encoded {} descriptions; skipped {oov} out-of-vocabulary tokens ({} distinct)",
        encoded.len(),
        distinct.len()
    );
    Ok(())
}

fn write_training_outputs(dir: &Path, params: &ModelParams, log: &TrainLog) -> CliResult<()> {
    save_checkpoint(params, &dir.join("checkpoint.xmp"))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(&dir.join("train_log.tsv"), log.to_tsv().as_bytes())
}

fn cmd_train(common: &Common, vocab: Option<PathBuf>, manifest: Option<PathBuf>) -> CliResult<()> {
    let cfg = resolve(common)?;
    let rows = load_manifest(&pick(&manifest, &cfg.train_manifest, "manifest")?).map_err(usage)?;
    let vocab = load_vocab(&vocab.or(cfg.vocab.clone()))?;
    let train_cfg = cfg.train_config();
    train_cfg.validate().map_err(usage)?;
    let dir = out_dir(&cfg)?;
    let canvases = manifest_canvases(&rows, vocab.as_ref(), &cfg.encoder)?;
    let items: Vec<TrainItem> = rows
        .iter()
        .zip(canvases)
        .map(|(r, canvas)| TrainItem {
            canvas,
            class_id: r.class_id,
            modality: r.modality(),
        })
        .collect();
    let (params, log) = train(&items, &train_cfg).map_err(|e| stage("train")(e.to_string()))?;
    write_training_outputs(&dir, &params, &log)?;
    println!(
        "trained {} epochs on {} items; intra-class distance {:.4} -> {:.4}",
        train_cfg.epochs,
        items.len(),
        log.initial_intra_class_distance,
        log.final_intra_class_distance
    );
    Ok(())
}

fn embed_items(
    rows: &[ManifestRow],
    canvases: Vec<Canvas>,
    aug: TrainAugmentation,
) -> Result<Vec<EmbedItem>, String> {
    rows.iter()
        .zip(canvases)
        .map(|(r, c)| {
            Ok(EmbedItem {
                id: r.id,
                class_id: r.class_id,
                modality: r.modality(),
                canvas: aug.inference_transform(&c).map_err(|e| e.to_string())?,
            })
        })
        .collect()
}

fn cmd_embed(
    common: &Common,
    checkpoint: &Path,
    vocab: Option<PathBuf>,
    manifest: Option<PathBuf>,
) -> CliResult<()> {
    let cfg = resolve(common)?;
    let params = load_checkpoint(checkpoint).map_err(usage)?;
    let rows = load_manifest(&pick(&manifest, &cfg.test_manifest, "manifest")?).map_err(usage)?;
    let vocab = load_vocab(&vocab.or(cfg.vocab.clone()))?;
    let dir = out_dir(&cfg)?;
    let canvases = manifest_canvases(&rows, vocab.as_ref(), &cfg.encoder)?;
    let items = embed_items(&rows, canvases, cfg.train.augmentation).map_err(stage("embed"))?;
    let set = embed_dataset(&params, &items).map_err(|e| stage("embed")(e.to_string()))?;
    save_embedding_set(&set, &dir.join("embeddings.tsv"))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("embedded {} items into {} dimensions", set.len(), set.dim());
    Ok(())
}

fn write_ranked(set: &EmbeddingSet, cfg: &RunConfig, dir: Option<&Path>) -> CliResult<()> {
    let k_max = *cfg.metric.ks.last().expect("validated");
    for &d in &cfg.metric.directions {
        let ranked = retrieve(d, set, k_max).map_err(|e| stage("retrieve")(e.to_string()))?;
        let text = ranked_to_tsv(&ranked);
        match dir {
            Some(dir) => write_file(&dir.join(format!("ranked_{d}.tsv")), text.as_bytes())?,
            None => print!("{text}"),
        }
    }
    Ok(())
}

fn cmd_retrieve(common: &Common, embeddings: &Path) -> CliResult<()> {
    let cfg = resolve(common)?;
    let set = load_embedding_set(embeddings).map_err(usage)?;
    let dir = cfg.out.is_some().then(|| out_dir(&cfg)).transpose()?;
    write_ranked(&set, &cfg, dir.as_deref())
}

fn write_report(set: &EmbeddingSet, metric: &MetricConfig, dir: Option<&Path>) -> CliResult<()> {
    let reports = evaluate(set, metric).map_err(|e| stage("evaluate")(e.to_string()))?;
    let table = render_report(&reports, ReportStyle::AlignedTable);
    print!("{table}");
    if let Some(dir) = dir {
        write_file(
            &dir.join("report.tsv"),
            render_report(&reports, ReportStyle::Tsv).as_bytes(),
        )?;
        write_file(&dir.join("report.txt"), table.as_bytes())?;
    }
    Ok(())
}

fn cmd_evaluate(common: &Common, embeddings: &Path) -> CliResult<()> {
    let cfg = resolve(common)?;
    let set = load_embedding_set(embeddings).map_err(usage)?;
    let dir = cfg.out.is_some().then(|| out_dir(&cfg)).transpose()?;
    write_report(&set, &cfg.metric, dir.as_deref())
}

fn write_synth(data: &SynthDataset, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Failure::Runtime(e.to_string()))?;
    for (name, items) in [
        ("train_manifest.tsv", &data.train),
        ("test_manifest.tsv", &data.test),
    ] {
        let mut rows = Vec::with_capacity(items.len());
        for it in items {
            let payload = match &it.content {
                SynthContent::Image(c) => {
                    let rel = format!("images/{}.ppm", it.id);
                    write_file(&dir.join(&rel), &c.to_ppm())?;
                    rel
                }
                SynthContent::Text(tokens) => tokens.join(" "),
            };
            rows.push((it.id, it.class_id, it.modality(), payload));
        }
        write_file(&dir.join(name), manifest_to_text(&rows).as_bytes())?;
    }
    write_file(&dir.join("vocab.txt"), data.vocabulary.to_text().as_bytes())?;
    let mut oracle = String::from("class_a\tclass_b\tsimilarity\n");
    let n = data.oracle.classes() as u32;
    for a in 0..n {
        for b in 0..n {
            let s = data.oracle.get(a, b).expect("in range");
            oracle.push_str(&format!("{a}\t{b}\t{s:.6}\n"));
        }
    }
    write_file(&dir.join("oracle.tsv"), oracle.as_bytes())
}

fn cmd_synth(common: &Common, rho: Option<f64>) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    if let Some(r) = rho {
        cfg.synth.overlap_rho = r;
    }
    let data = generate(&cfg.synth_config()).map_err(usage)?;
    let dir = out_dir(&cfg)?;
    write_synth(&data, &dir)?;
    println!(
        "wrote {} training and {} test items over {} classes ({} overlapped)",
        data.train.len(),
        data.test.len(),
        data.oracle.classes(),
        data.overlapped.len()
    );
    Ok(())
}

fn cmd_pipeline(common: &Common, source: Option<Source>) -> CliResult<()> {
    let cfg = resolve(common)?;
    for key in ["train.lr", "train.epochs"] {
        cfg.require(key).map_err(usage)?;
    }
    let source = source.unwrap_or(cfg.source);
    let train_cfg = cfg.train_config();
    train_cfg.validate().map_err(usage)?;
    cfg.metric.validate().map_err(usage)?;
    let dir = out_dir(&cfg)?;
    let aug = cfg.train.augmentation;

    let mut synth = None;
    let (train_items, test_items) = match source {
        Source::Synth => {
            let data = generate(&cfg.synth_config()).map_err(usage)?;
            let enc = |e: crate::synthgen::SynthError| stage("encode")(e.to_string());
            let train_items = data.train_items(&cfg.encoder).map_err(enc)?;
            let mut test = data.embed_items(&data.test, &cfg.encoder).map_err(enc)?;
            for it in &mut test {
                it.canvas = aug
                    .inference_transform(&it.canvas)
                    .map_err(|e| stage("encode")(e.to_string()))?;
            }
            synth = Some(data);
            (train_items, test)
        }
        Source::Manifest => {
            let train_path = cfg
                .train_manifest
                .clone()
                .ok_or_else(|| usage(ConfigError::Missing("data.train_manifest".into())))?;
            let rows = load_manifest(&train_path).map_err(usage)?;
            let test_rows = match &cfg.test_manifest {
                Some(p) => load_manifest(p).map_err(usage)?,
                None => rows.clone(),
            };
            let vocab = load_vocab(&cfg.vocab)?;
            let canvases =
                manifest_canvases(&rows, vocab.as_ref(), &cfg.encoder).map_err(|f| match f {
                    Failure::Runtime(m) => stage("encode")(m),
                    usage => usage,
                })?;
            let train_items = rows
                .iter()
                .zip(canvases)
                .map(|(r, canvas)| TrainItem {
                    canvas,
                    class_id: r.class_id,
                    modality: r.modality(),
                })
                .collect();
            let test_canvases = manifest_canvases(&test_rows, vocab.as_ref(), &cfg.encoder)
                .map_err(|f| match f {
                    Failure::Runtime(m) => stage("encode")(m),
                    usage => usage,
                })?;
            let test = embed_items(&test_rows, test_canvases, aug).map_err(stage("encode"))?;
            (train_items, test)
        }
    };

    let (params, log) =
        train(&train_items, &train_cfg).map_err(|e| stage("train")(e.to_string()))?;
    write_training_outputs(&dir, &params, &log)?;
    let set = embed_dataset(&params, &test_items).map_err(|e| stage("embed")(e.to_string()))?;
    save_embedding_set(&set, &dir.join("embeddings.tsv"))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(&dir.join("projection.tsv"), projection_tsv(&set).as_bytes())?;
    write_ranked(&set, &cfg, Some(&dir))?;
    write_report(&set, &cfg.metric, Some(&dir))?;

    if let Some(data) = synth {
        match score_overlap(&set, &data.oracle, &data.overlapped, cfg.report_k) {
            Ok(directions) => {
                let report = crate::synthgen::OverlapReport {
                    rho: cfg.synth.overlap_rho,
                    seed: cfg.seed,
                    k: cfg.report_k,
                    initial_intra_class_distance: log.initial_intra_class_distance,
                    final_intra_class_distance: log.final_intra_class_distance,
                    directions,
                };
                write_file(&dir.join("overlap.tsv"), report.to_tsv().as_bytes())?;
            }
            Err(e) => log::warn!("overlap report skipped: {e}"),
        }
    }
    Ok(())
}
