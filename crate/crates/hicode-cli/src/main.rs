//! Command-line interface: corpus synthesis, hierarchy and co-graph
//! construction, training, evaluation, prediction, and the gradient oracle.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hicode_core::cograph::{self, CoGraph, SymMode};
use hicode_core::corpus::{
    self, encode_corpus, normalize_docs_codes, read_jsonl, write_jsonl, Document, Record,
    SynthConfig, Vocabulary,
};
use hicode_core::hierarchy::{BlockTable, CodeId, Hierarchy};
use hicode_core::model::{self, Model, ModelConfig};
use hicode_core::trainer::{self, load_model_dir, parse_kv, save_model_dir, TrainConfig};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hicode", version, about = "Hierarchical multi-label code assignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with per-code trigger tokens.
    Synth(SynthArgs),
    /// Build the code hierarchy from a corpus and print/export it.
    BuildHierarchy(BuildHierarchyArgs),
    /// Build per-level co-occurrence graphs and export edge weights.
    BuildCograph(BuildCographArgs),
    /// Train a model and save it with its sidecar files.
    Train(Box<TrainArgs>),
    /// Evaluate a saved model on a corpus.
    Evaluate(EvaluateArgs),
    /// Emit per-code probabilities and a ranked top-K list.
    Predict(PredictArgs),
    /// Whole-model gradient check against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (train.jsonl, valid.jsonl, descriptors.tsv, ...).
    #[arg(long)]
    out: PathBuf,
    /// Codes per level, coarse to fine.
    #[arg(long, default_value = "4,12,24", value_delimiter = ',')]
    level_sizes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    train_docs: usize,
    #[arg(long, default_value_t = 32)]
    valid_docs: usize,
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    /// Probability that a trigger token survives (vs noise).
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    /// Noise tokens appended per document.
    #[arg(long, default_value_t = 6)]
    noise: usize,
    /// Power-law exponent over finest-code ranks.
    #[arg(long, default_value_t = 1.2)]
    alpha: f64,
    /// Inclusion probability of the most frequent code.
    #[arg(long, default_value_t = 0.7)]
    max_inclusion: f64,
    /// Disjoint trigger tokens owned by each code.
    #[arg(long, default_value_t = 3)]
    triggers_per_code: usize,
    /// Emissions of each gold code's trigger set per document.
    #[arg(long, default_value_t = 2)]
    trigger_repeats: usize,
    /// Planted co-occurrence `together,apart` record counts (repeatable).
    #[arg(long = "plant", value_parser = parse_plant)]
    plants: Vec<corpus::PlantedPair>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn parse_plant(s: &str) -> Result<corpus::PlantedPair, String> {
    let (a, b) = s.split_once(',').ok_or("expected `together,apart`")?;
    Ok(corpus::PlantedPair {
        together: a.trim().parse().map_err(|_| "bad together count")?,
        apart: b.trim().parse().map_err(|_| "bad apart count")?,
    })
}

#[derive(Args)]
struct BuildHierarchyArgs {
    /// Corpus whose gold codes define the finest level.
    #[arg(long)]
    corpus: PathBuf,
    /// Hierarchy depth (1 = finest level only).
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Block-range table for 4-level hierarchies; defaults to the bundled
    /// chapter table.
    #[arg(long)]
    blocks: Option<PathBuf>,
    /// Descriptor TSV to attach.
    #[arg(long)]
    descriptors: Option<PathBuf>,
    /// Output TSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildCographArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Hierarchy depth the labels are expanded over.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Level to export (`all` or a 1-based level).
    #[arg(long, default_value = "all")]
    level: String,
    #[arg(long)]
    blocks: Option<PathBuf>,
    /// Symmetrization mode: avg, max, or none.
    #[arg(long, default_value = "avg")]
    cograph_sym: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Model output directory.
    #[arg(long)]
    out: PathBuf,
    /// Hierarchy depth (1 = finest level only; equivalent to --no-hpl).
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    blocks: Option<PathBuf>,
    #[arg(long)]
    descriptors: Option<PathBuf>,
    /// Pretrained word vectors: `count dim` header then `token v1..vd`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Flat key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model size preset: small, standard, or toy.
    #[arg(long, default_value = "small")]
    preset: String,
    /// Bypass the graph-convolution path (attention over raw ontology
    /// embeddings).
    #[arg(long)]
    no_orl: bool,
    /// Collapse the hierarchy to the finest level only.
    #[arg(long)]
    no_hpl: bool,
    /// Disable the dependency gate between levels.
    #[arg(long)]
    no_dpu: bool,
    #[arg(long)]
    cograph_sym: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decision threshold for F1.
    #[arg(long)]
    threshold: Option<f64>,
    /// Minimum token frequency for the vocabulary.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// Append per-epoch metric lines to this file as well as stdout.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Report TSV output path (stdout table always printed).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Ranked list length at the finest level.
    #[arg(long, default_value_t = 8)]
    top_k: usize,
    /// Probability TSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run the bundled toy configuration.
    #[arg(long)]
    toy: bool,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Sampled coordinates per parameter.
    #[arg(long, default_value_t = 6)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Failure threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::BuildHierarchy(args) => cmd_build_hierarchy(args),
        Command::BuildCograph(args) => cmd_build_cograph(args),
        Command::Train(args) => cmd_train(*args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {path:?}"))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        level_sizes: args.level_sizes,
        train_docs: args.train_docs,
        valid_docs: args.valid_docs,
        vocab_size: args.vocab_size,
        signal: args.signal,
        noise_tokens: args.noise,
        alpha: args.alpha,
        max_inclusion: args.max_inclusion,
        triggers_per_code: args.triggers_per_code,
        trigger_repeats: args.trigger_repeats,
        planted: args.plants,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let out = corpus::synth_corpus(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    write_jsonl(&args.out.join("train.jsonl"), &out.train)?;
    write_jsonl(&args.out.join("valid.jsonl"), &out.valid)?;
    std::fs::write(args.out.join("descriptors.tsv"), &out.descriptors_tsv)?;
    if let Some(blocks) = &out.blocks_tsv {
        std::fs::write(args.out.join("blocks.tsv"), blocks)?;
    }
    if !out.plants.is_empty() {
        let mut rows = String::from("code_a\tcode_b\tcode_other\texpected_ratio\n");
        for p in &out.plants {
            rows.push_str(&format!("{}\t{}\t{}\t{}\n", p.a, p.b, p.other, p.expected_ratio));
        }
        std::fs::write(args.out.join("plants.tsv"), rows)?;
    }
    println!(
        "wrote {} train and {} valid docs to {}",
        out.train.len(),
        out.valid.len(),
        args.out.display()
    );
    Ok(())
}

fn load_blocks(path: &Option<PathBuf>) -> anyhow::Result<BlockTable> {
    Ok(match path {
        Some(p) => BlockTable::load(p).with_context(|| format!("loading blocks {p:?}"))?,
        None => BlockTable::builtin(),
    })
}

fn finest_codes(docs: &[Document]) -> anyhow::Result<BTreeSet<CodeId>> {
    let mut finest = BTreeSet::new();
    for doc in docs {
        for raw in &doc.codes {
            finest.insert(hicode_core::hierarchy::normalize_code(raw, None)?);
        }
    }
    if finest.is_empty() {
        bail!("corpus has no gold codes");
    }
    Ok(finest)
}

/// Depth 1 collapses to the finest level of a 2-level build.
fn build_hierarchy_depth(
    finest: &BTreeSet<CodeId>,
    levels: usize,
    blocks: &BlockTable,
) -> anyhow::Result<Hierarchy> {
    let h = match levels {
        0 => bail!("levels must be at least 1"),
        1 => Hierarchy::build(finest, 2, None)?.last_levels(1)?,
        n => Hierarchy::build(finest, n, Some(blocks))?,
    };
    Ok(h)
}

fn cmd_build_hierarchy(args: BuildHierarchyArgs) -> anyhow::Result<()> {
    let docs = read_jsonl(&args.corpus)?;
    let finest = finest_codes(&docs)?;
    let blocks = load_blocks(&args.blocks)?;
    let mut h = build_hierarchy_depth(&finest, args.levels, &blocks)?;
    if let Some(path) = &args.descriptors {
        h.load_descriptors(&std::fs::read_to_string(path)?)?;
    }
    write_or_print(&args.out, &h.export_tsv())?;
    eprintln!(
        "hierarchy: {} levels, sizes {:?}",
        h.depth(),
        (1..=h.depth()).map(|t| h.level(t).len()).collect::<Vec<_>>()
    );
    Ok(())
}

fn cmd_build_cograph(args: BuildCographArgs) -> anyhow::Result<()> {
    let docs = read_jsonl(&args.corpus)?;
    let finest = finest_codes(&docs)?;
    let blocks = load_blocks(&args.blocks)?;
    let h = build_hierarchy_depth(&finest, args.levels, &blocks)?;
    let records = label_records(&docs)?;
    let sym: SymMode = args.cograph_sym.parse()?;
    let levels: Vec<usize> = if args.level == "all" {
        (1..=h.depth()).collect()
    } else {
        vec![args.level.parse().context("bad --level")?]
    };
    let mut out = String::new();
    for t in levels {
        let g = cograph::build_cograph(&records, &h, t, sym)?;
        out.push_str(&g.export_tsv());
    }
    write_or_print(&args.out, &out)?;
    Ok(())
}

/// Records carrying only gold labels (tokens unused by the co-graph).
fn label_records(docs: &[Document]) -> anyhow::Result<Vec<Record>> {
    let normalized = normalize_docs_codes(docs)?;
    Ok(normalized
        .into_iter()
        .zip(docs)
        .map(|(gold, d)| Record { id: d.id.clone(), tokens: vec![corpus::UNK_INDEX], gold })
        .collect())
}

struct Pipeline {
    model: Model,
    train_records: Vec<Record>,
    valid_records: Vec<Record>,
    cograph_tsv: String,
}

#[allow(clippy::too_many_arguments)]
fn build_pipeline(
    train_docs: &[Document],
    valid_docs: &[Document],
    levels: usize,
    blocks: &BlockTable,
    descriptors: Option<&str>,
    config: ModelConfig,
    min_count: usize,
    seed: u64,
) -> anyhow::Result<Pipeline> {
    let tokenized: Vec<Vec<String>> =
        train_docs.iter().map(|d| corpus::tokenize(&d.text)).collect();
    let vocab = Vocabulary::build(&tokenized, min_count)?;
    let finest = finest_codes(train_docs)?;
    let mut hierarchy = build_hierarchy_depth(&finest, levels, blocks)?;
    if let Some(text) = descriptors {
        hierarchy.load_descriptors(text)?;
    }
    let (train_records, train_skipped) = encode_corpus(train_docs, &vocab, config.max_len)?;
    let (valid_records, valid_skipped) = encode_corpus(valid_docs, &vocab, config.max_len)?;
    if train_skipped + valid_skipped > 0 {
        eprintln!("skipped {train_skipped} train / {valid_skipped} valid records");
    }
    let mut cograph_tsv = String::new();
    let cographs: Vec<CoGraph> = (1..=hierarchy.depth())
        .map(|t| cograph::build_cograph(&train_records, &hierarchy, t, config.cograph_sym))
        .collect::<hicode_core::Result<_>>()?;
    for g in &cographs {
        cograph_tsv.push_str(&g.export_tsv());
    }
    let model = Model::new(config, hierarchy, vocab, &cographs, seed)?;
    Ok(Pipeline { model, train_records, valid_records, cograph_tsv })
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let file_kv = match &args.config {
        Some(path) => parse_kv(&std::fs::read_to_string(path)?)?,
        None => Default::default(),
    };
    let preset = match args.preset.as_str() {
        "small" => ModelConfig::small(),
        "standard" => ModelConfig::standard(),
        "toy" => ModelConfig::toy(),
        other => bail!("unknown preset {other:?} (want small, standard, or toy)"),
    };
    let mut config = ModelConfig::from_kv(preset, &file_kv)?;
    if args.no_orl {
        config.use_orl = false;
    }
    if args.no_dpu {
        config.use_dpu = false;
    }
    if let Some(sym) = &args.cograph_sym {
        config.cograph_sym = sym.parse()?;
    }

    let from_file = |key: &str| file_kv.get(key).and_then(|v| v.parse().ok());
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        learning_rate: args.lr.or_else(|| from_file("learning_rate")).unwrap_or(defaults.learning_rate),
        weight_decay: args
            .weight_decay
            .or_else(|| from_file("weight_decay"))
            .unwrap_or(defaults.weight_decay),
        batch_size: args
            .batch_size
            .or_else(|| from_file("batch_size").map(|v: f64| v as usize))
            .unwrap_or(defaults.batch_size),
        patience: args
            .patience
            .or_else(|| from_file("patience").map(|v: f64| v as usize))
            .unwrap_or(defaults.patience),
        max_epochs: args
            .max_epochs
            .or_else(|| from_file("max_epochs").map(|v: f64| v as usize))
            .unwrap_or(defaults.max_epochs),
        seed: args.seed.or_else(|| from_file("seed").map(|v: f64| v as u64)).unwrap_or(defaults.seed),
        threshold: args.threshold.or_else(|| from_file("threshold")).unwrap_or(defaults.threshold),
    };

    let levels = if args.no_hpl {
        1
    } else {
        args.levels
            .or_else(|| file_kv.get("levels").and_then(|v| v.parse().ok()))
            .unwrap_or(3)
    };

    let train_docs = read_jsonl(&args.train)?;
    let valid_docs = read_jsonl(&args.valid)?;
    let blocks = load_blocks(&args.blocks)?;
    let descriptors = match &args.descriptors {
        Some(p) => Some(std::fs::read_to_string(p)?),
        None => None,
    };
    let mut pipeline = build_pipeline(
        &train_docs,
        &valid_docs,
        levels,
        &blocks,
        descriptors.as_deref(),
        config,
        args.min_count,
        train_cfg.seed,
    )?;
    if let Some(path) = &args.embeddings {
        let rows = corpus::parse_embeddings_txt(
            &std::fs::read_to_string(path)?,
            &pipeline.model.vocab,
            pipeline.model.config.d_e,
        )?;
        let loaded = pipeline.model.load_embedding_rows(&rows)?;
        eprintln!("loaded {loaded} pretrained embedding rows");
    }

    let mut log_file = match &args.log {
        Some(path) => Some(std::fs::File::create(path)?),
        None => None,
    };
    let mut log = |line: &str| {
        println!("{line}");
        if let Some(f) = log_file.as_mut() {
            use std::io::Write;
            let _ = writeln!(f, "{line}");
        }
    };
    let outcome =
        trainer::fit(pipeline.model, &pipeline.train_records, &pipeline.valid_records, &train_cfg, &mut log)?;
    save_model_dir(
        &args.out,
        &outcome.model,
        &train_cfg,
        outcome.best_epoch as u64,
        outcome.best_micro_f1,
        &pipeline.cograph_tsv,
    )?;
    println!(
        "best epoch {} of {}; validation micro-F1 {:.6}; model saved to {}",
        outcome.best_epoch,
        outcome.epochs_run,
        outcome.best_micro_f1,
        args.out.display()
    );
    Ok(())
}

fn load_and_encode(model: &Model, data: &Path) -> anyhow::Result<Vec<Record>> {
    let docs = read_jsonl(data)?;
    let (records, skipped) = encode_corpus(&docs, &model.vocab, model.config.max_len)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} records");
    }
    Ok(records)
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let (model, ckpt) = load_model_dir(&args.model)?;
    let threshold = args.threshold.unwrap_or_else(|| {
        parse_kv(&ckpt.config_text)
            .ok()
            .and_then(|kv| kv.get("threshold").and_then(|v| v.parse().ok()))
            .unwrap_or(0.5)
    });
    let records = load_and_encode(&model, &args.data)?;
    let report = model.evaluate_records(&records, threshold)?;
    println!("{}", report.format_table());
    println!(
        "final-level micro-F1 {:.6} (checkpoint stored {:.6} at epoch {})",
        report.levels.last().unwrap().micro_f1,
        ckpt.best_micro_f1,
        ckpt.epoch
    );
    if args.out.is_some() {
        write_or_print(&args.out, &report.to_tsv())?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let (model, _ckpt) = load_model_dir(&args.model)?;
    let records = load_and_encode(&model, &args.data)?;
    let scores = model.score_records(&records)?;
    let mut tsv = String::from("id\tlevel\tcode\tprobability\n");
    for (r, per_level) in records.iter().zip(&scores) {
        for (t0, level_scores) in per_level.iter().enumerate() {
            for (c, p) in model.level_codes(t0 + 1).iter().zip(level_scores) {
                tsv.push_str(&format!("{}\t{}\t{}\t{:.9}\n", r.id, t0 + 1, c, p));
            }
        }
    }
    write_or_print(&args.out, &tsv)?;

    // Ranked list at the finest level.
    let final_t = model.depth();
    for (r, per_level) in records.iter().zip(&scores) {
        let level_scores = per_level.last().unwrap();
        let mut idx: Vec<usize> = (0..level_scores.len()).collect();
        idx.sort_by(|&a, &b| {
            level_scores[b].partial_cmp(&level_scores[a]).unwrap().then(a.cmp(&b))
        });
        let top: Vec<String> = idx
            .iter()
            .take(args.top_k)
            .map(|&c| format!("{}:{:.4}", model.level_codes(final_t)[c], level_scores[c]))
            .collect();
        eprintln!("top-{} {}: {}", args.top_k, r.id, top.join(" "));
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    if !args.toy {
        bail!("only --toy is supported; pass it explicitly");
    }
    let synth = corpus::synth_corpus(&SynthConfig {
        level_sizes: vec![2, 4],
        train_docs: 6,
        valid_docs: 0,
        vocab_size: 30,
        noise_tokens: 2,
        triggers_per_code: 1,
        trigger_repeats: 2,
        seed: args.seed ^ 0xABCD,
        ..SynthConfig::default()
    })?;
    let blocks = BlockTable::builtin();
    let pipeline = build_pipeline(
        &synth.train,
        &synth.train,
        2,
        &blocks,
        Some(&synth.descriptors_tsv),
        ModelConfig::toy(),
        1,
        args.seed,
    )?;
    let mut model = pipeline.model;
    let batch: Vec<(Vec<usize>, Vec<Vec<f64>>)> = pipeline
        .train_records
        .iter()
        .take(2)
        .map(|r| (r.tokens.clone(), model.targets_for(&r.gold).unwrap()))
        .collect();
    let started = std::time::Instant::now();
    let report = model::gradient_check(&mut model, &batch, args.eps, args.coords, args.seed)?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst {}[{}]) in {:.1?}",
        report.max_rel_err,
        report.coords_checked,
        report.worst_param,
        report.worst_coord,
        started.elapsed()
    );
    if report.max_rel_err >= args.tolerance {
        bail!("gradient check failed: {:.3e} >= {:.0e}", report.max_rel_err, args.tolerance);
    }
    Ok(())
}
