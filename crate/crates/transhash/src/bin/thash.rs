//! Command-line surface: dataset generation, training, encoding, and
//! retrieval evaluation. Every command is deterministic under fixed seeds
//! and writes a manifest describing its artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use transhash::data::{
    generate_synthetic, load_cifar10_bin, nearest_centroid_accuracy, split_protocol, Dataset,
    Split,
};
use transhash::error::{Error, Result};
use transhash::retrieval::{mean_ap, precision_at_topk, precision_recall_curve, CodeIndex};
use transhash::train::{encode_split, train, write_metrics_csv, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "thash", version, about = "Transformer deep hashing: train, encode, retrieve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic class-separable dataset with split tags.
    Generate(GenerateArgs),
    /// Convert CIFAR-10 binary batches into a tagged dataset file.
    ImportCifar(ImportCifarArgs),
    /// Train a model and write a checkpoint plus a per-step metric CSV.
    Train(TrainArgs),
    /// Encode one dataset split into a binary code index.
    Encode(EncodeArgs),
    /// Evaluate a query index against a database index.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Images per class.
    #[arg(long = "per-class", default_value_t = 100)]
    per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Query images per class (split protocol).
    #[arg(long = "queries-per-class", default_value_t = 10)]
    queries_per_class: usize,
    /// Training images per class, drawn from the database.
    #[arg(long = "train-per-class", default_value_t = 40)]
    train_per_class: usize,
    /// Output dataset path (.thds).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportCifarArgs {
    /// Comma-separated CIFAR-10 binary batch files.
    #[arg(long, value_delimiter = ',', required = true)]
    files: Vec<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long = "queries-per-class", default_value_t = 100)]
    queries_per_class: usize,
    #[arg(long = "train-per-class", default_value_t = 500)]
    train_per_class: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset (.thds).
    #[arg(long)]
    data: PathBuf,
    /// TOML config file; omitted fields use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (checkpoint.thck, metrics.csv, manifest.json).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Checkpoint path (.thck).
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset path (.thds).
    #[arg(long)]
    data: PathBuf,
    /// Which records to encode: train, query, or database (= all non-query).
    #[arg(long)]
    split: String,
    /// Output index path (.thix).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "query-index")]
    query_index: PathBuf,
    #[arg(long = "db-index")]
    db_index: PathBuf,
    /// Ranking depth N for mAP@N; defaults to the database size.
    #[arg(long = "map-at")]
    map_at: Option<usize>,
    /// Comma-separated list of k values for precision@k.
    /// Defaults to 1,5,10 clamped to the gallery size.
    #[arg(long, value_delimiter = ',')]
    topk: Option<Vec<usize>>,
    /// Also write the precision-recall curve (pr.csv).
    #[arg(long)]
    pr: bool,
    /// Output directory (metrics.json, optional pr.csv, manifest.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    settings: serde_json::Value,
    seeds: Vec<u64>,
    outputs: Vec<String>,
    wall_ms: u128,
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Contract(format!("manifest serialization: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let started = Instant::now();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args, started),
        Command::ImportCifar(args) => cmd_import_cifar(args, started),
        Command::Train(args) => cmd_train(args, started),
        Command::Encode(args) => cmd_encode(args, started),
        Command::Eval(args) => cmd_eval(args, started),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_generate(args: GenerateArgs, started: Instant) -> Result<()> {
    let ds = generate_synthetic(args.classes, args.per_class, args.size, args.size, args.seed)?;
    // separability gate on the generated classes
    let accuracy = nearest_centroid_accuracy(&ds)?;
    if accuracy <= 0.9 {
        return Err(Error::Contract(format!(
            "generated data is not separable enough (nearest-centroid accuracy {accuracy:.3}); \
             try another seed or fewer classes"
        )));
    }
    let ds = split_protocol(ds, args.queries_per_class, args.train_per_class, args.seed)?;
    ds.save(&args.out)?;
    // validate what we wrote
    let back = Dataset::load(&args.out)?;
    if back.len() != ds.len() {
        return Err(Error::Contract("written dataset failed validation".into()));
    }
    println!(
        "wrote {} ({} images: {} train / {} query / {} database-only; \
         centroid accuracy {accuracy:.3})",
        args.out.display(),
        ds.len(),
        ds.tagged_indices(Split::Train).len(),
        ds.tagged_indices(Split::Query).len(),
        ds.tagged_indices(Split::Database).len(),
    );
    write_manifest(
        &manifest_path(&args.out),
        &Manifest {
            command: "generate".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            settings: serde_json::json!({
                "classes": args.classes,
                "per_class": args.per_class,
                "size": args.size,
                "queries_per_class": args.queries_per_class,
                "train_per_class": args.train_per_class,
                "centroid_accuracy": accuracy,
            }),
            seeds: vec![args.seed],
            outputs: vec![args.out.display().to_string()],
            wall_ms: started.elapsed().as_millis(),
        },
    )
}

fn cmd_import_cifar(args: ImportCifarArgs, started: Instant) -> Result<()> {
    let ds = load_cifar10_bin(&args.files)?;
    let ds = split_protocol(ds, args.queries_per_class, args.train_per_class, args.seed)?;
    ds.save(&args.out)?;
    Dataset::load(&args.out)?;
    println!("wrote {} ({} images)", args.out.display(), ds.len());
    write_manifest(
        &manifest_path(&args.out),
        &Manifest {
            command: "import-cifar".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            settings: serde_json::json!({
                "files": args.files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                "queries_per_class": args.queries_per_class,
                "train_per_class": args.train_per_class,
            }),
            seeds: vec![args.seed],
            outputs: vec![args.out.display().to_string()],
            wall_ms: started.elapsed().as_millis(),
        },
    )
}

fn cmd_train(args: TrainArgs, started: Instant) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_toml(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let dataset = Dataset::load(&args.data)?;
    fs::create_dir_all(&args.out)?;

    let output = train(&dataset, &cfg)?;
    let ckpt_path = args.out.join("checkpoint.thck");
    let metrics_path = args.out.join("metrics.csv");
    output.checkpoint.save(&ckpt_path)?;
    write_metrics_csv(&metrics_path, &output.metrics)?;
    // validate what we wrote
    Checkpoint::load(&ckpt_path)?;

    let last = output.metrics.last().expect("at least one step");
    println!(
        "trained {} steps (final bayes {:.4}, quant {:.4}, gap {:.4}); wrote {}",
        output.checkpoint.step,
        last.loss_bayes,
        last.loss_quant,
        last.quant_gap,
        ckpt_path.display()
    );
    write_manifest(
        &args.out.join("manifest.json"),
        &Manifest {
            command: "train".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            settings: serde_json::json!({
                "data": args.data.display().to_string(),
                "config": cfg,
            }),
            seeds: vec![cfg.seed],
            outputs: vec![
                ckpt_path.display().to_string(),
                metrics_path.display().to_string(),
            ],
            wall_ms: started.elapsed().as_millis(),
        },
    )
}

fn cmd_encode(args: EncodeArgs, started: Instant) -> Result<()> {
    let split = Split::parse(&args.split)?;
    let checkpoint = Checkpoint::load(&args.ckpt)?;
    let dataset = Dataset::load(&args.data)?;
    let backbone = &checkpoint.config.backbone;
    if dataset.height != backbone.image_size || dataset.width != backbone.image_size {
        return Err(Error::Config(format!(
            "dataset is {}x{}, checkpoint expects {}x{}",
            dataset.height, dataset.width, backbone.image_size, backbone.image_size
        )));
    }
    let model = checkpoint.to_model()?;
    let indices = dataset.select(split);
    if indices.is_empty() {
        return Err(Error::Contract(format!(
            "dataset has no records in split {:?}",
            args.split
        )));
    }
    let encoded = encode_split(&model, &dataset, &indices)?;
    let bits = checkpoint.config.dual_stream.hash_bits;
    let index = CodeIndex::build(
        bits,
        encoded.iter().map(|(id, _, _)| *id).collect(),
        encoded.iter().map(|(_, l, _)| l.clone()).collect(),
        encoded.iter().map(|(_, _, e)| e.code.clone()).collect(),
    )?;
    index.save(&args.out)?;
    let back = CodeIndex::load(&args.out)?;
    if back.len() != indices.len() || back.bits() != bits {
        return Err(Error::Contract("written index failed validation".into()));
    }
    println!(
        "encoded {} images ({}-bit codes) into {}",
        index.len(),
        bits,
        args.out.display()
    );
    write_manifest(
        &manifest_path(&args.out),
        &Manifest {
            command: "encode".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            settings: serde_json::json!({
                "ckpt": args.ckpt.display().to_string(),
                "data": args.data.display().to_string(),
                "split": args.split,
                "bits": bits,
            }),
            seeds: vec![checkpoint.config.seed],
            outputs: vec![args.out.display().to_string()],
            wall_ms: started.elapsed().as_millis(),
        },
    )
}

#[derive(Serialize)]
struct TopkEntry {
    k: usize,
    precision: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    bits: usize,
    num_queries: usize,
    num_database: usize,
    map_at: usize,
    map: f64,
    precision_at_topk: Vec<TopkEntry>,
}

fn cmd_eval(args: EvalArgs, started: Instant) -> Result<()> {
    let queries = CodeIndex::load(&args.query_index)?;
    let gallery = CodeIndex::load(&args.db_index)?;
    if queries.bits() != gallery.bits() {
        return Err(Error::Contract(format!(
            "query index is {}-bit, database index is {}-bit",
            queries.bits(),
            gallery.bits()
        )));
    }
    let map_at = args.map_at.unwrap_or(gallery.len());
    let map = mean_ap(&queries, &gallery, map_at)?;
    let topk = args.topk.clone().unwrap_or_else(|| {
        [1usize, 5, 10]
            .into_iter()
            .filter(|&k| k <= gallery.len())
            .collect()
    });
    let precisions = precision_at_topk(&queries, &gallery, &topk)?;

    fs::create_dir_all(&args.out)?;
    let metrics_path = args.out.join("metrics.json");
    let summary = EvalSummary {
        bits: gallery.bits(),
        num_queries: queries.len(),
        num_database: gallery.len(),
        map_at,
        map,
        precision_at_topk: topk
            .iter()
            .zip(&precisions)
            .map(|(&k, &precision)| TopkEntry { k, precision })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Contract(format!("metrics serialization: {e}")))?;
    fs::write(&metrics_path, text + "\n")?;

    let mut outputs = vec![metrics_path.display().to_string()];
    if args.pr {
        let pr_path = args.out.join("pr.csv");
        let points = precision_recall_curve(&queries, &gallery)?;
        let mut csv = String::from("radius,recall,precision\n");
        for p in &points {
            csv.push_str(&format!("{},{},{}\n", p.radius, p.recall, p.precision));
        }
        fs::write(&pr_path, csv)?;
        outputs.push(pr_path.display().to_string());
    }
    println!("mAP@{map_at} = {map:.4} over {} queries", queries.len());
    write_manifest(
        &args.out.join("manifest.json"),
        &Manifest {
            command: "eval".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            settings: serde_json::json!({
                "query_index": args.query_index.display().to_string(),
                "db_index": args.db_index.display().to_string(),
                "map_at": map_at,
                "topk": topk,
                "pr": args.pr,
            }),
            seeds: vec![],
            outputs,
            wall_ms: started.elapsed().as_millis(),
        },
    )
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    name.push_str(".manifest.json");
    artifact.with_file_name(name)
}
