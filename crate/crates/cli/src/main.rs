//! Command-line entry points: dataset generation, training, evaluation,
//! prediction, and attention-trace inspection. Every command is
//! deterministic given its flags and seed.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{resolve, FileConfig};
use rdmn_core::forward::{forward, PreparedInstance};
use rdmn_core::graph::{
    load_dataset, save_dataset, split_dataset, DatasetInstance, DatasetSchema, Query,
};
use rdmn_core::metrics::predict_class;
use rdmn_core::model::{load_model, save_model, ModelConfig};
use rdmn_core::synth::{generate, TaskFamily, TaskSpec};
use rdmn_core::train::{evaluate, history_to_csv, train, EvalReport, TrainConfig};
use rdmn_core::ModelParams;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "rdmn", version, about = "Relational dynamic memory networks over attributed graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: train/valid/test JSONL plus a manifest.
    Gen(GenArgs),
    /// Train a model; writes the model file, history CSV, and test report.
    Train(TrainArgs),
    /// Evaluate a model file on a dataset file.
    Eval(EvalArgs),
    /// Per-instance class probabilities as CSV.
    Predict(PredictArgs),
    /// Attention trace of one instance as CSV.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Key-value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task family: multitask, pair, or relation.
    #[arg(long)]
    family: Option<String>,
    /// Total instance count before splitting.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for train/valid/test JSONL and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    nodes_min: Option<usize>,
    #[arg(long)]
    nodes_max: Option<usize>,
    /// Color alphabet size (also the task count for the multitask family).
    #[arg(long)]
    alphabet: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    pos_rate: Option<f64>,
    /// Pair family: dense color-histogram queries instead of a constant token.
    #[arg(long)]
    side_info: bool,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    valid_frac: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory produced by `gen` (train/valid/test JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.json and history.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Reasoning hops T.
    #[arg(long)]
    hops: Option<usize>,
    /// Read heads K.
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Gradient-accumulation count per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    /// Controller/query dimension.
    #[arg(long)]
    dq: Option<usize>,
    /// Memory cell dimension.
    #[arg(long)]
    dm: Option<usize>,
    /// Attention score dimension.
    #[arg(long)]
    attn_dim: Option<usize>,
    #[arg(long)]
    decoder_hidden: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset file (JSONL with header record).
    #[arg(long)]
    data: PathBuf,
    /// Optional CSV destination for the report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// 0-based instance index within the dataset file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[derive(Serialize)]
struct SplitRecord {
    file: String,
    instances: usize,
    positive_rate: f64,
}

#[derive(Serialize)]
struct Manifest {
    spec: TaskSpec,
    schema: DatasetSchema,
    fractions: (f64, f64, f64),
    splits: Vec<SplitRecord>,
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    file.check_known(&[
        "family", "n", "seed", "nodes-min", "nodes-max", "alphabet", "relations", "pos-rate",
        "train-frac", "valid-frac",
    ])?;
    let family_name = resolve(args.family, file.get("family")?, "multitask".to_string());
    let family = TaskFamily::parse(&family_name)
        .ok_or_else(|| anyhow!("unknown family {family_name:?} (multitask, pair, relation)"))?;
    let default_relations = match family {
        TaskFamily::RelationTypeSensitivity => 2,
        _ => 1,
    };
    let spec = TaskSpec {
        family,
        nodes_min: resolve(args.nodes_min, file.get("nodes-min")?, 4),
        nodes_max: resolve(args.nodes_max, file.get("nodes-max")?, 8),
        alphabet: resolve(args.alphabet, file.get("alphabet")?, 3),
        relations: resolve(args.relations, file.get("relations")?, default_relations),
        positive_rate: resolve(args.pos_rate, file.get("pos-rate")?, 0.5),
        instances: resolve(args.n, file.get("n")?, 1000),
        seed: resolve(args.seed, file.get("seed")?, 0),
        side_info: args.side_info,
    };
    let train_frac = resolve(args.train_frac, file.get("train-frac")?, 0.8);
    let valid_frac = resolve(args.valid_frac, file.get("valid-frac")?, 0.1);
    let test_frac = 1.0 - train_frac - valid_frac;
    if test_frac < -1e-9 {
        bail!("train-frac {train_frac} + valid-frac {valid_frac} exceed 1");
    }
    let fractions = (train_frac, valid_frac, test_frac.max(0.0));

    let (schema, data) = generate(&spec).context("dataset generation")?;
    let (train_d, valid_d, test_d) = split_dataset(data, fractions, spec.seed)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut splits = Vec::new();
    for (name, set) in [("train", &train_d), ("valid", &valid_d), ("test", &test_d)] {
        let path = args.out.join(format!("{name}.jsonl"));
        save_dataset(&path, &schema, set)?;
        let positives = set.iter().filter(|i| i.label == 1).count();
        splits.push(SplitRecord {
            file: format!("{name}.jsonl"),
            instances: set.len(),
            positive_rate: if set.is_empty() {
                0.0
            } else {
                positives as f64 / set.len() as f64
            },
        });
    }
    let manifest = Manifest {
        spec,
        schema,
        fractions,
        splits,
    };
    let manifest_path = args.out.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    println!(
        "wrote {} (train {} / valid {} / test {})",
        args.out.display(),
        manifest.splits[0].instances,
        manifest.splits[1].instances,
        manifest.splits[2].instances
    );
    Ok(())
}

fn load_split(dir: &Path, name: &str) -> Result<(DatasetSchema, Vec<DatasetInstance>)> {
    let path = dir.join(format!("{name}.jsonl"));
    load_dataset(&path).with_context(|| format!("loading {}", path.display()))
}

fn prepare(data: &[DatasetInstance], relations: usize) -> Vec<PreparedInstance> {
    data.iter()
        .map(|i| PreparedInstance::new(i, relations))
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    file.check_known(&[
        "seed", "hops", "heads", "dropout", "lr", "epochs", "patience", "batch", "dq", "dm",
        "attn-dim", "decoder-hidden",
    ])?;
    let (schema, train_raw) = load_split(&args.data, "train")?;
    let (schema_v, valid_raw) = load_split(&args.data, "valid")?;
    let (schema_t, test_raw) = load_split(&args.data, "test")?;
    if schema_v != schema {
        bail!("valid split schema differs from train split");
    }
    if schema_t != schema {
        bail!("test split schema differs from train split");
    }

    let d_q = resolve(args.dq, file.get("dq")?, 64);
    let d_m = resolve(args.dm, file.get("dm")?, 64);
    let config = ModelConfig {
        d_q,
        d_m,
        d_x: schema.d_x,
        hops: resolve(args.hops, file.get("hops")?, 10),
        heads: resolve(args.heads, file.get("heads")?, 1),
        relations: schema.relations,
        n_tasks: schema.tasks,
        query_dim: schema.query_dim,
        n_classes: schema.classes,
        dropout: resolve(args.dropout, file.get("dropout")?, 0.2),
        attn_dim: resolve(args.attn_dim, file.get("attn-dim")?, d_m),
        decoder_hidden: resolve(args.decoder_hidden, file.get("decoder-hidden")?, d_q),
    };
    let seed = resolve(args.seed, file.get("seed")?, 0);
    let tcfg = TrainConfig {
        learning_rate: resolve(args.lr, file.get("lr")?, 1e-3),
        batch_size: resolve(args.batch, file.get("batch")?, 16),
        max_epochs: resolve(args.epochs, file.get("epochs")?, 50),
        patience: resolve(args.patience, file.get("patience")?, 5),
        seed,
        ..TrainConfig::default()
    };

    let tr = prepare(&train_raw, config.relations);
    let va = prepare(&valid_raw, config.relations);
    let te = prepare(&test_raw, config.relations);

    let params = ModelParams::init(&config, seed)?;
    let outcome = train(params, &config, &tcfg, &tr, &va)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let model_path = args.out.join("model.json");
    save_model(&model_path, &config, &outcome.params)?;
    let history_path = args.out.join("history.csv");
    std::fs::write(&history_path, history_to_csv(&outcome.history))
        .with_context(|| format!("writing {}", history_path.display()))?;

    let report = evaluate(&outcome.params, &config, &te)?;
    println!(
        "trained {} epochs (best {}), model {}, history {}",
        outcome.history.len(),
        outcome.best_epoch,
        model_path.display(),
        history_path.display()
    );
    print_report(&report);
    Ok(())
}

fn check_compat(config: &ModelConfig, schema: &DatasetSchema) -> Result<()> {
    let mut problems = Vec::new();
    if config.d_x != schema.d_x {
        problems.push(format!("d_x {} vs {}", config.d_x, schema.d_x));
    }
    if config.relations != schema.relations {
        problems.push(format!(
            "relations {} vs {}",
            config.relations, schema.relations
        ));
    }
    if config.n_classes != schema.classes {
        problems.push(format!("classes {} vs {}", config.n_classes, schema.classes));
    }
    if config.n_tasks != schema.tasks {
        problems.push(format!("tasks {} vs {}", config.n_tasks, schema.tasks));
    }
    if config.query_dim != schema.query_dim {
        problems.push(format!(
            "query_dim {} vs {}",
            config.query_dim, schema.query_dim
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        bail!("model/data schema mismatch: {}", problems.join(", "))
    }
}

fn print_report(report: &EvalReport) {
    let auc = report
        .auc
        .map(|a| format!("{a:.6}"))
        .unwrap_or_else(|| "undefined".into());
    println!("instances  {}", report.instances);
    println!("loss       {:.6}", report.loss);
    println!("auc        {auc}");
    println!("micro_f1   {:.6}", report.micro_f1);
    println!("macro_f1   {:.6}", report.macro_f1);
    println!("class  precision  recall  f1  support");
    for (c, s) in report.per_class.iter().enumerate() {
        println!(
            "{c}  {:.6}  {:.6}  {:.6}  {}",
            s.precision, s.recall, s.f1, s.support
        );
    }
}

fn report_csv(report: &EvalReport) -> String {
    let auc = report
        .auc
        .map(|a| a.to_string())
        .unwrap_or_else(|| "undefined".into());
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("instances,{}\n", report.instances));
    out.push_str(&format!("loss,{}\n", report.loss));
    out.push_str(&format!("auc,{auc}\n"));
    out.push_str(&format!("micro_f1,{}\n", report.micro_f1));
    out.push_str(&format!("macro_f1,{}\n", report.macro_f1));
    for (c, s) in report.per_class.iter().enumerate() {
        out.push_str(&format!("class{c}_precision,{}\n", s.precision));
        out.push_str(&format!("class{c}_recall,{}\n", s.recall));
        out.push_str(&format!("class{c}_f1,{}\n", s.f1));
        out.push_str(&format!("class{c}_support,{}\n", s.support));
    }
    out
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (config, params) = load_model(&args.model)?;
    let (schema, data) = load_dataset(&args.data)?;
    check_compat(&config, &schema)?;
    if data.is_empty() {
        bail!("dataset {} has no instances", args.data.display());
    }
    let prepared = prepare(&data, config.relations);
    let report = evaluate(&params, &config, &prepared)?;
    print_report(&report);
    if let Some(out) = args.out {
        std::fs::write(&out, report_csv(&report))
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (config, params) = load_model(&args.model)?;
    let (schema, data) = load_dataset(&args.data)?;
    check_compat(&config, &schema)?;
    if data.is_empty() {
        bail!("dataset {} has no instances", args.data.display());
    }
    let mut csv = String::from("index,label,predicted");
    for c in 0..config.n_classes {
        csv.push_str(&format!(",p{c}"));
    }
    csv.push('\n');
    for (idx, inst) in data.iter().enumerate() {
        let prepared = PreparedInstance::new(inst, config.relations);
        let (probs, _) = forward(&prepared, &params, &config)?;
        csv.push_str(&format!("{idx},{},{}", inst.label, predict_class(&probs)));
        for p in &probs {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');
    }
    match args.out {
        Some(out) => std::fs::write(&out, csv)
            .with_context(|| format!("writing {}", out.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let (config, params) = load_model(&args.model)?;
    let (schema, data) = load_dataset(&args.data)?;
    check_compat(&config, &schema)?;
    let inst = data
        .get(args.index)
        .ok_or_else(|| anyhow!("index {} out of range ({} instances)", args.index, data.len()))?;
    let prepared = PreparedInstance::new(inst, config.relations);
    let (probs, trace) = forward(&prepared, &params, &config)?;

    let mut records = trace.attention;
    records.sort_by_key(|r| (r.hop, r.component, r.head));
    let mut csv = String::new();
    for rec in &records {
        csv.push_str(&format!("{},{},{}", rec.hop, rec.component, rec.head));
        for w in &rec.weights {
            csv.push_str(&format!(",{w}"));
        }
        csv.push('\n');
    }
    eprintln!(
        "instance {} label {} predicted {} ({} attention rows)",
        args.index,
        inst.label,
        predict_class(&probs),
        records.len()
    );
    match args.out {
        Some(out) => std::fs::write(&out, csv)
            .with_context(|| format!("writing {}", out.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}
