use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gpoolnet::checkpoint::Checkpoint;
use gpoolnet::dataset::{
    convert_rows, corpus_vocabulary, dataset_vocabulary, parse_corpus, read_records,
    workers_from_env, write_records, GraphRecord,
};
use gpoolnet::embeddings::EmbeddingTable;
use gpoolnet::model::{build, param_count, DEFAULT_CHANNELS};
use gpoolnet::text2graph::{
    load_stopwords, ConversionConfig, DistanceBasis, PosLexicon, TermFilter,
};
use gpoolnet::training::{evaluate, MetricsWriter};
use gpoolnet::{gradcheck, synthetic, Arch, Error, ModelParams, ModelSpec, Result, Scalar};
use gpoolnet::{TextGraph, TrainConfig, Trainer, VERSION};

static STOP: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "gpoolnet", version, about = "Graph-of-words text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CSV corpus (label,text) into a JSON-lines graph dataset.
    Convert(ConvertArgs),
    /// Train a model on a converted dataset.
    Train(TrainArgs),
    /// Report the classification error rate of a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Per-group parameter counts of an architecture.
    Params(ParamsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Terms {
    /// Nouns, verbs and adjectives from the POS lexicon.
    Pos,
    /// Every token that is not a stopword.
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Basis {
    Text,
    Terms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 4)]
    window: usize,
    #[arg(long)]
    max_nodes: usize,
    #[arg(long, value_enum, default_value_t = Terms::Pos)]
    terms: Terms,
    /// One stopword per line; replaces the built-in list.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Lines of `token tag` with tag one of noun, verb, adj, other.
    #[arg(long)]
    pos_lexicon: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Basis::Text)]
    distance_basis: Basis,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    embeddings: PathBuf,
    /// Node capacity the dataset was converted with.
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long)]
    arch: Option<String>,
    /// Four comma-separated layer widths.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    /// Write 0 in the wall_seconds column so logs are reproducible.
    #[arg(long)]
    no_wall_clock: bool,
    /// TOML file with any of the flag values; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Overrides the node capacity stored in the checkpoint.
    #[arg(long)]
    max_nodes: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    arch: String,
    #[arg(long, value_delimiter = ',', default_value = "4,4,2,2")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pool without the tanh gate.
    #[arg(long)]
    no_gate: bool,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    arch: String,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long, default_value_t = 400)]
    input_dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Convert(a) => cmd_convert(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Params(a) => cmd_params(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn cmd_convert(a: ConvertArgs) -> Result<ExitCode> {
    let mut cfg = ConversionConfig::new(a.window, a.max_nodes)?;
    cfg.terms = match a.terms {
        Terms::Pos => TermFilter::content_words(),
        Terms::All => TermFilter::All,
    };
    cfg.distance_basis = match a.distance_basis {
        Basis::Text => DistanceBasis::Text,
        Basis::Terms => DistanceBasis::Terms,
    };
    if let Some(p) = &a.stopwords {
        cfg.stopwords = load_stopwords(p)?;
    }
    match &a.pos_lexicon {
        Some(p) => cfg.lexicon = PosLexicon::load(p)?,
        None if matches!(a.terms, Terms::Pos) => {
            eprintln!("warning: --terms pos without --pos-lexicon tags every token as other")
        }
        None => {}
    }

    let file = File::open(&a.input).map_err(|e| io_err(&a.input, e))?;
    let (rows, malformed) = parse_corpus(std::io::BufReader::new(file));
    for m in &malformed {
        eprintln!("{}:{}: skipped: {}", a.input.display(), m.line, m.reason);
    }
    let vocab = corpus_vocabulary(&rows, &cfg);
    let embeddings = EmbeddingTable::load(&a.embeddings, Some(&vocab))?;
    let (records, stats) = convert_rows(&rows, &embeddings, &cfg, workers_from_env()?)?;
    write_records(&a.output, &records)?;
    println!(
        "docs={} mean_terms={:.4} unknown_words={} degenerate={} malformed={}",
        stats.docs,
        stats.mean_terms,
        stats.unknown_words,
        stats.degenerate,
        malformed.len()
    );
    Ok(ExitCode::SUCCESS)
}

/// Values accepted from `--config`; every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    arch: Option<String>,
    channels: Option<Vec<usize>>,
    kernel_width: Option<usize>,
    classes: Option<usize>,
    max_nodes: Option<usize>,
    precision: Option<Precision>,
    renormalize_after_pool: Option<bool>,
    gpool_gate: Option<bool>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    decay_factor: Option<f64>,
    decay_epochs: Option<Vec<usize>>,
    dropout_keep: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    seed: Option<u64>,
    wall_clock: Option<bool>,
}

fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct InputDigest {
    role: &'static str,
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    precision: Precision,
    max_nodes: usize,
    model: &'a ModelSpec,
    training: &'a TrainConfig,
    gpool_placement: Vec<usize>,
    resumed_from_step: Option<u64>,
    inputs: Vec<InputDigest>,
}

struct ResolvedTrain {
    spec: ModelSpec,
    cfg: TrainConfig,
    max_nodes: usize,
    precision: Precision,
}

fn resolve_train(
    a: &TrainArgs,
    file: &FileConfig,
    resume: Option<&Checkpoint>,
    embed_dim: usize,
    labels: usize,
) -> Result<ResolvedTrain> {
    let base_cfg = resume.and_then(|c| c.config.clone()).unwrap_or_default();
    let max_nodes = a
        .max_nodes
        .or(file.max_nodes)
        .or(resume.and_then(|c| c.max_nodes))
        .ok_or_else(|| Error::Config("--max-nodes is required (the conversion capacity)".into()))?;
    let input_dim = embed_dim + max_nodes;

    let spec = match resume {
        Some(ck) => {
            for (flag, given) in [
                ("--arch", a.arch.is_some()),
                ("--channels", a.channels.is_some()),
                ("--classes", a.classes.is_some()),
            ] {
                if given {
                    return Err(Error::Config(format!(
                        "{flag} cannot change the architecture of a resumed run"
                    )));
                }
            }
            if ck.spec.input_dim != input_dim {
                return Err(Error::Config(format!(
                    "checkpoint expects input_dim {}, embeddings ({embed_dim}) plus max_nodes ({max_nodes}) give {input_dim}",
                    ck.spec.input_dim
                )));
            }
            ck.spec.clone()
        }
        None => {
            let arch: Arch = a
                .arch
                .as_deref()
                .or(file.arch.as_deref())
                .ok_or_else(|| Error::Config("--arch is required".into()))?
                .parse()?;
            let n_classes = a.classes.or(file.classes).unwrap_or(labels);
            let channels = a
                .channels
                .clone()
                .or_else(|| file.channels.clone())
                .unwrap_or_else(|| DEFAULT_CHANNELS.to_vec());
            let mut spec = ModelSpec::new(arch, input_dim, n_classes).with_channels(&channels);
            if let Some(w) = file.kernel_width {
                spec.kernel_width = w;
            }
            if let Some(r) = file.renormalize_after_pool {
                spec.renormalize_after_pool = r;
            }
            if let Some(g) = file.gpool_gate {
                spec.gpool_gate = g;
            }
            spec
        }
    };
    if labels > spec.n_classes {
        return Err(Error::Config(format!(
            "dataset has label {} but the model has {} classes",
            labels - 1,
            spec.n_classes
        )));
    }

    let cfg = TrainConfig {
        lr0: a.lr.or(file.lr).unwrap_or(base_cfg.lr0),
        decay_factor: file.decay_factor.unwrap_or(base_cfg.decay_factor),
        decay_epochs: file.decay_epochs.clone().unwrap_or(base_cfg.decay_epochs),
        epochs: a.epochs.or(file.epochs).unwrap_or(base_cfg.epochs),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(base_cfg.batch_size),
        dropout_keep: file.dropout_keep.unwrap_or(base_cfg.dropout_keep),
        beta1: file.beta1.unwrap_or(base_cfg.beta1),
        beta2: file.beta2.unwrap_or(base_cfg.beta2),
        epsilon: file.epsilon.unwrap_or(base_cfg.epsilon),
        seed: a.seed.or(file.seed).unwrap_or(base_cfg.seed),
        wall_clock: if a.no_wall_clock {
            false
        } else {
            file.wall_clock.unwrap_or(base_cfg.wall_clock)
        },
    };
    cfg.validate()?;
    let mut spec = spec;
    spec.dropout_keep = cfg.dropout_keep;
    spec.validate()?;
    Ok(ResolvedTrain {
        spec,
        cfg,
        max_nodes,
        precision: a.precision.or(file.precision).unwrap_or(Precision::F32),
    })
}

fn check_records(records: &[GraphRecord], max_nodes: usize, path: &Path) -> Result<()> {
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.nodes.len() > max_nodes) {
        return Err(Error::Config(format!(
            "{} record {} has {} nodes, more than --max-nodes {max_nodes}",
            path.display(),
            i + 1,
            r.nodes.len()
        )));
    }
    Ok(())
}

fn to_graphs(
    records: &[GraphRecord],
    embeddings: &EmbeddingTable,
    max_nodes: usize,
) -> Result<Vec<TextGraph>> {
    records
        .iter()
        .map(|r| r.to_graph(embeddings, max_nodes).map(|(g, _)| g))
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let file_cfg = match &a.config {
        Some(p) => load_file_config(p)?,
        None => FileConfig::default(),
    };
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let train_records = read_records(&a.train)?;
    let val_records = a.val.as_ref().map(read_records).transpose()?;
    let mut all: Vec<GraphRecord> = train_records.clone();
    all.extend(val_records.iter().flatten().cloned());
    let labels = all.iter().map(|r| r.label + 1).max().unwrap_or(0);
    let embeddings = EmbeddingTable::load(&a.embeddings, Some(&dataset_vocabulary(&all)))?;

    let r = resolve_train(&a, &file_cfg, resume.as_ref(), embeddings.dim(), labels)?;
    check_records(&train_records, r.max_nodes, &a.train)?;
    if let (Some(v), Some(p)) = (&val_records, &a.val) {
        check_records(v, r.max_nodes, p)?;
    }
    if train_records.is_empty() {
        return Err(Error::Config(format!("{} holds no records", a.train.display())));
    }

    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut inputs = vec![digest("train", &a.train)?];
    if let Some(p) = &a.val {
        inputs.push(digest("val", p)?);
    }
    inputs.push(digest("embeddings", &a.embeddings)?);
    if let Some(p) = &a.config {
        inputs.push(digest("config", p)?);
    }
    if let Some(p) = &a.resume {
        inputs.push(digest("resume", p)?);
    }
    let manifest = Manifest {
        tool: "gpoolnet",
        version: VERSION,
        command: "train",
        seed: r.cfg.seed,
        precision: r.precision,
        max_nodes: r.max_nodes,
        model: &r.spec,
        training: &r.cfg,
        gpool_placement: r.spec.pool_placement(),
        resumed_from_step: resume.as_ref().map(|c| c.step),
        inputs,
    };
    let manifest_path = a.out.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| io_err(&manifest_path, e))?;

    let train = to_graphs(&train_records, &embeddings, r.max_nodes)?;
    let val = val_records
        .as_ref()
        .map(|v| to_graphs(v, &embeddings, r.max_nodes))
        .transpose()?;

    ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst))
        .map_err(|e| Error::Config(format!("cannot install interrupt handler: {e}")))?;

    match r.precision {
        Precision::F32 => run_training::<f32>(&a.out, &r, resume.as_ref(), &train, val.as_deref()),
        Precision::F64 => run_training::<f64>(&a.out, &r, resume.as_ref(), &train, val.as_deref()),
    }
}

fn run_training<T: Scalar>(
    out: &Path,
    r: &ResolvedTrain,
    resume: Option<&Checkpoint>,
    train: &[TextGraph],
    val: Option<&[TextGraph]>,
) -> Result<ExitCode> {
    let ck_path = out.join("checkpoint.json");
    let metrics_path = out.join("metrics.csv");
    let (mut trainer, mut metrics) = match resume {
        Some(ck) => (
            Trainer::resume(&r.spec, &r.cfg, ck.params_as::<T>(), ck.train_state::<T>())?,
            MetricsWriter::append(&metrics_path)?,
        ),
        None => (
            Trainer::new(&r.spec, &r.cfg, build::<T>(&r.spec, r.cfg.seed)?)?,
            MetricsWriter::create(&metrics_path)?,
        ),
    };
    trainer = trainer.with_stop_flag(&STOP);
    let save = |t: &Trainer<T>| {
        Checkpoint::from_training(t.spec(), t.config(), t.params(), t.state())
            .with_max_nodes(r.max_nodes)
            .save(&ck_path)
    };
    let outcome = trainer.fit(train, val, |m, t| {
        metrics.write(m)?;
        save(t)?;
        let val = m.val_err.map_or_else(String::new, |v| format!(" val_err={v:.4}"));
        eprintln!(
            "epoch {:>3} lr={:.0e} loss={:.5} train_err={:.4}{val}",
            m.epoch, m.lr, m.train_loss, m.train_err
        );
        Ok(())
    });
    match outcome {
        Ok(_) => {
            save(&trainer)?;
            println!("checkpoint={}", ck_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::Interrupted { epoch, step }) => {
            save(&trainer)?;
            eprintln!(
                "interrupted at epoch {epoch}, step {step}; resume with --resume {}",
                ck_path.display()
            );
            Ok(ExitCode::from(130))
        }
        Err(e) => Err(e),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let max_nodes = a.max_nodes.or(ck.max_nodes).ok_or_else(|| {
        Error::Config("checkpoint does not record max_nodes; pass --max-nodes".into())
    })?;
    let records = read_records(&a.data)?;
    check_records(&records, max_nodes, &a.data)?;
    let embeddings = EmbeddingTable::load(&a.embeddings, Some(&dataset_vocabulary(&records)))?;
    if embeddings.dim() + max_nodes != ck.spec.input_dim {
        return Err(Error::Config(format!(
            "checkpoint expects input_dim {}, embeddings ({}) plus max_nodes ({max_nodes}) give {}",
            ck.spec.input_dim,
            embeddings.dim(),
            embeddings.dim() + max_nodes
        )));
    }
    if let Some(r) = records.iter().find(|r| r.label >= ck.spec.n_classes) {
        return Err(Error::Config(format!(
            "label {} is outside the model's {} classes",
            r.label, ck.spec.n_classes
        )));
    }
    let graphs = to_graphs(&records, &embeddings, max_nodes)?;
    let params: ModelParams<f32> = ck.params_as();
    let err = evaluate(&graphs, &params, &ck.spec)?;
    println!("error_rate={err}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let arch: Arch = a.arch.parse()?;
    const INPUT_DIM: usize = 6;
    const CLASSES: usize = 3;
    const NODES: usize = 5;
    let mut spec = ModelSpec::new(arch, INPUT_DIM, CLASSES).with_channels(&a.widths);
    spec.gpool_gate = !a.no_gate;
    spec.validate()?;
    let mut params: ModelParams<f64> = build(&spec, a.seed)?;
    gradcheck::jitter(&mut params, 0.1, a.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let graph = synthetic::random_graph(&mut rng, NODES, INPUT_DIM, 1, 0.5)?;
    let reports = gradcheck::check_model(
        &params,
        &spec,
        &graph,
        gradcheck::DEFAULT_STEP,
        a.tolerance,
    )?;
    println!(
        "{:<8} {:>7} {:>12} {:>12}  result",
        "group", "entries", "max_rel_err", "grad_norm"
    );
    for r in &reports {
        let verdict = match (r.passed, r.expected_zero) {
            (true, true) => "PASS (zero gradient, expected)",
            (false, true) => "FAIL (expected zero gradient)",
            (true, false) => "PASS",
            (false, false) => "FAIL",
        };
        println!(
            "{:<8} {:>7} {:>12.3e} {:>12.3e}  {verdict}",
            r.group, r.entries, r.max_rel_err, r.grad_norm
        );
    }
    Ok(if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_params(a: ParamsArgs) -> Result<ExitCode> {
    let arch: Arch = a.arch.parse()?;
    let channels = a.channels.unwrap_or_else(|| DEFAULT_CHANNELS.to_vec());
    let spec = ModelSpec::new(arch, a.input_dim, a.classes).with_channels(&channels);
    spec.validate()?;
    let params: ModelParams<f32> = build(&spec, 0)?;
    let counts = param_count(&params);
    if a.json {
        #[derive(Serialize)]
        struct Out<'a> {
            arch: &'a str,
            channels: &'a [usize],
            input_dim: usize,
            classes: usize,
            #[serde(flatten)]
            counts: &'a gpoolnet::model::ParamCount,
        }
        let out = Out {
            arch: arch.name(),
            channels: &channels,
            input_dim: a.input_dim,
            classes: a.classes,
            counts: &counts,
        };
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("{:<8} {:>12}", "group", "params");
        for g in &counts.groups {
            println!("{:<8} {:>12}", g.group, g.count);
        }
        println!("{:<8} {:>12}", "total", counts.total);
        println!(
            "gpool overhead: {} ({:.4}%)",
            counts.gpool_overhead,
            counts.gpool_ratio * 100.0
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn digest(role: &'static str, path: &Path) -> Result<InputDigest> {
    let mut file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(InputDigest {
        role,
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
    })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
