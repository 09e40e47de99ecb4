use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cgcn::centrality::{assemble_centrality_set, highlights, parse_streams, CentralityMode, CentralitySet};
use cgcn::config::{RunConfig, StreamMode};
use cgcn::dataio::{parse_sequence, synth_generate, Archetype, SynthSpec};
use cgcn::experiment::{self, ablate, eval_models, load_checkpoints, select_models, train, Dataset, TrainOptions};
use cgcn::gradcheck::{run_gradcheck, GradcheckOptions};
use cgcn::graph::SkeletonTemplate;
use cgcn::linalg::Matrix;
use cgcn::net::CgcnModel;
use cgcn::{Error, Result};

/// Centrality graph convolution for skeleton action recognition.
#[derive(Debug, Parser)]
#[command(name = "cgcn", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print a machine-readable JSON result on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (capped by CGCN_THREADS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Skeleton template commands.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Centrality matrix commands.
    #[command(subcommand)]
    Centrality(CentralityCommand),
    /// Synthetic data commands.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Train the stream models on a manifest.
    Train(TrainArgs),
    /// Evaluate trained checkpoints on a manifest.
    Eval(EvalArgs),
    /// Compare stream subsets in a five-row table.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
enum GraphCommand {
    /// Check that a template forms a valid skeleton graph.
    Validate {
        /// Built-in id (ntu25, openpose18) or path to a template file.
        template: String,
    },
}

#[derive(Debug, Subcommand)]
enum CentralityCommand {
    /// Compute J, B, W and the normalized adjacency for one sequence.
    Compute(CentralityArgs),
}

#[derive(Debug, Args)]
struct CentralityArgs {
    /// Sequence file.
    input: PathBuf,
    /// sequence_mean or per_frame.
    #[arg(long, default_value = "sequence_mean")]
    mode: CentralityMode,
    /// Output JSON file; printed to stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Directory for one CSV heatmap per matrix.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// List the k largest entries of each matrix.
    #[arg(long, value_name = "K")]
    highlight: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Write archetype sequences and a manifest.
    Generate(SynthArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    /// Comma-separated archetypes, in label order.
    #[arg(long, default_value = "walk,bow,wave,stand")]
    classes: String,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    /// Uniform coordinate noise amplitude.
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Preset (desk, paper) or TOML file; desk when absent.
    #[arg(long, short)]
    config: Option<String>,
    /// Comma-separated subset of J,B,W,A.
    #[arg(long)]
    streams: Option<String>,
    /// four-stream or single.
    #[arg(long)]
    mode: Option<StreamMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Stop once eval-mode training top-1 reaches this value.
    #[arg(long)]
    stop_at_top1: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset manifest (path,label CSV).
    manifest: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for checkpoints and reports.
    #[arg(long, short, default_value = "run")]
    out: PathBuf,
    /// Also checkpoint every k epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Record wall time per epoch in the report.
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset manifest.
    manifest: PathBuf,
    /// Directory holding stream_*.json checkpoints.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Comma-separated subset of J,B,W,A; every checkpoint when absent.
    #[arg(long)]
    streams: Option<String>,
    /// Preset or TOML file; the configuration stored in the checkpoints when absent.
    #[arg(long, short)]
    config: Option<String>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Training manifest; also the evaluation set unless --eval-manifest is given.
    manifest: PathBuf,
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Reuse four-stream checkpoints from this directory.
    #[arg(long, conflicts_with = "train")]
    checkpoints: Option<PathBuf>,
    /// Train the models from scratch.
    #[arg(long)]
    train: bool,
    #[command(flatten)]
    run: RunArgs,
    /// Directory for ablation.md, ablation.csv and ablation.json.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Comma-separated layer names; every layer when absent.
    #[arg(long)]
    layers: Option<String>,
    /// Negate every analytic gradient (negative control).
    #[arg(long)]
    inject_fault: bool,
    /// Coordinates sampled per tensor.
    #[arg(long)]
    max_coords: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

/// A command's result: JSON for `--json`, text otherwise, and whether its checks passed.
struct Outcome {
    json: Value,
    text: String,
    ok: bool,
}

impl Outcome {
    fn ok(json: Value, text: String) -> Self {
        Outcome { json, text, ok: true }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = configure_threads(cli.global.jobs) {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match run(&cli) {
        Ok(out) => {
            if cli.global.json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("json output"));
            } else if !out.text.is_empty() {
                print!("{}", out.text);
            }
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            if cli.global.json {
                println!("{}", json!({ "error": e.to_string() }));
            }
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads(jobs: Option<usize>) -> Result<()> {
    let cap = match std::env::var("CGCN_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("CGCN_THREADS={v:?} is not a positive integer")))?,
        ),
        Err(_) => None,
    };
    if jobs == Some(0) {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    let threads = match (jobs, cap) {
        (Some(j), Some(c)) => j.min(c),
        (Some(j), None) => j,
        (None, Some(c)) => c.min(std::thread::available_parallelism().map_or(1, |n| n.get())),
        (None, None) => return Ok(()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    match &cli.command {
        Command::Graph(GraphCommand::Validate { template }) => graph_validate(template),
        Command::Centrality(CentralityCommand::Compute(a)) => centrality_compute(a),
        Command::Synth(SynthCommand::Generate(a)) => synth(a, g.seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, g.seed),
        Command::Eval(a) => cmd_eval(a, g.seed),
        Command::Ablate(a) => cmd_ablate(a, g.seed),
        Command::Gradcheck(a) => cmd_gradcheck(a, g.seed.unwrap_or(0)),
    }
}

fn load_template(spec: &str) -> Result<(String, SkeletonTemplate)> {
    if let Some(t) = SkeletonTemplate::builtin(spec) {
        return Ok((spec.to_string(), t));
    }
    let path = Path::new(spec);
    if path.exists() {
        return Ok((path.display().to_string(), SkeletonTemplate::load(path)?));
    }
    Err(Error::UnknownTemplate(spec.to_string()))
}

fn graph_validate(spec: &str) -> Result<Outcome> {
    let (id, template) = load_template(spec)?;
    let graph = template.graph()?;
    let connected = graph.is_connected();
    let tree = connected && graph.is_forest();
    let json = json!({
        "template": id,
        "joint_count": graph.joint_count(),
        "dims": graph.dims(),
        "bones": graph.edges().len(),
        "connected": connected,
        "tree": tree,
    });
    let text = format!(
        "{id}: {} joints, {} bones, {}-D, {}{}\n",
        graph.joint_count(),
        graph.edges().len(),
        graph.dims(),
        if connected { "connected" } else { "disconnected" },
        if tree { ", tree" } else { "" },
    );
    Ok(Outcome::ok(json, text))
}

fn centrality_compute(a: &CentralityArgs) -> Result<Outcome> {
    let seq = parse_sequence(&a.input)?;
    let graph = SkeletonTemplate::resolve(&seq.template, a.input.parent())?.graph()?;
    let sets = assemble_centrality_set(&graph, seq.primary(), a.mode)?;
    let mut doc = match sets.as_slice() {
        [one] if a.mode == CentralityMode::SequenceMean => serde_json::to_value(one)?,
        _ => json!({ "mode": a.mode, "frames": sets }),
    };
    if let Some(k) = a.highlight {
        let lists: Vec<Value> = sets.iter().map(|s| highlight_json(s, k)).collect();
        doc["highlights"] = match lists.len() {
            1 if a.mode == CentralityMode::SequenceMean => lists.into_iter().next().unwrap_or_default(),
            _ => Value::Array(lists),
        };
    }
    if let Some(dir) = &a.csv_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &sets {
            let suffix = s.frame_index.map(|t| format!("_frame{t:04}")).unwrap_or_default();
            for name in MATRIX_NAMES {
                let m = s.matrix(name).expect("known matrix name");
                experiment::write_text(&dir.join(format!("{name}{suffix}.csv")), &matrix_csv(m))?;
            }
        }
    }
    let body = serde_json::to_string_pretty(&doc)?;
    let text = match &a.out {
        Some(path) => {
            experiment::write_text(path, &body)?;
            let mut text = format!("wrote {} matrix set(s) to {}\n", sets.len(), path.display());
            if a.highlight.is_some() {
                text.push_str(&highlight_text(&sets, a.highlight.unwrap_or(0)));
            }
            text
        }
        None => body + "\n",
    };
    Ok(Outcome::ok(doc, text))
}

const MATRIX_NAMES: [&str; 4] = ["J", "B", "W", "A_tilde"];

fn highlight_json(set: &CentralitySet, k: usize) -> Value {
    let mut obj = serde_json::Map::new();
    for name in MATRIX_NAMES {
        let m = set.matrix(name).expect("known matrix name");
        obj.insert(name.to_string(), serde_json::to_value(highlights(m, k)).expect("highlights serialize"));
    }
    Value::Object(obj)
}

fn highlight_text(sets: &[CentralitySet], k: usize) -> String {
    let mut out = String::new();
    for s in sets {
        if let Some(t) = s.frame_index {
            out.push_str(&format!("frame {t}\n"));
        }
        for name in MATRIX_NAMES {
            let m = s.matrix(name).expect("known matrix name");
            let items: Vec<String> = highlights(m, k)
                .iter()
                .map(|h| format!("({},{})={:.4}", h.i, h.j, h.value))
                .collect();
            out.push_str(&format!("  {name}: {}\n", items.join(" ")));
        }
    }
    out
}

fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|j| m[(i, j)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn synth(a: &SynthArgs, seed: u64) -> Result<Outcome> {
    let classes = a
        .classes
        .split(',')
        .map(|s| s.trim().parse::<Archetype>())
        .collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec {
        classes,
        per_class: a.per_class,
        frames: a.frames,
        seed,
        noise: a.noise,
    };
    let entries = synth_generate(&spec, &a.out)?;
    let manifest = a.out.join("manifest.csv");
    let json = json!({ "manifest": manifest, "sequences": entries.len(), "spec": spec });
    let text = format!("wrote {} sequences and {}\n", entries.len(), manifest.display());
    Ok(Outcome::ok(json, text))
}

fn run_config(r: &RunArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut c = RunConfig::load(r.config.as_deref().unwrap_or("desk"))?;
    apply_overrides(&mut c, r, seed)?;
    Ok(c)
}

fn apply_overrides(c: &mut RunConfig, r: &RunArgs, seed: Option<u64>) -> Result<()> {
    if let Some(s) = &r.streams {
        c.streams = parse_streams(s)?;
    }
    if let Some(m) = r.mode {
        c.mode = m;
    }
    if let Some(e) = r.epochs {
        c.epochs = e;
    }
    if let Some(b) = r.batch_size {
        c.batch_size = b;
    }
    if let Some(lr) = r.learning_rate {
        c.learning_rate = lr;
    }
    if let Some(t) = r.stop_at_top1 {
        c.stop_at_train_top1 = Some(t);
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<Outcome> {
    let mut config = run_config(&a.run, seed)?;
    if let Some(k) = a.checkpoint_every {
        config.checkpoint_every = k;
    }
    let data = Dataset::load(&a.manifest)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    experiment::write_text(&a.out.join("config.toml"), &config.to_toml())?;
    let outcome = train(
        &config,
        &data,
        &TrainOptions {
            out_dir: Some(&a.out),
            timing: a.timing,
        },
    )?;
    let report = &outcome.report;
    let last = report.epochs.last().ok_or(Error::EmptyDataset)?;
    let text = format!(
        "trained {} model(s) for {} epochs: loss {:.4}, train top-1 {:.4}\nwrote {}\n",
        outcome.models.len(),
        report.epochs.len(),
        last.loss,
        last.top1,
        a.out.display()
    );
    Ok(Outcome::ok(serde_json::to_value(report)?, text))
}

fn checkpoint_config(models: &[(CgcnModel, Option<Value>)]) -> Result<Option<RunConfig>> {
    let Some(echo) = models.iter().find_map(|(_, v)| v.clone()) else {
        return Ok(None);
    };
    let c: RunConfig = serde_json::from_value(echo).map_err(|e| Error::Config(e.to_string()))?;
    c.validate()?;
    Ok(Some(c))
}

fn cmd_eval(a: &EvalArgs, seed: Option<u64>) -> Result<Outcome> {
    let loaded = load_checkpoints(&a.checkpoints)?;
    let mut config = match &a.config {
        Some(spec) => RunConfig::load(spec)?,
        None => checkpoint_config(&loaded)?.unwrap_or_default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let wanted = a.streams.as_deref().map(parse_streams).transpose()?;
    let models: Vec<CgcnModel> = loaded.into_iter().map(|(m, _)| m).collect();
    let mut models = select_models(models, wanted.as_deref())?;
    let data = Dataset::load(&a.manifest)?;
    let report = eval_models(&mut models, &config, &data)?;
    let text = format!(
        "streams {}: {} samples, top-1 {:.4}, top-5 {:.4}\n",
        report.streams.join(","),
        report.samples,
        report.top1,
        report.top5
    );
    Ok(Outcome::ok(serde_json::to_value(&report)?, text))
}

fn cmd_ablate(a: &AblateArgs, seed: Option<u64>) -> Result<Outcome> {
    let (config, trained) = match (&a.checkpoints, a.train) {
        (Some(dir), false) => {
            let loaded = load_checkpoints(dir)?;
            let mut config = match (&a.run.config, checkpoint_config(&loaded)?) {
                (Some(spec), _) => RunConfig::load(spec)?,
                (None, echoed) => echoed.unwrap_or_default(),
            };
            apply_overrides(&mut config, &a.run, seed)?;
            if config.mode != StreamMode::FourStream {
                return Err(Error::Config("checkpoint reuse needs four-stream models".into()));
            }
            let models: Vec<CgcnModel> = loaded.into_iter().map(|(m, _)| m).collect();
            (config, Some(models))
        }
        (None, true) => (run_config(&a.run, seed)?, None),
        _ => {
            return Err(Error::MissingCheckpoint(PathBuf::from(
                "pass --checkpoints <dir> or --train",
            )))
        }
    };
    let train_data = Dataset::load(&a.manifest)?;
    let eval_data = match &a.eval_manifest {
        Some(m) => Dataset::load(m)?,
        None => train_data.clone(),
    };
    let table = ablate(&config, &train_data, &eval_data, trained)?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        experiment::write_text(&dir.join("ablation.md"), &table.to_markdown())?;
        experiment::write_text(&dir.join("ablation.csv"), &table.to_csv())?;
        experiment::write_text(&dir.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
    }
    Ok(Outcome::ok(serde_json::to_value(&table)?, table.to_markdown()))
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64) -> Result<Outcome> {
    let defaults = GradcheckOptions::default();
    let opts = GradcheckOptions {
        step: a.step.unwrap_or(defaults.step),
        threshold: a.threshold.unwrap_or(defaults.threshold),
        max_coords: a.max_coords.unwrap_or(defaults.max_coords),
        seed,
        inject_fault: a.inject_fault,
        layers: a
            .layers
            .as_ref()
            .map(|l| l.split(',').map(|s| s.trim().to_string()).collect()),
        ..defaults
    };
    let report = run_gradcheck(&opts)?;
    let mut text = String::new();
    for (layer, err, ok) in report.per_layer() {
        text.push_str(&format!("{layer:<24} {err:.3e} {}\n", if ok { "ok" } else { "FAIL" }));
    }
    let ok = report.passed();
    text.push_str(if ok { "all layers pass\n" } else { "gradient check failed\n" });
    let json = json!({
        "passed": ok,
        "layers": report
            .per_layer()
            .into_iter()
            .map(|(layer, err, ok)| json!({ "layer": layer, "max_relative_error": err, "passed": ok }))
            .collect::<Vec<_>>(),
        "report": report,
    });
    Ok(Outcome { json, text, ok })
}
