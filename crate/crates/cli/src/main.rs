//! Command-line pipeline: synthesize data, build graphs, train, infer,
//! evaluate, render, gradient-check, and run ablation sweeps.
//!
//! Precedence: built-in defaults < `--config` TOML < command-line flags.
//! Commands that write into an output directory echo the effective config
//! there for provenance. Exit codes: 0 success, 2 config/usage error,
//! 3 I/O error, 4 check or validation failure, 1 anything else.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cadspot::ablate::{format_table, module_sweep, run_ablation, stage_sweep, AblateVariant};
use cadspot::autodiff::Tape;
use cadspot::dataset::render::{render_svg, RenderOptions};
use cadspot::dataset::synth::{generate_synthetic, SynthSpec};
use cadspot::dataset::{load_dataset, tile_record, write_dataset, DrawingRecord};
use cadspot::extract::{extract, ground_truth_prediction, PanopticPrediction};
use cadspot::gradcheck::{model_gradient_check, GradCheckSettings};
use cadspot::graph::{build_graph, DrawingGraph, GraphConfig};
use cadspot::metrics::{
    detection_ap_multi, semantic_f1, Detection, DrawingDetections, EvaluationReport, GtBox,
    PqAggregate,
};
use cadspot::model::{AblationConfig, CeeMode, Checkpoint, ModelConfig, ModelParams};
use cadspot::train::{train, AdamState, TrainConfig};
use cadspot::ClassTable;

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Check(String),
    Run(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Check(_) => 4,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Run(m) => write!(f, "{m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<cadspot::dataset::DatasetError> for CliError {
    fn from(e: cadspot::dataset::DatasetError) -> Self {
        use cadspot::dataset::DatasetError::*;
        match &e {
            Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<cadspot::graph::GraphError> for CliError {
    fn from(e: cadspot::graph::GraphError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<cadspot::model::ModelError> for CliError {
    fn from(e: cadspot::model::ModelError) -> Self {
        use cadspot::model::ModelError::*;
        match &e {
            InvalidConfig(_) | CheckpointVersion(_) | CheckpointMismatch(_) => {
                CliError::Config(e.to_string())
            }
            Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Run(e.to_string()),
        }
    }
}

impl From<cadspot::train::TrainError> for CliError {
    fn from(e: cadspot::train::TrainError) -> Self {
        CliError::Run(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Merged pipeline configuration; every field defaults to the reference
/// value where one exists (epsilon 300, K 30, S 8, H 8, lambda 2, prune
/// threshold 0.7, lr 0.001 decaying 0.7 per 20 epochs).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    graph: GraphConfig,
    model: ModelConfig,
    ablation: AblationConfig,
    train: TrainConfig,
}

#[derive(Parser)]
#[command(name = "cadspot", version, about = "Panoptic symbol spotting on vector CAD drawings")]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for eval/infer/render fan-out (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Number of attention stages.
    #[arg(long)]
    stages: Option<usize>,
    /// Number of attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Vertex feature width.
    #[arg(long)]
    width: Option<usize>,
    /// Relative spatial encoding switch.
    #[arg(long)]
    rse: Option<bool>,
    /// Edge-encoding mode for the instance head: off | sum | <1-based stage>.
    #[arg(long)]
    cee: Option<String>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Adjacency prune threshold used at extraction time.
    #[arg(long)]
    prune_threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic floor-plan dataset.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        drawings: usize,
        #[arg(long, default_value = "train")]
        split: String,
        /// Drop the table class (4 classes instead of 5).
        #[arg(long)]
        no_tables: bool,
        #[arg(long)]
        rooms_x: Option<usize>,
        #[arg(long)]
        rooms_y: Option<usize>,
        #[arg(long)]
        door_prob: Option<f64>,
        #[arg(long)]
        window_prob: Option<f64>,
        #[arg(long)]
        table_prob: Option<f64>,
        #[arg(long)]
        clutter_max: Option<usize>,
    },
    /// Build drawing graphs and report their statistics.
    BuildGraph {
        #[arg(long)]
        manifest: PathBuf,
        /// Write per-drawing stats as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Split oversized drawings into 10 m x 10 m blocks first.
        #[arg(long)]
        tile: bool,
    },
    /// Train a model; writes checkpoints, a JSONL epoch log, and the
    /// effective config.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint (restores optimizer state and epoch).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        model_flags: ModelFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
    },
    /// Run inference and write one prediction file per drawing.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prune_threshold: Option<f64>,
    },
    /// Evaluate predictions against ground truth and write a metrics
    /// report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of prediction files produced by `infer`.
        #[arg(long, conflicts_with = "gt_as_pred")]
        predictions: Option<PathBuf>,
        /// Evaluate the ground truth against itself (sanity oracle).
        #[arg(long)]
        gt_as_pred: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render drawings (and optional predictions) as SVG.
    Render {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        stroke_width: f64,
        /// Skip the instance overlay boxes.
        #[arg(long)]
        no_instances: bool,
    },
    /// Verify model gradients against finite differences; exits nonzero on
    /// failure.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 101)]
        seed: u64,
    },
    /// Train and compare network configurations on one dataset.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated stage counts: sweeps the stage-count axis
        /// instead of the module on/off axis.
        #[arg(long)]
        sweep_stages: Option<String>,
        #[command(flatten)]
        model_flags: ModelFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = load_config(cli.config.as_deref())?;
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::GenSynth {
            out,
            seed,
            drawings,
            split,
            no_tables,
            rooms_x,
            rooms_y,
            door_prob,
            window_prob,
            table_prob,
            clutter_max,
        } => {
            let mut spec = if no_tables {
                SynthSpec::without_tables()
            } else {
                SynthSpec::default()
            };
            if let Some(v) = rooms_x {
                spec.rooms_x = v;
            }
            if let Some(v) = rooms_y {
                spec.rooms_y = v;
            }
            if let Some(v) = door_prob {
                spec.door_prob = v;
            }
            if let Some(v) = window_prob {
                spec.window_prob = v;
            }
            if let Some(v) = table_prob {
                spec.table_prob = v;
            }
            if let Some(v) = clutter_max {
                spec.clutter_max = v;
            }
            cmd_gen_synth(&out, seed, drawings, &split, &spec)
        }
        Command::BuildGraph { manifest, out, tile } => {
            cmd_build_graph(&manifest, out.as_deref(), tile, &config)
        }
        Command::Train {
            manifest,
            val_manifest,
            out,
            resume,
            model_flags,
            train_flags,
        } => {
            apply_model_flags(&mut config, &model_flags)?;
            apply_train_flags(&mut config, &train_flags);
            cmd_train(
                &manifest,
                val_manifest.as_deref(),
                &out,
                resume.as_deref(),
                &config,
            )
        }
        Command::Infer {
            manifest,
            checkpoint,
            out,
            prune_threshold,
        } => {
            if let Some(t) = prune_threshold {
                config.train.prune_threshold = t;
            }
            cmd_infer(&manifest, &checkpoint, &out, &config)
        }
        Command::Eval {
            manifest,
            predictions,
            gt_as_pred,
            out,
        } => {
            if predictions.is_none() && !gt_as_pred {
                return Err(CliError::Config(
                    "eval needs --predictions DIR or --gt-as-pred".into(),
                ));
            }
            cmd_eval(&manifest, predictions.as_deref(), out.as_deref(), &config)
        }
        Command::Render {
            manifest,
            predictions,
            out,
            stroke_width,
            no_instances,
        } => cmd_render(
            &manifest,
            predictions.as_deref(),
            &out,
            stroke_width,
            !no_instances,
            &config,
        ),
        Command::Gradcheck { tolerance, h, seed } => cmd_gradcheck(seed, h, tolerance),
        Command::Ablate {
            manifest,
            val_manifest,
            out,
            sweep_stages,
            model_flags,
            train_flags,
        } => {
            apply_model_flags(&mut config, &model_flags)?;
            apply_train_flags(&mut config, &train_flags);
            cmd_ablate(
                &manifest,
                val_manifest.as_deref(),
                &out,
                sweep_stages.as_deref(),
                &config,
            )
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse_cee(text: &str, stages: usize) -> CliResult<CeeMode> {
    match text {
        "off" => Ok(CeeMode::Off),
        "sum" => Ok(CeeMode::SumAll),
        other => {
            let stage: usize = other.parse().map_err(|_| {
                CliError::Config(format!("--cee expects off | sum | stage number, got {other}"))
            })?;
            if stage == 0 || stage > stages {
                return Err(CliError::Config(format!(
                    "--cee stage {stage} out of range 1..={stages}"
                )));
            }
            Ok(CeeMode::Single(stage - 1))
        }
    }
}

fn apply_model_flags(config: &mut RunConfig, flags: &ModelFlags) -> CliResult<()> {
    if let Some(s) = flags.stages {
        config.model.stages = s;
    }
    if let Some(h) = flags.heads {
        config.model.heads = h;
    }
    if let Some(w) = flags.width {
        // Re-derive the dependent widths the way the defaults do.
        let m = ModelConfig::with_width(
            config.model.stages,
            config.model.heads,
            w,
            config.model.num_classes,
        );
        config.model = ModelConfig {
            scaled_attention: config.model.scaled_attention,
            ..m
        };
    }
    if let Some(rse) = flags.rse {
        config.ablation.rse = rse;
    }
    if let Some(cee) = &flags.cee {
        config.ablation.cee = parse_cee(cee, config.model.stages)?;
    }
    Ok(())
}

fn apply_train_flags(config: &mut RunConfig, flags: &TrainFlags) {
    if let Some(e) = flags.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = flags.lr {
        config.train.lr = lr;
    }
    if let Some(l) = flags.lambda {
        config.train.lambda = l;
    }
    if let Some(s) = flags.seed {
        config.train.rng_seed = s;
        config.graph.rng_seed = s;
    }
    if let Some(t) = flags.prune_threshold {
        config.train.prune_threshold = t;
    }
}

fn echo_config(dir: &Path, config: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(config)
        .map_err(|e| CliError::Run(format!("config serialization: {e}")))?;
    std::fs::write(dir.join("config.effective.toml"), text)?;
    Ok(())
}

/// Load a dataset and build one graph per drawing (optionally tiling).
fn load_graphs(
    manifest: &Path,
    config: &RunConfig,
    tile: bool,
) -> CliResult<(ClassTable, Vec<DrawingRecord>, Vec<DrawingGraph>)> {
    let (manifest, mut records) = load_dataset(manifest)?;
    if tile {
        records = records
            .iter()
            .flat_map(|r| {
                if r.primitives.len() > cadspot::graph::MAX_VERTICES {
                    tile_record(r, 10_000.0)
                } else {
                    vec![r.clone()]
                }
            })
            .collect();
    }
    use rayon::prelude::*;
    let graphs: Result<Vec<DrawingGraph>, _> = records
        .par_iter()
        .map(|r| build_graph(&r.primitives, &config.graph))
        .collect();
    Ok((manifest.classes, records, graphs?))
}

fn cmd_gen_synth(
    out: &Path,
    seed: u64,
    drawings: usize,
    split: &str,
    spec: &SynthSpec,
) -> CliResult<()> {
    let (classes, records) = generate_synthetic(seed, drawings, spec);
    let manifest_path = write_dataset(out, split, &records, &classes)?;
    let spec_json = serde_json::to_string_pretty(spec)
        .map_err(|e| CliError::Run(format!("spec serialization: {e}")))?;
    std::fs::write(out.join("synth.spec.json"), spec_json)?;
    println!(
        "wrote {} drawings ({} classes) to {}",
        records.len(),
        classes.num_classes(),
        manifest_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GraphStats {
    id: String,
    vertices: usize,
    directed_edges: usize,
    min_degree: usize,
    max_degree: usize,
    mean_degree: f64,
    degree_histogram: Vec<usize>,
}

fn cmd_build_graph(
    manifest: &Path,
    out: Option<&Path>,
    tile: bool,
    config: &RunConfig,
) -> CliResult<()> {
    let (_, records, graphs) = load_graphs(manifest, config, tile)?;
    let mut stats = Vec::new();
    for (record, graph) in records.iter().zip(&graphs) {
        let n = graph.num_vertices();
        let degrees: Vec<usize> = (0..n).map(|v| graph.out_degree(v)).collect();
        let s = GraphStats {
            id: record.id.clone(),
            vertices: n,
            directed_edges: graph.num_edges(),
            min_degree: degrees.iter().copied().min().unwrap_or(0),
            max_degree: degrees.iter().copied().max().unwrap_or(0),
            mean_degree: degrees.iter().sum::<usize>() as f64 / n.max(1) as f64,
            degree_histogram: graph.degree_histogram(),
        };
        println!(
            "{}: N={} E={} degree min/mean/max = {}/{:.1}/{}",
            s.id, s.vertices, s.directed_edges, s.min_degree, s.mean_degree, s.max_degree
        );
        stats.push(s);
    }
    if let Some(out) = out {
        let json = serde_json::to_string_pretty(&stats)
            .map_err(|e| CliError::Run(format!("stats serialization: {e}")))?;
        std::fs::write(out, json)?;
    }
    Ok(())
}

fn cmd_train(
    manifest: &Path,
    val_manifest: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    config: &RunConfig,
) -> CliResult<()> {
    let (classes, _, graphs) = load_graphs(manifest, config, false)?;
    let val_graphs = match val_manifest {
        Some(m) => load_graphs(m, config, false)?.2,
        None => Vec::new(),
    };

    let mut model_cfg = config.model.clone();
    model_cfg.num_classes = classes.num_classes();
    let mut effective = config.clone();
    effective.model = model_cfg.clone();
    echo_config(out, &effective)?;

    let (mut model, resume_state) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.require_config(&model_cfg, &config.ablation)?;
            let epoch = ckpt.epoch.map(|e| e + 1).unwrap_or(0);
            let snapshot = ckpt.optimizer.clone();
            let model = ckpt.into_model()?;
            let state = match snapshot {
                Some(s) => AdamState::from_snapshot(&s, &model)?,
                None => AdamState::new(&model),
            };
            (model, Some((state, epoch)))
        }
        None => (
            ModelParams::new(model_cfg, config.ablation, config.train.rng_seed)?,
            None,
        ),
    };
    println!(
        "training: {} drawings, {} parameters, {} epochs",
        graphs.len(),
        model.num_parameters(),
        config.train.epochs
    );

    // Fresh runs truncate the log so reruns are byte-identical; resumed
    // runs append to the existing history.
    let log_path = out.join("train_log.jsonl");
    let mut opts = std::fs::File::options();
    opts.create(true);
    if resume.is_some() {
        opts.append(true);
    } else {
        opts.write(true).truncate(true);
    }
    let mut log_file = opts.open(&log_path)?;
    let outcome = train(
        &mut model,
        &graphs,
        &val_graphs,
        &classes,
        &config.train,
        resume_state,
        |record| {
            use std::io::Write;
            let line = serde_json::to_string(record).expect("log record");
            writeln!(log_file, "{line}").expect("log write");
            match record.val_pq {
                Some(pq) => println!(
                    "epoch {:>4}: lr {:.6} sem {:.4} ins {:.4} val PQ {:.4}",
                    record.epoch, record.lr, record.train_loss_sem, record.train_loss_ins, pq
                ),
                None => println!(
                    "epoch {:>4}: lr {:.6} sem {:.4} ins {:.4}",
                    record.epoch, record.lr, record.train_loss_sem, record.train_loss_ins
                ),
            }
            true
        },
    )?;

    outcome.best.save(&out.join("checkpoint_best.json"))?;
    let mut final_ckpt = Checkpoint::from_model(&model);
    final_ckpt.epoch = outcome.log.last().map(|r| r.epoch);
    final_ckpt.save(&out.join("checkpoint_final.json"))?;
    println!(
        "best epoch {} (val PQ {:?}); checkpoints and log in {}",
        outcome.best_epoch,
        outcome.best_val_pq,
        out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionFile {
    record_id: String,
    prediction: PanopticPrediction,
}

fn cmd_infer(manifest: &Path, checkpoint: &Path, out: &Path, config: &RunConfig) -> CliResult<()> {
    let (classes, records, graphs) = load_graphs(manifest, config, false)?;
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    if model.config.num_classes != classes.num_classes() {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            model.config.num_classes,
            classes.num_classes()
        )));
    }
    std::fs::create_dir_all(out)?;
    use rayon::prelude::*;
    let results: Result<Vec<()>, CliError> = records
        .par_iter()
        .zip(&graphs)
        .map(|(record, graph)| {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, graph).map_err(CliError::from)?;
            let prediction = extract(
                tape.value(fwd.semantic_probs),
                model.config.num_classes,
                tape.value(fwd.adjacency_probs),
                graph,
                config.train.prune_threshold,
                &classes,
            );
            let file = PredictionFile {
                record_id: record.id.clone(),
                prediction,
            };
            let json = serde_json::to_string(&file)
                .map_err(|e| CliError::Run(format!("prediction serialization: {e}")))?;
            std::fs::write(out.join(format!("{}.pred.json", record.id)), json)?;
            Ok(())
        })
        .collect();
    results?;
    println!("wrote {} prediction files to {}", records.len(), out.display());
    Ok(())
}

fn boxes_of(pred: &PanopticPrediction) -> Vec<Detection> {
    pred.instances
        .iter()
        .map(|i| Detection {
            bbox: i.bbox,
            class_id: i.class_id,
            confidence: i.confidence,
        })
        .collect()
}

fn cmd_eval(
    manifest: &Path,
    predictions: Option<&Path>,
    out: Option<&Path>,
    config: &RunConfig,
) -> CliResult<()> {
    let (classes, records, graphs) = load_graphs(manifest, config, false)?;

    let mut agg = PqAggregate::default();
    let mut detections = Vec::new();
    let mut pred_classes_all = Vec::new();
    let mut gt_classes_all = Vec::new();
    let mut lengths_all = Vec::new();

    for (record, graph) in records.iter().zip(&graphs) {
        let gt = ground_truth_prediction(graph, &classes);
        let pred = match predictions {
            None => gt.clone(),
            Some(dir) => {
                let path = dir.join(format!("{}.pred.json", record.id));
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                let file: PredictionFile = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                if file.record_id != record.id {
                    return Err(CliError::Config(format!(
                        "{}: prediction is for record {}, expected {}",
                        path.display(),
                        file.record_id,
                        record.id
                    )));
                }
                file.prediction
            }
        };
        if pred.vertex_classes.len() != graph.num_vertices() {
            return Err(CliError::Check(format!(
                "record {}: prediction covers {} vertices, graph has {}",
                record.id,
                pred.vertex_classes.len(),
                graph.num_vertices()
            )));
        }
        let preds: Vec<_> = pred.symbols().cloned().collect();
        let gts: Vec<_> = gt.symbols().cloned().collect();
        agg.add_drawing(&preds, &gts, graph)
            .map_err(|e| CliError::Check(e.to_string()))?;
        detections.push(DrawingDetections {
            preds: boxes_of(&pred),
            gts: gt
                .instances
                .iter()
                .map(|i| GtBox {
                    bbox: i.bbox,
                    class_id: i.class_id,
                })
                .collect(),
        });
        pred_classes_all.extend_from_slice(&pred.vertex_classes);
        gt_classes_all.extend(graph.semantic_labels());
        lengths_all.extend(graph.segment_lengths());
    }

    let panoptic = agg.finish();
    let f1 = semantic_f1(
        &pred_classes_all,
        &gt_classes_all,
        &lengths_all,
        classes.background_id(),
    );
    let detection = detection_ap_multi(&detections);
    let report = EvaluationReport {
        drawings: records.len(),
        panoptic: panoptic.overall,
        per_class: panoptic.per_class.clone(),
        class_names: classes
            .iter()
            .map(|c| (c.id, c.name.clone()))
            .collect(),
        class_weighted: panoptic.class_weighted,
        f1,
        detection,
    };

    println!(
        "PQ {:.4} SQ {:.4} RQ {:.4} | F1 {:.4} (length-weighted {:.4}) | AP50 {:.4} AP75 {:.4} mAP {:.4}",
        report.panoptic.pq,
        report.panoptic.sq,
        report.panoptic.rq,
        report.f1.f1,
        report.f1.length_weighted_f1,
        report.detection.ap50,
        report.detection.ap75,
        report.detection.map
    );
    let mut per_class = String::new();
    for (id, t) in &report.per_class {
        writeln!(
            per_class,
            "  class {:>2} {:<12} PQ {:.4} SQ {:.4} RQ {:.4}",
            id,
            classes.name(*id),
            t.pq,
            t.sq,
            t.rq
        )
        .unwrap();
    }
    print!("{per_class}");

    if let Some(out) = out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Run(format!("report serialization: {e}")))?;
        std::fs::write(out, json)?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_render(
    manifest: &Path,
    predictions: Option<&Path>,
    out: &Path,
    stroke_width: f64,
    show_instances: bool,
    config: &RunConfig,
) -> CliResult<()> {
    let (classes, records, graphs) = load_graphs(manifest, config, false)?;
    std::fs::create_dir_all(out)?;
    let options = RenderOptions {
        stroke_width,
        show_instances,
        ..RenderOptions::default()
    };
    for (record, _graph) in records.iter().zip(&graphs) {
        let prediction = match predictions {
            None => None,
            Some(dir) => {
                let path = dir.join(format!("{}.pred.json", record.id));
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                let file: PredictionFile = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                Some(file.prediction)
            }
        };
        let svg = render_svg(record, prediction.as_ref(), &classes, &options);
        std::fs::write(out.join(format!("{}.svg", record.id)), svg)?;
    }
    println!("rendered {} drawings to {}", records.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, h: f64, tolerance: f64) -> CliResult<()> {
    let settings = GradCheckSettings { seed, h, tolerance };
    let report = model_gradient_check(&settings)?;
    let mut worst: Vec<_> = report.per_param.iter().collect();
    worst.sort_by(|a, b| b.max_rel_error.partial_cmp(&a.max_rel_error).unwrap());
    for entry in worst.iter().take(5) {
        println!("  {:<24} max rel error {:.3e}", entry.name, entry.max_rel_error);
    }
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed: max rel error {:.3e} > {:.1e}",
            report.max_rel_error, report.tolerance
        )))
    }
}

fn cmd_ablate(
    manifest: &Path,
    val_manifest: Option<&Path>,
    out: &Path,
    stages: Option<&str>,
    config: &RunConfig,
) -> CliResult<()> {
    let (classes, _, graphs) = load_graphs(manifest, config, false)?;
    let val_graphs = match val_manifest {
        Some(m) => load_graphs(m, config, false)?.2,
        None => Vec::new(),
    };
    let mut model_cfg = config.model.clone();
    model_cfg.num_classes = classes.num_classes();
    let mut effective = config.clone();
    effective.model = model_cfg.clone();
    echo_config(out, &effective)?;

    let variants: Vec<AblateVariant> = match stages {
        Some(list) => {
            let counts: Result<Vec<usize>, _> =
                list.split(',').map(|s| s.trim().parse::<usize>()).collect();
            let counts =
                counts.map_err(|_| CliError::Config(format!("bad --stages list: {list}")))?;
            stage_sweep(&model_cfg, &counts)
        }
        None => module_sweep(&model_cfg),
    };

    let rows = run_ablation(
        &variants,
        &graphs,
        &val_graphs,
        &classes,
        &config.train,
        config.train.rng_seed,
        |name, _| println!("training configuration: {name}"),
    )?;
    let table = format_table(&rows);
    print!("{table}");
    std::fs::write(out.join("ablation.txt"), &table)?;
    let json = serde_json::to_string_pretty(&rows)
        .map_err(|e| CliError::Run(format!("row serialization: {e}")))?;
    std::fs::write(out.join("ablation.json"), json)?;
    Ok(())
}
