//! The `seqnr` command line: dataset generation, training, evaluation,
//! standalone alignment, gradient checking, and ablation sweeps.
//!
//! Exit codes: 0 on success, 1 on contract violations (bad configuration,
//! degenerate data, failed checks), 2 on I/O or parse failures. stdout
//! carries only data (CSV); diagnostics go to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, gradcheck, Tape, Tensor};
use crate::data::{self, DataError, SyntheticConfig};
use crate::gpa;
use crate::linalg::Mat;
use crate::model::{
    bind_parameters, bind_parameters_with, forward_pipeline, ModelConfig, ParameterStore,
    SeriesVector,
};
use crate::objective::{self, FlipMode, LossWeights};
use crate::seq::{ObservationSequence, ShapeSequence};
use crate::trainer::{self, AblationMode, Checkpoint, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "seqnr", version, about = "Sequence-to-sequence non-rigid reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic low-rank dataset with ground truth.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 15)]
        points: usize,
        /// Basis shapes per sequence (the rank bound).
        #[arg(long, default_value_t = 3)]
        basis: usize,
        /// Highest coefficient sinusoid frequency.
        #[arg(long, default_value_t = 3)]
        freqs: usize,
        /// 2D observation noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        sequences: usize,
        /// Camera keyframe spacing in frames.
        #[arg(long, default_value_t = 8)]
        camera_smoothness: usize,
    },
    /// Train on a dataset and write a checkpoint plus a metrics CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON file with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Ablation mode override.
        #[arg(long)]
        ablate: Option<AblationMode>,
        /// Seed override for both initialization and batching.
        #[arg(long)]
        seed: Option<u64>,
        /// Step-count override.
        #[arg(long)]
        steps: Option<usize>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints per-sequence and aggregate metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also try the z-flipped reconstruction and keep the better one.
        #[arg(long, default_value_t = false)]
        flip: bool,
    },
    /// Align ground-truth shapes per sequence and write the result.
    Align {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = gpa::DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = gpa::DEFAULT_MAX_ITERATIONS)]
        max_iter: usize,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        /// "all" or "op NAME".
        #[arg(long, num_args = 1..=2, default_values_t = vec!["all".to_string()])]
        scope: Vec<String>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train every ablation mode and tabulate final metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        /// JSON file with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Report the model parameter inventory.
    Params {
        #[arg(long)]
        points: usize,
        #[arg(long, default_value_t = 128)]
        feature_dim: usize,
        #[arg(long, default_value_t = 10)]
        basis: usize,
        #[arg(long, default_value_t = 6)]
        encoder_layers: usize,
        #[arg(long, default_value_t = 256)]
        encoder_width: usize,
        /// Print only the total count.
        #[arg(long, default_value_t = false)]
        count: bool,
    },
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

#[derive(Debug)]
enum CliError {
    Data(DataError),
    Train(TrainError),
    Gpa(gpa::GpaError),
    Io(std::io::Error),
    Usage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Data(e) => write!(f, "{}", e),
            CliError::Train(e) => write!(f, "{}", e),
            CliError::Gpa(e) => write!(f, "{}", e),
            CliError::Io(e) => write!(f, "{}", e),
            CliError::Usage(m) => write!(f, "{}", m),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(DataError::Io(_)) | CliError::Data(DataError::Parse { .. }) => 2,
            CliError::Data(_) => 1,
            CliError::Train(TrainError::Io(_)) => 2,
            CliError::Train(TrainError::Data(DataError::Io(_)))
            | CliError::Train(TrainError::Data(DataError::Parse { .. })) => 2,
            CliError::Train(_) => 1,
            CliError::Gpa(_) => 1,
            CliError::Io(_) => 2,
            CliError::Usage(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}

impl From<gpa::GpaError> for CliError {
    fn from(e: gpa::GpaError) -> Self {
        CliError::Gpa(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Gen {
            out,
            frames,
            points,
            basis,
            freqs,
            noise,
            seed,
            sequences,
            camera_smoothness,
        } => {
            let config = SyntheticConfig {
                frames,
                points,
                basis_count: basis,
                coefficient_frequencies: freqs,
                camera_smoothness,
                noise_sigma: noise,
                seed,
                sequences,
            };
            echo_config("gen", &config);
            let dataset = data::generate(&config)?;
            data::save_dataset(&dataset, &out)?;
            eprintln!(
                "wrote {} sequences of {} frames x {} points (stacked rank <= {}) to {}",
                sequences,
                frames,
                points,
                basis,
                out.display()
            );
            Ok(0)
        }
        Command::Train { data, config, out, log, ablate, seed, steps, resume } => {
            cmd_train(&data, config.as_deref(), &out, &log, ablate, seed, steps, resume.as_deref())
        }
        Command::Eval { ckpt, data, flip } => cmd_eval(&ckpt, &data, flip),
        Command::Align { data, out, tol, max_iter } => cmd_align(&data, &out, tol, max_iter),
        Command::Gradcheck { scope, eps, seed } => cmd_gradcheck(&scope, eps, seed),
        Command::Ablate { data, out, seed, steps, config } => {
            cmd_ablate(&data, &out, seed, steps, config.as_deref())
        }
        Command::Params { points, feature_dim, basis, encoder_layers, encoder_width, count } => {
            let config = ModelConfig {
                keypoints: points,
                feature_dim,
                basis_count: basis,
                encoder_layers,
                encoder_width,
                ..ModelConfig::new(points)
            };
            config.validate().map_err(CliError::Usage)?;
            if count {
                println!("{}", config.parameter_count());
            } else {
                let store = ParameterStore::initialize(&config, 0);
                for e in store.entries() {
                    println!("{},{},{}", e.name, e.rows, e.cols);
                }
                println!("total,{},", config.parameter_count());
            }
            Ok(0)
        }
    }
}

fn echo_config<T: serde::Serialize>(label: &str, config: &T) {
    eprintln!(
        "resolved {} config: {}",
        label,
        serde_json::to_string(config).expect("config serializes")
    );
}

/// Optional "model" and "train" sections of a config file.
#[derive(Default, serde::Deserialize)]
struct FileConfig {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Data(DataError::Parse {
                    line: e.line(),
                    column: e.column(),
                    message: format!("{} (in {})", e, p.display()),
                })
            })
        }
    }
}

fn resolve_configs(
    dataset: &data::Dataset,
    file: FileConfig,
    ablate: Option<AblationMode>,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<(ModelConfig, TrainConfig), CliError> {
    let model = file.model.unwrap_or_else(|| ModelConfig::new(dataset.points()));
    let mut train = file.train.unwrap_or_default();
    if let Some(mode) = ablate {
        train.ablation_mode = mode;
    }
    if let Some(s) = seed {
        train.seed = s;
    }
    if let Some(n) = steps {
        train.steps = n;
    }
    if model.keypoints != dataset.points() {
        return Err(CliError::Usage(format!(
            "model config expects P = {} but dataset has P = {}",
            model.keypoints,
            dataset.points()
        )));
    }
    Ok((model, train))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data_path: &Path,
    config_path: Option<&Path>,
    out: &Path,
    log: &Path,
    ablate: Option<AblationMode>,
    seed: Option<u64>,
    steps: Option<usize>,
    resume: Option<&Path>,
) -> Result<i32, CliError> {
    let dataset = data::load_dataset(data_path)?;
    let (model, train_config) =
        resolve_configs(&dataset, load_file_config(config_path)?, ablate, seed, steps)?;
    echo_config("model", &model);
    echo_config("train", &train_config);

    let resume_state = match resume {
        Some(p) => {
            let ckpt = trainer::load_checkpoint(p)?;
            if ckpt.model != model {
                return Err(CliError::Usage(
                    "resume checkpoint was trained with a different model config".into(),
                ));
            }
            Some(ckpt.into_state())
        }
        None => None,
    };

    let outcome = trainer::train(&dataset, &model, &train_config, resume_state)?;
    let ckpt = Checkpoint::from_state(
        &outcome.state,
        &model,
        train_config.ablation_mode,
        train_config.seed,
    );
    trainer::save_checkpoint(&ckpt, out)?;
    std::fs::write(log, &outcome.metrics_csv)?;
    let svg = svg_path(log);
    write_line_chart(
        &svg,
        "training loss",
        &[(
            "total",
            outcome
                .loss_history
                .iter()
                .map(|&(s, v)| (s as f64, v))
                .collect::<Vec<_>>(),
        )],
    )?;
    eprintln!(
        "trained {} steps; checkpoint {} log {} plot {}",
        outcome.state.step,
        out.display(),
        log.display(),
        svg.display()
    );
    Ok(0)
}

fn cmd_eval(ckpt_path: &Path, data_path: &Path, flip: bool) -> Result<i32, CliError> {
    let ckpt = trainer::load_checkpoint(ckpt_path)?;
    let dataset = data::load_dataset(data_path)?;
    let mode = if flip { FlipMode::BestOfFlip } else { FlipMode::Raw };
    let eval = trainer::evaluate_checkpoint(&ckpt, &dataset, mode)?;
    print!("{}", eval.to_csv());
    Ok(0)
}

fn cmd_align(data_path: &Path, out: &Path, tol: f64, max_iter: usize) -> Result<i32, CliError> {
    #[derive(serde::Serialize)]
    struct AlignSettings<'a> {
        data: &'a str,
        tol: f64,
        max_iter: usize,
    }
    echo_config(
        "align",
        &AlignSettings { data: &data_path.display().to_string(), tol, max_iter },
    );
    let mut dataset = data::load_dataset(data_path)?;
    if !dataset.has_ground_truth() {
        return Err(CliError::Usage("alignment requires points3d in the dataset".into()));
    }
    let mut residual_rows = String::from("sequence,iteration,residual\n");
    let mut curves = Vec::new();
    for (i, record) in dataset.sequences.iter_mut().enumerate() {
        let shapes = record.shapes.as_ref().expect("ground truth checked above");
        let result = gpa::gpa_align(shapes, tol, max_iter).map_err(|e| match e {
            gpa::GpaError::DegenerateFrame { frame, source } => CliError::Usage(format!(
                "sequence {}: frame {} is degenerate: {}",
                i, frame, source
            )),
            other => CliError::Gpa(other),
        })?;
        for (it, r) in result.residual_history.iter().enumerate() {
            residual_rows.push_str(&format!("{},{},{}\n", i, it, r));
        }
        curves.push((
            format!("seq {}", i),
            result
                .residual_history
                .iter()
                .enumerate()
                .map(|(it, &r)| (it as f64, r))
                .collect::<Vec<_>>(),
        ));
        record.shapes = Some(result.aligned);
        // The stored motions no longer match the aligned shapes.
        record.rotations = None;
        record.metadata.insert("aligned".to_string(), "true".to_string());
        record.metadata.insert("alignment_iterations".to_string(), result.iterations.to_string());
    }
    data::save_dataset(&dataset, out)?;
    let csv_path = out.with_extension("residuals.csv");
    std::fs::write(&csv_path, &residual_rows)?;
    let svg = svg_path(&csv_path);
    let curve_refs: Vec<(&str, Vec<(f64, f64)>)> =
        curves.iter().map(|(n, c)| (n.as_str(), c.clone())).collect();
    write_line_chart(&svg, "alignment residual", &curve_refs)?;
    eprintln!(
        "aligned {} sequences; dataset {} residuals {} plot {}",
        dataset.sequences.len(),
        out.display(),
        csv_path.display(),
        svg.display()
    );
    Ok(0)
}

fn cmd_ablate(
    data_path: &Path,
    out_dir: &Path,
    seed: u64,
    steps: usize,
    config_path: Option<&Path>,
) -> Result<i32, CliError> {
    let dataset = data::load_dataset(data_path)?;
    if !dataset.has_ground_truth() {
        return Err(CliError::Usage("ablation comparison requires ground truth".into()));
    }
    let (model, mut base_config) =
        resolve_configs(&dataset, load_file_config(config_path)?, None, Some(seed), Some(steps))?;
    echo_config("model", &model);
    echo_config("train", &base_config);
    std::fs::create_dir_all(out_dir)?;

    let jobs: Vec<AblationMode> = AblationMode::ALL.to_vec();
    let results = parallel_map(jobs, thread_cap(), |mode| {
        let mut config = base_config.clone();
        config.ablation_mode = mode;
        run_ablation_mode(&dataset, &model, &config, out_dir)
    });

    let mut table = String::from("mode,mpjpe,stress,e3d\n");
    for result in results {
        let (mode, report) = result.map_err(CliError::Train)?;
        table.push_str(&format!(
            "{},{},{},{}\n",
            mode.name(),
            report.mpjpe,
            report.stress,
            report.e3d
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), &table)?;
    print!("{}", table);
    base_config.ablation_mode = AblationMode::None;
    Ok(0)
}

fn run_ablation_mode(
    dataset: &data::Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<(AblationMode, objective::MetricReport), TrainError> {
    let mode = config.ablation_mode;
    let outcome = trainer::train(dataset, model, config, None)?;
    let ckpt = Checkpoint::from_state(&outcome.state, model, mode, config.seed);
    trainer::save_checkpoint(&ckpt, &out_dir.join(format!("{}.ckpt.json", mode.name())))?;
    std::fs::write(out_dir.join(format!("{}.metrics.csv", mode.name())), &outcome.metrics_csv)?;
    let eval = trainer::evaluate_checkpoint(&ckpt, dataset, FlipMode::Raw)?;
    Ok((mode, eval.aggregate))
}

/// SEQNR_THREADS caps internal parallelism; defaults to the machine's.
fn thread_cap() -> usize {
    std::env::var("SEQNR_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Order-preserving parallel map over independent jobs.
fn parallel_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let jobs: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let chunk = jobs.len().div_ceil(threads);
    let mut rest: &mut [Option<R>] = &mut slots;
    std::thread::scope(|scope| {
        for group in jobs.into_iter().collect::<Vec<_>>().chunks_mut(chunk.max(1)) {
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(group.len());
            rest = tail;
            let group: Vec<(usize, T)> = group.iter_mut().map(|p| unsafe { std::ptr::read(p) }).collect();
            let f = &f;
            scope.spawn(move || {
                for ((_, item), slot) in group.into_iter().zip(head.iter_mut()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("job completed")).collect()
}

// -------------------------------------------------------------------
// Gradient check suite
// -------------------------------------------------------------------

/// One row of the gradient check report.
pub struct CheckRow {
    pub name: String,
    pub kind: &'static str,
    /// Max relative error for strict rows; positive-cosine fraction for
    /// the alignment row.
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

pub const PRIMITIVE_THRESHOLD: f64 = 1e-6;
pub const COMPOSITE_THRESHOLD: f64 = 1e-4;
pub const GPA_POSITIVE_FRACTION: f64 = 0.95;

fn small_model() -> ModelConfig {
    ModelConfig {
        keypoints: 5,
        feature_dim: 8,
        basis_count: 3,
        encoder_layers: 2,
        encoder_width: 12,
        gs_layers: 3,
        toeplitz_rpe_width: 4,
        use_series_vector: true,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_offset_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
}

fn random_positive_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.3..2.0)).collect())
}

/// Random parameter point with every entry (biases included) nonzero.
fn random_store(model: &ModelConfig, rng: &mut ChaCha8Rng) -> ParameterStore {
    let mut store = ParameterStore::initialize(model, rng.gen());
    for name in store.entries().iter().map(|e| e.name.clone()).collect::<Vec<_>>() {
        for v in store.get_mut(&name).values.iter_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    store
}

fn primitive_cases() -> Vec<(&'static str, Box<dyn Fn(&mut Tape, &Tensor) -> Tensor>, u8)> {
    // Domain tags: 0 = any, 1 = bounded away from zero, 2 = positive.
    vec![
        ("add", Box::new(|t: &mut Tape, x: &Tensor| {
            let c = t.leaf(&Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64).collect()));
            let y = t.add(x, &c);
            t.sum(&y)
        }), 0),
        ("subtract", Box::new(|t: &mut Tape, x: &Tensor| {
            let c = t.leaf(&Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64).collect()));
            let y = t.sub(&c, x);
            t.frobenius_norm(&y)
        }), 1),
        ("hadamard", Box::new(|t: &mut Tape, x: &Tensor| {
            let c = t.leaf(&Tensor::matrix(3, 4, (0..12).map(|i| 0.3 + 0.1 * i as f64).collect()));
            let y = t.hadamard(x, &c);
            t.sum(&y)
        }), 0),
        ("scale", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.scale(x, -1.7);
            t.sum(&y)
        }), 0),
        ("scalar_mul", Box::new(|t: &mut Tape, x: &Tensor| {
            let s = t.gather(x, &[0], 1, 1);
            let rest = t.gather(x, &[1, 2, 3, 4, 5, 6], 2, 3);
            let y = t.scalar_mul(&s, &rest);
            t.frobenius_norm(&y)
        }), 1),
        ("matmul", Box::new(|t: &mut Tape, x: &Tensor| {
            let c = t.leaf(&Tensor::matrix(4, 2, (0..8).map(|i| 0.2 * i as f64 - 0.7).collect()));
            let y = t.matmul(x, &c);
            t.frobenius_norm(&y)
        }), 1),
        ("transpose", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.transpose(x);
            t.frobenius_norm(&y)
        }), 1),
        ("reshape", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.reshape(x, 4, 3);
            let c = t.leaf(&Tensor::matrix(4, 3, (0..12).map(|i| 0.05 * i as f64).collect()));
            let y = t.hadamard(&y, &c);
            t.sum(&y)
        }), 0),
        ("concat", Box::new(|t: &mut Tape, x: &Tensor| {
            let c = t.leaf(&Tensor::matrix(2, 4, (0..8).map(|i| 0.1 * i as f64).collect()));
            let y = t.concat_rows(&[x, &c, x]);
            t.frobenius_norm(&y)
        }), 1),
        ("slice", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.slice_rows(x, 1, 2);
            t.frobenius_norm(&y)
        }), 1),
        ("gather", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.gather(x, &[0, 5, 5, 11, 3, 2], 2, 3);
            t.frobenius_norm(&y)
        }), 1),
        ("sum", Box::new(|t: &mut Tape, x: &Tensor| t.sum(x)), 0),
        ("mean", Box::new(|t: &mut Tape, x: &Tensor| t.mean(x)), 0),
        ("sin", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.sin(x);
            t.sum(&y)
        }), 0),
        ("cos", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.cos(x);
            t.sum(&y)
        }), 0),
        ("sqrt", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.sqrt(x);
            t.sum(&y)
        }), 2),
        ("sigmoid", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.sigmoid(x);
            t.sum(&y)
        }), 0),
        ("relu", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.relu(x);
            t.sum(&y)
        }), 1),
        ("leaky_relu", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.leaky_relu(x, 0.01);
            t.sum(&y)
        }), 1),
        ("powi", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.powi(x, 3);
            t.sum(&y)
        }), 2),
        ("sinc_sq", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.sinc_sq(x);
            t.sum(&y)
        }), 2),
        ("versine_sq", Box::new(|t: &mut Tape, x: &Tensor| {
            let y = t.versine_sq(x);
            t.sum(&y)
        }), 2),
        ("add_row", Box::new(|t: &mut Tape, x: &Tensor| {
            let c = t.leaf(&Tensor::matrix(5, 12, vec![0.25; 60]));
            let row = t.reshape(x, 1, 12);
            let y = t.add_row(&c, &row);
            t.frobenius_norm(&y)
        }), 1),
        ("frobenius_norm", Box::new(|t: &mut Tape, x: &Tensor| t.frobenius_norm(x)), 1),
        ("cross_matrix", Box::new(|t: &mut Tape, x: &Tensor| {
            let v = t.gather(x, &[0, 1, 2], 1, 3);
            let k = t.cross_matrix(&v);
            let c = t.leaf(&Tensor::matrix(3, 3, (0..9).map(|i| 0.1 * i as f64 + 0.2).collect()));
            let y = t.hadamard(&k, &c);
            t.sum(&y)
        }), 0),
    ]
}

fn check_primitive(
    name: &str,
    f: &dyn Fn(&mut Tape, &Tensor) -> Tensor,
    domain: u8,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> CheckRow {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = match domain {
            1 => random_offset_tensor(rng, 3, 4),
            2 => random_positive_tensor(rng, 3, 4),
            _ => random_tensor(rng, 3, 4),
        };
        worst = worst.max(gradcheck(f, &x, eps));
    }
    CheckRow {
        name: name.to_string(),
        kind: "primitive",
        value: worst,
        threshold: PRIMITIVE_THRESHOLD,
        pass: worst < PRIMITIVE_THRESHOLD,
        detail: "max relative error, 10 random points".to_string(),
    }
}

/// Worst per-parameter gradcheck error of a scalar loss over a store.
fn gradcheck_over_params<F>(store: &ParameterStore, eps: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &crate::model::Bindings) -> Tensor,
{
    let mut worst: f64 = 0.0;
    for e in store.entries() {
        let point = Tensor::matrix(e.rows, e.cols, e.values.clone());
        let err = gradcheck(
            |tape, x| {
                let binds = bind_parameters_with(tape, store, Some((&e.name, x)));
                f(tape, &binds)
            },
            &point,
            eps,
        );
        worst = worst.max(err);
    }
    worst
}

fn random_obs(rng: &mut ChaCha8Rng, f: usize, p: usize) -> ObservationSequence {
    ObservationSequence::new(
        (0..f)
            .map(|_| {
                Mat::from_vec(2, p, (0..2 * p).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .center_columns()
            })
            .collect(),
    )
}

fn composite_rows(eps: f64, rng: &mut ChaCha8Rng) -> Vec<CheckRow> {
    let model = small_model();
    let store = random_store(&model, rng);
    let p = model.keypoints;
    let obs = random_obs(rng, 4, p);
    let rows_mat = crate::model::observation_rows(&obs);
    let mut out = Vec::new();
    let mut push = |name: &str, value: f64| {
        out.push(CheckRow {
            name: name.to_string(),
            kind: "composite",
            value,
            threshold: COMPOSITE_THRESHOLD,
            pass: value < COMPOSITE_THRESHOLD,
            detail: "max relative error over all parameters".to_string(),
        });
    };

    push(
        "encoder",
        gradcheck_over_params(&store, eps, |tape, binds| {
            let x = tape.leaf_mat(&rows_mat);
            let f = crate::model::encode(tape, binds, &x);
            tape.frobenius_norm(&f)
        }),
    );
    let feat = random_tensor(rng, 4, model.feature_dim);
    push(
        "gtu",
        gradcheck_over_params(&store, eps, |tape, binds| {
            let x = tape.leaf(&feat);
            let y = crate::model::gtu_mix(tape, binds, &x, &SeriesVector::arithmetic(4));
            tape.frobenius_norm(&y)
        }),
    );
    push(
        "g_s",
        gradcheck_over_params(&store, eps, |tape, binds| {
            let x = tape.leaf(&feat);
            let y = crate::model::remap_gs(tape, binds, &x);
            tape.frobenius_norm(&y)
        }),
    );
    let rot_target = Tensor::matrix(12, 3, (0..36).map(|i| (i as f64 * 0.37).sin()).collect());
    push(
        "rotation_head",
        gradcheck_over_params(&store, eps, |tape, binds| {
            let x = tape.leaf_mat(&rows_mat);
            let f = crate::model::encode(tape, binds, &x);
            let rots = crate::model::predict_rotation(tape, binds, &f);
            let refs: Vec<&Tensor> = rots.iter().collect();
            let all = tape.concat_rows(&refs);
            let target = tape.leaf(&rot_target);
            let d = tape.sub(&all, &target);
            tape.frobenius_norm(&d)
        }),
    );
    push(
        "reprojection_loss",
        gradcheck_over_params(&store, eps, |tape, binds| {
            let out = forward_pipeline(tape, binds, &obs, &SeriesVector::arithmetic(4), true);
            objective::reprojection_loss_node(tape, &obs, &out.rotations, &out.s_tilde)
        }),
    );
    let nn_input = random_tensor(rng, 4, 6);
    out.push(CheckRow {
        name: "nuclear_norm".to_string(),
        kind: "composite",
        value: gradcheck(|t, x| t.nuclear_norm(x), &nn_input, 1e-6),
        threshold: COMPOSITE_THRESHOLD,
        pass: gradcheck(|t, x| t.nuclear_norm(x), &nn_input, 1e-6) < COMPOSITE_THRESHOLD,
        detail: "distinct singular values".to_string(),
    });
    // Full training loss on the finite-difference-checkable path (the
    // nuclear term acts on the unaligned stack; the alignment node's
    // one-step backward is checked separately by descent direction).
    let weights = LossWeights::default();
    push(
        "total_loss",
        gradcheck_over_params(&store, eps, |tape, binds| {
            let out = forward_pipeline(tape, binds, &obs, &SeriesVector::arithmetic(4), true);
            let reproj =
                objective::reprojection_loss_node(tape, &obs, &out.rotations, &out.s_tilde);
            let nuclear = tape.nuclear_norm(&out.s_tilde);
            let a = tape.scale(&reproj, weights.alpha);
            let b = tape.scale(&nuclear, weights.beta);
            tape.add(&a, &b)
        }),
    );
    out
}

/// Statistics of the one-step alignment gradient against the true
/// finite-difference gradient of the aligned nuclear norm.
pub struct GpaCosineStats {
    pub trials: usize,
    pub positive: usize,
    pub median: f64,
}

pub fn gpa_cosine_stats(trials: usize, seed: u64) -> GpaCosineStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = LossWeights::default().beta;
    let (f, p) = (8, 6);
    let mut cosines = Vec::with_capacity(trials);
    for _ in 0..trials {
        let frames: Vec<Mat> = (0..f)
            .map(|_| {
                Mat::from_vec(3, p, (0..3 * p).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .center_columns()
            })
            .collect();
        let stacked = ShapeSequence::new(frames).stacked();

        // One-step analytic gradient through the alignment node.
        let mut tape = Tape::new();
        let x = tape.leaf_mat(&stacked);
        let aligned = tape.gpa_align(&x, gpa::DEFAULT_TOLERANCE, gpa::DEFAULT_MAX_ITERATIONS)
            .expect("random shapes are non-degenerate");
        let nn = tape.nuclear_norm(&aligned);
        let loss = tape.scale(&nn, beta);
        let g_ad = backward(&tape, &loss).get(&x);

        // Central differences of the full iterative map.
        let value = |m: &Mat| -> f64 {
            let seq = ShapeSequence::from_stacked(m);
            beta * objective::nuclear_loss(
                &seq,
                gpa::DEFAULT_TOLERANCE,
                gpa::DEFAULT_MAX_ITERATIONS,
            )
            .expect("non-degenerate")
        };
        let h = 1e-5;
        let mut g_fd = vec![0.0; stacked.data().len()];
        for i in 0..g_fd.len() {
            let mut plus = stacked.clone();
            plus.data_mut()[i] += h;
            let mut minus = stacked.clone();
            minus.data_mut()[i] -= h;
            g_fd[i] = (value(&plus) - value(&minus)) / (2.0 * h);
        }

        let dot: f64 = g_ad.iter().zip(&g_fd).map(|(a, b)| a * b).sum();
        let na: f64 = g_ad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = g_fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        cosines.push(dot / (na * nb).max(1e-300));
    }
    let positive = cosines.iter().filter(|&&c| c > 0.0).count();
    let mut sorted = cosines.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    GpaCosineStats { trials, positive, median }
}

/// Runs the gradient check suite. `scope` is "all" or a single op name.
pub fn gradcheck_suite(scope: &str, eps: f64, seed: u64) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let primitives = primitive_cases();
    let all = scope == "all";

    for (name, f, domain) in &primitives {
        if all || scope == *name {
            rows.push(check_primitive(name, f.as_ref(), *domain, eps, &mut rng));
        }
    }
    if all {
        rows.extend(composite_rows(eps, &mut rng));
    } else {
        for row in composite_rows(eps, &mut rng) {
            if row.name == scope {
                rows.push(row);
            }
        }
    }
    if all || scope == "gpa" {
        let stats = gpa_cosine_stats(100, seed);
        let fraction = stats.positive as f64 / stats.trials as f64;
        rows.push(CheckRow {
            name: "gpa".to_string(),
            kind: "one-step",
            value: fraction,
            threshold: GPA_POSITIVE_FRACTION,
            pass: fraction >= GPA_POSITIVE_FRACTION,
            detail: format!(
                "positive-cosine fraction over {} trials; median cosine {:.4}",
                stats.trials, stats.median
            ),
        });
    }
    rows
}

fn cmd_gradcheck(scope: &[String], eps: f64, seed: u64) -> Result<i32, CliError> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CliError::Usage("eps must lie in [1e-7, 1e-3]".into()));
    }
    let scope_name = match scope {
        [s] if s == "all" => "all".to_string(),
        [s, name] if s == "op" => name.clone(),
        [name] => name.clone(),
        _ => return Err(CliError::Usage("scope must be 'all' or 'op NAME'".into())),
    };
    let rows = gradcheck_suite(&scope_name, eps, seed);
    if rows.is_empty() {
        return Err(CliError::Usage(format!("no such op '{}'", scope_name)));
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "op,kind,value,threshold,pass,detail").ok();
    let mut all_pass = true;
    for r in &rows {
        all_pass &= r.pass;
        writeln!(
            out,
            "{},{},{:e},{:e},{},{}",
            r.name, r.kind, r.value, r.threshold, r.pass, r.detail
        )
        .ok();
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn svg_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".svg");
    PathBuf::from(s)
}

/// Minimal self-contained SVG line chart (log-scaled y when positive).
fn write_line_chart(
    path: &Path,
    title: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> std::io::Result<()> {
    let (w, h, margin) = (640.0, 360.0, 48.0);
    let points: Vec<(f64, f64)> =
        series.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    if points.is_empty() {
        return std::fs::write(path, "<svg xmlns=\"http://www.w3.org/2000/svg\"/>");
    }
    let log_y = points.iter().all(|&(_, y)| y > 0.0);
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(ty(y));
        y1 = y1.max(ty(y));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (ty(y) - y0) / (y1 - y0) * (h - 2.0 * margin);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{}{}</text>\n",
        margin,
        title,
        if log_y { " (log y)" } else { "" }
    );
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        r = w - margin,
        t = margin,
        b = h - margin
    ));
    for (i, (name, s)) in series.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        let pts: Vec<String> =
            s.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let color = palette[i % palette.len()];
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            color,
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" fill=\"{}\">{}</text>\n",
            w - margin + 4.0,
            margin + 14.0 * i as f64,
            color,
            name
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_suite_single_op() {
        let rows = gradcheck_suite("sigmoid", 1e-5, 1);
        assert_eq!(rows.len(), 1);
        assert!(rows[0].pass, "sigmoid row failed: {}", rows[0].value);
    }

    #[test]
    fn gpa_cosine_small_sample() {
        let stats = gpa_cosine_stats(10, 3);
        assert!(stats.positive >= 9, "only {}/10 positive", stats.positive);
        assert!(stats.median > 0.0);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..17).collect();
        let doubled = parallel_map(items.clone(), 4, |x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let seq = parallel_map(items.clone(), 1, |x| x * 2);
        assert_eq!(doubled, seq);
    }

    #[test]
    fn svg_chart_writes_well_formed_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.svg");
        let series = vec![("loss", vec![(0.0, 10.0), (1.0, 5.0), (2.0, 2.5)])];
        write_line_chart(&path, "test", &series).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
        assert!(text.trim_end().ends_with("</svg>"));
    }
}
