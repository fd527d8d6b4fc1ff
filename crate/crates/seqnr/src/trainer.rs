//! Optimization loop: batching, loss assembly with ablation routing,
//! Adam updates, checkpointing, and checkpoint evaluation.
//!
//! Every run is a pure function of (dataset, configs, seed): the batch
//! schedule is arithmetic in the step index, gradients accumulate on one
//! tape per step in a fixed order, and parameters update in store order,
//! so checkpoints and metric logs are bit-reproducible and a resumed run
//! continues exactly where the original would have gone.

use std::fmt;
use std::path::Path;

use crate::autodiff::{backward, Tape, Tensor};
use crate::counters;
use crate::data::{BatchSchedule, DataError, Dataset};
use crate::gpa::GpaError;
use crate::model::{
    bind_parameters, forward_pipeline, Bindings, ModelConfig, ParameterStore, SeriesVector,
};
use crate::objective::{
    self, e3d, mpjpe, stress, FlipMode, LossBreakdown, LossWeights, MetricReport,
};
use crate::seq::{ObservationSequence, RotationSet, ShapeSequence};

const CHECKPOINT_VERSION: u32 = 1;

/// Weight of the mean-shape penalty in the `mean_loss` ablation.
pub const MEAN_LOSS_WEIGHT: f64 = 0.1;

#[derive(Debug)]
pub enum TrainError {
    /// Loss became non-finite; training aborts with context.
    NanLoss { step: usize, total: f64, reprojection: f64, nuclear: f64 },
    NonFiniteGradient { step: usize, name: String },
    Gpa(GpaError),
    Data(DataError),
    Config(String),
    MissingGroundTruth,
    PointsMismatch { model: usize, data: usize },
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NanLoss { step, total, reprojection, nuclear } => write!(
                f,
                "non-finite loss at step {}: total {} (reprojection {}, nuclear {})",
                step, total, reprojection, nuclear
            ),
            TrainError::NonFiniteGradient { step, name } => {
                write!(f, "non-finite gradient for {} at step {}", name, step)
            }
            TrainError::Gpa(e) => write!(f, "alignment failed: {}", e),
            TrainError::Data(e) => write!(f, "{}", e),
            TrainError::Config(m) => write!(f, "{}", m),
            TrainError::MissingGroundTruth => {
                write!(f, "ground truth required: dataset has no points3d")
            }
            TrainError::PointsMismatch { model, data } => {
                write!(f, "checkpoint expects P = {} but dataset has P = {}", model, data)
            }
            TrainError::Io(e) => write!(f, "i/o error: {}", e),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<GpaError> for TrainError {
    fn from(e: GpaError) -> Self {
        TrainError::Gpa(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// Which loss paths a training run wires up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Full pipeline: context layer, alignment, nuclear norm.
    None,
    /// Nuclear norm on the unaligned stack; the alignment layer is never
    /// invoked.
    NoGpa,
    /// Single-frame lifting only (the context layer is bypassed).
    NoContext,
    /// All-one series vector in the mixer.
    AlloneSeries,
    /// Drops the nuclear term entirely (beta = 0).
    NoNuclear,
    /// Nuclear norm on the unaligned stack plus the mean-shape penalty.
    MeanLoss,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::None,
        AblationMode::NoGpa,
        AblationMode::NoContext,
        AblationMode::AlloneSeries,
        AblationMode::NoNuclear,
        AblationMode::MeanLoss,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::NoGpa => "no_gpa",
            AblationMode::NoContext => "no_context",
            AblationMode::AlloneSeries => "allone_series",
            AblationMode::NoNuclear => "no_nuclear",
            AblationMode::MeanLoss => "mean_loss",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(AblationMode::None),
            "no_gpa" => Ok(AblationMode::NoGpa),
            "no_context" => Ok(AblationMode::NoContext),
            "allone_series" => Ok(AblationMode::AlloneSeries),
            "no_nuclear" => Ok(AblationMode::NoNuclear),
            "mean_loss" => Ok(AblationMode::MeanLoss),
            other => Err(format!(
                "unknown ablation mode '{}' (expected none, no_gpa, no_context, \
                 allone_series, no_nuclear, mean_loss)",
                other
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_epsilon")]
    pub adam_epsilon: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_gpa_tolerance")]
    pub gpa_tolerance: f64,
    #[serde(default = "default_gpa_max_iterations")]
    pub gpa_max_iterations: usize,
    /// Desk-scale window length (the documented full-scale value is 32).
    #[serde(default = "default_sequence_length")]
    pub sequence_length: usize,
    /// Desk-scale batch size (the documented full-scale value is 256).
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_ablation")]
    pub ablation_mode: AblationMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_steps() -> usize {
    3000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_gpa_tolerance() -> f64 {
    crate::gpa::DEFAULT_TOLERANCE
}
fn default_gpa_max_iterations() -> usize {
    crate::gpa::DEFAULT_MAX_ITERATIONS
}
fn default_sequence_length() -> usize {
    16
}
fn default_batch_size() -> usize {
    8
}
fn default_ablation() -> AblationMode {
    AblationMode::None
}
fn default_log_every() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: default_steps(),
            learning_rate: default_lr(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
            weights: LossWeights::default(),
            gpa_tolerance: default_gpa_tolerance(),
            gpa_max_iterations: default_gpa_max_iterations(),
            sequence_length: default_sequence_length(),
            batch_size: default_batch_size(),
            ablation_mode: default_ablation(),
            seed: 0,
            log_every: default_log_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps < 1 {
            return Err(TrainError::Config("steps must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.weights.alpha < 0.0 || self.weights.beta < 0.0 {
            return Err(TrainError::Config("loss weights must be >= 0".into()));
        }
        if self.log_every < 1 {
            return Err(TrainError::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optimizer state: parameters plus first/second moment accumulators,
/// aligned with the parameter store's entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParameterStore,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub step: usize,
}

impl TrainState {
    pub fn fresh(params: ParameterStore) -> TrainState {
        let adam_m = params.entries().iter().map(|e| vec![0.0; e.values.len()]).collect();
        let adam_v = params.entries().iter().map(|e| vec![0.0; e.values.len()]).collect();
        TrainState { params, adam_m, adam_v, step: 0 }
    }
}

/// One Adam update with bias correction. Gradients arrive in store order.
pub fn adam_step(
    state: &mut TrainState,
    grads: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), state.params.entries().len(), "gradient/parameter count mismatch");
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - config.adam_beta1.powi(t);
    let bc2 = 1.0 - config.adam_beta2.powi(t);
    let names: Vec<String> =
        state.params.entries().iter().map(|e| e.name.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        if !grads[i].iter().all(|g| g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { step: state.step, name: name.clone() });
        }
        let entry = state.params.get_mut(name);
        for j in 0..grads[i].len() {
            let g = grads[i][j];
            state.adam_m[i][j] =
                config.adam_beta1 * state.adam_m[i][j] + (1.0 - config.adam_beta1) * g;
            state.adam_v[i][j] =
                config.adam_beta2 * state.adam_v[i][j] + (1.0 - config.adam_beta2) * g * g;
            let m_hat = state.adam_m[i][j] / bc1;
            let v_hat = state.adam_v[i][j] / bc2;
            entry.values[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
    }
    state.step += 1;
    Ok(())
}

/// Builds the mode-routed total loss for one window on the tape.
/// Returns the scalar node and the term values.
fn window_loss(
    tape: &mut Tape,
    binds: &Bindings,
    window: &ObservationSequence,
    config: &TrainConfig,
    model: &ModelConfig,
) -> Result<(Tensor, LossBreakdown), TrainError> {
    let mode = config.ablation_mode;
    let f = window.len();
    let use_context = mode != AblationMode::NoContext;
    let all_ones = !model.use_series_vector || mode == AblationMode::AlloneSeries;
    let l = if all_ones { SeriesVector::all_ones(f) } else { SeriesVector::arithmetic(f) };

    let out = forward_pipeline(tape, binds, window, &l, use_context);
    let reproj = objective::reprojection_loss_node(tape, window, &out.rotations, &out.s_tilde);
    let mut total = tape.scale(&reproj, config.weights.alpha);
    let mut nuclear_value = 0.0;

    match mode {
        AblationMode::None | AblationMode::NoContext | AblationMode::AlloneSeries => {
            let nuclear = objective::nuclear_loss_node(
                tape,
                &out.s_tilde,
                config.gpa_tolerance,
                config.gpa_max_iterations,
            )?;
            nuclear_value = nuclear.value();
            let weighted = tape.scale(&nuclear, config.weights.beta);
            total = tape.add(&total, &weighted);
        }
        AblationMode::NoGpa | AblationMode::MeanLoss => {
            let nuclear = tape.nuclear_norm(&out.s_tilde);
            nuclear_value = nuclear.value();
            let weighted = tape.scale(&nuclear, config.weights.beta);
            total = tape.add(&total, &weighted);
        }
        AblationMode::NoNuclear => {}
    }

    let mut mean_value = None;
    if mode == AblationMode::MeanLoss {
        let mean = tape.mean_shape_penalty(&out.s_tilde)?;
        mean_value = Some(mean.value());
        let weighted = tape.scale(&mean, MEAN_LOSS_WEIGHT);
        total = tape.add(&total, &weighted);
    }

    let breakdown = LossBreakdown {
        total: total.value(),
        reprojection: reproj.value(),
        nuclear: nuclear_value,
        mean_shape: mean_value,
    };
    Ok((total, breakdown))
}

/// Serialized training snapshot.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub ablation: AblationMode,
    pub seed: u64,
    pub step: usize,
    pub params: ParameterStore,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_state(
        state: &TrainState,
        model: &ModelConfig,
        ablation: AblationMode,
        seed: u64,
    ) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model.clone(),
            ablation,
            seed,
            step: state.step,
            params: state.params.clone(),
            adam_m: state.adam_m.clone(),
            adam_v: state.adam_v.clone(),
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            params: self.params,
            adam_m: self.adam_m,
            adam_v: self.adam_v,
            step: self.step,
        }
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let json = serde_json::to_string(c).expect("checkpoint serializes");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let c: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| TrainError::Config(format!("malformed checkpoint: {}", e)))?;
    if c.version != CHECKPOINT_VERSION {
        return Err(TrainError::Config(format!(
            "checkpoint version {} not supported (expected {})",
            c.version, CHECKPOINT_VERSION
        )));
    }
    Ok(c)
}

/// Result of a training run.
pub struct TrainOutcome {
    pub state: TrainState,
    /// CSV with header `step,total,reprojection,nuclear,mpjpe,stress,e3d`.
    pub metrics_csv: String,
    /// (step, batch-mean total loss) for every step, for plotting.
    pub loss_history: Vec<(usize, f64)>,
}

/// Runs (or resumes) training. The checkpoint, when given, must have been
/// produced with the same configs for the continuation to be meaningful.
pub fn train(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model.validate().map_err(TrainError::Config)?;
    if model.keypoints != dataset.points() {
        return Err(TrainError::PointsMismatch { model: model.keypoints, data: dataset.points() });
    }
    let schedule =
        BatchSchedule::new(dataset, config.sequence_length, config.batch_size, config.seed)?;
    let mut state = resume
        .unwrap_or_else(|| TrainState::fresh(ParameterStore::initialize(model, config.seed)));

    let mut metrics_csv = String::from("step,total,reprojection,nuclear,mpjpe,stress,e3d\n");
    let mut loss_history = Vec::with_capacity(config.steps.saturating_sub(state.step));

    while state.step < config.steps {
        let step = state.step;
        let batch = schedule.batch(step);
        let b = batch.len() as f64;

        let mut tape = Tape::new();
        let binds = bind_parameters(&mut tape, &state.params);
        let mut sum_loss: Option<Tensor> = None;
        let mut breakdown_acc = LossBreakdown {
            total: 0.0,
            reprojection: 0.0,
            nuclear: 0.0,
            mean_shape: None,
        };
        for &(seq, start) in &batch {
            let window =
                dataset.sequences[seq].observations.window(start, config.sequence_length);
            let (loss, breakdown) = window_loss(&mut tape, &binds, &window, config, model)?;
            sum_loss = Some(match &sum_loss {
                Some(acc) => tape.add(acc, &loss),
                None => loss,
            });
            breakdown_acc.total += breakdown.total;
            breakdown_acc.reprojection += breakdown.reprojection;
            breakdown_acc.nuclear += breakdown.nuclear;
            if let Some(m) = breakdown.mean_shape {
                *breakdown_acc.mean_shape.get_or_insert(0.0) += m;
            }
        }
        let batch_loss = tape.scale(&sum_loss.expect("non-empty batch"), 1.0 / b);
        breakdown_acc.total /= b;
        breakdown_acc.reprojection /= b;
        breakdown_acc.nuclear /= b;
        if let Some(m) = breakdown_acc.mean_shape.as_mut() {
            *m /= b;
        }

        if !batch_loss.value().is_finite() {
            return Err(TrainError::NanLoss {
                step,
                total: breakdown_acc.total,
                reprojection: breakdown_acc.reprojection,
                nuclear: breakdown_acc.nuclear,
            });
        }

        let grad_map = backward(&tape, &batch_loss);
        let grads: Vec<Vec<f64>> =
            binds.ordered().iter().map(|(_, t)| grad_map.get(t)).collect();
        adam_step(&mut state, &grads, config)?;
        loss_history.push((step, breakdown_acc.total));

        if step % config.log_every == 0 || state.step == config.steps {
            let metrics = log_metrics(dataset, model, config, &state);
            metrics_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                step,
                breakdown_acc.total,
                breakdown_acc.reprojection,
                breakdown_acc.nuclear,
                metrics
            ));
        }
    }

    Ok(TrainOutcome { state, metrics_csv, loss_history })
}

/// Evaluation metric columns for the training log; blank when the dataset
/// carries no ground truth.
fn log_metrics(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    state: &TrainState,
) -> String {
    if !dataset.has_ground_truth() {
        return ",,".to_string();
    }
    match evaluate_dataset(&state.params, model, config.ablation_mode, dataset, FlipMode::Raw) {
        Ok(eval) => {
            let a = eval.aggregate;
            format!("{},{},{}", a.mpjpe, a.stress, a.e3d)
        }
        Err(_) => ",,".to_string(),
    }
}

/// Per-sequence and aggregate metric reports.
pub struct EvaluationOutcome {
    pub per_sequence: Vec<MetricReport>,
    pub aggregate: MetricReport,
}

impl EvaluationOutcome {
    /// CSV rows: one per sequence plus an aggregate line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,mpjpe,stress,e3d,flipped\n");
        for (i, r) in self.per_sequence.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", i, r.mpjpe, r.stress, r.e3d, r.flipped));
        }
        let a = &self.aggregate;
        out.push_str(&format!("aggregate,{},{},{},{}\n", a.mpjpe, a.stress, a.e3d, a.flipped));
        out
    }
}

/// Camera-frame reconstruction for one sequence: the predicted rotation
/// applied to the reconstructed shape, frame by frame.
pub fn reconstruct_camera_frame(
    params: &ParameterStore,
    model: &ModelConfig,
    ablation: AblationMode,
    observations: &ObservationSequence,
) -> (ShapeSequence, RotationSet) {
    let f = observations.len();
    let use_context = ablation != AblationMode::NoContext;
    let all_ones = !model.use_series_vector || ablation == AblationMode::AlloneSeries;
    let l = if all_ones { SeriesVector::all_ones(f) } else { SeriesVector::arithmetic(f) };
    let (_, s_tilde, rotations) = crate::model::infer(params, observations, &l, use_context);
    (s_tilde.rotate(&rotations), rotations)
}

/// Ground truth in the camera frame (stored rotations applied to stored
/// shapes; shapes are taken as-is when no rotations are stored).
fn truth_camera_frame(record: &crate::data::SequenceRecord) -> Option<ShapeSequence> {
    let shapes = record.shapes.as_ref()?;
    Some(match &record.rotations {
        Some(rots) => shapes.rotate(rots),
        None => shapes.clone(),
    })
}

/// Inference-only evaluation over every sequence; the alignment layer is
/// never constructed here.
pub fn evaluate_dataset(
    params: &ParameterStore,
    model: &ModelConfig,
    ablation: AblationMode,
    dataset: &Dataset,
    flip: FlipMode,
) -> Result<EvaluationOutcome, TrainError> {
    if model.keypoints != dataset.points() {
        return Err(TrainError::PointsMismatch { model: model.keypoints, data: dataset.points() });
    }
    if !dataset.has_ground_truth() {
        return Err(TrainError::MissingGroundTruth);
    }
    let mut per_sequence = Vec::with_capacity(dataset.sequences.len());
    for record in &dataset.sequences {
        let truth = truth_camera_frame(record).expect("ground truth checked above");
        let (reconstruction, _) =
            reconstruct_camera_frame(params, model, ablation, &record.observations);
        let report = match flip {
            FlipMode::Raw => MetricReport {
                mpjpe: mpjpe(&reconstruction, &truth),
                stress: stress(&reconstruction, &truth),
                e3d: e3d(&reconstruction, &truth)
                    .map_err(|m| TrainError::Config(format!("evaluation failed: {}", m)))?,
                flipped: false,
            },
            FlipMode::BestOfFlip => objective::evaluate(&reconstruction, &truth, flip)
                .map_err(|m| TrainError::Config(format!("evaluation failed: {}", m)))?,
        };
        per_sequence.push(report);
    }
    let n = per_sequence.len() as f64;
    let aggregate = MetricReport {
        mpjpe: per_sequence.iter().map(|r| r.mpjpe).sum::<f64>() / n,
        stress: per_sequence.iter().map(|r| r.stress).sum::<f64>() / n,
        e3d: per_sequence.iter().map(|r| r.e3d).sum::<f64>() / n,
        flipped: false,
    };
    Ok(EvaluationOutcome { per_sequence, aggregate })
}

/// Evaluates a stored checkpoint against a dataset.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    flip: FlipMode,
) -> Result<EvaluationOutcome, TrainError> {
    evaluate_dataset(&checkpoint.params, &checkpoint.model, checkpoint.ablation, dataset, flip)
}
