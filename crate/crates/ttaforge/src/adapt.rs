//! Online adaptation engine: the per-batch mean-teacher step with
//! pseudo-label filtering, memory enhancement, instance harvesting,
//! hallucination fallback, the student update, and the teacher EMA.
//!
//! The protocol is predict-then-adapt: evaluation predictions for every
//! image in a batch are produced before that batch's update, so predictions
//! for image `t` never depend on later images.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::augment::{self, AugmentationSpec};
use crate::backend::{DetectorBackend, FeatureEmbedder, TrainTarget};
use crate::core::{iou, Detection, Image};
use crate::enhance::{enhance, AffinityParams};
use crate::error::{Result, TtaError};
use crate::hallucinate::{hallucinate, HallucinationConfig};
use crate::memory::InstanceMemory;
use crate::prompts::{ema_update, warm_start_visual, PromptSet, WarmStartRecord};

/// Whose predictions are evaluated: the EMA teacher (default) or the
/// student, both after memory enhancement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Zero-shot predictions, no warm-start, no updates, no memory.
    Direct,
    /// Full mean-teacher adaptation.
    Adapt,
}

#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    /// Pseudo-label score threshold (strictly greater keeps).
    pub th_pl: f64,
    /// Memory-enhancement gate.
    pub th_me: f64,
    /// Teacher EMA momentum.
    pub gamma: f64,
    /// Visual prompt tokens per layer.
    pub num_prompts: usize,
    /// Per-category memory capacity.
    pub capacity: usize,
    /// Affinity weighting factor.
    pub alpha: f64,
    /// Affinity sharpness ratio.
    pub beta: f64,
    pub lr_text: f64,
    pub lr_visual: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Class-agnostic NMS threshold applied before pseudo-label filtering.
    pub nms_iou: f64,
    pub enhance: bool,
    pub hallucinate: bool,
    pub eval_source: EvalSource,
    pub augment: AugmentationSpec,
    pub halluc: HallucinationConfig,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            th_pl: 0.3,
            th_me: 0.3,
            gamma: 0.999,
            num_prompts: 10,
            capacity: 20,
            alpha: 5.0,
            beta: 5.0,
            lr_text: 0.02,
            lr_visual: 0.2,
            batch_size: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            seed: 0,
            nms_iou: 0.5,
            enhance: true,
            hallucinate: true,
            eval_source: EvalSource::Teacher,
            augment: AugmentationSpec::default(),
            halluc: HallucinationConfig::default(),
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        for (name, v) in [
            ("th_pl", self.th_pl),
            ("th_me", self.th_me),
            ("gamma", self.gamma),
            ("nms_iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TtaError::Invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        for (name, v) in [("lr_text", self.lr_text), ("lr_visual", self.lr_visual)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TtaError::Invalid(format!("{name} {v} must be >= 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(TtaError::Invalid("batch_size must be >= 1".into()));
        }
        if self.capacity == 0 {
            return Err(TtaError::Invalid("capacity must be >= 1".into()));
        }
        self.augment.validate(patch_size)?;
        self.halluc.validate()?;
        AffinityParams::new(self.alpha, self.beta, self.th_me)?;
        Ok(())
    }

    fn affinity_params(&self) -> AffinityParams {
        AffinityParams {
            alpha: self.alpha,
            beta: self.beta,
            th_me: self.th_me,
        }
    }
}

/// Everything the adaptation loop owns and mutates.
#[derive(Debug)]
pub struct AdaptationState {
    pub student: PromptSet,
    pub teacher: PromptSet,
    pub opt_m: PromptSet,
    pub opt_v: PromptSet,
    pub step: u64,
    pub memory: InstanceMemory,
    pub warm_started: bool,
    pub warm_start: Option<WarmStartRecord>,
    rng: ChaCha12Rng,
}

impl AdaptationState {
    pub fn new(backend: &dyn DetectorBackend, config: &AdaptationConfig) -> Self {
        let student = PromptSet::with_prompt_count(backend, config.num_prompts);
        AdaptationState {
            teacher: student.clone(),
            opt_m: student.zeros_like(),
            opt_v: student.zeros_like(),
            student,
            step: 0,
            memory: InstanceMemory::new(backend.num_categories(), config.capacity),
            warm_started: false,
            warm_start: None,
            rng: ChaCha12Rng::seed_from_u64(config.seed),
        }
    }
}

/// Greedy class-agnostic NMS: detections in descending-score order are kept
/// unless they overlap an already kept box with IoU above the threshold.
pub fn nms_class_agnostic(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|a, b| {
        detections[*b]
            .score
            .partial_cmp(&detections[*a].score)
            .unwrap()
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let d = &detections[idx];
        if kept.iter().all(|k| iou(&k.box_, &d.box_) <= iou_thresh) {
            kept.push(d.clone());
        }
    }
    kept
}

/// NMS, then keep detections whose top score strictly exceeds `th_pl`.
/// Returns the surviving detections and their unit-weight training targets.
pub fn filter_pseudo_labels(
    detections: &[Detection],
    th_pl: f64,
    nms_iou: f64,
) -> (Vec<Detection>, Vec<TrainTarget>) {
    let survivors: Vec<Detection> = nms_class_agnostic(detections, nms_iou)
        .into_iter()
        .filter(|d| d.score > th_pl)
        .collect();
    let targets = survivors
        .iter()
        .map(|d| TrainTarget {
            box_: d.box_,
            category: d.label,
            weight: 1.0,
        })
        .collect();
    (survivors, targets)
}

/// One decoupled-weight-decay optimizer update over a flat parameter slice.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + eps)) + lr * weight_decay * params[i];
    }
}

/// Per-batch diagnostics, one line per optimizer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub images: usize,
    /// Batch-mean losses.
    pub l_cls: f64,
    pub l_loc: f64,
    pub pseudo_labels: usize,
    /// Images that fell back to hallucination.
    pub hallucinated: usize,
    pub memory_occupancy: Vec<usize>,
    /// True when a non-finite loss aborted the update for this batch.
    pub skipped_non_finite: bool,
}

impl StepReport {
    pub fn format_line(&self) -> String {
        let occupancy = self
            .memory_occupancy
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join("/");
        format!(
            "step={} images={} l_cls={:.6} l_loc={:.6} pseudo_labels={} hallucinated={} memory={} skipped={}",
            self.step,
            self.images,
            self.l_cls,
            self.l_loc,
            self.pseudo_labels,
            self.hallucinated,
            occupancy,
            self.skipped_non_finite
        )
    }
}

/// An image entering the stream, keyed by its dataset id.
#[derive(Debug, Clone)]
pub struct StreamImage {
    pub id: u64,
    pub image: Image,
}

/// One adaptation iteration over a batch.
///
/// Per image: weak-augment; teacher predictions (warm-starting the prompts
/// on the very first image); memory enhancement; NMS + threshold filtering;
/// harvesting survivors into memory; hallucination when no pseudo-label
/// survived and memory has content; strong augmentation of the (possibly
/// hallucinated) image with labels mapped into its geometry; student
/// loss and gradient accumulation. Then one optimizer step and the teacher
/// EMA. A non-finite loss skips the update and is flagged in the report.
pub fn adapt_step(
    batch: &[StreamImage],
    state: &mut AdaptationState,
    backend: &dyn DetectorBackend,
    embedder: &dyn FeatureEmbedder,
    config: &AdaptationConfig,
) -> Result<(Vec<Vec<Detection>>, StepReport)> {
    let affinity = config.affinity_params();
    let mut eval_predictions = Vec::with_capacity(batch.len());
    let mut grad_sum: Option<PromptSet> = None;
    let mut sum_cls = 0.0;
    let mut sum_loc = 0.0;
    let mut pseudo_labels = 0usize;
    let mut hallucinated = 0usize;
    let mut skipped_non_finite = false;

    for item in batch {
        let (weak_img, weak_t) = augment::weak(&item.image, &config.augment, &mut state.rng);

        if !state.warm_started {
            let (visual, record) = warm_start_visual(
                &weak_img,
                item.id,
                backend,
                config.num_prompts,
                &mut state.rng,
            )?;
            state.student.visual = visual;
            state.teacher = state.student.clone();
            state.opt_m = state.student.zeros_like();
            state.opt_v = state.student.zeros_like();
            state.warm_started = true;
            state.warm_start = Some(record);
        }

        let teacher_raw = backend.predict(&weak_img, &state.teacher)?;
        let prototypes = state.memory.prototypes();
        let teacher_enhanced = if config.enhance {
            enhance(&weak_img, &teacher_raw, &prototypes, embedder, &affinity)?
        } else {
            teacher_raw
        };

        let for_eval = match config.eval_source {
            EvalSource::Teacher => teacher_enhanced.clone(),
            EvalSource::Student => {
                let student_raw = backend.predict(&weak_img, &state.student)?;
                if config.enhance {
                    enhance(&weak_img, &student_raw, &prototypes, embedder, &affinity)?
                } else {
                    student_raw
                }
            }
        };
        // Evaluation output: duplicate-suppressed, mapped back into the
        // original image geometry.
        let inv = weak_t.inverse();
        eval_predictions.push(
            nms_class_agnostic(&for_eval, config.nms_iou)
                .iter()
                .map(|d| Detection {
                    box_: inv.apply_box(&d.box_),
                    scores: d.scores.clone(),
                    label: d.label,
                    score: d.score,
                })
                .collect(),
        );

        let (survivors, mut targets) =
            filter_pseudo_labels(&teacher_enhanced, config.th_pl, config.nms_iou);
        pseudo_labels += targets.len();
        state
            .memory
            .harvest(&weak_img, &survivors, embedder, config.th_pl, state.step)?;

        let mut student_input = weak_img;
        if targets.is_empty() && config.hallucinate && !state.memory.is_empty() {
            let (hall_img, hall_targets) = hallucinate(
                &student_input,
                &state.memory,
                &config.halluc,
                &mut state.rng,
            )?;
            student_input = hall_img;
            targets = hall_targets;
            hallucinated += 1;
        }

        let (strong_img, strong_t) =
            augment::strong(&student_input, &config.augment, &mut state.rng);
        let mapped: Vec<TrainTarget> = targets
            .iter()
            .map(|t| TrainTarget {
                box_: strong_t.apply_box(&t.box_),
                category: t.category,
                weight: t.weight,
            })
            .collect();

        match backend.loss_and_grad(&strong_img, &mapped, &state.student) {
            Ok((loss, grad)) => {
                sum_cls += loss.cls;
                sum_loc += loss.loc;
                match &mut grad_sum {
                    None => grad_sum = Some(grad),
                    Some(acc) => {
                        for i in 0..acc.tensor_count() {
                            acc.tensor_mut(i).add_assign(grad.tensor(i));
                        }
                    }
                }
            }
            Err(TtaError::NonFiniteLoss(_)) => {
                skipped_non_finite = true;
            }
            Err(e) => return Err(e),
        }
    }

    if !skipped_non_finite {
        if let Some(grad) = grad_sum {
            let t = state.step + 1;
            for i in 0..state.student.tensor_count() {
                let lr = if i == 0 {
                    config.lr_text
                } else {
                    config.lr_visual
                };
                adamw_step(
                    state.student.tensor_mut(i).data_mut(),
                    grad.tensor(i).data(),
                    state.opt_m.tensor_mut(i).data_mut(),
                    state.opt_v.tensor_mut(i).data_mut(),
                    t,
                    lr,
                    config.adam_beta1,
                    config.adam_beta2,
                    config.adam_eps,
                    config.weight_decay,
                );
            }
            if state.student.is_finite() {
                state.teacher = ema_update(&state.teacher, &state.student, config.gamma)?;
                state.step += 1;
            } else {
                skipped_non_finite = true;
            }
        }
    }

    let n = batch.len().max(1) as f64;
    let report = StepReport {
        step: state.step,
        images: batch.len(),
        l_cls: sum_cls / n,
        l_loc: sum_loc / n,
        pseudo_labels,
        hallucinated,
        memory_occupancy: state.memory.occupancy(),
        skipped_non_finite,
    };
    Ok((eval_predictions, report))
}

#[derive(Debug, Clone)]
pub struct StreamOutput {
    /// Per-image predictions in original image coordinates, stream order.
    pub predictions: Vec<(u64, Vec<Detection>)>,
    pub reports: Vec<StepReport>,
}

/// Run the full online protocol over a fixed-order stream.
pub fn run_stream(
    stream: &[StreamImage],
    backend: &dyn DetectorBackend,
    embedder: &dyn FeatureEmbedder,
    config: &AdaptationConfig,
    mode: RunMode,
) -> Result<StreamOutput> {
    config.validate(backend.patch_size())?;
    match mode {
        RunMode::Direct => {
            let prompts = PromptSet::zero_shot(backend);
            let mut predictions = Vec::with_capacity(stream.len());
            for item in stream {
                let raw = backend.predict(&item.image, &prompts)?;
                predictions.push((item.id, nms_class_agnostic(&raw, config.nms_iou)));
            }
            Ok(StreamOutput {
                predictions,
                reports: Vec::new(),
            })
        }
        RunMode::Adapt => {
            let mut state = AdaptationState::new(backend, config);
            run_adaptation(stream, &mut state, backend, embedder, config)
        }
    }
}

/// Adaptation over a stream with caller-owned state, for callers that want
/// to inspect prompts or dump the memory afterwards.
pub fn run_adaptation(
    stream: &[StreamImage],
    state: &mut AdaptationState,
    backend: &dyn DetectorBackend,
    embedder: &dyn FeatureEmbedder,
    config: &AdaptationConfig,
) -> Result<StreamOutput> {
    config.validate(backend.patch_size())?;
    let mut predictions = Vec::with_capacity(stream.len());
    let mut reports = Vec::new();
    for batch in stream.chunks(config.batch_size) {
        let (preds, report) = adapt_step(batch, state, backend, embedder, config)?;
        for (item, p) in batch.iter().zip(preds) {
            predictions.push((item.id, p));
        }
        reports.push(report);
    }
    Ok(StreamOutput {
        predictions,
        reports,
    })
}
