//! Mean-teacher training loop over a split dataset.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detector::{GridDetector, PredictConfig, DEFAULT_SCORE_THRESHOLD};
use super::loss::{student_step, Example, LossBreakdown, DEFAULT_LAMBDA, DEFAULT_MATCH_IOU};
use crate::dataset::{generate_synthetic, split_partial, AnnotationRecord, SplitDataset, SyntheticConfig};
use crate::ema::{apply_norm_strategy, ema_update, NormStrategy, ParameterState, DEFAULT_ALPHA, DEFAULT_BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::fusion::{fuse_pseudo_labels, Detection, DEFAULT_CAM_EPOCHS, DEFAULT_TAU_NMS};
use crate::heatmap::{cam_to_boxes, CamBoxConfig};
use crate::metrics::{froc, mean_average_precision, recall_at_fppi, EvalSet, FrocCurve, DEFAULT_IOU, DEFAULT_TARGET_FPPI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Student on fully annotated images plus pseudo-labelled weak images,
    /// teacher by EMA; the teacher is evaluated.
    Ssl,
    /// Student on fully annotated images only; the student is evaluated.
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Open,
    Ema,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaSchedule {
    PerIteration,
    PerEpoch,
}

/// Synthetic benchmark used by [`run_benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of training images that keep their boxes.
    pub ratio: f64,
    pub synthetic: SyntheticConfig,
    /// Area gates etc. for converting CAMs into boxes.
    pub cam: CamBoxConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        let cam = CamBoxConfig::for_image(synthetic.width, synthetic.height);
        Self {
            n_train: 200,
            n_test: 100,
            ratio: 0.25,
            synthetic,
            cam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub mode: TrainMode,
    pub lambda: f64,
    pub alpha: f64,
    pub ema_schedule: EmaSchedule,
    pub tau_nms: f64,
    pub cam_epochs: usize,
    pub norm: NormKind,
    pub bn_momentum: f64,
    /// EMA factor for the teacher's statistics under `norm = "ema"`;
    /// defaults to `alpha`.
    pub bn_ema_alpha: Option<f64>,
    pub lr: f64,
    pub batch_size: usize,
    pub match_iou: f64,
    /// Teacher score threshold when producing pseudo-labels.
    pub score_threshold: f64,
    /// Score threshold for detections fed to evaluation.
    pub eval_score_threshold: f64,
    pub eval_iou: f64,
    pub target_fppi: f64,
    /// Weak images labelled lesion-free train as pure background.
    pub negatives_as_background: bool,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            mode: TrainMode::Ssl,
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            ema_schedule: EmaSchedule::PerIteration,
            tau_nms: DEFAULT_TAU_NMS,
            cam_epochs: DEFAULT_CAM_EPOCHS,
            norm: NormKind::Frozen,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_ema_alpha: None,
            lr: 0.005,
            batch_size: 1,
            match_iou: DEFAULT_MATCH_IOU,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            eval_score_threshold: 0.05,
            eval_iou: DEFAULT_IOU,
            target_fppi: DEFAULT_TARGET_FPPI,
            negatives_as_background: true,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn norm_strategy(&self) -> NormStrategy {
        match self.norm {
            NormKind::Open => NormStrategy::Open {
                momentum: self.bn_momentum,
            },
            NormKind::Ema => NormStrategy::Ema {
                momentum: self.bn_momentum,
                alpha: self.bn_ema_alpha.unwrap_or(self.alpha),
            },
            NormKind::Frozen => NormStrategy::Frozen,
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut open_unit = |name: &str, v: f64| {
            if !(v > 0.0 && v < 1.0) {
                problems.push(format!("{name} = {v} must lie in (0, 1)"));
            }
        };
        open_unit("alpha", self.alpha);
        open_unit("bn_momentum", self.bn_momentum);
        if let Some(a) = self.bn_ema_alpha {
            open_unit("bn_ema_alpha", a);
        }
        for (name, v) in [
            ("tau_nms", self.tau_nms),
            ("match_iou", self.match_iou),
            ("score_threshold", self.score_threshold),
            ("eval_score_threshold", self.eval_score_threshold),
            ("eval_iou", self.eval_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda = {} must be finite and >= 0", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr = {} must be finite and > 0", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(self.target_fppi >= 0.0) {
            problems.push(format!("target_fppi = {} must be >= 0", self.target_fppi));
        }
        if self.data.n_train == 0 {
            problems.push("data.n_train must be at least 1".to_string());
        }
        if self.data.n_test == 0 {
            problems.push("data.n_test must be at least 1".to_string());
        }
        if !(self.data.ratio > 0.0 && self.data.ratio <= 1.0) {
            problems.push(format!("data.ratio = {} must lie in (0, 1]", self.data.ratio));
        }
        if let Err(Error::InvalidConfig(p)) = self.data.synthetic.validate() {
            problems.extend(p.into_iter().map(|s| format!("data.synthetic: {s}")));
        }
        if let Err(e) = self.data.cam.validate() {
            problems.push(format!("data.cam: {e}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    /// Mean per-step supervised loss.
    pub supervised: LossBreakdown,
    /// Mean per-step weak loss (before weighting by lambda).
    pub weak: LossBreakdown,
    /// Mean per-step student objective.
    pub student: f64,
    pub pseudo_boxes: usize,
    pub map: f64,
    pub recall_at_fppi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub map: f64,
    pub recall_at_fppi: f64,
    pub froc: FrocCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub norm: String,
    pub epochs: Vec<EpochStats>,
    #[serde(rename = "final")]
    pub final_eval: EvalSummary,
    #[serde(skip)]
    pub initial: Option<ParameterState>,
    #[serde(skip)]
    pub teacher: Option<ParameterState>,
    #[serde(skip)]
    pub student: Option<ParameterState>,
}

/// Detections of `model` on every test image, scored against their boxes.
pub fn evaluate(
    model: &GridDetector,
    test: &[AnnotationRecord],
    predict: &PredictConfig,
    iou: f64,
    target_fppi: f64,
) -> Result<EvalSummary> {
    let mut eval = EvalSet::new();
    for r in test {
        eval.add_image(r.image_id.clone());
        for b in r.boxes() {
            eval.add_ground_truth(r.image_id.clone(), *b);
        }
        for d in model.predict(&r.features, predict)? {
            eval.add_detection(&r.image_id, d)?;
        }
    }
    let curve = froc(&eval, iou)?;
    Ok(EvalSummary {
        map: mean_average_precision(&eval, iou)?,
        recall_at_fppi: recall_at_fppi(&curve, target_fppi)?,
        froc: curve,
    })
}

fn batch_stats(images: &[&FeatureGrid]) -> (Vec<f64>, Vec<f64>) {
    FeatureGrid::channel_stats(images.iter().copied())
}

/// Models at the end of one training step, handed to the observer of
/// [`train_observed`].
#[derive(Debug, Clone, Copy)]
pub struct StepTrace<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Teacher after its EMA update but before the normalization strategy.
    pub teacher_before_norm: &'a ParameterState,
    pub teacher: &'a ParameterState,
    pub student: &'a ParameterState,
}

/// Runs teacher-student training and evaluates the final model on `test`.
///
/// Each step draws one batch from the fully annotated list and one from the
/// weak list. Pseudo-labels are regenerated from the current teacher at
/// every step. An epoch is `ceil(max(|fully|, |weak|) / batch_size)` steps.
pub fn train(config: &TrainConfig, data: &SplitDataset, test: &[AnnotationRecord]) -> Result<TrainReport> {
    train_observed(config, data, test, |_| {})
}

/// [`train`] calling `observer` after every step.
pub fn train_observed(
    config: &TrainConfig,
    data: &SplitDataset,
    test: &[AnnotationRecord],
    mut observer: impl FnMut(&StepTrace<'_>),
) -> Result<TrainReport> {
    config.validate()?;
    let first = data
        .fully
        .first()
        .or(data.weakly.first())
        .ok_or(Error::EmptyDataset)?;
    let cell = config.data.synthetic.cell_size as f64;
    let all_features: Vec<&FeatureGrid> = data
        .fully
        .iter()
        .chain(&data.weakly)
        .map(|r| &r.features)
        .collect();
    // Statistics estimated once over every training image, as after
    // pre-training.
    let (mean, var) = FeatureGrid::channel_stats(all_features.iter().copied());
    let mut student = GridDetector::new(
        first.features.grid_w(),
        first.features.grid_h(),
        cell,
        cell,
        mean,
        var,
    )?;
    let initial = student.params.clone();
    let mut teacher = student.clone();

    let ssl = config.mode == TrainMode::Ssl;
    let weak: &[AnnotationRecord] = if ssl { &data.weakly } else { &[] };
    let cam_boxes: Vec<Vec<Detection>> = weak
        .iter()
        .map(|r| match (&r.heatmap, r.annotation.class()) {
            (Some(h), 1) => cam_to_boxes(h, &config.data.cam, r.classifier_score.unwrap_or(1.0)),
            _ => Ok(Vec::new()),
        })
        .collect::<Result<_>>()?;

    let pseudo_cfg = PredictConfig {
        score_threshold: config.score_threshold,
        tau_nms: config.tau_nms,
    };
    let eval_cfg = PredictConfig {
        score_threshold: config.eval_score_threshold,
        tau_nms: config.tau_nms,
    };
    let strategy = config.norm_strategy();
    let bs = config.batch_size;
    let longest = data.fully.len().max(data.weakly.len());
    let steps_per_epoch = longest.div_ceil(bs);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fully_order: Vec<usize> = (0..data.fully.len()).collect();
    let mut weak_order: Vec<usize> = (0..weak.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        fully_order.shuffle(&mut rng);
        weak_order.shuffle(&mut rng);
        let mut sup_sum = LossBreakdown::default();
        let mut weak_sum = LossBreakdown::default();
        let mut student_sum = 0.0;
        let mut pseudo_boxes = 0;

        for step in 0..steps_per_epoch {
            let pick = |order: &[usize], i: usize| order[(step * bs + i) % order.len()];
            let fully_batch: Vec<&AnnotationRecord> = if fully_order.is_empty() {
                Vec::new()
            } else {
                (0..bs).map(|i| &data.fully[pick(&fully_order, i)]).collect()
            };
            let sup_targets: Vec<Vec<Detection>> = fully_batch
                .iter()
                .map(|r| ground_truth_detections(r))
                .collect::<Result<_>>()?;

            let mut weak_batch: Vec<(&AnnotationRecord, Vec<Detection>)> = Vec::new();
            if !weak_order.is_empty() {
                for i in 0..bs {
                    let idx = pick(&weak_order, i);
                    let record = &weak[idx];
                    let positive = record.annotation.class() == 1;
                    if !positive && config.negatives_as_background {
                        weak_batch.push((record, Vec::new()));
                        continue;
                    }
                    let teacher_dets = teacher.predict(&record.features, &pseudo_cfg)?;
                    let fused = fuse_pseudo_labels(
                        &teacher_dets,
                        &cam_boxes[idx],
                        config.tau_nms,
                        epoch,
                        config.cam_epochs,
                    );
                    // An image known to hold a lesion is not trained as
                    // background for want of a pseudo-box.
                    if positive && fused.is_empty() {
                        continue;
                    }
                    pseudo_boxes += fused.len();
                    weak_batch.push((record, fused));
                }
            }

            let batch_s: Vec<Example<'_>> = fully_batch
                .iter()
                .zip(&sup_targets)
                .map(|(r, t)| Example {
                    features: &r.features,
                    targets: t,
                })
                .collect();
            let batch_w: Vec<Example<'_>> = weak_batch
                .iter()
                .map(|(r, t)| Example {
                    features: &r.features,
                    targets: t,
                })
                .collect();

            let (next, objective) =
                student_step(&student, &batch_s, &batch_w, config.lambda, config.lr, config.match_iou)?;
            sup_sum = sup_sum.add(&objective.supervised);
            weak_sum = weak_sum.add(&objective.weak);
            student_sum += objective.total;
            student = next;

            if ssl && config.ema_schedule == EmaSchedule::PerIteration {
                teacher.params = ema_update(&teacher.params, &student.params, config.alpha)?;
            }
            let images: Vec<&FeatureGrid> = batch_s
                .iter()
                .chain(&batch_w)
                .map(|e| e.features)
                .collect();
            let teacher_before_norm = teacher.params.clone();
            if !images.is_empty() {
                let (bm, bv) = batch_stats(&images);
                let (t, s) = apply_norm_strategy(strategy, &teacher.params, &student.params, &bm, &bv)?;
                teacher.params = t;
                student.params = s;
            }
            if !ssl {
                teacher = student.clone();
            }
            observer(&StepTrace {
                epoch,
                step,
                teacher_before_norm: &teacher_before_norm,
                teacher: &teacher.params,
                student: &student.params,
            });
        }
        if ssl && config.ema_schedule == EmaSchedule::PerEpoch {
            teacher.params = ema_update(&teacher.params, &student.params, config.alpha)?;
        }

        let model = if ssl { &teacher } else { &student };
        let summary = evaluate(model, test, &eval_cfg, config.eval_iou, config.target_fppi)?;
        let steps = steps_per_epoch.max(1) as f64;
        epochs.push(EpochStats {
            epoch,
            steps: steps_per_epoch,
            supervised: sup_sum.scale(1.0 / steps),
            weak: weak_sum.scale(1.0 / steps),
            student: student_sum / steps,
            pseudo_boxes,
            map: summary.map,
            recall_at_fppi: summary.recall_at_fppi,
        });
    }

    let model = if ssl { &teacher } else { &student };
    let final_eval = evaluate(model, test, &eval_cfg, config.eval_iou, config.target_fppi)?;
    Ok(TrainReport {
        mode: config.mode,
        norm: strategy.name().to_string(),
        epochs,
        final_eval,
        initial: Some(initial),
        teacher: Some(teacher.params),
        student: Some(student.params),
    })
}

fn ground_truth_detections(r: &AnnotationRecord) -> Result<Vec<Detection>> {
    r.boxes()
        .iter()
        .map(|b| Detection::new(1.0, *b, crate::fusion::Source::GroundTruth))
        .collect()
}

/// Generates the configured synthetic benchmark, splits it and trains.
///
/// The first `n_train` images form the training pool, the next `n_test`
/// the held-out test set.
pub fn run_benchmark(config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let (train_set, test_set) = benchmark_data(config)?;
    train(config, &train_set, &test_set)
}

pub fn benchmark_data(config: &TrainConfig) -> Result<(SplitDataset, Vec<AnnotationRecord>)> {
    let d = &config.data;
    let mut records = generate_synthetic(d.n_train + d.n_test, config.seed, &d.synthetic)?;
    let test = records.split_off(d.n_train);
    let split = split_partial(&records, d.ratio, config.seed)?;
    Ok((split, test))
}
