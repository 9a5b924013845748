//! Optimization loops for the three training stages (teacher pretraining,
//! pixel-to-point pretraining, supervised probing is in `evalkit`), plus
//! checkpoint persistence and metrics serialization.
//!
//! Runs are deterministic: every random draw comes from a `(seed, stream)`
//! pair derived from the run seed, and gradient accumulation order is fixed
//! by the (single-threaded) loop structure.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::losses;
use crate::models::{self, ModelConfig};
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::Rng;
use crate::synthdata::Dataset;
use crate::tensor::DenseArray;
use crate::transfer::{self, LossKind, PipelineConfig};

/// Stream ids for the run's random draws (purpose in the top 16 bits).
const STREAM_INIT: u64 = 1 << 48;
const STREAM_BATCH: u64 = 2 << 48;
const STREAM_FRAME_BASE: u64 = 3 << 48;
const MAX_BATCH_FRAMES: usize = 4096;

fn frame_stream(step: usize, slot: usize) -> u64 {
    STREAM_FRAME_BASE + (step as u64) * MAX_BATCH_FRAMES as u64 + slot as u64
}

/// Hyperparameters of one optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<F> {
    /// Initial learning rate.
    pub lr0: F,
    pub momentum: F,
    pub weight_decay: F,
    /// Total optimization steps.
    pub steps: usize,
    /// Frames sampled (with replacement) per step.
    pub batch_frames: usize,
    /// Positive pairs per frame (M).
    pub pairs_per_frame: usize,
    /// The schedule ends at `lr0 * lr_final_factor`.
    pub lr_final_factor: F,
    pub loss_kind: LossKind,
    pub seed: u64,
    /// Parameter-name prefixes excluded from optimization.
    pub frozen: Vec<String>,
    /// Context-block voxel edge length in meters.
    pub voxel_size: F,
    /// Cap on points fed to the student per frame.
    pub student_points: usize,
    /// Distillation temperature for the ppkd objective.
    pub kd_temp: F,
    /// Pool contrastive negatives across the batch instead of per frame.
    pub cross_frame_negatives: bool,
}

impl<F: Real> Default for TrainConfig<F> {
    fn default() -> Self {
        TrainConfig {
            lr0: F::of(0.5),
            momentum: F::of(0.9),
            weight_decay: F::of(1e-4),
            steps: 2000,
            batch_frames: 8,
            pairs_per_frame: 256,
            lr_final_factor: F::of(0.01),
            loss_kind: LossKind::Ppnce,
            seed: 0,
            frozen: vec!["teacher".to_string()],
            voxel_size: F::of(0.025),
            student_points: 512,
            kd_temp: F::of(4.0),
            cross_frame_negatives: false,
        }
    }
}

impl<F: Real> TrainConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 < F::zero() {
            return Err(Error::Config(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        if self.momentum < F::zero() || self.momentum >= F::one() {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < F::zero() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_frames == 0 || self.batch_frames > MAX_BATCH_FRAMES {
            return Err(Error::Config(format!(
                "batch_frames must lie in 1..={MAX_BATCH_FRAMES}, got {}",
                self.batch_frames
            )));
        }
        if self.pairs_per_frame == 0 {
            return Err(Error::Config("pairs_per_frame must be positive".into()));
        }
        if self.lr_final_factor <= F::zero() {
            return Err(Error::Config(format!(
                "lr_final_factor must be positive, got {}",
                self.lr_final_factor
            )));
        }
        if self.voxel_size <= F::zero() {
            return Err(Error::Config(format!(
                "voxel_size must be positive, got {}",
                self.voxel_size
            )));
        }
        if self.kd_temp <= F::zero() {
            return Err(Error::Config(format!(
                "kd_temp must be positive, got {}",
                self.kd_temp
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` config entry to the train/model config pair.
    /// Unknown keys are errors.
    pub fn apply_entry(&mut self, model: &mut ModelConfig<F>, key: &str, value: &str) -> Result<()> {
        let scalar = |v: &str| -> Result<F> {
            v.parse::<f64>()
                .map(F::of)
                .map_err(|_| Error::Config(format!("value '{v}' for '{key}' is not a number")))
        };
        let integer = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("value '{v}' for '{key}' is not an integer")))
        };
        let boolean = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!("value '{v}' for '{key}' is not a boolean"))),
            }
        };
        let int_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|p| {
                    p.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!("value '{v}' for '{key}' is not a width list"))
                    })
                })
                .collect()
        };
        match key {
            "lr0" => self.lr0 = scalar(value)?,
            "momentum" => self.momentum = scalar(value)?,
            "weight_decay" => self.weight_decay = scalar(value)?,
            "steps" => self.steps = integer(value)?,
            "batch_frames" => self.batch_frames = integer(value)?,
            "pairs_per_frame" => self.pairs_per_frame = integer(value)?,
            "lr_final_factor" => self.lr_final_factor = scalar(value)?,
            "loss_kind" => self.loss_kind = value.parse()?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("value '{value}' for 'seed' is not a u64")))?
            }
            "frozen" => {
                self.frozen = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "voxel_size" => self.voxel_size = scalar(value)?,
            "student_points" => self.student_points = integer(value)?,
            "kd_temp" => self.kd_temp = scalar(value)?,
            "cross_frame_negatives" => self.cross_frame_negatives = boolean(value)?,
            "embed_dim" => model.embed_dim = integer(value)?,
            "teacher_channels" => model.teacher_channels = int_list(value)?,
            "student_widths" => {
                let widths = match value {
                    "default" => vec![64, 128],
                    "small" => vec![32, 64],
                    other => int_list(other)?,
                };
                if widths.len() != 2 {
                    return Err(Error::Config(format!(
                        "student_widths needs exactly two widths, got '{value}'"
                    )));
                }
                model.student_widths = [widths[0], widths[1]];
            }
            "tau" => model.tau = scalar(value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a whole `key=value` config file body.
    pub fn apply_config_text(&mut self, model: &mut ModelConfig<F>, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            self.apply_entry(model, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Serializes the resolved configuration as `key=value` lines.
    pub fn to_text(&self, model: &ModelConfig<F>) -> String {
        let widths = format!("{},{}", model.student_widths[0], model.student_widths[1]);
        let channels = model
            .teacher_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "lr0={}\nmomentum={}\nweight_decay={}\nsteps={}\nbatch_frames={}\n\
             pairs_per_frame={}\nlr_final_factor={}\nloss_kind={}\nseed={}\nfrozen={}\n\
             voxel_size={}\nstudent_points={}\nkd_temp={}\ncross_frame_negatives={}\n\
             embed_dim={}\nteacher_channels={}\nstudent_widths={}\ntau={}\n",
            self.lr0,
            self.momentum,
            self.weight_decay,
            self.steps,
            self.batch_frames,
            self.pairs_per_frame,
            self.lr_final_factor,
            self.loss_kind,
            self.seed,
            self.frozen.join(","),
            self.voxel_size,
            self.student_points,
            self.kd_temp,
            self.cross_frame_negatives,
            model.embed_dim,
            channels,
            widths,
            model.tau,
        )
    }

    fn pipeline(&self, model: &ModelConfig<F>, train_teacher: bool) -> PipelineConfig<F> {
        PipelineConfig {
            model: model.clone(),
            voxel_size: self.voxel_size,
            pairs_per_frame: self.pairs_per_frame,
            student_points: self.student_points,
            kd_temp: self.kd_temp,
            cross_frame_negatives: self.cross_frame_negatives,
            train_teacher,
        }
    }
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone, Default)]
pub struct SgdState<F> {
    velocity: IndexMap<String, DenseArray<F>>,
}

impl<F: Real> SgdState<F> {
    pub fn new() -> Self {
        SgdState {
            velocity: IndexMap::new(),
        }
    }
}

/// One momentum-SGD update: `v <- momentum*v + g + weight_decay*theta`,
/// `theta <- theta - lr*v`. Frozen parameters are skipped; all gradients
/// are zeroed afterwards.
pub fn sgd_step<F: Real>(
    params: &mut ParamStore<F>,
    state: &mut SgdState<F>,
    lr: F,
    momentum: F,
    weight_decay: F,
) -> Result<()> {
    for (name, param) in params.iter_mut() {
        if !param.trainable {
            continue;
        }
        if param.grad.shape() != param.value.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} for '{name}' does not match value shape {:?}",
                param.grad.shape(),
                param.value.shape()
            )));
        }
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| DenseArray::zeros(param.value.shape()));
        if v.shape() != param.value.shape() {
            return Err(Error::Shape(format!(
                "velocity shape {:?} for '{name}' does not match value shape {:?}",
                v.shape(),
                param.value.shape()
            )));
        }
        for ((vel, &g), theta) in v
            .data_mut()
            .iter_mut()
            .zip(param.grad.data())
            .zip(param.value.data_mut().iter_mut())
        {
            *vel = momentum * *vel + g + weight_decay * *theta;
            *theta = *theta - lr * *vel;
        }
    }
    params.zero_grads();
    Ok(())
}

/// Exponential schedule: `lr0 * lr_final_factor^(step / (steps-1))`, with
/// both endpoints exact. A single-step run stays at `lr0`.
pub fn lr_schedule<F: Real>(step: usize, steps: usize, lr0: F, lr_final_factor: F) -> F {
    if steps <= 1 || step == 0 {
        return lr0;
    }
    if step >= steps - 1 {
        return lr0 * lr_final_factor;
    }
    let t = F::of(step as f64) / F::of((steps - 1) as f64);
    lr0 * lr_final_factor.powf(t)
}

/// One metrics row per optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics<F> {
    pub step: u64,
    pub lr: F,
    pub loss_sum: F,
    pub loss_mean: F,
    pub pos_sim_mean: F,
}

/// Serializes metrics with 17 significant digits so values re-parse exactly.
pub fn metrics_to_csv<F: Real>(rows: &[StepMetrics<F>]) -> String {
    let mut out = String::from("step,lr,loss_sum,loss_mean,pos_sim_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.step,
            r.lr.widen(),
            r.loss_sum.widen(),
            r.loss_mean.widen(),
            r.pos_sim_mean.widen()
        ));
    }
    out
}

fn non_finite_abort<F: Real>(step: usize, last: Option<&StepMetrics<F>>) -> Error {
    let context = match last {
        Some(m) => format!(
            "last finite metrics: step={} loss_sum={} loss_mean={} pos_sim_mean={}",
            m.step, m.loss_sum, m.loss_mean, m.pos_sim_mean
        ),
        None => "no finite step was completed".to_string(),
    };
    Error::NonFinite(format!("loss became non-finite at step {step}; {context}"))
}

/// Draws `count` frame indices with replacement.
fn sample_batch(rng: &mut Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.range(n)).collect()
}

/// Pixel-to-point pretraining (or a baseline objective) starting from a
/// loaded teacher. Returns the final parameter store (teacher included) and
/// one metrics row per step.
pub fn run_pretrain<F: Real>(
    dataset: &Dataset<F>,
    teacher: &ParamStore<F>,
    model: &ModelConfig<F>,
    cfg: &TrainConfig<F>,
    mut on_step: Option<&mut dyn FnMut(&StepMetrics<F>)>,
) -> Result<(ParamStore<F>, Vec<StepMetrics<F>>)> {
    cfg.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("pretraining dataset is empty".into()));
    }

    let mut params = ParamStore::new();
    for (name, p) in teacher.iter() {
        if name.starts_with("teacher.") {
            params.insert(name, p.value.clone(), true)?;
        }
    }
    if params.is_empty() {
        return Err(Error::InvalidArgument(
            "teacher checkpoint holds no teacher.* parameters".into(),
        ));
    }
    let inferred = ModelConfig::<F>::infer_from_store(&params)?;
    if inferred.teacher_channels != model.teacher_channels {
        return Err(Error::Shape(format!(
            "teacher checkpoint has channels {:?} but the model expects {:?} (teacher.conv*.weight)",
            inferred.teacher_channels, model.teacher_channels
        )));
    }

    let mut init_rng = Rng::new(cfg.seed, STREAM_INIT);
    models::init_upl(&mut params, model, &mut init_rng)?;
    let kd_classes = (cfg.loss_kind == LossKind::Ppkd).then_some(dataset.class_count);
    models::init_student(&mut params, model, kd_classes, &mut init_rng)?;
    for ns in &cfg.frozen {
        params.freeze_prefix(ns);
    }
    let train_teacher = params
        .iter()
        .any(|(name, p)| name.starts_with("teacher.") && p.trainable);
    let pipeline = cfg.pipeline(model, train_teacher);

    let mut batch_rng = Rng::new(cfg.seed, STREAM_BATCH);
    let mut state = SgdState::new();
    let mut metrics: Vec<StepMetrics<F>> = Vec::with_capacity(cfg.steps);
    params.zero_grads();
    for step in 0..cfg.steps {
        let indices = sample_batch(&mut batch_rng, dataset.len(), cfg.batch_frames);
        let frames: Vec<&crate::synthdata::RgbdFrame<F>> =
            indices.iter().map(|&i| &dataset.frames[i]).collect();
        let keys: Vec<(u64, u64)> = (0..frames.len())
            .map(|slot| (cfg.seed, frame_stream(step, slot)))
            .collect();
        let stats = transfer::train_batch(
            &frames,
            &mut params,
            &pipeline,
            cfg.loss_kind,
            &keys,
            true,
        )?;
        if !stats.loss_sum.is_finite() {
            return Err(non_finite_abort(step, metrics.last()));
        }
        let lr = lr_schedule(step, cfg.steps, cfg.lr0, cfg.lr_final_factor);
        sgd_step(&mut params, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
        let row = StepMetrics {
            step: step as u64,
            lr,
            loss_sum: stats.loss_sum,
            loss_mean: stats.loss_mean(),
            pos_sim_mean: stats.pos_sim_mean(),
        };
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&row);
        }
        metrics.push(row);
    }
    Ok((params, metrics))
}

/// Max-pools integer labels over `factor x factor` blocks (the largest
/// class id wins; -1 only survives for fully-invalid blocks).
pub fn max_pool_labels(labels: &[i64], h: usize, w: usize, factor: usize) -> Vec<i64> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![-1i64; oh * ow];
    for by in 0..oh {
        for bx in 0..ow {
            let mut best = -1i64;
            for dy in 0..factor {
                for dx in 0..factor {
                    best = best.max(labels[(by * factor + dy) * w + bx * factor + dx]);
                }
            }
            out[by * ow + bx] = best;
        }
    }
    out
}

/// Supervised teacher pretraining: per-pixel cross-entropy on the low-res
/// feature map through a 1x1 classifier, labels max-pooled to match.
pub fn run_pretrain_teacher<F: Real>(
    dataset: &Dataset<F>,
    model: &ModelConfig<F>,
    cfg: &TrainConfig<F>,
    mut on_step: Option<&mut dyn FnMut(&StepMetrics<F>)>,
) -> Result<(ParamStore<F>, Vec<StepMetrics<F>>)> {
    cfg.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("teacher dataset is empty".into()));
    }
    let mut params = ParamStore::new();
    let mut init_rng = Rng::new(cfg.seed, STREAM_INIT);
    models::init_teacher(&mut params, model, dataset.class_count, &mut init_rng)?;

    let factor = model.teacher_stride();
    let mut batch_rng = Rng::new(cfg.seed, STREAM_BATCH);
    let mut state = SgdState::new();
    let mut metrics: Vec<StepMetrics<F>> = Vec::with_capacity(cfg.steps);
    params.zero_grads();
    for step in 0..cfg.steps {
        let indices = sample_batch(&mut batch_rng, dataset.len(), cfg.batch_frames);
        let mut loss_sum = F::zero();
        for &idx in &indices {
            let frame = &dataset.frames[idx];
            let (map, cache) = models::teacher_forward_cached(&frame.color, &params, model)?;
            let (fh, fw, ct) = (map.shape()[0], map.shape()[1], map.shape()[2]);
            let rows = map.with_shape(&[fh * fw, ct])?;
            let logits = models::classifier_forward(&rows, &params, "teacher.cls")?;
            let pooled = max_pool_labels(&frame.labels, frame.height(), frame.width(), factor);
            let mut out = losses::cross_entropy(&logits, &pooled, -1)?;
            loss_sum = loss_sum + out.value;
            // Optimize the batch-mean objective; the sum is what gets logged.
            out.grad_first.scale(F::one() / F::of(cfg.batch_frames as f64));
            let grad_rows =
                models::classifier_backward(&rows, &mut params, "teacher.cls", &out.grad_first)?;
            let grad_map = grad_rows.with_shape(&[fh, fw, ct])?;
            models::teacher_backward(&cache, &mut params, model, &grad_map)?;
        }
        if !loss_sum.is_finite() {
            return Err(non_finite_abort(step, metrics.last()));
        }
        let lr = lr_schedule(step, cfg.steps, cfg.lr0, cfg.lr_final_factor);
        sgd_step(&mut params, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
        let row = StepMetrics {
            step: step as u64,
            lr,
            loss_sum,
            loss_mean: loss_sum / F::of(cfg.batch_frames as f64),
            pos_sim_mean: F::zero(),
        };
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&row);
        }
        metrics.push(row);
    }
    Ok((params, metrics))
}

/// Convenience wrapper: gathers per-pixel logits accuracy of a teacher on a
/// dataset (used for reporting, not training).
pub fn teacher_pixel_accuracy<F: Real>(
    dataset: &Dataset<F>,
    params: &ParamStore<F>,
    model: &ModelConfig<F>,
) -> Result<F> {
    let factor = model.teacher_stride();
    let mut correct = 0usize;
    let mut total = 0usize;
    for frame in &dataset.frames {
        let map = models::teacher_forward(&frame.color, params, model)?;
        let (fh, fw, ct) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let rows = map.with_shape(&[fh * fw, ct])?;
        let logits = models::classifier_forward(&rows, params, "teacher.cls")?;
        let pooled = max_pool_labels(&frame.labels, frame.height(), frame.width(), factor);
        for (i, &label) in pooled.iter().enumerate() {
            if label < 0 {
                continue;
            }
            let row = logits.row(i);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.widen().total_cmp(&b.1.widen()))
                .map(|(j, _)| j as i64)
                .unwrap_or(-1);
            total += 1;
            if pred == label {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument(
            "no labeled pooled pixels in dataset".into(),
        ));
    }
    Ok(F::of(correct as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{default_intrinsics, generate_scene, render_well_covered_frame};

    fn toy_dataset(seed: u64, frames: usize) -> Dataset<f64> {
        let mut out = Vec::new();
        let mut pose_rng = Rng::new(seed, 100);
        let mut noise_rng = Rng::new(seed, 101);
        let intr = default_intrinsics::<f64>();
        for i in 0..frames {
            let scene = generate_scene(&mut Rng::new(seed + i as u64, 0), 4, 6);
            let (frame, _) = render_well_covered_frame(
                &scene,
                &intr,
                0.02,
                600,
                &mut pose_rng,
                &mut noise_rng,
            )
            .unwrap();
            out.push(frame);
        }
        Dataset {
            frames: out,
            class_count: 6,
            seed,
        }
    }

    fn small_model() -> ModelConfig<f64> {
        ModelConfig {
            embed_dim: 8,
            teacher_channels: vec![4, 6, 8],
            student_widths: [8, 12],
            tau: 0.1,
        }
    }

    fn quick_cfg(steps: usize, loss: LossKind) -> TrainConfig<f64> {
        TrainConfig {
            steps,
            batch_frames: 2,
            pairs_per_frame: 16,
            student_points: 64,
            loss_kind: loss,
            lr0: 0.1,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_vanilla_and_momentum_coast() {
        let mut params = ParamStore::<f64>::new();
        params
            .insert("w", DenseArray::from_vec(&[1], vec![1.0]).unwrap(), true)
            .unwrap();
        params
            .accumulate_grad("w", &DenseArray::from_vec(&[1], vec![0.5]).unwrap())
            .unwrap();
        let mut state = SgdState::new();
        sgd_step(&mut params, &mut state, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(params.value("w").unwrap().data()[0], 0.95);
        // Gradient slot is cleared.
        assert_eq!(params.get("w").unwrap().grad.data()[0], 0.0);

        // Pure momentum coast: v = 1 persists, g = 0.
        let mut params = ParamStore::<f64>::new();
        params
            .insert("w", DenseArray::from_vec(&[1], vec![5.0]).unwrap(), true)
            .unwrap();
        let mut state = SgdState::new();
        params
            .accumulate_grad("w", &DenseArray::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        sgd_step(&mut params, &mut state, 1.0, 0.9, 0.0).unwrap(); // v=1, w=4
        sgd_step(&mut params, &mut state, 1.0, 0.9, 0.0).unwrap(); // v=0.9, w=3.1
        assert!((params.value("w").unwrap().data()[0] - 3.1).abs() < 1e-12);
    }

    #[test]
    fn sgd_matches_hand_unrolled_recurrence() {
        // Quadratic loss 0.5*(w - 3)^2, gradient w - 3.
        let mut params = ParamStore::<f64>::new();
        params
            .insert("w", DenseArray::from_vec(&[1], vec![0.0]).unwrap(), true)
            .unwrap();
        let mut state = SgdState::new();
        let (lr, mu, wd) = (0.2, 0.9, 0.01);
        let mut w_ref = 0.0f64;
        let mut v_ref = 0.0f64;
        for _ in 0..3 {
            let g = w_ref - 3.0;
            params
                .accumulate_grad("w", &DenseArray::from_vec(&[1], vec![g]).unwrap())
                .unwrap();
            sgd_step(&mut params, &mut state, lr, mu, wd).unwrap();
            v_ref = mu * v_ref + g + wd * w_ref;
            w_ref -= lr * v_ref;
            let got = params.value("w").unwrap().data()[0];
            assert!((got - w_ref).abs() < 1e-12, "{got} vs {w_ref}");
        }
    }

    #[test]
    fn sgd_weight_decay_only_shrinks_geometrically() {
        let mut params = ParamStore::<f64>::new();
        params
            .insert("w", DenseArray::from_vec(&[2], vec![2.0, -4.0]).unwrap(), true)
            .unwrap();
        let mut state = SgdState::new();
        let (lr, wd) = (0.5, 0.01);
        sgd_step(&mut params, &mut state, lr, 0.0, wd).unwrap();
        let w = params.value("w").unwrap().data();
        assert_eq!(w[0], 2.0 - lr * (wd * 2.0));
        assert_eq!(w[1], -4.0 - lr * (wd * -4.0));
        assert!((w[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_frozen_parameters() {
        let mut params = ParamStore::<f64>::new();
        params
            .insert("teacher.w", DenseArray::from_vec(&[1], vec![1.5]).unwrap(), false)
            .unwrap();
        params
            .accumulate_grad("teacher.w", &DenseArray::from_vec(&[1], vec![9.0]).unwrap())
            .unwrap();
        let mut state = SgdState::new();
        sgd_step(&mut params, &mut state, 0.5, 0.9, 0.1).unwrap();
        assert_eq!(params.value("teacher.w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn lr_schedule_endpoints_and_monotonicity() {
        let lr0 = 0.5f64;
        let factor = 0.01;
        let steps = 2000;
        assert_eq!(lr_schedule(0, steps, lr0, factor), 0.5);
        assert_eq!(lr_schedule(steps - 1, steps, lr0, factor), 0.5 * 0.01);
        let mid = lr_schedule((steps - 1) / 2, steps, lr0, factor);
        // Odd steps-1 gives the exact geometric midpoint at t = 1/2 only
        // when (steps-1) is even; 1999 is odd, so check the formula instead.
        let t = ((steps - 1) / 2) as f64 / (steps - 1) as f64;
        assert!((mid - lr0 * factor.powf(t)).abs() < 1e-12);
        // Exact geometric midpoint on an odd-length run.
        let mid2 = lr_schedule(1000, 2001, lr0, factor);
        assert!((mid2 - lr0 * 0.1).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for step in 0..steps {
            let lr = lr_schedule(step, steps, lr0, factor);
            assert!(lr < prev, "schedule not strictly decreasing at {step}");
            prev = lr;
        }
        assert_eq!(lr_schedule(0, 1, lr0, factor), lr0);
    }

    #[test]
    fn config_text_roundtrip_and_unknown_keys() {
        let mut cfg = TrainConfig::<f64>::default();
        let mut model = ModelConfig::<f64>::default();
        cfg.apply_config_text(&mut model, "lr0=0.25\nsteps=7\nloss_kind=ppkd\nstudent_widths=small\n")
            .unwrap();
        assert_eq!(cfg.lr0, 0.25);
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.loss_kind, LossKind::Ppkd);
        assert_eq!(model.student_widths, [32, 64]);

        let err = cfg
            .apply_config_text(&mut model, "no_such_key=1\n")
            .unwrap_err();
        assert!(err.to_string().contains("no_such_key"));

        // The echoed text re-parses to the same configuration.
        let text = cfg.to_text(&model);
        let mut cfg2 = TrainConfig::<f64>::default();
        let mut model2 = ModelConfig::<f64>::default();
        cfg2.apply_config_text(&mut model2, &text).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(model, model2);
    }

    #[test]
    fn metrics_csv_roundtrips_at_full_precision() {
        let rows = vec![StepMetrics {
            step: 3,
            lr: 0.1234567890123456_f64,
            loss_sum: 1234.567890123456,
            loss_mean: 1.0 / 3.0,
            pos_sim_mean: -0.9876543210987654,
        }];
        let csv = metrics_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,lr,loss_sum,loss_mean,pos_sim_mean");
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[0], "3");
        assert_eq!(fields[1].parse::<f64>().unwrap(), rows[0].lr);
        assert_eq!(fields[2].parse::<f64>().unwrap(), rows[0].loss_sum);
        assert_eq!(fields[3].parse::<f64>().unwrap(), rows[0].loss_mean);
        assert_eq!(fields[4].parse::<f64>().unwrap(), rows[0].pos_sim_mean);
    }

    #[test]
    fn max_pool_labels_takes_block_maximum() {
        // 4x4 labels pooled by 2.
        let labels = vec![
            -1, 0, 1, 1, //
            0, -1, -1, 2, //
            3, 3, -1, -1, //
            3, 4, -1, -1,
        ];
        let pooled = max_pool_labels(&labels, 4, 4, 2);
        assert_eq!(pooled, vec![0, 2, 4, -1]);
    }

    #[test]
    fn teacher_pretraining_learns_and_is_deterministic() {
        let dataset = toy_dataset(5, 6);
        let model = small_model();
        let cfg = TrainConfig {
            steps: 30,
            lr0: 0.2,
            ..quick_cfg(30, LossKind::Ppnce)
        };
        let (params_a, metrics_a) = run_pretrain_teacher(&dataset, &model, &cfg, None).unwrap();
        let (params_b, metrics_b) = run_pretrain_teacher(&dataset, &model, &cfg, None).unwrap();
        assert!(params_a.values_equal(&params_b));
        assert_eq!(metrics_to_csv(&metrics_a), metrics_to_csv(&metrics_b));
        // The classification loss goes down.
        assert!(
            metrics_a.last().unwrap().loss_mean < metrics_a[0].loss_mean,
            "teacher CE did not improve: {} -> {}",
            metrics_a[0].loss_mean,
            metrics_a.last().unwrap().loss_mean
        );
        let acc = teacher_pixel_accuracy(&dataset, &params_a, &model).unwrap();
        assert!(acc > 1.0 / 6.0, "teacher accuracy {acc} at chance");
    }

    #[test]
    fn pretrain_zero_lr_keeps_parameters_bit_identical() {
        let dataset = toy_dataset(6, 4);
        let model = small_model();
        let teacher_cfg = TrainConfig {
            steps: 5,
            lr0: 0.2,
            ..quick_cfg(5, LossKind::Ppnce)
        };
        let (teacher, _) = run_pretrain_teacher(&dataset, &model, &teacher_cfg, None).unwrap();

        let cfg = TrainConfig {
            lr0: 0.0,
            steps: 1,
            ..quick_cfg(1, LossKind::Ppnce)
        };
        let (params, metrics) = run_pretrain(&dataset, &teacher, &model, &cfg, None).unwrap();
        assert_eq!(metrics.len(), 1);
        assert!(metrics[0].loss_sum.is_finite());

        // Rebuild the would-be initial store and compare values bit-exactly.
        let mut init = ParamStore::<f64>::new();
        for (name, p) in teacher.iter() {
            if name.starts_with("teacher.") {
                init.insert(name, p.value.clone(), true).unwrap();
            }
        }
        let mut rng = Rng::new(cfg.seed, STREAM_INIT);
        models::init_upl(&mut init, &model, &mut rng).unwrap();
        models::init_student(&mut init, &model, None, &mut rng).unwrap();
        assert!(params.values_equal(&init));
    }

    #[test]
    fn pretrain_runs_are_byte_identical() {
        let dataset = toy_dataset(7, 5);
        let model = small_model();
        let teacher_cfg = TrainConfig {
            steps: 5,
            lr0: 0.2,
            ..quick_cfg(5, LossKind::Ppnce)
        };
        let (teacher, _) = run_pretrain_teacher(&dataset, &model, &teacher_cfg, None).unwrap();

        for loss in [LossKind::Ppnce, LossKind::Ppkd, LossKind::GlobalL2, LossKind::GlobalNce] {
            let cfg = quick_cfg(8, loss);
            let (pa, ma) = run_pretrain(&dataset, &teacher, &model, &cfg, None).unwrap();
            let (pb, mb) = run_pretrain(&dataset, &teacher, &model, &cfg, None).unwrap();
            assert!(pa.values_equal(&pb), "{loss}: parameter drift between runs");
            assert_eq!(metrics_to_csv(&ma), metrics_to_csv(&mb), "{loss}");

            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.ckpt");
            let p2 = dir.path().join("b.ckpt");
            save_checkpoint(&p1, cfg.steps as u64, &pa).unwrap();
            save_checkpoint(&p2, cfg.steps as u64, &pb).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap(), "{loss}");
        }
    }

    #[test]
    fn frozen_teacher_is_bit_identical_across_run() {
        let dataset = toy_dataset(8, 5);
        let model = small_model();
        let teacher_cfg = TrainConfig {
            steps: 5,
            lr0: 0.2,
            ..quick_cfg(5, LossKind::Ppnce)
        };
        let (teacher, _) = run_pretrain_teacher(&dataset, &model, &teacher_cfg, None).unwrap();
        let cfg = quick_cfg(10, LossKind::Ppnce);
        let (params, _) = run_pretrain(&dataset, &teacher, &model, &cfg, None).unwrap();
        for (name, p) in teacher.iter() {
            if name.starts_with("teacher.") {
                let after = params.get(name).unwrap();
                assert_eq!(after.value.data(), p.value.data(), "{name} changed");
                assert!(!after.trainable);
            }
        }
    }

    #[test]
    fn pretrain_rejects_channel_mismatch_with_name() {
        let dataset = toy_dataset(9, 4);
        let model = small_model();
        let teacher_cfg = TrainConfig {
            steps: 2,
            lr0: 0.2,
            ..quick_cfg(2, LossKind::Ppnce)
        };
        let (teacher, _) = run_pretrain_teacher(&dataset, &model, &teacher_cfg, None).unwrap();
        let mut wrong = small_model();
        wrong.teacher_channels = vec![4, 6, 12];
        let err = run_pretrain(&dataset, &teacher, &wrong, &quick_cfg(2, LossKind::Ppnce), None)
            .unwrap_err();
        assert!(err.to_string().contains("teacher.conv"), "{err}");
    }
}
