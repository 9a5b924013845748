//! Quantitative evaluation of a pretrained student: positive-pair
//! retrieval, linear-probe point segmentation, feature-diversity
//! statistics, and CSV export.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses;
use crate::models::{self, ModelConfig};
use crate::ops;
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::Rng;
use crate::synthdata::Dataset;
use crate::tensor::DenseArray;
use crate::trainer::{lr_schedule, sgd_step, SgdState};
use crate::transfer::{self, PipelineConfig};

const STREAM_EVAL_FRAME: u64 = 11 << 48;
const STREAM_PROBE_INIT: u64 = 12 << 48;
const STREAM_PROBE_SPLIT: u64 = 13 << 48;
const STREAM_PROBE_FRAME: u64 = 14 << 48;
const STREAM_DIVERSITY: u64 = 15 << 48;

/// One exported metric value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow<F> {
    pub name: String,
    /// `train` or `held-out`.
    pub split: String,
    pub value: F,
    pub step: Option<u64>,
    pub context: String,
}

impl<F: Real> MetricsRow<F> {
    pub fn new(name: &str, split: &str, value: F) -> Self {
        MetricsRow {
            name: name.to_string(),
            split: split.to_string(),
            value,
            step: None,
            context: String::new(),
        }
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = context.into();
        self
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.step = Some(step);
        self
    }
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

/// Outcome of a retrieval evaluation.
#[derive(Debug, Clone)]
pub struct RetrievalReport<F> {
    /// Fraction of 3D anchors whose true pixel ranks first.
    pub accuracy: F,
    pub anchors: usize,
    pub frames_used: usize,
    pub frames_skipped: usize,
}

/// Fraction of rows of `z3d` whose matching `z2d` row wins the dot-product
/// ranking against all other `z2d` rows.
pub fn top1_accuracy<F: Real>(z3d: &DenseArray<F>, z2d: &DenseArray<F>) -> Result<(usize, usize)> {
    if z3d.shape() != z2d.shape() || z3d.ndim() != 2 {
        return Err(Error::Shape(format!(
            "retrieval operands must share an MxC shape, got {:?} and {:?}",
            z3d.shape(),
            z2d.shape()
        )));
    }
    let scores = z3d.matmul_nt(z2d)?;
    let m = scores.rows();
    let mut hits = 0usize;
    for i in 0..m {
        let row = scores.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    Ok((hits, m))
}

/// Per-frame positive-pair retrieval over a held-out set: sample `pairs`
/// correspondences, rank every 2D embedding against each 3D anchor, and
/// count rank-one hits. Frames without enough valid points are skipped.
pub fn retrieval_top1<F: Real>(
    frames: &[crate::synthdata::RgbdFrame<F>],
    params: &ParamStore<F>,
    cfg: &PipelineConfig<F>,
    seed: u64,
) -> Result<RetrievalReport<F>> {
    if cfg.pairs_per_frame < 2 {
        return Err(Error::InvalidArgument(
            "retrieval needs at least 2 pairs per frame".into(),
        ));
    }
    let mut hits = 0usize;
    let mut anchors = 0usize;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (i, frame) in frames.iter().enumerate() {
        let mut rng = Rng::new(seed, STREAM_EVAL_FRAME + i as u64);
        match transfer::frame_pair_embeddings(frame, params, cfg, &mut rng) {
            Ok((z3, z2, _)) => {
                let (h, m) = top1_accuracy(&z3, &z2)?;
                hits += h;
                anchors += m;
                used += 1;
            }
            Err(Error::InvalidArgument(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument(format!(
            "all {skipped} frames lacked enough valid points for retrieval"
        )));
    }
    Ok(RetrievalReport {
        accuracy: F::of(hits as f64 / anchors as f64),
        anchors,
        frames_used: used,
        frames_skipped: skipped,
    })
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

/// Probe hyperparameters.
#[derive(Debug, Clone)]
pub struct ProbeConfig<F> {
    pub steps: usize,
    pub lr0: F,
    pub momentum: F,
    pub weight_decay: F,
    pub lr_final_factor: F,
    /// Fraction of training frames whose labels the probe may see.
    pub labeled_fraction: F,
    /// Cap on probed points per frame.
    pub points_per_frame: usize,
    pub seed: u64,
    /// Unfreeze the backbone (full fine-tuning) instead of a linear probe.
    pub fine_tune: bool,
    /// Frames per step in fine-tune mode.
    pub fine_tune_batch: usize,
}

impl<F: Real> Default for ProbeConfig<F> {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            lr0: F::of(0.5),
            momentum: F::of(0.9),
            weight_decay: F::zero(),
            lr_final_factor: F::of(0.01),
            labeled_fraction: F::one(),
            points_per_frame: 400,
            seed: 0,
            fine_tune: false,
            fine_tune_batch: 4,
        }
    }
}

/// Per-class and aggregate point-segmentation quality.
#[derive(Debug, Clone)]
pub struct ProbeReport<F> {
    /// Recall per class over the held-out points (`None` when absent).
    pub per_class_acc: Vec<Option<F>>,
    /// Mean per-class recall over classes present in the held-out split.
    pub mean_acc: F,
    /// Intersection-over-union per class (`None` when absent).
    pub per_class_iou: Vec<Option<F>>,
    /// Mean IoU over classes present in the held-out split.
    pub mean_iou: F,
    /// Plain fraction of correctly labeled held-out points.
    pub overall_acc: F,
    pub points_evaluated: usize,
    /// Classes with no labeled training points (flagged, excluded from means).
    pub missing_train_classes: Vec<usize>,
}

/// Trains a linear classifier on frozen features and evaluates it; the
/// tested core of the probe, independent of feature extraction.
pub fn train_probe_on_features<F: Real>(
    train_features: &DenseArray<F>,
    train_labels: &[i64],
    heldout_features: &DenseArray<F>,
    heldout_labels: &[i64],
    class_count: usize,
    cfg: &ProbeConfig<F>,
) -> Result<ProbeReport<F>> {
    if train_features.rows() != train_labels.len() {
        return Err(Error::Shape(format!(
            "{} training labels for {} feature rows",
            train_labels.len(),
            train_features.rows()
        )));
    }
    let dim = train_features.row_len();
    let mut params = ParamStore::new();
    models::init_classifier(
        &mut params,
        "probe.cls",
        dim,
        class_count,
        &mut Rng::new(cfg.seed, STREAM_PROBE_INIT),
    )?;
    let mut state = SgdState::new();
    for step in 0..cfg.steps {
        let logits = models::classifier_forward(train_features, &params, "probe.cls")?;
        let out = losses::cross_entropy(&logits, train_labels, -1)?;
        if !out.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "probe loss became non-finite at step {step}"
            )));
        }
        models::classifier_backward(train_features, &mut params, "probe.cls", &out.grad_first)?;
        let lr = lr_schedule(step, cfg.steps, cfg.lr0, cfg.lr_final_factor);
        sgd_step(&mut params, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
    }
    let logits = models::classifier_forward(heldout_features, &params, "probe.cls")?;
    let predictions = argmax_rows(&logits);
    let mut missing = Vec::new();
    for class in 0..class_count {
        if !train_labels.iter().any(|&l| l == class as i64) {
            missing.push(class);
        }
    }
    let mut report = score_predictions(&predictions, heldout_labels, class_count)?;
    report.missing_train_classes = missing;
    Ok(report)
}

fn argmax_rows<F: Real>(logits: &DenseArray<F>) -> Vec<i64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as i64
        })
        .collect()
}

/// Confusion-based scoring: per-class recall and IoU over pooled points,
/// averaged over classes present in the held-out labels.
pub fn score_predictions<F: Real>(
    predictions: &[i64],
    labels: &[i64],
    class_count: usize,
) -> Result<ProbeReport<F>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fn_ = vec![0usize; class_count];
    let mut correct = 0usize;
    let mut total = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        if l < 0 {
            continue;
        }
        let (p, l) = (p as usize, l as usize);
        total += 1;
        if p == l {
            tp[l] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no labeled points to score".into()));
    }
    let mut per_class_acc = vec![None; class_count];
    let mut per_class_iou = vec![None; class_count];
    let (mut acc_sum, mut iou_sum, mut present) = (F::zero(), F::zero(), 0usize);
    for c in 0..class_count {
        let support = tp[c] + fn_[c];
        if support == 0 {
            continue;
        }
        let acc = F::of(tp[c] as f64 / support as f64);
        let denom = tp[c] + fp[c] + fn_[c];
        let iou = F::of(tp[c] as f64 / denom as f64);
        per_class_acc[c] = Some(acc);
        per_class_iou[c] = Some(iou);
        acc_sum = acc_sum + acc;
        iou_sum = iou_sum + iou;
        present += 1;
    }
    let denom = F::of(present as f64);
    Ok(ProbeReport {
        per_class_acc,
        mean_acc: acc_sum / denom,
        per_class_iou,
        mean_iou: iou_sum / denom,
        overall_acc: F::of(correct as f64 / total as f64),
        points_evaluated: total,
        missing_train_classes: Vec::new(),
    })
}

fn collect_features<F: Real>(
    frames: &[&crate::synthdata::RgbdFrame<F>],
    params: &ParamStore<F>,
    voxel_size: F,
    points_per_frame: usize,
    seed: u64,
    stream_base: u64,
) -> Result<(DenseArray<F>, Vec<i64>)> {
    let mut blocks = Vec::new();
    let mut labels = Vec::new();
    let mut width = 0usize;
    let mut total = 0usize;
    for (i, frame) in frames.iter().enumerate() {
        let mut rng = Rng::new(seed, stream_base + i as u64);
        let (feats, frame_labels) =
            transfer::frame_backbone_features(frame, params, voxel_size, points_per_frame, &mut rng)?;
        width = feats.row_len();
        total += feats.rows();
        labels.extend(frame_labels);
        blocks.push(feats);
    }
    let mut data = Vec::with_capacity(total * width);
    for b in &blocks {
        data.extend_from_slice(b.data());
    }
    Ok((DenseArray::from_vec(&[total, width], data)?, labels))
}

/// Linear probe of a (frozen) student: train a per-point classifier on
/// backbone features of the training split, report per-class accuracy and
/// IoU on the held-out split. `student` of `None` evaluates a freshly
/// initialized (scratch) backbone.
pub fn linear_probe<F: Real>(
    train: &Dataset<F>,
    heldout: &Dataset<F>,
    student: Option<&ParamStore<F>>,
    model: &ModelConfig<F>,
    voxel_size: F,
    cfg: &ProbeConfig<F>,
) -> Result<ProbeReport<F>> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::InvalidArgument("probe datasets must be non-empty".into()));
    }
    if cfg.labeled_fraction <= F::zero() || cfg.labeled_fraction > F::one() {
        return Err(Error::InvalidArgument(format!(
            "labeled_fraction must lie in (0, 1], got {}",
            cfg.labeled_fraction
        )));
    }
    // Scratch baseline: a fresh, frozen, randomly initialized student.
    let scratch;
    let params = match student {
        Some(p) => p,
        None => {
            let mut fresh = ParamStore::new();
            models::init_student(
                &mut fresh,
                model,
                None,
                &mut Rng::new(cfg.seed, STREAM_PROBE_INIT + 1),
            )?;
            scratch = fresh;
            &scratch
        }
    };

    // Seeded labeled-subset selection.
    let n = train.len();
    let keep = ((cfg.labeled_fraction.widen() * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(cfg.seed, STREAM_PROBE_SPLIT).shuffle(&mut order);
    order.truncate(keep);
    let train_frames: Vec<&crate::synthdata::RgbdFrame<F>> =
        order.iter().map(|&i| &train.frames[i]).collect();
    let heldout_frames: Vec<&crate::synthdata::RgbdFrame<F>> = heldout.frames.iter().collect();

    if cfg.fine_tune {
        return fine_tune_probe(
            &train_frames,
            &heldout_frames,
            params,
            model,
            train.class_count,
            voxel_size,
            cfg,
        );
    }

    let (train_feats, train_labels) = collect_features(
        &train_frames,
        params,
        voxel_size,
        cfg.points_per_frame,
        cfg.seed,
        STREAM_PROBE_FRAME,
    )?;
    let (held_feats, held_labels) = collect_features(
        &heldout_frames,
        params,
        voxel_size,
        cfg.points_per_frame,
        cfg.seed,
        STREAM_PROBE_FRAME + (1 << 24),
    )?;
    train_probe_on_features(
        &train_feats,
        &train_labels,
        &held_feats,
        &held_labels,
        train.class_count,
        cfg,
    )
}

/// Full fine-tuning variant: backbone and classifier both train, with
/// mini-batches of frames per step.
fn fine_tune_probe<F: Real>(
    train_frames: &[&crate::synthdata::RgbdFrame<F>],
    heldout_frames: &[&crate::synthdata::RgbdFrame<F>],
    start: &ParamStore<F>,
    model: &ModelConfig<F>,
    class_count: usize,
    voxel_size: F,
    cfg: &ProbeConfig<F>,
) -> Result<ProbeReport<F>> {
    let mut params = ParamStore::new();
    for (name, p) in start.iter() {
        if name.starts_with("student.") {
            params.insert(name, p.value.clone(), true)?;
        }
    }
    models::init_classifier(
        &mut params,
        "probe.cls",
        model.student_widths[1],
        class_count,
        &mut Rng::new(cfg.seed, STREAM_PROBE_INIT),
    )?;
    let mut state = SgdState::new();
    let mut batch_rng = Rng::new(cfg.seed, STREAM_PROBE_SPLIT + 1);
    params.zero_grads();
    for step in 0..cfg.steps {
        let mut loss_sum = F::zero();
        for slot in 0..cfg.fine_tune_batch {
            let frame = train_frames[batch_rng.range(train_frames.len())];
            let mut rng = Rng::new(cfg.seed, STREAM_PROBE_FRAME + (step * 4096 + slot) as u64);
            let cloud = transfer::frame_cloud(frame)?;
            let budget = cfg.points_per_frame.min(cloud.len());
            let subset = rng.sample_without_replacement(cloud.len(), budget);
            let sub = cloud.gather(&subset)?;
            let labels: Vec<i64> = sub.pixel_index.iter().map(|&p| frame.labels[p as usize]).collect();
            let (_, cache) = models::student_forward_cached(&sub, &params, voxel_size)?;
            let h2 = cache.backbone().clone();
            let logits = models::classifier_forward(&h2, &params, "probe.cls")?;
            let out = losses::cross_entropy(&logits, &labels, -1)?;
            loss_sum = loss_sum + out.value;
            let grad_h2 =
                models::classifier_backward(&h2, &mut params, "probe.cls", &out.grad_first)?;
            models::student_backbone_backward(&cache, &mut params, &grad_h2)?;
        }
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite(format!(
                "fine-tune loss became non-finite at step {step}"
            )));
        }
        let lr = lr_schedule(step, cfg.steps, cfg.lr0, cfg.lr_final_factor);
        sgd_step(&mut params, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
    }

    let (held_feats, held_labels) = collect_features(
        heldout_frames,
        &params,
        voxel_size,
        cfg.points_per_frame,
        cfg.seed,
        STREAM_PROBE_FRAME + (1 << 24),
    )?;
    let logits = models::classifier_forward(&held_feats, &params, "probe.cls")?;
    let predictions = argmax_rows(&logits);
    score_predictions(&predictions, &held_labels, class_count)
}

// ---------------------------------------------------------------------------
// Feature diversity
// ---------------------------------------------------------------------------

/// Mean pairwise cosine similarity of the rows (lower = more diverse).
pub fn mean_pairwise_cos<F: Real>(rows: &DenseArray<F>) -> Result<F> {
    let n = rows.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pairwise cosine needs at least 2 rows, got {n}"
        )));
    }
    let eps = F::of(1e-12);
    let unit = ops::l2_normalize_rows(rows, eps)?;
    let mut total = F::zero();
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut dot = F::zero();
            for (a, b) in unit.row(i).iter().zip(unit.row(j)) {
                dot = dot + *a * *b;
            }
            total = total + dot;
            pairs += 1;
        }
    }
    Ok(total / F::of(pairs as f64))
}

/// Diversity comparison between frame-global and per-pixel teacher features.
#[derive(Debug, Clone)]
pub struct DiversityReport<F> {
    /// Mean pairwise cosine of mean-pooled, normalized teacher maps.
    pub global_mean_cos: F,
    /// Mean pairwise cosine of sampled per-pixel UPL embeddings.
    pub pixel_mean_cos: F,
    pub frames: usize,
    pub pixels_sampled: usize,
}

/// Computes both diversity statistics over a set of frames. `params` must
/// contain the teacher and a UPL projection.
pub fn feature_diversity<F: Real>(
    frames: &[crate::synthdata::RgbdFrame<F>],
    params: &ParamStore<F>,
    cfg: &PipelineConfig<F>,
    sample_size: usize,
    seed: u64,
) -> Result<DiversityReport<F>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "diversity needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if sample_size < 2 {
        return Err(Error::InvalidArgument(
            "diversity needs a sample of at least 2 pixels".into(),
        ));
    }
    let ct = cfg.model.teacher_out_channels();
    let mut globals = DenseArray::zeros(&[frames.len(), ct]);
    let mut pixel_rows_all: Vec<DenseArray<F>> = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let map = models::teacher_forward(&frame.color, params, &cfg.model)?;
        let (fh, fw, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let rows = map.with_shape(&[fh * fw, c])?;
        globals.row_mut(i).copy_from_slice(ops::mean_rows(&rows).data());
        pixel_rows_all.push(transfer::embed_pixels(frame, params, cfg)?);
    }
    let global_mean_cos = mean_pairwise_cos(&globals)?;

    // Sample pixels uniformly over (frame, pixel) slots.
    let mut rng = Rng::new(seed, STREAM_DIVERSITY);
    let per_frame = pixel_rows_all[0].rows();
    let c = pixel_rows_all[0].row_len();
    let mut sampled = DenseArray::zeros(&[sample_size, c]);
    for s in 0..sample_size {
        let f = rng.range(frames.len());
        let p = rng.range(per_frame);
        sampled.row_mut(s).copy_from_slice(pixel_rows_all[f].row(p));
    }
    let pixel_mean_cos = mean_pairwise_cos(&sampled)?;
    Ok(DiversityReport {
        global_mean_cos,
        pixel_mean_cos,
        frames: frames.len(),
        pixels_sampled: sample_size,
    })
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

fn fmt<F: Real>(v: F) -> String {
    format!("{:.16e}", v.widen())
}

/// Writes metrics rows as CSV with a stable column order:
/// `name,split,value,step,context`.
pub fn export_metrics<F: Real>(rows: &[MetricsRow<F>], path: &Path) -> Result<()> {
    let mut out = String::from("name,split,value,step,context\n");
    for r in rows {
        let step = r.step.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name,
            r.split,
            fmt(r.value),
            step,
            r.context
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes an `N x (C+1)` embedding dump with header `e0..e{C-1},label`.
pub fn export_embeddings<F: Real>(
    embeddings: &DenseArray<F>,
    labels: &[i64],
    path: &Path,
) -> Result<()> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} embedding rows",
            labels.len(),
            embeddings.rows()
        )));
    }
    let c = embeddings.row_len();
    let mut out = String::new();
    for j in 0..c {
        out.push_str(&format!("e{j},"));
    }
    out.push_str("label\n");
    for i in 0..embeddings.rows() {
        for &v in embeddings.row(i) {
            out.push_str(&fmt(v));
            out.push(',');
        }
        out.push_str(&format!("{}\n", labels[i]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top1_is_perfect_on_copied_embeddings() {
        let mut rng = Rng::new(1, 0);
        let z = ops::l2_normalize_rows(
            &DenseArray::from_fn(&[32, 8], |_| rng.uniform_in(-1.0, 1.0)),
            1e-12,
        )
        .unwrap();
        let (hits, total) = top1_accuracy(&z, &z).unwrap();
        assert_eq!(hits, total);
    }

    #[test]
    fn top1_is_near_chance_on_independent_embeddings() {
        let mut rng = Rng::new(2, 0);
        let m = 256;
        let z3 = ops::l2_normalize_rows(
            &DenseArray::from_fn(&[m, 16], |_| rng.normal::<f64>()),
            1e-12,
        )
        .unwrap();
        let z2 = ops::l2_normalize_rows(
            &DenseArray::from_fn(&[m, 16], |_| rng.normal::<f64>()),
            1e-12,
        )
        .unwrap();
        let (hits, _) = top1_accuracy(&z3, &z2).unwrap();
        // Expectation is 1 hit; allow a generous band.
        assert!(hits <= 6, "hits {hits} far above chance");
    }

    #[test]
    fn probe_separable_features_reach_full_accuracy() {
        // One-hot class indicator features are linearly separable.
        let k = 5;
        let n = 200;
        let labels: Vec<i64> = (0..n).map(|i| (i % k) as i64).collect();
        let feats = DenseArray::from_fn(&[n, k], |idx| {
            let (i, j) = (idx / k, idx % k);
            if labels[i] == j as i64 {
                1.0
            } else {
                0.0
            }
        });
        let cfg = ProbeConfig::<f64> {
            steps: 200,
            lr0: 0.5,
            ..ProbeConfig::default()
        };
        let report =
            train_probe_on_features(&feats, &labels, &feats, &labels, k, &cfg).unwrap();
        assert_eq!(report.overall_acc, 1.0);
        assert_eq!(report.mean_acc, 1.0);
        assert_eq!(report.mean_iou, 1.0);
    }

    #[test]
    fn probe_zero_steps_is_near_chance_on_random_features() {
        let k = 4;
        let n = 2000;
        let mut rng = Rng::new(3, 0);
        let labels: Vec<i64> = (0..n).map(|i| (i % k) as i64).collect();
        let feats = DenseArray::from_fn(&[n, 12], |_| rng.normal::<f64>());
        let cfg = ProbeConfig::<f64> {
            steps: 0,
            ..ProbeConfig::default()
        };
        let report = train_probe_on_features(&feats, &labels, &feats, &labels, k, &cfg).unwrap();
        assert!(
            (report.overall_acc - 0.25).abs() < 0.08,
            "accuracy {} not near 1/K",
            report.overall_acc
        );
    }

    #[test]
    fn iou_never_exceeds_recall() {
        let mut rng = Rng::new(4, 0);
        for _ in 0..20 {
            let n = 500;
            let k = 6;
            let labels: Vec<i64> = (0..n).map(|_| rng.range(k) as i64).collect();
            let preds: Vec<i64> = (0..n).map(|_| rng.range(k) as i64).collect();
            let report: ProbeReport<f64> = score_predictions(&preds, &labels, k).unwrap();
            for c in 0..k {
                if let (Some(acc), Some(iou)) = (report.per_class_acc[c], report.per_class_iou[c]) {
                    assert!(iou <= acc + 1e-15);
                }
            }
            assert!(report.mean_iou <= report.mean_acc + 1e-15);
        }
    }

    #[test]
    fn missing_train_class_is_flagged() {
        let k = 3;
        let train_labels = vec![0i64, 1, 0, 1];
        let feats = DenseArray::<f64>::from_fn(&[4, 2], |i| i as f64 * 0.1);
        let held = DenseArray::<f64>::from_fn(&[4, 2], |i| i as f64 * 0.1);
        let held_labels = vec![0i64, 1, 2, 2];
        let cfg = ProbeConfig::<f64> {
            steps: 5,
            ..ProbeConfig::default()
        };
        let report =
            train_probe_on_features(&feats, &train_labels, &held, &held_labels, k, &cfg).unwrap();
        assert_eq!(report.missing_train_classes, vec![2]);
    }

    #[test]
    fn pairwise_cosine_identities() {
        // Identical rows: cosine exactly 1.
        let same = DenseArray::from_fn(&[4, 3], |i| if i % 3 == 0 { 2.0 } else { 0.5 });
        let cos: f64 = mean_pairwise_cos(&same).unwrap();
        assert!((cos - 1.0).abs() < 1e-12);

        // Orthogonal rows: cosine exactly 0.
        let mut ortho = DenseArray::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            ortho.set2(i, i, 1.5);
        }
        let cos0 = mean_pairwise_cos(&ortho).unwrap();
        assert!(cos0.abs() < 1e-15);
    }

    #[test]
    fn export_metrics_and_embeddings_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        export_metrics::<f64>(&[], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "name,split,value,step,context\n"
        );

        let rows = vec![
            MetricsRow::new("retrieval_top1", "held-out", 0.9638671875f64).with_step(2000),
            MetricsRow::new("mean_iou", "held-out", 1.0 / 3.0).with_context("fraction=0.15"),
        ];
        export_metrics(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines().skip(1);
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "retrieval_top1");
        assert_eq!(first[2].parse::<f64>().unwrap(), 0.9638671875);
        let second: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(second[2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(second[4], "fraction=0.15");

        let emb = DenseArray::from_fn(&[3, 2], |i| (i as f64) / 7.0);
        let epath = dir.path().join("embeddings.csv");
        export_embeddings(&emb, &[0, 1, -1], &epath).unwrap();
        let etext = std::fs::read_to_string(&epath).unwrap();
        let mut elines = etext.lines();
        assert_eq!(elines.next().unwrap(), "e0,e1,label");
        assert_eq!(etext.lines().count(), 4);
        let row: Vec<&str> = etext.lines().nth(2).unwrap().split(',').collect();
        assert_eq!(row[0].parse::<f64>().unwrap(), 2.0 / 7.0);
        assert_eq!(row[2], "1");
    }
}
