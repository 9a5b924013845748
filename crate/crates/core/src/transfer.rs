//! Pipeline glue: builds per-frame pixel and point embeddings, dispatches
//! the configured objective, and drives the reverse passes.
//!
//! One frame's pass: back-project the RGB-D pair into a cloud carrying
//! `xyz (+) rgb` features, draw the student's input subset and the positive
//! pixel-point pairs, run the frozen teacher plus UPL for pixel embeddings
//! and the student plus head for point embeddings, then evaluate the loss
//! and push cotangents back into the parameter store.

use crate::error::{Error, Result};
use crate::geometry::{back_project, sample_correspondences, CorrespondenceSet, PointCloud};
use crate::losses::{self, LossOutput};
use crate::models::{
    self, ModelConfig, StudentCache, TeacherCache, UplCache,
};
use crate::ops;
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::Rng;
use crate::synthdata::RgbdFrame;
use crate::tensor::DenseArray;

/// Which pretraining objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ppnce,
    Ppkd,
    GlobalL2,
    GlobalNce,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Ppnce => "ppnce",
            LossKind::Ppkd => "ppkd",
            LossKind::GlobalL2 => "global_l2",
            LossKind::GlobalNce => "global_nce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppnce" => Ok(LossKind::Ppnce),
            "ppkd" => Ok(LossKind::Ppkd),
            "global_l2" => Ok(LossKind::GlobalL2),
            "global_nce" => Ok(LossKind::GlobalNce),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected ppnce, ppkd, global_l2, or global_nce)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything a forward/backward pass needs besides the parameters.
#[derive(Debug, Clone)]
pub struct PipelineConfig<F> {
    pub model: ModelConfig<F>,
    /// Context-block voxel edge length in meters.
    pub voxel_size: F,
    /// Positive pairs sampled per frame (M).
    pub pairs_per_frame: usize,
    /// Cap on points fed to the student per frame (always >= M).
    pub student_points: usize,
    /// Distillation temperature for the ppkd objective.
    pub kd_temp: F,
    /// Pool negatives across the whole batch instead of within each frame.
    pub cross_frame_negatives: bool,
    /// Compute teacher gradients too (the teacher is frozen by default).
    pub train_teacher: bool,
}

impl<F: Real> PipelineConfig<F> {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.voxel_size <= F::zero() {
            return Err(Error::Config(format!(
                "voxel_size must be positive, got {}",
                self.voxel_size
            )));
        }
        if self.pairs_per_frame == 0 {
            return Err(Error::Config("pairs_per_frame must be positive".into()));
        }
        if self.kd_temp <= F::zero() {
            return Err(Error::Config(format!(
                "kd_temp must be positive, got {}",
                self.kd_temp
            )));
        }
        Ok(())
    }
}

/// Back-projects a frame and attaches `xyz (+) rgb` feature rows.
pub fn frame_cloud<F: Real>(frame: &RgbdFrame<F>) -> Result<PointCloud<F>> {
    let cloud = back_project(&frame.color, &frame.depth, &frame.intr)?;
    let feats = ops::concat_cols(&cloud.coords, &cloud.feats)?;
    Ok(PointCloud {
        coords: cloud.coords,
        feats,
        pixel_index: cloud.pixel_index,
    })
}

/// Draws the student's input subset and the positive pairs within it.
pub fn sample_frame<F: Real>(
    cloud: &PointCloud<F>,
    cfg: &PipelineConfig<F>,
    rng: &mut Rng,
) -> Result<(PointCloud<F>, CorrespondenceSet)> {
    let n = cloud.len();
    let m = cfg.pairs_per_frame;
    if n < m {
        return Err(Error::InvalidArgument(format!(
            "frame yields {n} points but {m} correspondences were requested"
        )));
    }
    let budget = cfg.student_points.max(m).min(n);
    let subset = rng.sample_without_replacement(n, budget);
    let sub_cloud = cloud.gather(&subset)?;
    let corr = sample_correspondences(&sub_cloud, m, rng)?;
    Ok((sub_cloud, corr))
}

/// Cached 2D side of one frame: normalized per-pixel embeddings as
/// `(H*W) x C` rows plus the intermediates for a reverse pass.
pub struct PixelEmbedding<F> {
    pub rows: DenseArray<F>,
    upl_cache: UplCache<F>,
    teacher_cache: Option<TeacherCache<F>>,
}

/// Runs teacher + UPL over a frame, cached for backward.
pub fn embed_pixels_cached<F: Real>(
    frame: &RgbdFrame<F>,
    params: &ParamStore<F>,
    cfg: &PipelineConfig<F>,
) -> Result<PixelEmbedding<F>> {
    let (h, w) = (frame.height(), frame.width());
    let (featmap, teacher_cache) = if cfg.train_teacher {
        let (map, cache) = models::teacher_forward_cached(&frame.color, params, &cfg.model)?;
        (map, Some(cache))
    } else {
        (models::teacher_forward(&frame.color, params, &cfg.model)?, None)
    };
    let (z, upl_cache) = models::upl_forward_cached(&featmap, params, h, w)?;
    let c = z.shape()[2];
    Ok(PixelEmbedding {
        rows: z.with_shape(&[h * w, c])?,
        upl_cache,
        teacher_cache,
    })
}

/// Forward-only pixel embeddings as `(H*W) x C` rows.
pub fn embed_pixels<F: Real>(
    frame: &RgbdFrame<F>,
    params: &ParamStore<F>,
    cfg: &PipelineConfig<F>,
) -> Result<DenseArray<F>> {
    let (h, w) = (frame.height(), frame.width());
    let featmap = models::teacher_forward(&frame.color, params, &cfg.model)?;
    let z = models::upl_forward(&featmap, params, h, w)?;
    let c = z.shape()[2];
    z.with_shape(&[h * w, c])
}

/// Pushes a pixel-embedding cotangent back through UPL (and the teacher
/// when it is marked trainable).
fn pixel_embedding_backward<F: Real>(
    embed: &PixelEmbedding<F>,
    params: &mut ParamStore<F>,
    cfg: &PipelineConfig<F>,
    grad_rows: &DenseArray<F>,
) -> Result<()> {
    let (h, w) = embed.upl_cache.output_extents();
    let c = grad_rows.shape()[1];
    let grad_map = grad_rows.clone().with_shape(&[h, w, c])?;
    let grad_featmap = models::upl_backward(&embed.upl_cache, params, &grad_map)?;
    if let Some(cache) = &embed.teacher_cache {
        models::teacher_backward(cache, params, &cfg.model, &grad_featmap)?;
    }
    Ok(())
}

/// Teacher per-pixel class logits upsampled to frame resolution, as
/// `(H*W) x K` rows. Used as the (detached) distillation target.
pub fn teacher_pixel_logits<F: Real>(
    frame: &RgbdFrame<F>,
    params: &ParamStore<F>,
    cfg: &PipelineConfig<F>,
) -> Result<DenseArray<F>> {
    let (h, w) = (frame.height(), frame.width());
    let featmap = models::teacher_forward(&frame.color, params, &cfg.model)?;
    let (fh, fw, ct) = (featmap.shape()[0], featmap.shape()[1], featmap.shape()[2]);
    let flat = featmap.with_shape(&[fh * fw, ct])?;
    let logits = models::classifier_forward(&flat, params, "teacher.cls")?;
    let k = logits.shape()[1];
    let map = logits.with_shape(&[fh, fw, k])?;
    let up = ops::bilinear_resize(&map, h, w)?;
    up.with_shape(&[h * w, k])
}

/// Accumulated statistics of one batch pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchStats<F> {
    /// Sum of loss values (the canonical reduction is a plain sum).
    pub loss_sum: F,
    /// Number of contributions behind `loss_sum` (pairs, or frames for the
    /// pooled objectives).
    pub pairs: usize,
    /// Sum of positive-pair similarities, one per contribution.
    pub pos_sim_sum: F,
}

impl<F: Real> BatchStats<F> {
    pub fn loss_mean(&self) -> F {
        self.loss_sum / F::of(self.pairs.max(1) as f64)
    }

    pub fn pos_sim_mean(&self) -> F {
        self.pos_sim_sum / F::of(self.pairs.max(1) as f64)
    }
}

fn diag_dot_sum<F: Real>(a: &DenseArray<F>, b: &DenseArray<F>) -> F {
    let mut total = F::zero();
    for i in 0..a.rows() {
        let mut dot = F::zero();
        for (x, y) in a.row(i).iter().zip(b.row(i)) {
            dot = dot + *x * *y;
        }
        total = total + dot;
    }
    total
}

fn cosine_sum<F: Real>(a: &DenseArray<F>, b: &DenseArray<F>) -> F {
    let eps = F::of(1e-12);
    let mut total = F::zero();
    for i in 0..a.rows() {
        let (mut dot, mut na, mut nb) = (F::zero(), F::zero(), F::zero());
        for (x, y) in a.row(i).iter().zip(b.row(i)) {
            dot = dot + *x * *y;
            na = na + *x * *x;
            nb = nb + *y * *y;
        }
        total = total + dot / (na.sqrt() * nb.sqrt()).max(eps);
    }
    total
}

struct FrameForward<F> {
    corr: CorrespondenceSet,
    student_cache: Option<StudentCache<F>>,
    z3_rows: DenseArray<F>,
    student_rows: usize,
}

/// Samples a frame and runs the student side (cached when grads are needed).
fn student_side<F: Real>(
    frame: &RgbdFrame<F>,
    params: &ParamStore<F>,
    cfg: &PipelineConfig<F>,
    rng: &mut Rng,
    with_grad: bool,
) -> Result<FrameForward<F>> {
    let cloud = frame_cloud(frame)?;
    let (sub_cloud, corr) = sample_frame(&cloud, cfg, rng)?;
    let (z3, cache) = if with_grad {
        let (z3, cache) = models::student_forward_cached(&sub_cloud, params, cfg.voxel_size)?;
        (z3, Some(cache))
    } else {
        (
            models::student_forward(&sub_cloud, params, cfg.voxel_size)?,
            None,
        )
    };
    let z3_rows = ops::gather_rows(&z3, &corr.point_rows)?;
    let student_rows = z3.rows();
    Ok(FrameForward {
        corr,
        student_cache: cache,
        z3_rows,
        student_rows,
    })
}

fn scatter_student_grad<F: Real>(
    fwd: &FrameForward<F>,
    params: &mut ParamStore<F>,
    grad_rows: &DenseArray<F>,
) -> Result<()> {
    let c = grad_rows.shape()[1];
    let mut grad_z3 = DenseArray::zeros(&[fwd.student_rows, c]);
    ops::scatter_add_rows(&mut grad_z3, &fwd.corr.point_rows, grad_rows)?;
    let cache = fwd
        .student_cache
        .as_ref()
        .expect("student cache retained for backward");
    models::student_backward(cache, params, &grad_z3)
}

fn scatter_pixel_grad<F: Real>(
    embed: &PixelEmbedding<F>,
    params: &mut ParamStore<F>,
    cfg: &PipelineConfig<F>,
    pixel_rows: &[usize],
    grad_rows: &DenseArray<F>,
) -> Result<()> {
    let mut grad_flat = DenseArray::zeros(embed.rows.shape());
    ops::scatter_add_rows(&mut grad_flat, pixel_rows, grad_rows)?;
    pixel_embedding_backward(embed, params, cfg, &grad_flat)
}

/// Runs one batch of frames under the configured objective, accumulating
/// gradients into `params` when `with_grad` is set. `rng_keys` supplies one
/// deterministic `(seed, stream)` pair per frame so repeated calls resample
/// identical subsets.
pub fn train_batch<F: Real>(
    frames: &[&RgbdFrame<F>],
    params: &mut ParamStore<F>,
    cfg: &PipelineConfig<F>,
    loss_kind: LossKind,
    rng_keys: &[(u64, u64)],
    with_grad: bool,
) -> Result<BatchStats<F>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("empty frame batch".into()));
    }
    if frames.len() != rng_keys.len() {
        return Err(Error::InvalidArgument(format!(
            "{} frames but {} rng keys",
            frames.len(),
            rng_keys.len()
        )));
    }
    // Gradients are accumulated for the per-contribution mean
    // (`loss_sum / pairs`); the canonical reported value remains the sum.
    let batch = F::of(frames.len() as f64);
    let pairs = F::of(cfg.pairs_per_frame as f64);
    match loss_kind {
        LossKind::Ppnce if cfg.cross_frame_negatives => {
            let scale = F::one() / (batch * pairs);
            ppnce_cross_frame(frames, params, cfg, rng_keys, with_grad, scale)
        }
        LossKind::GlobalNce => {
            let scale = F::one() / batch;
            global_nce_batch(frames, params, cfg, rng_keys, with_grad, scale)
        }
        _ => {
            let scale = match loss_kind {
                LossKind::GlobalL2 => F::one() / batch,
                _ => F::one() / (batch * pairs),
            };
            let mut stats = BatchStats {
                loss_sum: F::zero(),
                pairs: 0,
                pos_sim_sum: F::zero(),
            };
            for (frame, &(seed, stream)) in frames.iter().zip(rng_keys) {
                let mut rng = Rng::new(seed, stream);
                let s = match loss_kind {
                    LossKind::Ppnce => {
                        ppnce_frame(frame, params, cfg, &mut rng, with_grad, scale)?
                    }
                    LossKind::Ppkd => {
                        ppkd_frame(frame, params, cfg, &mut rng, with_grad, scale)?
                    }
                    LossKind::GlobalL2 => {
                        global_l2_frame(frame, params, cfg, &mut rng, with_grad, scale)?
                    }
                    _ => unreachable!("handled above"),
                };
                stats.loss_sum = stats.loss_sum + s.loss_sum;
                stats.pairs += s.pairs;
                stats.pos_sim_sum = stats.pos_sim_sum + s.pos_sim_sum;
            }
            Ok(stats)
        }
    }
}

fn ppnce_frame<F: Real>(
    frame: &RgbdFrame<F>,
    params: &mut ParamStore<F>,
    cfg: &PipelineConfig<F>,
    rng: &mut Rng,
    with_grad: bool,
    grad_scale: F,
) -> Result<BatchStats<F>> {
    let fwd = student_side(frame, params, cfg, rng, with_grad)?;
    let mut out: LossOutput<F>;
    let pos_sim;
    if with_grad {
        let embed = embed_pixels_cached(frame, params, cfg)?;
        let z2_rows = ops::gather_rows(&embed.rows, &fwd.corr.pixel_rows)?;
        out = losses::ppnce(&fwd.z3_rows, &z2_rows, cfg.model.tau)?;
        pos_sim = diag_dot_sum(&fwd.z3_rows, &z2_rows);
        out.grad_first.scale(grad_scale);
        out.grad_second.scale(grad_scale);
        scatter_student_grad(&fwd, params, &out.grad_first)?;
        scatter_pixel_grad(&embed, params, cfg, &fwd.corr.pixel_rows, &out.grad_second)?;
    } else {
        let rows = embed_pixels(frame, params, cfg)?;
        let z2_rows = ops::gather_rows(&rows, &fwd.corr.pixel_rows)?;
        out = losses::ppnce(&fwd.z3_rows, &z2_rows, cfg.model.tau)?;
        pos_sim = diag_dot_sum(&fwd.z3_rows, &z2_rows);
    }
    Ok(BatchStats {
        loss_sum: out.value,
        pairs: out.per_pair.len(),
        pos_sim_sum: pos_sim,
    })
}

fn ppnce_cross_frame<F: Real>(
    frames: &[&RgbdFrame<F>],
    params: &mut ParamStore<F>,
    cfg: &PipelineConfig<F>,
    rng_keys: &[(u64, u64)],
    with_grad: bool,
    grad_scale: F,
) -> Result<BatchStats<F>> {
    let m = cfg.pairs_per_frame;
    let mut forwards = Vec::with_capacity(frames.len());
    let mut embeds = Vec::with_capacity(frames.len());
    let mut z3_all: Option<DenseArray<F>> = None;
    let mut z2_all: Option<DenseArray<F>> = None;
    for (frame, &(seed, stream)) in frames.iter().zip(rng_keys) {
        let mut rng = Rng::new(seed, stream);
        let fwd = student_side(frame, params, cfg, &mut rng, with_grad)?;
        let z2_rows = if with_grad {
            let embed = embed_pixels_cached(frame, params, cfg)?;
            let rows = ops::gather_rows(&embed.rows, &fwd.corr.pixel_rows)?;
            embeds.push(Some(embed));
            rows
        } else {
            let rows_all = embed_pixels(frame, params, cfg)?;
            embeds.push(None);
            ops::gather_rows(&rows_all, &fwd.corr.pixel_rows)?
        };
        z3_all = Some(match z3_all {
            None => fwd.z3_rows.clone(),
            Some(acc) => stack_rows(&acc, &fwd.z3_rows)?,
        });
        z2_all = Some(match z2_all {
            None => z2_rows.clone(),
            Some(acc) => stack_rows(&acc, &z2_rows)?,
        });
        forwards.push(fwd);
    }
    let z3_all = z3_all.expect("non-empty batch");
    let z2_all = z2_all.expect("non-empty batch");
    let mut out = losses::ppnce(&z3_all, &z2_all, cfg.model.tau)?;
    let pos_sim = diag_dot_sum(&z3_all, &z2_all);
    if with_grad {
        out.grad_first.scale(grad_scale);
        out.grad_second.scale(grad_scale);
        for (i, fwd) in forwards.iter().enumerate() {
            let rows: Vec<usize> = (i * m..(i + 1) * m).collect();
            let g3 = ops::gather_rows(&out.grad_first, &rows)?;
            scatter_student_grad(fwd, params, &g3)?;
            let g2 = ops::gather_rows(&out.grad_second, &rows)?;
            let embed = embeds[i].as_ref().expect("cached embedding");
            scatter_pixel_grad(embed, params, cfg, &fwd.corr.pixel_rows, &g2)?;
        }
    }
    Ok(BatchStats {
        loss_sum: out.value,
        pairs: out.per_pair.len(),
        pos_sim_sum: pos_sim,
    })
}

fn ppkd_frame<F: Real>(
    frame: &RgbdFrame<F>,
    params: &mut ParamStore<F>,
    cfg: &PipelineConfig<F>,
    rng: &mut Rng,
    with_grad: bool,
    grad_scale: F,
) -> Result<BatchStats<F>> {
    if !params.contains("student.kd_cls.weight") {
        return Err(Error::Config(
            "ppkd needs the student distillation head (student.kd_cls)".into(),
        ));
    }
    let cloud = frame_cloud(frame)?;
    let (sub_cloud, corr) = sample_frame(&cloud, cfg, rng)?;
    let teacher_rows = teacher_pixel_logits(frame, params, cfg)?;
    let t_logits = ops::gather_rows(&teacher_rows, &corr.pixel_rows)?;

    let (h2, cache) = if with_grad {
        let (_, cache) = models::student_forward_cached(&sub_cloud, params, cfg.voxel_size)?;
        (cache.backbone().clone(), Some(cache))
    } else {
        (
            models::student_backbone_forward(&sub_cloud, params, cfg.voxel_size)?,
            None,
        )
    };
    let h2_rows = ops::gather_rows(&h2, &corr.point_rows)?;
    let s_logits = models::classifier_forward(&h2_rows, params, "student.kd_cls")?;
    let mut out = losses::ppkd(&t_logits, &s_logits, cfg.kd_temp)?;
    let pos_sim = cosine_sum(&t_logits, &s_logits);
    if with_grad {
        out.grad_second.scale(grad_scale);
        let grad_h2_rows =
            models::classifier_backward(&h2_rows, params, "student.kd_cls", &out.grad_second)?;
        let mut grad_h2 = DenseArray::zeros(h2.shape());
        ops::scatter_add_rows(&mut grad_h2, &corr.point_rows, &grad_h2_rows)?;
        models::student_backbone_backward(
            cache.as_ref().expect("cache retained"),
            params,
            &grad_h2,
        )?;
    }
    Ok(BatchStats {
        loss_sum: out.value,
        pairs: out.per_pair.len(),
        pos_sim_sum: pos_sim,
    })
}

fn global_l2_frame<F: Real>(
    frame: &RgbdFrame<F>,
    params: &mut ParamStore<F>,
    cfg: &PipelineConfig<F>,
    rng: &mut Rng,
    with_grad: bool,
    grad_scale: F,
) -> Result<BatchStats<F>> {
    let fwd = student_side(frame, params, cfg, rng, with_grad)?;
    let rows = embed_pixels(frame, params, cfg)?;
    let z2_rows = ops::gather_rows(&rows, &fwd.corr.pixel_rows)?;
    let mut out = losses::global_l2(&fwd.z3_rows, &z2_rows)?;
    // Positive similarity of the pooled unit vectors: 1 - value / 2.
    let pos_sim = F::one() - out.value / F::of(2.0);
    if with_grad {
        out.grad_first.scale(grad_scale);
        scatter_student_grad(&fwd, params, &out.grad_first)?;
    }
    Ok(BatchStats {
        loss_sum: out.value,
        pairs: 1,
        pos_sim_sum: pos_sim,
    })
}

fn global_nce_batch<F: Real>(
    frames: &[&RgbdFrame<F>],
    params: &mut ParamStore<F>,
    cfg: &PipelineConfig<F>,
    rng_keys: &[(u64, u64)],
    with_grad: bool,
    grad_scale: F,
) -> Result<BatchStats<F>> {
    let b = frames.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "global_nce needs at least 2 frames per batch, got {b}"
        )));
    }
    let eps = F::of(models::L2_EPS);
    let c = cfg.model.embed_dim;
    let mut pooled3 = DenseArray::zeros(&[b, c]);
    let mut pooled2 = DenseArray::zeros(&[b, c]);
    let mut forwards = Vec::with_capacity(b);
    let mut raw_means = Vec::with_capacity(b);
    for (i, (frame, &(seed, stream))) in frames.iter().zip(rng_keys).enumerate() {
        let mut rng = Rng::new(seed, stream);
        let fwd = student_side(frame, params, cfg, &mut rng, with_grad)?;
        let rows = embed_pixels(frame, params, cfg)?;
        let z2_rows = ops::gather_rows(&rows, &fwd.corr.pixel_rows)?;
        let mean3 = ops::mean_rows(&fwd.z3_rows);
        let mean2 = ops::mean_rows(&z2_rows);
        let row3 = ops::l2_normalize_rows(&mean3.clone().with_shape(&[1, c])?, eps)?;
        let row2 = ops::l2_normalize_rows(&mean2.clone().with_shape(&[1, c])?, eps)?;
        pooled3.row_mut(i).copy_from_slice(row3.row(0));
        pooled2.row_mut(i).copy_from_slice(row2.row(0));
        raw_means.push(mean3);
        forwards.push(fwd);
    }
    let mut out = losses::global_nce(&pooled3, &pooled2, cfg.model.tau)?;
    let pos_sim = diag_dot_sum(&pooled3, &pooled2);
    if with_grad {
        out.grad_first.scale(grad_scale);
        for (i, fwd) in forwards.iter().enumerate() {
            let grad_pooled = ops::gather_rows(&out.grad_first, &[i])?;
            let mean = raw_means[i].clone().with_shape(&[1, c])?;
            let grad_mean = ops::l2_normalize_rows_backward(&mean, eps, &grad_pooled)?;
            let grad_rows = ops::mean_rows_backward(
                fwd.z3_rows.rows(),
                &grad_mean.with_shape(&[c])?,
            );
            scatter_student_grad(fwd, params, &grad_rows)?;
        }
    }
    Ok(BatchStats {
        loss_sum: out.value,
        pairs: out.per_pair.len(),
        pos_sim_sum: pos_sim,
    })
}

fn stack_rows<F: Real>(a: &DenseArray<F>, b: &DenseArray<F>) -> Result<DenseArray<F>> {
    if a.row_len() != b.row_len() {
        return Err(Error::Shape(format!(
            "cannot stack rows of widths {} and {}",
            a.row_len(),
            b.row_len()
        )));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    DenseArray::from_vec(&[a.rows() + b.rows(), a.row_len()], data)
}

/// Forward-only pair embeddings for evaluation: `(z3d, z2d, labels)` rows
/// for `pairs_per_frame` sampled correspondences.
pub fn frame_pair_embeddings<F: Real>(
    frame: &RgbdFrame<F>,
    params: &ParamStore<F>,
    cfg: &PipelineConfig<F>,
    rng: &mut Rng,
) -> Result<(DenseArray<F>, DenseArray<F>, Vec<i64>)> {
    let fwd = student_side(frame, params, cfg, rng, false)?;
    let rows = embed_pixels(frame, params, cfg)?;
    let z2_rows = ops::gather_rows(&rows, &fwd.corr.pixel_rows)?;
    let labels = fwd
        .corr
        .pixel_rows
        .iter()
        .map(|&p| frame.labels[p])
        .collect();
    Ok((fwd.z3_rows, z2_rows, labels))
}

/// Frozen-student backbone features and point labels for probing: up to
/// `max_points` seeded samples per frame.
pub fn frame_backbone_features<F: Real>(
    frame: &RgbdFrame<F>,
    params: &ParamStore<F>,
    voxel_size: F,
    max_points: usize,
    rng: &mut Rng,
) -> Result<(DenseArray<F>, Vec<i64>)> {
    let cloud = frame_cloud(frame)?;
    if cloud.is_empty() {
        return Err(Error::InvalidArgument(
            "frame has no valid pixels to probe".into(),
        ));
    }
    let budget = max_points.min(cloud.len());
    let subset = rng.sample_without_replacement(cloud.len(), budget);
    let sub = cloud.gather(&subset)?;
    let feats = models::student_backbone_forward(&sub, params, voxel_size)?;
    let labels = sub
        .pixel_index
        .iter()
        .map(|&p| frame.labels[p as usize])
        .collect();
    Ok((feats, labels))
}

/// Full student embeddings (head output) and labels, for embedding dumps.
pub fn frame_point_embeddings<F: Real>(
    frame: &RgbdFrame<F>,
    params: &ParamStore<F>,
    model_voxel: F,
    max_points: usize,
    rng: &mut Rng,
) -> Result<(DenseArray<F>, Vec<i64>)> {
    let cloud = frame_cloud(frame)?;
    if cloud.is_empty() {
        return Err(Error::InvalidArgument(
            "frame has no valid pixels to embed".into(),
        ));
    }
    let budget = max_points.min(cloud.len());
    let subset = rng.sample_without_replacement(cloud.len(), budget);
    let sub = cloud.gather(&subset)?;
    let z = models::student_forward(&sub, params, model_voxel)?;
    let labels = sub
        .pixel_index
        .iter()
        .map(|&p| frame.labels[p as usize])
        .collect();
    Ok((z, labels))
}
