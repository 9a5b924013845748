//! The four networks: a small frozen-able 2D teacher, the upsampling
//! feature projection layer (UPL), the 3D point student with one
//! voxel-mean context block, and shared linear classifier heads.
//!
//! Forward passes come in plain and cached flavors; the cached ones retain
//! the intermediates a reverse pass needs. Reverse passes accumulate
//! parameter gradients into the [`ParamStore`] and return the input
//! cotangent so callers can keep chaining.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::{voxel_groups, PointCloud};
use crate::ops;
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::DenseArray;

/// Row-norm guard used by every L2 normalization in the pipeline.
pub const L2_EPS: f64 = 1e-12;

/// Architecture and projection hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig<F> {
    /// Shared embedding dimension C for pixel and point projections.
    pub embed_dim: usize,
    /// Per-stage teacher channel widths (each stage is conv3x3 stride 2 + ReLU).
    pub teacher_channels: Vec<usize>,
    /// Student hidden widths (w1, w2).
    pub student_widths: [usize; 2],
    /// Softmax temperature for the contrastive objectives.
    pub tau: F,
}

impl<F: Real> Default for ModelConfig<F> {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 128,
            teacher_channels: vec![16, 32, 64],
            student_widths: [64, 128],
            tau: F::of(0.04),
        }
    }
}

impl<F: Real> ModelConfig<F> {
    /// Half-width student preset for the backbone-size comparison.
    pub fn small() -> Self {
        ModelConfig {
            student_widths: [32, 64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        if self.tau <= F::zero() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.teacher_channels.is_empty() || self.teacher_channels.contains(&0) {
            return Err(Error::Config(format!(
                "teacher_channels must be non-empty positive widths, got {:?}",
                self.teacher_channels
            )));
        }
        if self.student_widths.contains(&0) {
            return Err(Error::Config(format!(
                "student_widths must be positive, got {:?}",
                self.student_widths
            )));
        }
        Ok(())
    }

    /// Spatial downsampling factor of the teacher (2 per stage).
    pub fn teacher_stride(&self) -> usize {
        1 << self.teacher_channels.len()
    }

    /// Final teacher channel count.
    pub fn teacher_out_channels(&self) -> usize {
        *self.teacher_channels.last().expect("validated non-empty")
    }

    /// Recovers architecture extents from checkpointed parameter shapes.
    /// `tau` keeps its default; override it separately when needed.
    pub fn infer_from_store(store: &ParamStore<F>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut channels = Vec::new();
        for stage in 0.. {
            let name = format!("teacher.conv{stage}.weight");
            if !store.contains(&name) {
                break;
            }
            channels.push(store.value(&name)?.shape()[3]);
        }
        if !channels.is_empty() {
            cfg.teacher_channels = channels;
        }
        if store.contains("student.mlp0.weight") {
            cfg.student_widths = [
                store.value("student.mlp0.weight")?.shape()[1],
                store.value("student.mlp1.weight")?.shape()[1],
            ];
        }
        if store.contains("student.head.weight") {
            cfg.embed_dim = store.value("student.head.weight")?.shape()[1];
        } else if store.contains("upl.proj.weight") {
            cfg.embed_dim = store.value("upl.proj.weight")?.shape()[1];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Uniform init in `+-sqrt(6 / (fan_in + fan_out))`.
fn xavier<F: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> DenseArray<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseArray::from_fn(shape, |_| rng.uniform_in(F::of(-bound), F::of(bound)))
}

fn insert_linear<F: Real>(
    params: &mut ParamStore<F>,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut Rng,
) -> Result<()> {
    params.insert(
        &format!("{prefix}.weight"),
        xavier(&[in_dim, out_dim], in_dim, out_dim, rng),
        true,
    )?;
    // Biases share the fan-scaled uniform init; exact zeros would park
    // ReLU pre-activations on the kink for dead upstream rows.
    params.insert(
        &format!("{prefix}.bias"),
        xavier(&[out_dim], in_dim, out_dim, rng),
        true,
    )
}

/// Registers teacher convolution stages plus its per-pixel classifier.
pub fn init_teacher<F: Real>(
    params: &mut ParamStore<F>,
    cfg: &ModelConfig<F>,
    class_count: usize,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    let mut in_ch = 3;
    for (stage, &out_ch) in cfg.teacher_channels.iter().enumerate() {
        params.insert(
            &format!("teacher.conv{stage}.weight"),
            xavier(&[3, 3, in_ch, out_ch], 9 * in_ch, 9 * out_ch, rng),
            true,
        )?;
        params.insert(
            &format!("teacher.conv{stage}.bias"),
            xavier(&[out_ch], 9 * in_ch, 9 * out_ch, rng),
            true,
        )?;
        in_ch = out_ch;
    }
    insert_linear(params, "teacher.cls", in_ch, class_count, rng)
}

/// Registers the UPL projection (a 1x1 convolution stored as a matrix).
pub fn init_upl<F: Real>(params: &mut ParamStore<F>, cfg: &ModelConfig<F>, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    insert_linear(params, "upl.proj", cfg.teacher_out_channels(), cfg.embed_dim, rng)
}

/// Registers the student MLP, context block, and projection head; with
/// `kd_classes` set, also a per-point distillation classifier.
pub fn init_student<F: Real>(
    params: &mut ParamStore<F>,
    cfg: &ModelConfig<F>,
    kd_classes: Option<usize>,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    let [w1, w2] = cfg.student_widths;
    insert_linear(params, "student.mlp0", 6, w1, rng)?;
    insert_linear(params, "student.mlp1", w1, w2, rng)?;
    insert_linear(params, "student.ctx", 2 * w2, w2, rng)?;
    insert_linear(params, "student.head", w2, cfg.embed_dim, rng)?;
    if let Some(k) = kd_classes {
        insert_linear(params, "student.kd_cls", w2, k, rng)?;
    }
    Ok(())
}

/// Registers a standalone linear classifier under `prefix`.
pub fn init_classifier<F: Real>(
    params: &mut ParamStore<F>,
    prefix: &str,
    in_dim: usize,
    class_count: usize,
    rng: &mut Rng,
) -> Result<()> {
    insert_linear(params, prefix, in_dim, class_count, rng)
}

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

/// Intermediates of one teacher pass.
pub struct TeacherCache<F> {
    stage_inputs: Vec<DenseArray<F>>,
    pre_relu: Vec<DenseArray<F>>,
}

fn teacher_checks<F: Real>(color: &DenseArray<F>, cfg: &ModelConfig<F>) -> Result<()> {
    if color.ndim() != 3 || color.shape()[2] != 3 {
        return Err(Error::Shape(format!(
            "teacher input must be HxWx3, got {:?}",
            color.shape()
        )));
    }
    let stride = cfg.teacher_stride();
    let (h, w) = (color.shape()[0], color.shape()[1]);
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!(
            "teacher input {h}x{w} must be divisible by {stride}"
        )));
    }
    Ok(())
}

/// Teacher feature extractor: stacked conv3x3 stride-2 + ReLU stages
/// mapping `H x W x 3` to `(H/2^s) x (W/2^s) x Ct`.
pub fn teacher_forward<F: Real>(
    color: &DenseArray<F>,
    params: &ParamStore<F>,
    cfg: &ModelConfig<F>,
) -> Result<DenseArray<F>> {
    teacher_checks(color, cfg)?;
    let mut x = color.clone();
    for stage in 0..cfg.teacher_channels.len() {
        let w = params.value(&format!("teacher.conv{stage}.weight"))?;
        let b = params.value(&format!("teacher.conv{stage}.bias"))?;
        x = ops::relu(&ops::conv2d(&x, w, b, 2)?);
    }
    Ok(x)
}

/// [`teacher_forward`] retaining intermediates for a reverse pass.
pub fn teacher_forward_cached<F: Real>(
    color: &DenseArray<F>,
    params: &ParamStore<F>,
    cfg: &ModelConfig<F>,
) -> Result<(DenseArray<F>, TeacherCache<F>)> {
    teacher_checks(color, cfg)?;
    let mut cache = TeacherCache {
        stage_inputs: Vec::new(),
        pre_relu: Vec::new(),
    };
    let mut x = color.clone();
    for stage in 0..cfg.teacher_channels.len() {
        let w = params.value(&format!("teacher.conv{stage}.weight"))?;
        let b = params.value(&format!("teacher.conv{stage}.bias"))?;
        let pre = ops::conv2d(&x, w, b, 2)?;
        cache.stage_inputs.push(x);
        x = ops::relu(&pre);
        cache.pre_relu.push(pre);
    }
    Ok((x, cache))
}

/// Reverse pass of the teacher; accumulates grads and returns the input
/// cotangent.
pub fn teacher_backward<F: Real>(
    cache: &TeacherCache<F>,
    params: &mut ParamStore<F>,
    cfg: &ModelConfig<F>,
    grad_out: &DenseArray<F>,
) -> Result<DenseArray<F>> {
    let stages = cfg.teacher_channels.len();
    let mut grad = grad_out.clone();
    for stage in (0..stages).rev() {
        let grad_pre = ops::relu_backward(&cache.pre_relu[stage], &grad);
        let weights = params.value(&format!("teacher.conv{stage}.weight"))?.clone();
        let grads = ops::conv2d_backward(&cache.stage_inputs[stage], &weights, 2, &grad_pre)?;
        params.accumulate_grad(&format!("teacher.conv{stage}.weight"), &grads.weights)?;
        params.accumulate_grad(&format!("teacher.conv{stage}.bias"), &grads.bias)?;
        grad = grads.input;
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// UPL
// ---------------------------------------------------------------------------

/// Intermediates of one UPL pass.
pub struct UplCache<F> {
    input: DenseArray<F>,
    resized: DenseArray<F>,
}

impl<F: Real> UplCache<F> {
    /// Spatial extents of the upsampled output map.
    pub fn output_extents(&self) -> (usize, usize) {
        (self.resized.shape()[0], self.resized.shape()[1])
    }
}

/// Upsampling feature projection layer: 1x1 conv `Ct -> C`, bilinear
/// upsample to `(out_h, out_w)`, then per-pixel L2 normalization.
pub fn upl_forward<F: Real>(
    featmap: &DenseArray<F>,
    params: &ParamStore<F>,
    out_h: usize,
    out_w: usize,
) -> Result<DenseArray<F>> {
    Ok(upl_forward_cached(featmap, params, out_h, out_w)?.0)
}

/// [`upl_forward`] retaining intermediates for a reverse pass.
pub fn upl_forward_cached<F: Real>(
    featmap: &DenseArray<F>,
    params: &ParamStore<F>,
    out_h: usize,
    out_w: usize,
) -> Result<(DenseArray<F>, UplCache<F>)> {
    if featmap.ndim() != 3 {
        return Err(Error::Shape(format!(
            "UPL input must be hxwxC, got {:?}",
            featmap.shape()
        )));
    }
    let (h, w, ct) = (featmap.shape()[0], featmap.shape()[1], featmap.shape()[2]);
    let weight = params.value("upl.proj.weight")?;
    if weight.shape()[0] != ct {
        return Err(Error::Shape(format!(
            "UPL projection expects {} channels, feature map has {ct}",
            weight.shape()[0]
        )));
    }
    let c = weight.shape()[1];
    let bias = params.value("upl.proj.bias")?;
    let flat = featmap.clone().with_shape(&[h * w, ct])?;
    let projected = ops::linear(&flat, weight, bias)?.with_shape(&[h, w, c])?;
    let resized = ops::bilinear_resize(&projected, out_h, out_w)?;
    let rows = resized.clone().with_shape(&[out_h * out_w, c])?;
    let normalized = ops::l2_normalize_rows(&rows, F::of(L2_EPS))?.with_shape(&[out_h, out_w, c])?;
    Ok((
        normalized,
        UplCache {
            input: featmap.clone(),
            resized,
        },
    ))
}

/// Reverse pass of the UPL; accumulates projection grads and returns the
/// cotangent of the input feature map.
pub fn upl_backward<F: Real>(
    cache: &UplCache<F>,
    params: &mut ParamStore<F>,
    grad_out: &DenseArray<F>,
) -> Result<DenseArray<F>> {
    let (oh, ow, c) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    let (h, w, ct) = (
        cache.input.shape()[0],
        cache.input.shape()[1],
        cache.input.shape()[2],
    );
    let rows_pre = cache.resized.clone().with_shape(&[oh * ow, c])?;
    let grad_rows = grad_out.clone().with_shape(&[oh * ow, c])?;
    let grad_resized = ops::l2_normalize_rows_backward(&rows_pre, F::of(L2_EPS), &grad_rows)?
        .with_shape(&[oh, ow, c])?;
    let grad_projected = ops::bilinear_resize_backward(h, w, &grad_resized)?;
    let flat_in = cache.input.clone().with_shape(&[h * w, ct])?;
    let weight = params.value("upl.proj.weight")?.clone();
    let grads = ops::linear_backward(
        &flat_in,
        &weight,
        &grad_projected.with_shape(&[h * w, c])?,
    )?;
    params.accumulate_grad("upl.proj.weight", &grads.weight)?;
    params.accumulate_grad("upl.proj.bias", &grads.bias)?;
    grads.input.with_shape(&[h, w, ct])
}

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

/// Intermediates of one student pass.
pub struct StudentCache<F> {
    feats: DenseArray<F>,
    pre0: DenseArray<F>,
    h0: DenseArray<F>,
    pre1: DenseArray<F>,
    h1: DenseArray<F>,
    groups: Vec<Vec<usize>>,
    cat: DenseArray<F>,
    pre2: DenseArray<F>,
    h2: DenseArray<F>,
    head_out: DenseArray<F>,
}

impl<F: Real> StudentCache<F> {
    /// Backbone output (`N x w2`) before the projection head.
    pub fn backbone(&self) -> &DenseArray<F> {
        &self.h2
    }
}

fn cmp_rows<F: Real>(a: &[F], b: &[F]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let ord = x.widen().total_cmp(&y.widen());
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

/// Voxel groups with members in a canonical order derived from point data,
/// so group sums do not depend on input point order.
fn canonical_groups<F: Real>(cloud: &PointCloud<F>, voxel_size: F) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = voxel_groups(&cloud.coords, voxel_size)
        .into_values()
        .collect();
    for members in groups.iter_mut() {
        members.sort_by(|&a, &b| {
            cmp_rows(cloud.coords.row(a), cloud.coords.row(b))
                .then_with(|| cmp_rows(cloud.feats.row(a), cloud.feats.row(b)))
        });
    }
    groups
}

/// Mean of `values` rows per group, broadcast back to every member row.
fn group_mean_broadcast<F: Real>(values: &DenseArray<F>, groups: &[Vec<usize>]) -> DenseArray<F> {
    let c = values.row_len();
    let mut out = DenseArray::zeros(&[values.rows(), c]);
    let mut mean = vec![F::zero(); c];
    for members in groups {
        for m in mean.iter_mut() {
            *m = F::zero();
        }
        for &i in members {
            for (m, &v) in mean.iter_mut().zip(values.row(i)) {
                *m = *m + v;
            }
        }
        let inv = F::one() / F::of(members.len() as f64);
        for m in mean.iter_mut() {
            *m = *m * inv;
        }
        for &i in members {
            out.row_mut(i).copy_from_slice(&mean);
        }
    }
    out
}

fn student_checks<F: Real>(cloud: &PointCloud<F>, voxel_size: F) -> Result<()> {
    cloud.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("student input cloud is empty".into()));
    }
    if cloud.feats.row_len() != 6 {
        return Err(Error::Shape(format!(
            "student expects 6 feature columns (xyz + rgb), got {}",
            cloud.feats.row_len()
        )));
    }
    if voxel_size <= F::zero() {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    Ok(())
}

/// Point student: shared MLP, one voxel-mean context block, second shared
/// MLP, projection head, per-row L2 normalization. Returns `N x C` unit rows.
pub fn student_forward<F: Real>(
    cloud: &PointCloud<F>,
    params: &ParamStore<F>,
    voxel_size: F,
) -> Result<DenseArray<F>> {
    Ok(student_forward_cached(cloud, params, voxel_size)?.0)
}

/// [`student_forward`] retaining intermediates for a reverse pass.
pub fn student_forward_cached<F: Real>(
    cloud: &PointCloud<F>,
    params: &ParamStore<F>,
    voxel_size: F,
) -> Result<(DenseArray<F>, StudentCache<F>)> {
    student_checks(cloud, voxel_size)?;
    let feats = cloud.feats.clone();
    let pre0 = ops::linear(
        &feats,
        params.value("student.mlp0.weight")?,
        params.value("student.mlp0.bias")?,
    )?;
    let h0 = ops::relu(&pre0);
    let pre1 = ops::linear(
        &h0,
        params.value("student.mlp1.weight")?,
        params.value("student.mlp1.bias")?,
    )?;
    let h1 = ops::relu(&pre1);
    let groups = canonical_groups(cloud, voxel_size);
    let context = group_mean_broadcast(&h1, &groups);
    let cat = ops::concat_cols(&h1, &context)?;
    let pre2 = ops::linear(
        &cat,
        params.value("student.ctx.weight")?,
        params.value("student.ctx.bias")?,
    )?;
    let h2 = ops::relu(&pre2);
    let head_out = ops::linear(
        &h2,
        params.value("student.head.weight")?,
        params.value("student.head.bias")?,
    )?;
    let z = ops::l2_normalize_rows(&head_out, F::of(L2_EPS))?;
    Ok((
        z,
        StudentCache {
            feats,
            pre0,
            h0,
            pre1,
            h1,
            groups,
            cat,
            pre2,
            h2,
            head_out,
        },
    ))
}

/// Backbone features only (`N x w2`), the representation probed by the
/// linear evaluation.
pub fn student_backbone_forward<F: Real>(
    cloud: &PointCloud<F>,
    params: &ParamStore<F>,
    voxel_size: F,
) -> Result<DenseArray<F>> {
    Ok(student_forward_cached(cloud, params, voxel_size)?.1.h2)
}

/// Reverse pass from the unit embeddings all the way to the inputs.
pub fn student_backward<F: Real>(
    cache: &StudentCache<F>,
    params: &mut ParamStore<F>,
    grad_z: &DenseArray<F>,
) -> Result<()> {
    let grad_head_out = ops::l2_normalize_rows_backward(&cache.head_out, F::of(L2_EPS), grad_z)?;
    let head_w = params.value("student.head.weight")?.clone();
    let head_grads = ops::linear_backward(&cache.h2, &head_w, &grad_head_out)?;
    params.accumulate_grad("student.head.weight", &head_grads.weight)?;
    params.accumulate_grad("student.head.bias", &head_grads.bias)?;
    student_backbone_backward(cache, params, &head_grads.input)
}

/// Reverse pass starting from a backbone (`N x w2`) cotangent.
pub fn student_backbone_backward<F: Real>(
    cache: &StudentCache<F>,
    params: &mut ParamStore<F>,
    grad_h2: &DenseArray<F>,
) -> Result<()> {
    let grad_pre2 = ops::relu_backward(&cache.pre2, grad_h2);
    let ctx_w = params.value("student.ctx.weight")?.clone();
    let ctx_grads = ops::linear_backward(&cache.cat, &ctx_w, &grad_pre2)?;
    params.accumulate_grad("student.ctx.weight", &ctx_grads.weight)?;
    params.accumulate_grad("student.ctx.bias", &ctx_grads.bias)?;

    let w2 = cache.h1.row_len();
    let (grad_h1_direct, grad_context) = ops::split_cols(&ctx_grads.input, w2);
    // Mean-broadcast backward: every member receives the group's summed
    // context cotangent divided by the group size.
    let mut grad_h1 = grad_h1_direct;
    let mut gsum = vec![F::zero(); w2];
    for members in &cache.groups {
        for g in gsum.iter_mut() {
            *g = F::zero();
        }
        for &i in members {
            for (g, &v) in gsum.iter_mut().zip(grad_context.row(i)) {
                *g = *g + v;
            }
        }
        let inv = F::one() / F::of(members.len() as f64);
        for &i in members {
            for (dst, &g) in grad_h1.row_mut(i).iter_mut().zip(gsum.iter()) {
                *dst = *dst + g * inv;
            }
        }
    }

    let grad_pre1 = ops::relu_backward(&cache.pre1, &grad_h1);
    let mlp1_w = params.value("student.mlp1.weight")?.clone();
    let mlp1_grads = ops::linear_backward(&cache.h0, &mlp1_w, &grad_pre1)?;
    params.accumulate_grad("student.mlp1.weight", &mlp1_grads.weight)?;
    params.accumulate_grad("student.mlp1.bias", &mlp1_grads.bias)?;

    let grad_pre0 = ops::relu_backward(&cache.pre0, &mlp1_grads.input);
    let mlp0_w = params.value("student.mlp0.weight")?.clone();
    let mlp0_grads = ops::linear_backward(&cache.feats, &mlp0_w, &grad_pre0)?;
    params.accumulate_grad("student.mlp0.weight", &mlp0_grads.weight)?;
    params.accumulate_grad("student.mlp0.bias", &mlp0_grads.bias)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// Shared affine map `C -> K` under the given parameter prefix.
pub fn classifier_forward<F: Real>(
    embeddings: &DenseArray<F>,
    params: &ParamStore<F>,
    prefix: &str,
) -> Result<DenseArray<F>> {
    let weight = params.value(&format!("{prefix}.weight"))?;
    let bias = params.value(&format!("{prefix}.bias"))?;
    ops::linear(embeddings, weight, bias)
}

/// Reverse pass of [`classifier_forward`]; returns the input cotangent.
pub fn classifier_backward<F: Real>(
    embeddings: &DenseArray<F>,
    params: &mut ParamStore<F>,
    prefix: &str,
    grad_logits: &DenseArray<F>,
) -> Result<DenseArray<F>> {
    let weight = params.value(&format!("{prefix}.weight"))?.clone();
    let grads = ops::linear_backward(embeddings, &weight, grad_logits)?;
    params.accumulate_grad(&format!("{prefix}.weight"), &grads.weight)?;
    params.accumulate_grad(&format!("{prefix}.bias"), &grads.bias)?;
    Ok(grads.input)
}
