//! `ppkt` command-line interface: dataset generation, teacher and
//! pixel-to-point pretraining, gradient checking, and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. All randomness is
//! controlled by `--seed`; stdout carries human-readable progress while
//! machine-readable data goes to the `--out`/`--metrics` files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ppkt_core::evalkit::{self, MetricsRow, ProbeConfig};
use ppkt_core::gradcheck::grad_check;
use ppkt_core::models;
use ppkt_core::ops;
use ppkt_core::synthdata::{
    self, default_intrinsics, generate_scene, render_well_covered_frame,
};
use ppkt_core::tensor::DenseArray as GenericArray;
use ppkt_core::trainer::{
    load_checkpoint, metrics_to_csv, run_pretrain, run_pretrain_teacher, save_checkpoint,
    teacher_pixel_accuracy, StepMetrics,
};
use ppkt_core::transfer::{self, LossKind, PipelineConfig};
use ppkt_core::{
    CameraIntrinsics, DenseArray, Error, ModelConfig, ParamStore, Result, Rng, Scalar,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "ppkt",
    about = "Pixel-to-point contrastive pretraining on synthetic RGB-D scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled RGB-D dataset by ray-casting box scenes.
    GenData(GenDataArgs),
    /// Pretrain the 2D teacher with per-pixel cross-entropy.
    PretrainTeacher(PretrainTeacherArgs),
    /// Pretrain the 3D student from a frozen teacher (or run a baseline loss).
    Pretrain(PretrainArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Positive-pair retrieval accuracy of a student/teacher pair.
    EvalRetrieval(EvalRetrievalArgs),
    /// Linear probe (or fine-tune) of point-label segmentation quality.
    Probe(ProbeArgs),
    /// Feature-diversity statistics of a pretrained teacher.
    Diversity(DiversityArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// Shared embedding dimension C [default: 128]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Comma-separated teacher stage widths [default: 16,32,64]
    #[arg(long)]
    teacher_channels: Option<String>,
    /// Student hidden widths: "default" (64,128), "small" (32,64), or "w1,w2"
    #[arg(long)]
    student_widths: Option<String>,
    /// Contrastive softmax temperature [default: 0.04]
    #[arg(long)]
    tau: Option<Scalar>,
}

#[derive(Args)]
struct TrainFlags {
    /// Initial learning rate [default: 0.5]
    #[arg(long)]
    lr0: Option<Scalar>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<Scalar>,
    /// L2 weight decay [default: 1e-4]
    #[arg(long)]
    weight_decay: Option<Scalar>,
    /// Optimization steps [default: 2000]
    #[arg(long)]
    steps: Option<usize>,
    /// Frames per step, sampled with replacement [default: 8]
    #[arg(long)]
    batch_frames: Option<usize>,
    /// Positive pairs per frame (M) [default: 256]
    #[arg(long)]
    pairs_per_frame: Option<usize>,
    /// Final learning rate as a fraction of lr0 [default: 0.01]
    #[arg(long)]
    lr_final_factor: Option<Scalar>,
    /// Frozen parameter-name prefixes, comma separated [default: teacher]
    #[arg(long)]
    frozen: Option<String>,
    /// Context-block voxel edge length in meters [default: 0.025]
    #[arg(long)]
    voxel_size: Option<Scalar>,
    /// Cap on points fed to the student per frame [default: 512]
    #[arg(long)]
    student_points: Option<usize>,
    /// Distillation temperature for the ppkd loss [default: 4]
    #[arg(long)]
    kd_temp: Option<Scalar>,
    /// Pool contrastive negatives across the whole batch [default: false]
    #[arg(long)]
    cross_frame_negatives: bool,
}

impl TrainFlags {
    /// Layers flag values over the given config (config-file values and
    /// defaults survive wherever a flag was not passed).
    fn apply(&self, cfg: &mut TrainConfig, model: &mut ModelConfig) -> Result<()> {
        macro_rules! set {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.apply_entry(model, $key, &v.to_string())?;
                }
            };
        }
        set!(lr0, "lr0");
        set!(momentum, "momentum");
        set!(weight_decay, "weight_decay");
        set!(steps, "steps");
        set!(batch_frames, "batch_frames");
        set!(pairs_per_frame, "pairs_per_frame");
        set!(lr_final_factor, "lr_final_factor");
        set!(frozen, "frozen");
        set!(voxel_size, "voxel_size");
        set!(student_points, "student_points");
        set!(kd_temp, "kd_temp");
        if self.cross_frame_negatives {
            cfg.apply_entry(model, "cross_frame_negatives", "true")?;
        }
        Ok(())
    }
}

impl ModelFlags {
    fn apply(&self, cfg: &mut TrainConfig, model: &mut ModelConfig) -> Result<()> {
        if let Some(v) = self.embed_dim {
            cfg.apply_entry(model, "embed_dim", &v.to_string())?;
        }
        if let Some(v) = &self.teacher_channels {
            cfg.apply_entry(model, "teacher_channels", v)?;
        }
        if let Some(v) = &self.student_widths {
            cfg.apply_entry(model, "student_widths", v)?;
        }
        if let Some(v) = self.tau {
            cfg.apply_entry(model, "tau", &v.to_string())?;
        }
        Ok(())
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Number of distinct box scenes [default: 8]
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    /// Rendered views per scene [default: 32]
    #[arg(long, default_value_t = 32)]
    frames_per_scene: usize,
    /// Master seed for scenes, poses, and noise
    #[arg(long)]
    seed: u64,
    /// Random boxes per scene (floor excluded) [default: 5]
    #[arg(long, default_value_t = 5)]
    boxes: usize,
    /// Semantic classes including the floor [default: 6]
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Image width in pixels [default: 64]
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Image height in pixels [default: 48]
    #[arg(long, default_value_t = 48)]
    height: usize,
    /// Focal length in pixels [default: 60]
    #[arg(long, default_value_t = 60.0)]
    focal: Scalar,
    /// Gaussian color noise sigma [default: 0.02]
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: Scalar,
    /// Minimum fraction of valid pixels per accepted view [default: 0.25]
    #[arg(long, default_value_t = 0.25)]
    min_valid_frac: f64,
}

#[derive(Args)]
struct PretrainTeacherArgs {
    /// Training dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output teacher checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Optional per-step metrics CSV path
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
    /// Optional key=value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Training dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint (from pretrain-teacher)
    #[arg(long)]
    teacher: PathBuf,
    /// Objective: ppnce, ppkd, global_l2, or global_nce [default: ppnce]
    #[arg(long)]
    loss: Option<String>,
    /// Output student checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics CSV path
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
    /// Optional key=value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// What to check: ppnce, ppkd, global_l2, global_nce, cross_entropy,
    /// or pipeline (the full teacher+UPL+student chain)
    #[arg(long)]
    loss: String,
    /// Master seed
    #[arg(long)]
    seed: u64,
    /// Central-difference step size [default: 1e-6]
    #[arg(long, default_value_t = 1e-6)]
    step: Scalar,
    /// Number of scalar parameters to probe [default: 64]
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Probe temperature for the contrastive losses [default: 0.5]
    #[arg(long, default_value_t = 0.5)]
    tau: Scalar,
}

#[derive(Args)]
struct EvalRetrievalArgs {
    /// Held-out dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint
    #[arg(long)]
    teacher: PathBuf,
    /// Student checkpoint; omitted = randomly initialized student
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Correspondences ranked per frame [default: 256]
    #[arg(long, default_value_t = 256)]
    pairs: usize,
    /// Cap on points fed to the student per frame [default: 512]
    #[arg(long, default_value_t = 512)]
    student_points: usize,
    /// Context-block voxel edge length in meters [default: 0.025]
    #[arg(long, default_value_t = 0.025)]
    voxel_size: Scalar,
    /// Master seed
    #[arg(long)]
    seed: u64,
    /// Optional metrics CSV path
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct ProbeArgs {
    /// Labeled training dataset directory
    #[arg(long)]
    train: PathBuf,
    /// Held-out evaluation dataset directory
    #[arg(long)]
    eval: PathBuf,
    /// Student checkpoint; omitted = scratch (random frozen student)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Probe optimization steps [default: 300]
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Probe learning rate [default: 0.5]
    #[arg(long, default_value_t = 0.5)]
    lr0: Scalar,
    /// Fraction of training frames with labels [default: 1.0]
    #[arg(long, default_value_t = 1.0)]
    fraction: Scalar,
    /// Probed points per frame [default: 400]
    #[arg(long, default_value_t = 400)]
    points_per_frame: usize,
    /// Context-block voxel edge length in meters [default: 0.025]
    #[arg(long, default_value_t = 0.025)]
    voxel_size: Scalar,
    /// Master seed
    #[arg(long)]
    seed: u64,
    /// Fine-tune the backbone instead of probing frozen features
    #[arg(long)]
    fine_tune: bool,
    /// Optional metrics CSV path
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Optional held-out embedding dump (CSV of embedding + label rows)
    #[arg(long)]
    dump_embeddings: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct DiversityArgs {
    /// Held-out dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint
    #[arg(long)]
    teacher: PathBuf,
    /// Optional student checkpoint supplying a trained UPL projection
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Frames to compare [default: 50]
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// Pixel embeddings sampled across frames [default: 256]
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Master seed
    #[arg(long)]
    seed: u64,
    /// Optional metrics CSV path
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let outcome = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::PretrainTeacher(args) => pretrain_teacher(args),
        Command::Pretrain(args) => pretrain(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
        Command::EvalRetrieval(args) => eval_retrieval(args),
        Command::Probe(args) => probe(args),
        Command::Diversity(args) => diversity(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn read_config_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn resolve_configs(
    config: Option<&PathBuf>,
    train: &TrainFlags,
    model: &ModelFlags,
    seed: u64,
    loss: Option<&str>,
) -> Result<(TrainConfig, ModelConfig)> {
    let mut cfg = TrainConfig::default();
    let mut model_cfg = ModelConfig::default();
    if let Some(path) = config {
        let text = read_config_file(path)?;
        cfg.apply_config_text(&mut model_cfg, &text)?;
    }
    train.apply(&mut cfg, &mut model_cfg)?;
    model.apply(&mut cfg, &mut model_cfg)?;
    if let Some(loss) = loss {
        cfg.loss_kind = loss.parse()?;
    }
    cfg.seed = seed;
    cfg.validate()?;
    model_cfg.validate()?;
    Ok((cfg, model_cfg))
}

fn write_metrics_csv(path: &Path, rows: &[StepMetrics<Scalar>]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows)).map_err(|e| Error::io(path.display().to_string(), e))
}

fn progress_printer(total: usize) -> impl FnMut(&StepMetrics<Scalar>) {
    let every = (total / 20).max(1);
    move |m: &StepMetrics<Scalar>| {
        if m.step as usize % every == 0 || m.step as usize + 1 == total {
            println!(
                "step {:>6}/{total}  lr {:.5}  loss_mean {:.5}  pos_sim {:.4}",
                m.step, m.lr, m.loss_mean, m.pos_sim_mean
            );
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<ExitCode> {
    if args.scenes == 0 || args.frames_per_scene == 0 {
        return Err(Error::InvalidArgument(
            "scenes and frames-per-scene must be positive".into(),
        ));
    }
    let intr = CameraIntrinsics {
        fx: args.focal,
        fy: args.focal,
        cx: (args.width as Scalar - 1.0) / 2.0,
        cy: (args.height as Scalar - 1.0) / 2.0,
        width: args.width,
        height: args.height,
    };
    intr.validate()?;
    let min_valid = ((args.width * args.height) as f64 * args.min_valid_frac) as usize;
    let mut frames = Vec::with_capacity(args.scenes * args.frames_per_scene);
    for scene_idx in 0..args.scenes {
        let base = scene_idx as u64 * 8;
        let scene = generate_scene(&mut Rng::new(args.seed, base), args.boxes, args.classes);
        let mut pose_rng = Rng::new(args.seed, base + 1);
        let mut noise_rng = Rng::new(args.seed, base + 2);
        for _ in 0..args.frames_per_scene {
            let (frame, _) = render_well_covered_frame(
                &scene,
                &intr,
                args.noise_sigma,
                min_valid,
                &mut pose_rng,
                &mut noise_rng,
            )?;
            frames.push(frame);
        }
        println!(
            "scene {}/{}: {} frames rendered",
            scene_idx + 1,
            args.scenes,
            args.frames_per_scene
        );
    }
    synthdata::write_dataset(&args.out, &frames, args.classes, args.seed)?;
    println!(
        "wrote {} frames with {} classes to {}",
        frames.len(),
        args.classes,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn pretrain_teacher(args: PretrainTeacherArgs) -> Result<ExitCode> {
    let (mut cfg, model_cfg) = resolve_configs(
        args.config.as_ref(),
        &args.train,
        &args.model,
        args.seed,
        None,
    )?;
    // The teacher stage does not use paper-tagged pretraining defaults;
    // a lighter schedule suits plain cross-entropy on a small net.
    if args.train.steps.is_none() && args.config.is_none() {
        cfg.steps = 600;
    }
    if args.train.lr0.is_none() && args.config.is_none() {
        cfg.lr0 = 0.08;
    }
    let dataset = synthdata::read_dataset::<Scalar>(&args.data)?;
    println!("resolved configuration:\n{}", cfg.to_text(&model_cfg));
    let mut printer = progress_printer(cfg.steps);
    let (params, metrics) =
        run_pretrain_teacher(&dataset, &model_cfg, &cfg, Some(&mut printer))?;
    save_checkpoint(&args.out, cfg.steps as u64, &params)?;
    if let Some(path) = &args.metrics {
        write_metrics_csv(path, &metrics)?;
    }
    let acc = teacher_pixel_accuracy(&dataset, &params, &model_cfg)?;
    println!(
        "teacher checkpoint written to {} (train pixel accuracy {:.4})",
        args.out.display(),
        acc
    );
    Ok(ExitCode::SUCCESS)
}

fn pretrain(args: PretrainArgs) -> Result<ExitCode> {
    let (cfg, mut model_cfg) = resolve_configs(
        args.config.as_ref(),
        &args.train,
        &args.model,
        args.seed,
        args.loss.as_deref(),
    )?;
    let dataset = synthdata::read_dataset::<Scalar>(&args.data)?;
    let (_, teacher) = load_checkpoint::<Scalar>(&args.teacher)?;
    // Architecture extents follow the checkpoint unless set explicitly.
    if args.model.teacher_channels.is_none() {
        let inferred = ModelConfig::infer_from_store(&teacher)?;
        model_cfg.teacher_channels = inferred.teacher_channels;
    }
    model_cfg.validate()?;
    println!("resolved configuration:\n{}", cfg.to_text(&model_cfg));
    let mut printer = progress_printer(cfg.steps);
    let (params, metrics) = run_pretrain(&dataset, &teacher, &model_cfg, &cfg, Some(&mut printer))?;
    save_checkpoint(&args.out, cfg.steps as u64, &params)?;
    if let Some(path) = &args.metrics {
        write_metrics_csv(path, &metrics)?;
    }
    let last = metrics.last().expect("steps >= 1");
    println!(
        "student checkpoint written to {} (final loss_mean {:.5}, pos_sim {:.4})",
        args.out.display(),
        last.loss_mean,
        last.pos_sim_mean
    );
    Ok(ExitCode::SUCCESS)
}

fn unit_rows(m: usize, c: usize, rng: &mut Rng) -> DenseArray {
    let raw = GenericArray::from_fn(&[m, c], |_| rng.uniform_in(-1.0, 1.0));
    ops::l2_normalize_rows(&raw, 1e-12).expect("positive epsilon")
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<ExitCode> {
    let mut params = ParamStore::new();
    let mut rng = Rng::new(args.seed, 0);
    let tau = args.tau;

    type LossFn = Box<dyn FnMut(&mut ParamStore, bool) -> Result<Scalar>>;
    let mut loss: LossFn = match args.loss.as_str() {
        "ppnce" => {
            params.insert("z3d", unit_rows(8, 16, &mut rng), true)?;
            params.insert("z2d", unit_rows(8, 16, &mut rng), true)?;
            Box::new(move |store, with_grad| {
                let out = ppkt_core::losses::ppnce(store.value("z3d")?, store.value("z2d")?, tau)?;
                if with_grad {
                    store.accumulate_grad("z3d", &out.grad_first)?;
                    store.accumulate_grad("z2d", &out.grad_second)?;
                }
                Ok(out.value)
            })
        }
        "ppkd" => {
            let teacher = GenericArray::from_fn(&[8, 6], |_| rng.uniform_in(-2.0, 2.0));
            params.insert(
                "student_logits",
                GenericArray::from_fn(&[8, 6], |_| rng.uniform_in(-2.0, 2.0)),
                true,
            )?;
            Box::new(move |store, with_grad| {
                let out = ppkt_core::losses::ppkd(&teacher, store.value("student_logits")?, 4.0)?;
                if with_grad {
                    store.accumulate_grad("student_logits", &out.grad_second)?;
                }
                Ok(out.value)
            })
        }
        "global_l2" => {
            let z2d = unit_rows(8, 16, &mut rng);
            params.insert("z3d", unit_rows(8, 16, &mut rng), true)?;
            Box::new(move |store, with_grad| {
                let out = ppkt_core::losses::global_l2(store.value("z3d")?, &z2d)?;
                if with_grad {
                    store.accumulate_grad("z3d", &out.grad_first)?;
                }
                Ok(out.value)
            })
        }
        "global_nce" => {
            let pooled2 = unit_rows(6, 16, &mut rng);
            params.insert("pooled3d", unit_rows(6, 16, &mut rng), true)?;
            Box::new(move |store, with_grad| {
                let out =
                    ppkt_core::losses::global_nce(store.value("pooled3d")?, &pooled2, tau)?;
                if with_grad {
                    store.accumulate_grad("pooled3d", &out.grad_first)?;
                }
                Ok(out.value)
            })
        }
        "cross_entropy" => {
            let labels: Vec<i64> = (0..8).map(|i| if i == 3 { -1 } else { i % 5 }).collect();
            params.insert(
                "logits",
                GenericArray::from_fn(&[8, 5], |_| rng.uniform_in(-2.0, 2.0)),
                true,
            )?;
            Box::new(move |store, with_grad| {
                let out = ppkt_core::losses::cross_entropy(store.value("logits")?, &labels, -1)?;
                if with_grad {
                    store.accumulate_grad("logits", &out.grad_first)?;
                }
                Ok(out.value)
            })
        }
        "pipeline" => {
            let pipeline = PipelineConfig {
                model: ModelConfig {
                    embed_dim: 6,
                    teacher_channels: vec![4, 5, 6],
                    student_widths: [6, 8],
                    tau,
                },
                voxel_size: 0.2,
                pairs_per_frame: 8,
                student_points: 48,
                kd_temp: 4.0,
                cross_frame_negatives: false,
                train_teacher: false,
            };
            models::init_teacher(&mut params, &pipeline.model, 6, &mut Rng::new(args.seed, 10))?;
            models::init_upl(&mut params, &pipeline.model, &mut Rng::new(args.seed, 11))?;
            models::init_student(&mut params, &pipeline.model, None, &mut Rng::new(args.seed, 12))?;
            params.freeze_prefix("teacher");
            let frames: Vec<_> = (0..2)
                .map(|i| {
                    let scene = generate_scene(&mut Rng::new(args.seed, 20 + i), 3, 6);
                    let mut intr = default_intrinsics::<Scalar>();
                    intr.width = 32;
                    intr.height = 24;
                    intr.cx = 15.5;
                    intr.cy = 11.5;
                    intr.fx = 30.0;
                    intr.fy = 30.0;
                    render_well_covered_frame(
                        &scene,
                        &intr,
                        0.0,
                        200,
                        &mut Rng::new(args.seed, 30 + i),
                        &mut Rng::new(args.seed, 40 + i),
                    )
                    .map(|(frame, _)| frame)
                })
                .collect::<Result<_>>()?;
            let keys = [(args.seed, 50u64), (args.seed, 51u64)];
            Box::new(move |store, with_grad| {
                let refs: Vec<_> = frames.iter().collect();
                let stats = transfer::train_batch(
                    &refs,
                    store,
                    &pipeline,
                    LossKind::Ppnce,
                    &keys,
                    with_grad,
                )?;
                Ok(stats.loss_mean())
            })
        }
        other => {
            return Err(Error::Config(format!(
                "unknown gradcheck target '{other}' (expected a loss name or 'pipeline')"
            )))
        }
    };

    let report = grad_check(
        &mut loss,
        &mut params,
        args.step,
        args.samples,
        &mut Rng::new(args.seed, 99),
    )?;
    println!(
        "max relative error {:.3e} over {} samples (worst: {}[{}])",
        report.max_rel_err, report.samples, report.worst_param, report.worst_index
    );
    if report.max_rel_err < 1e-4 {
        println!("gradcheck PASS (threshold 1e-4)");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck FAIL (threshold 1e-4)");
        Ok(ExitCode::from(2))
    }
}

/// Builds the combined parameter store for evaluation: teacher entries from
/// the teacher checkpoint, UPL/student entries from the student checkpoint
/// or a seeded initialization.
fn eval_store(
    teacher_path: &Path,
    ckpt: Option<&PathBuf>,
    model: &mut ModelConfig,
    seed: u64,
    need_student: bool,
) -> Result<ParamStore> {
    let (_, teacher) = load_checkpoint::<Scalar>(teacher_path)?;
    let mut params = ParamStore::new();
    for (name, p) in teacher.iter() {
        if name.starts_with("teacher.") {
            params.insert(name, p.value.clone(), false)?;
        }
    }
    let inferred = ModelConfig::infer_from_store(&params)?;
    model.teacher_channels = inferred.teacher_channels;
    match ckpt {
        Some(path) => {
            let (_, student) = load_checkpoint::<Scalar>(path)?;
            for (name, p) in student.iter() {
                if name.starts_with("upl.") || name.starts_with("student.") {
                    params.insert(name, p.value.clone(), false)?;
                }
            }
            let full = ModelConfig::infer_from_store(&params)?;
            model.embed_dim = full.embed_dim;
            if params.contains("student.mlp0.weight") {
                model.student_widths = full.student_widths;
            }
        }
        None => {
            let mut rng = Rng::new(seed, 7 << 40);
            models::init_upl(&mut params, model, &mut rng)?;
            if need_student {
                models::init_student(&mut params, model, None, &mut rng)?;
            }
        }
    }
    if need_student && !params.contains("student.mlp0.weight") {
        return Err(Error::InvalidArgument(
            "checkpoint does not contain student parameters".into(),
        ));
    }
    model.validate()?;
    Ok(params)
}

fn eval_retrieval(args: EvalRetrievalArgs) -> Result<ExitCode> {
    let dataset = synthdata::read_dataset::<Scalar>(&args.data)?;
    let mut model = ModelConfig::default();
    let mut unused = TrainConfig::default();
    args.model.apply(&mut unused, &mut model)?;
    let params = eval_store(&args.teacher, args.ckpt.as_ref(), &mut model, args.seed, true)?;
    let cfg = PipelineConfig {
        model,
        voxel_size: args.voxel_size,
        pairs_per_frame: args.pairs,
        student_points: args.student_points,
        kd_temp: 4.0,
        cross_frame_negatives: false,
        train_teacher: false,
    };
    let report = evalkit::retrieval_top1(&dataset.frames, &params, &cfg, args.seed)?;
    if report.frames_skipped > 0 {
        eprintln!(
            "warning: {} of {} frames skipped (not enough valid points)",
            report.frames_skipped,
            dataset.len()
        );
    }
    println!(
        "retrieval top-1 accuracy {:.6} over {} anchors in {} frames (chance {:.6})",
        report.accuracy,
        report.anchors,
        report.frames_used,
        1.0 / args.pairs as f64
    );
    if let Some(path) = &args.metrics {
        let rows = vec![
            MetricsRow::new("retrieval_top1", "held-out", report.accuracy)
                .with_context(format!("pairs={}", args.pairs)),
            MetricsRow::new("retrieval_anchors", "held-out", report.anchors as Scalar),
            MetricsRow::new("retrieval_frames", "held-out", report.frames_used as Scalar),
        ];
        evalkit::export_metrics(&rows, path)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn probe(args: ProbeArgs) -> Result<ExitCode> {
    let train = synthdata::read_dataset::<Scalar>(&args.train)?;
    let eval = synthdata::read_dataset::<Scalar>(&args.eval)?;
    let mut model = ModelConfig::default();
    let mut unused = TrainConfig::default();
    args.model.apply(&mut unused, &mut model)?;

    let student: Option<ParamStore> = match &args.ckpt {
        Some(path) => {
            let (_, store) = load_checkpoint::<Scalar>(path)?;
            let mut params = ParamStore::new();
            for (name, p) in store.iter() {
                if name.starts_with("student.") {
                    params.insert(name, p.value.clone(), false)?;
                }
            }
            if params.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{} holds no student parameters",
                    path.display()
                )));
            }
            let inferred = ModelConfig::infer_from_store(&params)?;
            model.student_widths = inferred.student_widths;
            model.embed_dim = inferred.embed_dim;
            Some(params)
        }
        None => None,
    };

    let cfg = ProbeConfig {
        steps: args.steps,
        lr0: args.lr0,
        labeled_fraction: args.fraction,
        points_per_frame: args.points_per_frame,
        seed: args.seed,
        fine_tune: args.fine_tune,
        ..ProbeConfig::default()
    };
    let report = evalkit::linear_probe(
        &train,
        &eval,
        student.as_ref(),
        &model,
        args.voxel_size,
        &cfg,
    )?;
    println!(
        "probe ({}) at fraction {:.2}: mean IoU {:.4}, mean acc {:.4}, overall acc {:.4} over {} points",
        if args.ckpt.is_some() { "pretrained" } else { "scratch" },
        args.fraction,
        report.mean_iou,
        report.mean_acc,
        report.overall_acc,
        report.points_evaluated
    );
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("  class {c}: IoU {v:.4}"),
            None => println!("  class {c}: absent from held-out split"),
        }
    }
    if !report.missing_train_classes.is_empty() {
        println!(
            "  note: classes {:?} had no labeled training points",
            report.missing_train_classes
        );
    }
    if let Some(path) = &args.metrics {
        let ctx = format!("fraction={}", args.fraction);
        let mut rows = vec![
            MetricsRow::new("mean_iou", "held-out", report.mean_iou).with_context(ctx.clone()),
            MetricsRow::new("mean_acc", "held-out", report.mean_acc).with_context(ctx.clone()),
            MetricsRow::new("overall_acc", "held-out", report.overall_acc).with_context(ctx),
        ];
        for (c, iou) in report.per_class_iou.iter().enumerate() {
            if let Some(v) = iou {
                rows.push(
                    MetricsRow::new(&format!("class{c}_iou"), "held-out", *v),
                );
            }
        }
        evalkit::export_metrics(&rows, path)?;
    }
    if let Some(path) = &args.dump_embeddings {
        let params = match &student {
            Some(p) => p.clone(),
            None => {
                let mut fresh = ParamStore::new();
                models::init_student(&mut fresh, &model, None, &mut Rng::new(args.seed, 12 << 48))?;
                fresh
            }
        };
        let mut all_rows: Vec<DenseArray> = Vec::new();
        let mut all_labels = Vec::new();
        for (i, frame) in eval.frames.iter().enumerate() {
            let mut rng = Rng::new(args.seed, (16 << 48) + i as u64);
            let (z, labels) = transfer::frame_point_embeddings(
                frame,
                &params,
                args.voxel_size,
                args.points_per_frame,
                &mut rng,
            )?;
            all_rows.push(z);
            all_labels.extend(labels);
        }
        let c = all_rows[0].row_len();
        let mut data = Vec::new();
        for block in &all_rows {
            data.extend_from_slice(block.data());
        }
        let stacked = GenericArray::from_vec(&[all_labels.len(), c], data)?;
        evalkit::export_embeddings(&stacked, &all_labels, path)?;
        println!("wrote {} embedding rows to {}", all_labels.len(), path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn diversity(args: DiversityArgs) -> Result<ExitCode> {
    let dataset = synthdata::read_dataset::<Scalar>(&args.data)?;
    if dataset.len() < args.frames {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} frames but {} were requested",
            dataset.len(),
            args.frames
        )));
    }
    let mut model = ModelConfig::default();
    let mut unused = TrainConfig::default();
    args.model.apply(&mut unused, &mut model)?;
    let params = eval_store(&args.teacher, args.ckpt.as_ref(), &mut model, args.seed, false)?;
    let cfg = PipelineConfig {
        model,
        voxel_size: 0.025,
        pairs_per_frame: 2,
        student_points: 2,
        kd_temp: 4.0,
        cross_frame_negatives: false,
        train_teacher: false,
    };
    let report = evalkit::feature_diversity(
        &dataset.frames[..args.frames],
        &params,
        &cfg,
        args.samples,
        args.seed,
    )?;
    println!(
        "global_mean_cos {:.6} vs pixel_mean_cos {:.6} over {} frames / {} pixels",
        report.global_mean_cos, report.pixel_mean_cos, report.frames, report.pixels_sampled
    );
    println!(
        "pixel features are {} diverse than global features",
        if report.pixel_mean_cos < report.global_mean_cos {
            "more"
        } else {
            "NOT more"
        }
    );
    if let Some(path) = &args.metrics {
        let rows = vec![
            MetricsRow::new("global_mean_cos", "held-out", report.global_mean_cos),
            MetricsRow::new("pixel_mean_cos", "held-out", report.pixel_mean_cos),
        ];
        evalkit::export_metrics(&rows, path)?;
    }
    Ok(ExitCode::SUCCESS)
}
