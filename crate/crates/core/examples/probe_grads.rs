use ppkt_core::models;
use ppkt_core::synthdata;
use ppkt_core::trainer::load_checkpoint;
use ppkt_core::transfer::{self, LossKind, PipelineConfig};
use ppkt_core::{ModelConfig, ParamStore, Rng, Scalar};

fn main() {
    let (_, teacher) = load_checkpoint::<Scalar>(std::path::Path::new("/tmp/teacher.ckpt")).unwrap();
    let mut params = ParamStore::new();
    for (name, p) in teacher.iter() {
        if name.starts_with("teacher.") {
            params.insert(name, p.value.clone(), false).unwrap();
        }
    }
    let model = ModelConfig::default();
    let mut rng = Rng::new(3, 1 << 48);
    models::init_upl(&mut params, &model, &mut rng).unwrap();
    models::init_student(&mut params, &model, None, &mut rng).unwrap();

    let ds = synthdata::read_dataset::<Scalar>(std::path::Path::new("/tmp/ppkt_train256")).unwrap();
    let cfg = PipelineConfig {
        model,
        voxel_size: 0.025,
        pairs_per_frame: 256,
        student_points: 512,
        kd_temp: 4.0,
        cross_frame_negatives: false,
        train_teacher: false,
    };
    let frames: Vec<_> = (0..8).map(|i| &ds.frames[i]).collect();
    let keys: Vec<(u64, u64)> = (0..8).map(|s| (3u64, (3u64 << 48) + s)).collect();
    let stats = transfer::train_batch(&frames, &mut params, &cfg, LossKind::Ppnce, &keys, true).unwrap();
    println!("loss_sum {:.3} loss_mean {:.5} pos_sim {:.4}", stats.loss_sum, stats.loss_mean(), stats.pos_sim_mean());
    for (name, p) in params.iter() {
        if p.trainable {
            let gnorm: Scalar = p.grad.data().iter().map(|g| g * g).sum::<Scalar>().sqrt();
            let vnorm: Scalar = p.value.data().iter().map(|v| v * v).sum::<Scalar>().sqrt();
            println!("{name:28} |val| {vnorm:9.4}  |grad| {gnorm:10.4}  ratio {:.2e}", gnorm / vnorm);
        }
    }
}
