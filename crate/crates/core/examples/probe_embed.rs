use ppkt_core::models;
use ppkt_core::synthdata;
use ppkt_core::trainer::load_checkpoint;
use ppkt_core::transfer::{self, PipelineConfig};
use ppkt_core::{ModelConfig, ParamStore, Rng, Scalar};

fn row_stats(m: &ppkt_core::DenseArray, name: &str) {
    let n = m.rows().min(200);
    let mut cos_sum = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: Scalar = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            cos_sum += dot;
            pairs += 1;
        }
    }
    println!("{name}: mean pairwise dot (unit rows) = {:.4}", cos_sum / pairs as Scalar);
}

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

    let ds = synthdata::read_dataset::<Scalar>(std::path::Path::new("/tmp/ppkt_eval64")).unwrap();
    let cfg = PipelineConfig {
        model,
        voxel_size: 0.025,
        pairs_per_frame: 256,
        student_points: 512,
        kd_temp: 4.0,
        cross_frame_negatives: false,
        train_teacher: false,
    };
    let frame = &ds.frames[0];
    let (z3, z2, _) = transfer::frame_pair_embeddings(frame, &params, &cfg, &mut Rng::new(9, 0)).unwrap();
    row_stats(&z3, "z3 (student, init)");
    row_stats(&z2, "z2 (upl of trained teacher, init)");

    // Logit spread for the first few anchors.
    for i in 0..3 {
        let dots: Vec<Scalar> = (0..z2.rows())
            .map(|j| z3.row(i).iter().zip(z2.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        let mn = dots.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = dots.iter().sum::<Scalar>() / dots.len() as Scalar;
        println!("anchor {i}: dot mean {mean:.4}, range [{mn:.4}, {mx:.4}], /tau range {:.2}", (mx - mn) / 0.04);
    }

    // Teacher feature map statistics.
    let map = models::teacher_forward(&frame.color, &params, &cfg.model).unwrap();
    let rows = map.clone().with_shape(&[48, 64]).unwrap();
    let norm_rows = ppkt_core::ops::l2_normalize_rows(&rows, 1e-12).unwrap();
    row_stats(&norm_rows, "teacher featmap cells (normalized)");
}
