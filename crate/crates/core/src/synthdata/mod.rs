//! Synthetic labeled RGB-D scenes: colored axis-aligned boxes ray-cast
//! through a pinhole camera, plus the on-disk dataset format.
//!
//! World coordinates share the camera handedness (+X right, +Y down,
//! +Z forward), so the floor sits at y = 0 and "up" is negative y.

mod io;

pub use io::{read_dataset, read_frame, write_dataset, write_frame, Dataset};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::DenseArray;

/// Default number of semantic classes (class 0 is the floor).
pub const DEFAULT_CLASS_COUNT: usize = 6;

/// One colored axis-aligned box with a semantic class.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox<F> {
    pub min: [F; 3],
    pub max: [F; 3],
    pub color: [F; 3],
    pub class_id: usize,
}

impl<F: Real> SceneBox<F> {
    pub fn contains(&self, p: &[F; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn center(&self) -> [F; 3] {
        let half = F::of(0.5);
        [
            (self.min[0] + self.max[0]) * half,
            (self.min[1] + self.max[1]) * half,
            (self.min[2] + self.max[2]) * half,
        ]
    }

    /// Unsigned distance from `p` to the box surface (0 on the surface).
    pub fn surface_distance(&self, p: &[F; 3]) -> F {
        let mut outside = F::zero();
        let mut inside = F::neg_infinity();
        for k in 0..3 {
            let d_lo = self.min[k] - p[k];
            let d_hi = p[k] - self.max[k];
            let d = d_lo.max(d_hi); // negative when inside along this axis
            if d > F::zero() {
                outside = outside + d * d;
            }
            inside = inside.max(d);
        }
        if outside > F::zero() {
            outside.sqrt()
        } else {
            // Inside: distance to the nearest face.
            -inside
        }
    }
}

/// A room: floor slab plus objects, all inside `bounds`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec<F> {
    pub boxes: Vec<SceneBox<F>>,
    pub bounds_min: [F; 3],
    pub bounds_max: [F; 3],
    pub class_count: usize,
}

/// Camera placement as position plus look-at target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<F> {
    pub position: [F; 3],
    pub target: [F; 3],
}

/// One rendered view: color in `[0,1]`, z-depth in meters (0 = miss),
/// per-pixel class labels (-1 = miss), and the intrinsics used.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame<F> {
    pub color: DenseArray<F>,
    pub depth: DenseArray<F>,
    pub labels: Vec<i64>,
    pub intr: CameraIntrinsics<F>,
}

impl<F: Real> RgbdFrame<F> {
    pub fn width(&self) -> usize {
        self.intr.width
    }

    pub fn height(&self) -> usize {
        self.intr.height
    }
}

/// Default toy intrinsics: 64x48 image, f = 60 px, principal point centered.
pub fn default_intrinsics<F: Real>() -> CameraIntrinsics<F> {
    CameraIntrinsics {
        fx: F::of(60.0),
        fy: F::of(60.0),
        cx: F::of(31.5),
        cy: F::of(23.5),
        width: 64,
        height: 48,
    }
}

/// Base palette: one hue per class, jittered per box at generation time so
/// color correlates with class without determining it.
fn class_base_color(class_id: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.45], // floor: gray
        [0.75, 0.25, 0.20], // red
        [0.20, 0.55, 0.75], // blue
        [0.25, 0.65, 0.30], // green
        [0.80, 0.65, 0.20], // yellow
        [0.60, 0.30, 0.65], // purple
        [0.75, 0.45, 0.20], // orange
        [0.30, 0.65, 0.60], // teal
    ];
    PALETTE[class_id % PALETTE.len()]
}

fn jittered_color<F: Real>(class_id: usize, rng: &mut Rng) -> [F; 3] {
    let base = class_base_color(class_id);
    let mut out = [F::zero(); 3];
    for k in 0..3 {
        let v = base[k] + rng.uniform_in(-0.15, 0.15);
        out[k] = F::of(v.clamp(0.05, 0.98));
    }
    out
}

/// Builds a floor slab plus `box_count` random boxes resting on it.
///
/// Box classes are drawn from `1..class_count`, colors from per-class
/// distributions. Fully determined by `rng`.
pub fn generate_scene<F: Real>(rng: &mut Rng, box_count: usize, class_count: usize) -> SceneSpec<F> {
    assert!(box_count >= 1, "scene needs at least one box");
    assert!(class_count >= 2, "need the floor class plus one object class");
    let bounds_min = [F::of(-2.0), F::of(-2.4), F::of(-2.0)];
    let bounds_max = [F::of(2.0), F::of(0.1), F::of(2.0)];

    let mut boxes = Vec::with_capacity(box_count + 1);
    // Floor slab: the full footprint, 10 cm thick, top face at y = 0.
    boxes.push(SceneBox {
        min: [bounds_min[0], F::zero(), bounds_min[2]],
        max: [bounds_max[0], F::of(0.1), bounds_max[2]],
        color: jittered_color(0, rng),
        class_id: 0,
    });
    for _ in 0..box_count {
        let class_id = 1 + rng.range(class_count - 1);
        let sx = rng.uniform_in(0.3, 0.9);
        let sy = rng.uniform_in(0.3, 1.2);
        let sz = rng.uniform_in(0.3, 0.9);
        let cx = rng.uniform_in(-2.0 + sx / 2.0 + 0.05, 2.0 - sx / 2.0 - 0.05);
        let cz = rng.uniform_in(-2.0 + sz / 2.0 + 0.05, 2.0 - sz / 2.0 - 0.05);
        boxes.push(SceneBox {
            min: [F::of(cx - sx / 2.0), F::of(-sy), F::of(cz - sz / 2.0)],
            max: [F::of(cx + sx / 2.0), F::zero(), F::of(cz + sz / 2.0)],
            color: jittered_color(class_id, rng),
            class_id,
        });
    }
    SceneSpec {
        boxes,
        bounds_min,
        bounds_max,
        class_count,
    }
}

/// Draws a camera position in free space looking at a random object box.
pub fn sample_camera_pose<F: Real>(scene: &SceneSpec<F>, rng: &mut Rng) -> CameraPose<F> {
    let objects: Vec<usize> = (1..scene.boxes.len()).collect();
    loop {
        let p = [
            rng.uniform_in(scene.bounds_min[0].widen() + 0.1, scene.bounds_max[0].widen() - 0.1),
            rng.uniform_in(-2.2, -0.4),
            rng.uniform_in(scene.bounds_min[2].widen() + 0.1, scene.bounds_max[2].widen() - 0.1),
        ];
        let position = [F::of(p[0]), F::of(p[1]), F::of(p[2])];
        if scene.boxes.iter().any(|b| b.contains(&position)) {
            continue;
        }
        let target_box = if objects.is_empty() {
            0
        } else {
            objects[rng.range(objects.len())]
        };
        let target = scene.boxes[target_box].center();
        return CameraPose { position, target };
    }
}

/// Rotation from camera frame to world, encoded as three column vectors
/// (right, down, forward).
fn look_at_rotation<F: Real>(pose: &CameraPose<F>) -> Result<[[F; 3]; 3]> {
    let mut forward = [F::zero(); 3];
    let mut norm = F::zero();
    for k in 0..3 {
        forward[k] = pose.target[k] - pose.position[k];
        norm = norm + forward[k] * forward[k];
    }
    let norm = norm.sqrt();
    if norm <= F::of(1e-9) {
        return Err(Error::InvalidArgument(
            "camera look-at target coincides with the camera position".into(),
        ));
    }
    for f in forward.iter_mut() {
        *f = *f / norm;
    }
    // World down is +Y. If the view direction is nearly vertical, fall back
    // to +Z as the hint.
    let hint = if forward[1].abs() > F::of(0.999) {
        [F::zero(), F::zero(), F::one()]
    } else {
        [F::zero(), F::one(), F::zero()]
    };
    // right = hint x forward
    let mut right = [
        hint[1] * forward[2] - hint[2] * forward[1],
        hint[2] * forward[0] - hint[0] * forward[2],
        hint[0] * forward[1] - hint[1] * forward[0],
    ];
    let rn = (right[0] * right[0] + right[1] * right[1] + right[2] * right[2]).sqrt();
    for r in right.iter_mut() {
        *r = *r / rn;
    }
    // down = forward x right
    let down = [
        forward[1] * right[2] - forward[2] * right[1],
        forward[2] * right[0] - forward[0] * right[2],
        forward[0] * right[1] - forward[1] * right[0],
    ];
    Ok([right, down, forward])
}

/// Slab-method ray/AABB intersection: entering parameter and face axis.
fn ray_box_entry<F: Real>(
    origin: &[F; 3],
    dir: &[F; 3],
    b: &SceneBox<F>,
) -> Option<(F, usize, bool)> {
    let mut t_enter = F::neg_infinity();
    let mut t_exit = F::infinity();
    let mut axis = 0usize;
    let mut from_min = true;
    for k in 0..3 {
        if dir[k] == F::zero() {
            if origin[k] < b.min[k] || origin[k] > b.max[k] {
                return None;
            }
            continue;
        }
        let inv = F::one() / dir[k];
        let (mut t0, mut t1) = ((b.min[k] - origin[k]) * inv, (b.max[k] - origin[k]) * inv);
        let mut lo_is_min = true;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            lo_is_min = false;
        }
        if t0 > t_enter {
            t_enter = t0;
            axis = k;
            from_min = lo_is_min;
        }
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_enter.is_finite() && t_enter > F::of(1e-6) {
        Some((t_enter, axis, from_min))
    } else {
        None
    }
}

/// Renders one frame by casting a ray through every pixel.
///
/// Depth is the z-component of the hit point in the camera frame, so pixels
/// on a plane parallel to the image share one depth. Color is the box color
/// modulated by a diffuse factor in `[0.6, 1.0]` from the hit face normal,
/// plus optional Gaussian noise; it is quantized to 8 bits so frames are
/// bit-identical to their on-disk image. Depth is rounded through `f32`
/// for the same reason.
pub fn render_frame<F: Real>(
    scene: &SceneSpec<F>,
    pose: &CameraPose<F>,
    intr: &CameraIntrinsics<F>,
    noise_sigma: F,
    rng: &mut Rng,
) -> Result<RgbdFrame<F>> {
    intr.validate()?;
    if noise_sigma < F::zero() {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be non-negative, got {noise_sigma}"
        )));
    }
    let rot = look_at_rotation(pose)?;
    let (w, h) = (intr.width, intr.height);
    let mut color = DenseArray::zeros(&[h, w, 3]);
    let mut depth = DenseArray::zeros(&[h, w]);
    let mut labels = vec![-1i64; h * w];

    // Fixed world-space light direction (unit length).
    let light = {
        let l = [0.35f64, -0.85, 0.45];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [F::of(l[0] / n), F::of(l[1] / n), F::of(l[2] / n)]
    };

    for v in 0..h {
        for u in 0..w {
            // Camera-frame direction with unit z, rotated into the world.
            let dc = [
                (F::of(u as f64) - intr.cx) / intr.fx,
                (F::of(v as f64) - intr.cy) / intr.fy,
                F::one(),
            ];
            let dir = [
                rot[0][0] * dc[0] + rot[1][0] * dc[1] + rot[2][0] * dc[2],
                rot[0][1] * dc[0] + rot[1][1] * dc[1] + rot[2][1] * dc[2],
                rot[0][2] * dc[0] + rot[1][2] * dc[1] + rot[2][2] * dc[2],
            ];
            let mut best: Option<(F, usize, usize, bool)> = None;
            for (bi, b) in scene.boxes.iter().enumerate() {
                if let Some((t, axis, from_min)) = ray_box_entry(&pose.position, &dir, b) {
                    if best.map_or(true, |(bt, _, _, _)| t < bt) {
                        best = Some((t, bi, axis, from_min));
                    }
                }
            }
            let Some((t, bi, axis, from_min)) = best else {
                continue;
            };
            // Unit-z camera direction makes the ray parameter the z-depth.
            let d32 = t.widen() as f32;
            depth.set2(v, u, F::of(d32 as f64));
            labels[v * w + u] = scene.boxes[bi].class_id as i64;

            let mut normal = [F::zero(); 3];
            normal[axis] = if from_min { -F::one() } else { F::one() };
            let ndotl = (normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]).abs();
            let shade = F::of(0.6) + F::of(0.4) * ndotl;
            for ch in 0..3 {
                let mut c = scene.boxes[bi].color[ch] * shade;
                if noise_sigma > F::zero() {
                    c = c + noise_sigma * rng.normal::<F>();
                }
                let c = c.max(F::zero()).min(F::one());
                // Quantize to the file format's 8-bit color.
                let q = (c.widen() * 255.0).round() / 255.0;
                color.set3(v, u, ch, F::of(q));
            }
        }
    }
    Ok(RgbdFrame {
        color,
        depth,
        labels,
        intr: *intr,
    })
}

/// Renders a frame and retries the pose until at least `min_valid` pixels
/// hit geometry. Used by dataset generation to avoid starved views.
pub fn render_well_covered_frame<F: Real>(
    scene: &SceneSpec<F>,
    intr: &CameraIntrinsics<F>,
    noise_sigma: F,
    min_valid: usize,
    pose_rng: &mut Rng,
    noise_rng: &mut Rng,
) -> Result<(RgbdFrame<F>, CameraPose<F>)> {
    for _ in 0..256 {
        let pose = sample_camera_pose(scene, pose_rng);
        let frame = render_frame(scene, &pose, intr, noise_sigma, noise_rng)?;
        let valid = frame.depth.data().iter().filter(|&&d| d > F::zero()).count();
        if valid >= min_valid {
            return Ok((frame, pose));
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not find a camera pose with at least {min_valid} valid pixels"
    )))
}
