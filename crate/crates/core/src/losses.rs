//! Training objectives: the point-pixel contrastive loss, per-point
//! distillation, the global baselines, and cross-entropy.
//!
//! Each loss returns its scalar value, per-pair contributions for
//! diagnostics, and cotangents for its array arguments. A zero cotangent
//! marks a detached side.

use crate::error::{Error, Result};
use crate::ops::{mean_rows, mean_rows_backward, softmax_rows};
use crate::real::Real;
use crate::tensor::DenseArray;

/// Value plus gradients of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    /// Canonical scalar value (a plain sum over contributions).
    pub value: F,
    /// Per-pair (or per-row) contributions; they sum to `value`.
    pub per_pair: Vec<F>,
    /// Cotangent of the first array argument.
    pub grad_first: DenseArray<F>,
    /// Cotangent of the second array argument; all zeros when that side is
    /// detached, empty (`[0]`) when the loss has a single array argument.
    pub grad_second: DenseArray<F>,
}

fn check_pair_shapes<F: Real>(a: &DenseArray<F>, b: &DenseArray<F>, what: &str) -> Result<(usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what} operands must share an MxC shape, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Log-sum-exp of a row with max subtraction; the exponentials are summed
/// in ascending order so the result is independent of element order.
fn log_sum_exp_sorted<F: Real>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut exps: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
    exps.sort_by(|a, b| a.widen().total_cmp(&b.widen()));
    let sum: F = exps.iter().copied().sum();
    m + sum.ln()
}

/// Point-pixel contrastive loss.
///
/// Row `i` of `z3d` (3D anchor) and `z2d` (its pixel) form the positive
/// pair; the softmax denominator ranges over the 2D rows only:
/// `value = -sum_i log( exp(z3d_i . z2d_i / tau) / sum_j exp(z3d_i . z2d_j / tau) )`.
/// Gradients flow to both embedding matrices.
pub fn ppnce<F: Real>(z3d: &DenseArray<F>, z2d: &DenseArray<F>, tau: F) -> Result<LossOutput<F>> {
    let (m, _c) = check_pair_shapes(z3d, z2d, "ppnce")?;
    if m == 0 {
        return Err(Error::InvalidArgument("ppnce needs at least one pair".into()));
    }
    if tau <= F::zero() {
        return Err(Error::InvalidArgument(format!(
            "ppnce temperature must be positive, got {tau}"
        )));
    }
    let mut logits = z3d.matmul_nt(z2d)?;
    let inv_tau = F::one() / tau;
    logits.scale(inv_tau);

    let mut per_pair = Vec::with_capacity(m);
    let mut value = F::zero();
    for i in 0..m {
        let row = logits.row(i);
        let term = log_sum_exp_sorted(row) - row[i];
        per_pair.push(term);
        value = value + term;
    }

    // d value / d logits = softmax(logits) - I.
    let mut grad_logits = softmax_rows(&logits);
    for i in 0..m {
        let v = grad_logits.get2(i, i) - F::one();
        grad_logits.set2(i, i, v);
    }
    let mut grad_z3d = grad_logits.matmul(z2d)?;
    grad_z3d.scale(inv_tau);
    let mut grad_z2d = grad_logits.matmul_tn(z3d)?;
    grad_z2d.scale(inv_tau);

    Ok(LossOutput {
        value,
        per_pair,
        grad_first: grad_z3d,
        grad_second: grad_z2d,
    })
}

/// Per-point knowledge distillation: temperature-scaled KL divergence from
/// teacher to student class distributions, summed over rows and scaled by
/// `kd_temp^2`. Gradients flow only to the student logits.
pub fn ppkd<F: Real>(
    teacher_logits: &DenseArray<F>,
    student_logits: &DenseArray<F>,
    kd_temp: F,
) -> Result<LossOutput<F>> {
    let (m, k) = check_pair_shapes(teacher_logits, student_logits, "ppkd")?;
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "ppkd needs at least 2 classes, got {k}"
        )));
    }
    if kd_temp <= F::zero() {
        return Err(Error::InvalidArgument(format!(
            "ppkd temperature must be positive, got {kd_temp}"
        )));
    }
    let inv_t = F::one() / kd_temp;
    let t2 = kd_temp * kd_temp;
    let mut scaled_t = teacher_logits.clone();
    scaled_t.scale(inv_t);
    let mut scaled_s = student_logits.clone();
    scaled_s.scale(inv_t);
    let pt = softmax_rows(&scaled_t);
    let ps = softmax_rows(&scaled_s);

    let mut per_pair = Vec::with_capacity(m);
    let mut value = F::zero();
    for i in 0..m {
        let lse_t = log_sum_exp_sorted(scaled_t.row(i));
        let lse_s = log_sum_exp_sorted(scaled_s.row(i));
        let mut kl = F::zero();
        for j in 0..k {
            let p = pt.get2(i, j);
            if p > F::zero() {
                let log_t = scaled_t.get2(i, j) - lse_t;
                let log_s = scaled_s.get2(i, j) - lse_s;
                kl = kl + p * (log_t - log_s);
            }
        }
        let term = t2 * kl;
        per_pair.push(term);
        value = value + term;
    }

    // d/ds [T^2 * KL] = T * (softmax(s/T) - softmax(t/T)).
    let mut grad_student = DenseArray::zeros(student_logits.shape());
    for i in 0..m {
        for j in 0..k {
            grad_student.set2(i, j, kd_temp * (ps.get2(i, j) - pt.get2(i, j)));
        }
    }
    Ok(LossOutput {
        value,
        per_pair,
        grad_first: DenseArray::zeros(teacher_logits.shape()),
        grad_second: grad_student,
    })
}

fn normalize_vec<F: Real>(v: &DenseArray<F>, eps: F) -> (DenseArray<F>, F) {
    let norm = v.data().iter().map(|&x| x * x).sum::<F>().sqrt();
    let denom = norm.max(eps);
    (v.map(|x| x / denom), norm)
}

fn normalize_vec_backward<F: Real>(v: &DenseArray<F>, norm: F, eps: F, grad: &DenseArray<F>) -> DenseArray<F> {
    if norm > eps {
        let mut gy = F::zero();
        for (g, x) in grad.data().iter().zip(v.data()) {
            gy = gy + *g * *x / norm;
        }
        DenseArray::from_fn(v.shape(), |i| {
            (grad.data()[i] - v.data()[i] / norm * gy) / norm
        })
    } else {
        grad.map(|g| g / eps)
    }
}

const GLOBAL_EPS: f64 = 1e-12;

/// Global L2 baseline: mean-pool each side over rows, L2-normalize, return
/// the squared Euclidean distance. The 2D side is detached.
pub fn global_l2<F: Real>(z3d: &DenseArray<F>, z2d: &DenseArray<F>) -> Result<LossOutput<F>> {
    let (m, _c) = check_pair_shapes(z3d, z2d, "global_l2")?;
    if m == 0 {
        return Err(Error::InvalidArgument("global_l2 needs at least one row".into()));
    }
    let eps = F::of(GLOBAL_EPS);
    let pooled3 = mean_rows(z3d);
    let pooled2 = mean_rows(z2d);
    let (a, norm3) = normalize_vec(&pooled3, eps);
    let (b, _) = normalize_vec(&pooled2, eps);
    let mut value = F::zero();
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x - *y;
        value = value + d * d;
    }
    // d value / d a = 2 (a - b), then back through the normalization and pooling.
    let grad_a = DenseArray::from_fn(a.shape(), |i| {
        F::of(2.0) * (a.data()[i] - b.data()[i])
    });
    let grad_pooled3 = normalize_vec_backward(&pooled3, norm3, eps, &grad_a);
    let grad_z3d = mean_rows_backward(m, &grad_pooled3);
    Ok(LossOutput {
        value,
        per_pair: vec![value],
        grad_first: grad_z3d,
        grad_second: DenseArray::zeros(z2d.shape()),
    })
}

/// Frame-level contrastive baseline: the point-pixel loss applied to
/// pre-pooled per-frame rows, with the 2D side detached.
pub fn global_nce<F: Real>(
    pooled3d: &DenseArray<F>,
    pooled2d: &DenseArray<F>,
    tau: F,
) -> Result<LossOutput<F>> {
    let (b, _c) = check_pair_shapes(pooled3d, pooled2d, "global_nce")?;
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "global_nce needs at least 2 frames in the batch for negatives, got {b}"
        )));
    }
    let mut out = ppnce(pooled3d, pooled2d, tau)?;
    out.grad_second = DenseArray::zeros(pooled2d.shape());
    Ok(out)
}

/// Mean negative log softmax over rows whose label differs from
/// `ignore_label`. Contributions are pre-divided by the labeled-row count
/// so they sum to the value.
pub fn cross_entropy<F: Real>(
    logits: &DenseArray<F>,
    labels: &[i64],
    ignore_label: i64,
) -> Result<LossOutput<F>> {
    if logits.ndim() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy logits must be NxK, got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != ignore_label && !(0..k as i64).contains(&l) {
            return Err(Error::InvalidArgument(format!(
                "label {l} at row {i} outside 0..{k}"
            )));
        }
    }
    let count = labels.iter().filter(|&&l| l != ignore_label).count();
    if count == 0 {
        return Err(Error::InvalidArgument(
            "cross_entropy: every label is ignored".into(),
        ));
    }
    let inv = F::one() / F::of(count as f64);
    let probs = softmax_rows(logits);
    let mut per_pair = vec![F::zero(); n];
    let mut value = F::zero();
    let mut grad = DenseArray::zeros(logits.shape());
    for i in 0..n {
        let label = labels[i];
        if label == ignore_label {
            continue;
        }
        let row = logits.row(i);
        let lse = log_sum_exp_sorted(row);
        let term = (lse - row[label as usize]) * inv;
        per_pair[i] = term;
        value = value + term;
        for j in 0..k {
            let delta = if j as i64 == label { F::one() } else { F::zero() };
            grad.set2(i, j, (probs.get2(i, j) - delta) * inv);
        }
    }
    Ok(LossOutput {
        value,
        per_pair,
        grad_first: grad,
        grad_second: DenseArray::zeros(&[0]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::ops::l2_normalize_rows;
    use crate::params::ParamStore;
    use crate::rng::Rng;

    fn unit_rows(m: usize, c: usize, rng: &mut Rng) -> DenseArray<f64> {
        let raw = DenseArray::from_fn(&[m, c], |_| rng.uniform_in(-1.0, 1.0));
        l2_normalize_rows(&raw, 1e-12).unwrap()
    }

    /// Independent O(M^2) double-loop evaluation of the contrastive loss.
    fn ppnce_naive(z3d: &DenseArray<f64>, z2d: &DenseArray<f64>, tau: f64) -> f64 {
        let (m, c) = (z3d.shape()[0], z3d.shape()[1]);
        let mut total = 0.0;
        for i in 0..m {
            let dot = |a: &[f64], b: &[f64]| -> f64 { (0..c).map(|k| a[k] * b[k]).sum() };
            let pos = (dot(z3d.row(i), z2d.row(i)) / tau).exp();
            let mut denom = 0.0;
            for j in 0..m {
                denom += (dot(z3d.row(i), z2d.row(j)) / tau).exp();
            }
            total += -(pos / denom).ln();
        }
        total
    }

    #[test]
    fn ppnce_singleton_is_zero() {
        let mut rng = Rng::new(1, 0);
        let a = unit_rows(1, 8, &mut rng);
        let b = unit_rows(1, 8, &mut rng);
        let out = ppnce(&a, &b, 0.04).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.per_pair, vec![0.0]);
    }

    #[test]
    fn ppnce_identical_rows_give_m_ln_m() {
        let m = 12;
        let mut row = vec![0.0; 6];
        row[2] = 0.6;
        row[4] = 0.8;
        let z3 = DenseArray::from_fn(&[m, 6], |i| row[i % 6]);
        let z2 = z3.clone();
        let out = ppnce(&z3, &z2, 0.04).unwrap();
        let want = m as f64 * (m as f64).ln();
        assert!((out.value - want).abs() < 1e-9, "{} vs {want}", out.value);
    }

    #[test]
    fn ppnce_matches_double_loop_oracle() {
        let mut rng = Rng::new(2, 0);
        let z3 = unit_rows(32, 16, &mut rng);
        let z2 = unit_rows(32, 16, &mut rng);
        let out = ppnce(&z3, &z2, 0.04).unwrap();
        let want = ppnce_naive(&z3, &z2, 0.04);
        assert!((out.value - want).abs() < 1e-10, "{} vs {want}", out.value);
        let pair_sum: f64 = out.per_pair.iter().sum();
        assert!((pair_sum - out.value).abs() < 1e-9);
    }

    #[test]
    fn ppnce_rejects_degenerate_inputs() {
        let a = DenseArray::<f64>::zeros(&[0, 4]);
        assert!(ppnce(&a, &a, 0.04).is_err());
        let b = DenseArray::<f64>::zeros(&[2, 4]);
        assert!(ppnce(&b, &b, 0.0).is_err());
        assert!(ppnce(&b, &b, -1.0).is_err());
    }

    #[test]
    fn ppnce_value_is_permutation_invariant_after_sorting() {
        let mut rng = Rng::new(3, 0);
        let m = 24;
        let z3 = unit_rows(m, 8, &mut rng);
        let z2 = unit_rows(m, 8, &mut rng);
        let base = ppnce(&z3, &z2, 0.04).unwrap();

        let mut perm: Vec<usize> = (0..m).collect();
        Rng::new(4, 0).shuffle(&mut perm);
        let gather = |x: &DenseArray<f64>| crate::ops::gather_rows(x, &perm).unwrap();
        let permuted = ppnce(&gather(&z3), &gather(&z2), 0.04).unwrap();

        let sorted_sum = |terms: &[f64]| -> f64 {
            let mut t = terms.to_vec();
            t.sort_by(f64::total_cmp);
            t.iter().sum()
        };
        assert_eq!(
            sorted_sum(&base.per_pair).to_bits(),
            sorted_sum(&permuted.per_pair).to_bits()
        );
    }

    #[test]
    fn ppnce_value_nonnegative_and_infinite_temperature_limit() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed, 0);
            let m = 2 + (seed as usize % 15);
            let z3 = unit_rows(m, 8, &mut rng);
            let z2 = unit_rows(m, 8, &mut rng);
            let out = ppnce(&z3, &z2, 0.04).unwrap();
            assert!(out.value >= 0.0);
            let hot = ppnce(&z3, &z2, 1e9).unwrap();
            let want = m as f64 * (m as f64).ln();
            assert!((hot.value - want).abs() < 1e-6, "{} vs {want}", hot.value);
        }
    }

    #[test]
    fn ppnce_gradients_pass_finite_differences() {
        let mut rng = Rng::new(5, 0);
        let z3 = unit_rows(8, 16, &mut rng);
        let z2 = unit_rows(8, 16, &mut rng);
        let mut params = ParamStore::new();
        params.insert("z3d", z3, true).unwrap();
        params.insert("z2d", z2, true).unwrap();
        let mut loss = |store: &mut ParamStore<f64>, with_grad: bool| -> crate::Result<f64> {
            let out = ppnce(store.value("z3d")?, store.value("z2d")?, 0.5)?;
            if with_grad {
                store.accumulate_grad("z3d", &out.grad_first)?;
                store.accumulate_grad("z2d", &out.grad_second)?;
            }
            Ok(out.value)
        };
        let report = grad_check(&mut loss, &mut params, 1e-6, 64, &mut Rng::new(6, 0)).unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }

    /// Per-row softmax + KL reference for the distillation loss.
    fn ppkd_naive(t: &DenseArray<f64>, s: &DenseArray<f64>, temp: f64) -> f64 {
        let (m, k) = (t.shape()[0], t.shape()[1]);
        let softmax = |row: &[f64]| -> Vec<f64> {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| ((v - mx) / 1.0).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        };
        let mut total = 0.0;
        for i in 0..m {
            let rt: Vec<f64> = t.row(i).iter().map(|v| v / temp).collect();
            let rs: Vec<f64> = s.row(i).iter().map(|v| v / temp).collect();
            let pt = softmax(&rt);
            let ps = softmax(&rs);
            let mut kl = 0.0;
            for j in 0..k {
                if pt[j] > 0.0 {
                    kl += pt[j] * (pt[j].ln() - ps[j].ln());
                }
            }
            total += temp * temp * kl;
        }
        total
    }

    #[test]
    fn ppkd_identical_logits_give_zero() {
        let mut rng = Rng::new(7, 0);
        let t: DenseArray<f64> = DenseArray::from_fn(&[5, 6], |_| rng.uniform_in(-3.0, 3.0));
        let out = ppkd(&t, &t, 4.0).unwrap();
        assert!(out.value.abs() < 1e-12);
        assert!(out.grad_second.data().iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn ppkd_rows_are_nonnegative_and_match_naive() {
        let mut rng = Rng::new(8, 0);
        let t = DenseArray::from_fn(&[16, 6], |_| rng.uniform_in(-4.0, 4.0));
        let s = DenseArray::from_fn(&[16, 6], |_| rng.uniform_in(-4.0, 4.0));
        let out = ppkd(&t, &s, 4.0).unwrap();
        for &term in &out.per_pair {
            assert!(term >= -1e-15);
        }
        let want = ppkd_naive(&t, &s, 4.0);
        assert!((out.value - want).abs() < 1e-10, "{} vs {want}", out.value);
        // Teacher side is detached.
        assert!(out.grad_first.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ppkd_rejects_single_class() {
        let t = DenseArray::<f64>::zeros(&[3, 1]);
        assert!(ppkd(&t, &t, 4.0).is_err());
    }

    #[test]
    fn ppkd_gradients_pass_finite_differences() {
        let mut rng = Rng::new(9, 0);
        let t = DenseArray::from_fn(&[6, 5], |_| rng.uniform_in(-2.0, 2.0));
        let s = DenseArray::from_fn(&[6, 5], |_| rng.uniform_in(-2.0, 2.0));
        let mut params = ParamStore::new();
        params.insert("student", s, true).unwrap();
        let mut loss = |store: &mut ParamStore<f64>, with_grad: bool| -> crate::Result<f64> {
            let out = ppkd(&t, store.value("student")?, 4.0)?;
            if with_grad {
                store.accumulate_grad("student", &out.grad_second)?;
            }
            Ok(out.value)
        };
        let report = grad_check(&mut loss, &mut params, 1e-6, 30, &mut Rng::new(10, 0)).unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }

    #[test]
    fn global_l2_trivial_values() {
        // Identical pooled vectors.
        let a = DenseArray::from_fn(&[4, 3], |i| (i % 3) as f64 + 1.0);
        let out = global_l2(&a, &a).unwrap();
        assert!(out.value.abs() < 1e-12);

        // Antipodal unit vectors pool to antipodal normalized vectors.
        let p = DenseArray::<f64>::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let q = DenseArray::from_vec(&[1, 3], vec![-1.0, 0.0, 0.0]).unwrap();
        let out2 = global_l2(&p, &q).unwrap();
        assert!((out2.value - 4.0).abs() < 1e-12);
        assert!(out2.grad_second.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn global_l2_matches_direct_evaluation() {
        let mut rng = Rng::new(11, 0);
        let a = DenseArray::from_fn(&[7, 5], |_| rng.uniform_in(-1.0, 1.0));
        let b = DenseArray::from_fn(&[7, 5], |_| rng.uniform_in(-1.0, 1.0));
        let out = global_l2(&a, &b).unwrap();
        let pool = |x: &DenseArray<f64>| -> Vec<f64> {
            (0..5)
                .map(|j| (0..7).map(|i| x.get2(i, j)).sum::<f64>() / 7.0)
                .collect()
        };
        let norm = |v: &[f64]| -> Vec<f64> {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        };
        let (na, nb) = (norm(&pool(&a)), norm(&pool(&b)));
        let want: f64 = na.iter().zip(&nb).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((out.value - want).abs() < 1e-12);
    }

    #[test]
    fn global_l2_gradients_pass_finite_differences() {
        let mut rng = Rng::new(12, 0);
        let a = DenseArray::from_fn(&[5, 4], |_| rng.uniform_in(-1.0, 1.0));
        let b = DenseArray::from_fn(&[5, 4], |_| rng.uniform_in(-1.0, 1.0));
        let mut params = ParamStore::new();
        params.insert("z3d", a, true).unwrap();
        let mut loss = |store: &mut ParamStore<f64>, with_grad: bool| -> crate::Result<f64> {
            let out = global_l2(store.value("z3d")?, &b)?;
            if with_grad {
                store.accumulate_grad("z3d", &out.grad_first)?;
            }
            Ok(out.value)
        };
        let report = grad_check(&mut loss, &mut params, 1e-6, 20, &mut Rng::new(13, 0)).unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }

    #[test]
    fn global_nce_matches_ppnce_and_detaches() {
        let mut rng = Rng::new(14, 0);
        let a = unit_rows(6, 8, &mut rng);
        let b = unit_rows(6, 8, &mut rng);
        let nce = global_nce(&a, &b, 0.04).unwrap();
        let plain = ppnce(&a, &b, 0.04).unwrap();
        assert!((nce.value - plain.value).abs() < 1e-12);
        assert_eq!(nce.grad_first.data(), plain.grad_first.data());
        assert!(nce.grad_second.data().iter().all(|&g| g == 0.0));

        // Identical pooled rows give B ln B.
        let same = DenseArray::from_fn(&[5, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let out = global_nce(&same, &same, 0.04).unwrap();
        assert!((out.value - 5.0 * 5.0f64.ln()).abs() < 1e-9);

        let single = DenseArray::<f64>::zeros(&[1, 4]);
        assert!(global_nce(&single, &single, 0.04).is_err());
    }

    #[test]
    fn global_nce_decreases_as_positive_similarity_rises() {
        // Two frames with orthogonal negatives; sweep the positive alignment.
        let mut values = Vec::new();
        for &s in &[0.2, 0.6, 0.95] {
            let c = (1.0 - s * s as f64).sqrt();
            let p3 = DenseArray::from_vec(&[2, 3], vec![s, c, 0.0, 0.0, c, s]).unwrap();
            let p2 = DenseArray::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
            values.push(global_nce(&p3, &p2, 0.5).unwrap().value);
        }
        assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
    }

    #[test]
    fn cross_entropy_uniform_logits_give_ln_k() {
        let logits = DenseArray::<f64>::zeros(&[5, 6]);
        let labels = vec![0, 1, 2, 3, -1];
        let out = cross_entropy(&logits, &labels, -1).unwrap();
        assert!((out.value - 6.0f64.ln()).abs() < 1e-12);
        // Ignored rows contribute nothing.
        assert_eq!(out.per_pair[4], 0.0);
        assert!(out.grad_first.row(4).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_confident_margin_monotone() {
        let mut values = Vec::new();
        for &margin in &[1.0, 5.0, 20.0] {
            let mut logits = DenseArray::<f64>::zeros(&[3, 4]);
            for i in 0..3 {
                logits.set2(i, i % 4, margin);
            }
            let labels: Vec<i64> = (0..3).map(|i| (i % 4) as i64).collect();
            values.push(cross_entropy(&logits, &labels, -1).unwrap().value);
        }
        assert!(values[0] > values[1] && values[1] > values[2]);
        assert!(values[2] < 1e-8);
    }

    #[test]
    fn cross_entropy_matches_naive_per_row() {
        let mut rng = Rng::new(15, 0);
        let logits = DenseArray::from_fn(&[16, 6], |_| rng.uniform_in(-3.0, 3.0));
        let labels: Vec<i64> = (0..16).map(|i| if i % 5 == 0 { -1 } else { (i % 6) as i64 }).collect();
        let out = cross_entropy(&logits, &labels, -1).unwrap();
        let count = labels.iter().filter(|&&l| l >= 0).count() as f64;
        let mut want = 0.0;
        for i in 0..16 {
            if labels[i] < 0 {
                continue;
            }
            let row = logits.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            want += -(row[labels[i] as usize] - mx - z.ln()) / count;
        }
        assert!((out.value - want).abs() < 1e-12);
        let pair_sum: f64 = out.per_pair.iter().sum();
        assert!((pair_sum - out.value).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = DenseArray::<f64>::zeros(&[2, 3]);
        assert!(cross_entropy(&logits, &[0, 3], -1).is_err());
        assert!(cross_entropy(&logits, &[-1, -1], -1).is_err());
    }

    #[test]
    fn cross_entropy_gradients_pass_finite_differences() {
        let mut rng = Rng::new(16, 0);
        let logits = DenseArray::from_fn(&[6, 4], |_| rng.uniform_in(-2.0, 2.0));
        let labels = vec![0, 2, -1, 1, 3, 2];
        let mut params = ParamStore::new();
        params.insert("logits", logits, true).unwrap();
        let mut loss = |store: &mut ParamStore<f64>, with_grad: bool| -> crate::Result<f64> {
            let out = cross_entropy(store.value("logits")?, &labels, -1)?;
            if with_grad {
                store.accumulate_grad("logits", &out.grad_first)?;
            }
            Ok(out.value)
        };
        let report = grad_check(&mut loss, &mut params, 1e-6, 24, &mut Rng::new(17, 0)).unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }
}
