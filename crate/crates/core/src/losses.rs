//! Probability and loss kernels.
//!
//! All kernels work in `f64` and natural log. The distillation loss is the
//! batch mean of `KL(teacher || softmax(student / T))`; its gradient with
//! respect to the student logits is returned alongside the value so the
//! trainers never need a separate backward for the loss.

use crate::error::{Error, Result};

/// Floor applied to `Q(x)` inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-sum tolerance for [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_probs(&values)?;
        Ok(Self(values))
    }

    pub fn one_hot(classes: usize, label: usize) -> Result<Self> {
        if label >= classes {
            return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
        }
        let mut v = vec![0.0; classes];
        v[label] = 1.0;
        Ok(Self(v))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty logit vector"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i} = {}", values[i])));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Checks the probability-row invariant: non-negative, finite, sums to one.
pub fn check_probs(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!("probability {i} = {v} is not a finite non-negative value")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

fn log_sum_exp(scaled: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = scaled.clone().fold(f64::NEG_INFINITY, f64::max);
    max + scaled.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Writes `softmax(logits / t)` into `out`, subtracting the max first.
pub(crate) fn softmax_into(logits: &[f64], t: f64, out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z / t - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &LogitVector, temperature: f64) -> Result<ProbVector> {
    check_temperature(temperature)?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits.as_slice(), temperature, &mut out);
    Ok(ProbVector(out))
}

/// `KL(P || Q) = Σ P(x) ln(P(x) / Q(x))` in nats.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("kl_divergence: {} vs {} classes", p.len(), q.len())));
    }
    Ok(kl_slice(p.as_slice(), q.as_slice()))
}

fn kl_slice(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// `-ln softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &LogitVector, label: usize) -> Result<f64> {
    let z = logits.as_slice();
    if label >= z.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", z.len())));
    }
    Ok(log_sum_exp(z.iter().copied()) - z[label])
}

/// Mean KL over the batch between teacher rows and the tempered student softmax.
pub fn distillation_loss(teacher: &[ProbVector], student: &[LogitVector], temperature: f64) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::shape(format!(
            "distillation_loss: {} teacher rows vs {} student rows",
            teacher.len(),
            student.len()
        )));
    }
    let classes = teacher.first().map(ProbVector::len).unwrap_or(0);
    let mut p = Vec::with_capacity(teacher.len() * classes);
    let mut z = Vec::with_capacity(teacher.len() * classes);
    for (t, s) in teacher.iter().zip(student) {
        if t.len() != classes || s.len() != classes {
            return Err(Error::shape("distillation_loss: ragged class dimension"));
        }
        p.extend_from_slice(t.as_slice());
        z.extend_from_slice(s.as_slice());
    }
    distillation_loss_flat(&p, &z, classes, temperature, None)
}

/// Flat-buffer distillation loss over a `rows x classes` batch.
///
/// When `grad` is given it receives `d loss / d logits`: `(S q - p) / (T B)`
/// per entry, with `S` the row sum of the teacher probabilities (1 up to the
/// row tolerance). The floor on `q` is not differentiated.
pub fn distillation_loss_flat(
    teacher: &[f64],
    logits: &[f64],
    classes: usize,
    temperature: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_temperature(temperature)?;
    if classes == 0 || logits.is_empty() {
        return Err(Error::invalid("distillation_loss: empty batch"));
    }
    if teacher.len() != logits.len() || !logits.len().is_multiple_of(classes) {
        return Err(Error::shape(format!(
            "distillation_loss: teacher {} vs student {} entries for {classes} classes",
            teacher.len(),
            logits.len()
        )));
    }
    if let Some(g) = grad.as_deref() {
        if g.len() != logits.len() {
            return Err(Error::shape("distillation_loss: gradient buffer size"));
        }
    }
    let rows = logits.len() / classes;
    let scale = 1.0 / (rows as f64 * temperature);
    let mut q = vec![0.0; classes];
    let mut total = 0.0;
    for r in 0..rows {
        let zr = &logits[r * classes..(r + 1) * classes];
        let pr = &teacher[r * classes..(r + 1) * classes];
        if let Some(i) = zr.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("student logit ({r}, {i})")));
        }
        // Same softmax as teacher targets, so identical logits give exactly 0.
        softmax_into(zr, temperature, &mut q);
        total += kl_slice(pr, &q);
        if let Some(g) = grad.as_deref_mut() {
            let psum: f64 = pr.iter().sum();
            for c in 0..classes {
                g[r * classes + c] = (psum * q[c] - pr[c]) * scale;
            }
        }
    }
    Ok(total / rows as f64)
}

/// Batch-mean cross-entropy over flat logits, optionally writing
/// `(softmax - onehot) / B` into `grad`.
pub fn cross_entropy_flat(logits: &[f64], labels: &[usize], classes: usize, mut grad: Option<&mut [f64]>) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("cross_entropy: empty batch"));
    }
    if logits.len() != labels.len() * classes {
        return Err(Error::shape(format!(
            "cross_entropy: {} logits for {} labels x {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let rows = labels.len();
    let mut total = 0.0;
    let mut q = vec![0.0; classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        let zr = &logits[r * classes..(r + 1) * classes];
        if let Some(i) = zr.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit ({r}, {i})")));
        }
        let lse = log_sum_exp(zr.iter().copied());
        total += lse - zr[y];
        if let Some(g) = grad.as_deref_mut() {
            softmax_into(zr, 1.0, &mut q);
            for c in 0..classes {
                let target = if c == y { 1.0 } else { 0.0 };
                g[r * classes + c] = (q[c] - target) / rows as f64;
            }
        }
    }
    Ok(total / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_for_equal_logits() {
        let p = softmax(&lv(&[3.0; 10]), 1.0).unwrap();
        for &x in p.as_slice() {
            assert!((x - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_log_weights() {
        let p = softmax(&lv(&[1f64.ln(), 2f64.ln(), 3f64.ln()]), 1.0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in p.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax(&lv(&[1000.0, 0.0]), 1.0).unwrap();
        // exp(-1000) ~ 5e-435 in extended precision, far below 1e-12.
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!(p.as_slice()[1].abs() < 1e-12);
        let p = softmax(&lv(&[1e4, -1e4, 3.0]), 1.0).unwrap();
        check_probs(p.as_slice()).unwrap();
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&lv(&[1.0, 2.0]), 0.0).is_err());
        assert!(softmax(&lv(&[1.0, 2.0]), -1.0).is_err());
        assert!(LogitVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn kl_worked_examples() {
        assert_eq!(kl_divergence(&pv(&[0.3, 0.7]), &pv(&[0.3, 0.7])).unwrap(), 0.0);
        let v = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = kl_divergence(&pv(&[0.8, 0.2]), &pv(&[0.6, 0.4])).unwrap();
        let want = 0.8 * (4.0f64 / 3.0).ln() + 0.2 * 0.5f64.ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.0915).abs() < 1e-4);
    }

    #[test]
    fn kl_dimension_mismatch() {
        assert!(kl_divergence(&pv(&[1.0]), &pv(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn kl_floors_zero_q() {
        let v = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap();
        let want = 0.5 * (0.5f64).ln() + 0.5 * (0.5 / PROB_FLOOR).ln();
        assert!((v - want).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        let v = cross_entropy(&lv(&[0.0; 10]), 3).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        let v = cross_entropy(&lv(&[2.0, 0.0, 0.0]), 0).unwrap();
        let want = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.2395).abs() < 1e-4);
        assert!(cross_entropy(&lv(&[0.0, 1.0]), 2).is_err());
    }

    #[test]
    fn cross_entropy_decreases_toward_zero() {
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let z = k as f64;
            let v = cross_entropy(&lv(&[z, 0.0, 0.0]), 0).unwrap();
            assert!(v < prev || (v == 0.0 && prev == 0.0));
            assert!(v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-15);
        // strictly decreasing while representable
        assert!(cross_entropy(&lv(&[20.0, 0.0, 0.0]), 0).unwrap() < cross_entropy(&lv(&[19.0, 0.0, 0.0]), 0).unwrap());
    }

    #[test]
    fn distillation_zero_on_perfect_mimicry() {
        let z = lv(&[0.3, -1.2, 2.0]);
        let p = softmax(&z, 1.0).unwrap();
        let v = distillation_loss(&[p], &[z], 1.0).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn distillation_mean_reduction() {
        let p = pv(&[0.2, 0.5, 0.3]);
        let z = lv(&[1.0, 0.0, -1.0]);
        let one = distillation_loss(std::slice::from_ref(&p), std::slice::from_ref(&z), 1.0).unwrap();
        let two = distillation_loss(&[p.clone(), p], &[z.clone(), z], 1.0).unwrap();
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn distillation_matches_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (b, c) = (4, 3);
        let mut teacher = Vec::new();
        let mut student = Vec::new();
        for _ in 0..b {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            teacher.push(pv(&raw.iter().map(|v| v / s).collect::<Vec<_>>()));
            student.push(lv(&(0..c).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>()));
        }
        // brute force: explicit exp / normalise / log per element
        let mut oracle = 0.0;
        for (p, z) in teacher.iter().zip(&student) {
            let e: Vec<f64> = z.as_slice().iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let q = e[k] / s;
                let pk = p.as_slice()[k];
                oracle += -pk * (q / pk).ln();
            }
        }
        oracle /= b as f64;
        let v = distillation_loss(&teacher, &student, 1.0).unwrap();
        assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
    }

    #[test]
    fn distillation_errors() {
        let p = pv(&[0.5, 0.5]);
        let z = lv(&[0.0, 0.0]);
        assert!(distillation_loss(std::slice::from_ref(&p), &[], 1.0).is_err());
        assert!(distillation_loss(&[], &[], 1.0).is_err());
        assert!(distillation_loss(&[p], &[z], 0.0).is_err());
    }

    #[test]
    fn cross_entropy_consistent_with_kl_of_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let z = lv(&(0..10).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<_>>());
            let y = rng.gen_range(0..10);
            let ce = cross_entropy(&z, y).unwrap();
            let kl = kl_divergence(&ProbVector::one_hot(10, y).unwrap(), &softmax(&z, 1.0).unwrap()).unwrap();
            assert!((ce - kl).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_flat_gradient_rows_sum_to_zero() {
        let z = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
        let mut g = [0.0; 6];
        let v = cross_entropy_flat(&z, &[2, 1], 3, Some(&mut g)).unwrap();
        assert!(v > 0.0);
        assert!(g[..3].iter().sum::<f64>().abs() < 1e-15);
        assert!(g[3..].iter().sum::<f64>().abs() < 1e-15);
    }

    fn prob_strategy(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, c).prop_filter_map("non-zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(p in prob_strategy(10), q in prob_strategy(10)) {
            let v = kl_divergence(&pv(&p), &pv(&q)).unwrap();
            prop_assert!(v >= -1e-9);
            prop_assert!(kl_divergence(&pv(&p), &pv(&p)).unwrap().abs() <= 1e-9);
        }

        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 2..12), c in -1e3f64..1e3, t in 0.1f64..10.0) {
            let a = softmax(&lv(&z), t).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax(&lv(&shifted), t).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
