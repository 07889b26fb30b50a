//! Loss mathematics for ensemble distillation.
//!
//! All losses are defined for a single sample and return the value together
//! with the analytic gradient with respect to the student logits. Batch
//! reduction is the caller's job (mean over samples). Teacher logits enter
//! only as constants: no function here produces a teacher-side gradient.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::logits::LogitsMap;
use crate::raster::Mask;

/// Distribution terms below this mass contribute nothing to a KL sum.
pub const KL_MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    /// Softmax over the flattened `height * width` positions of each channel.
    #[default]
    Spatial,
    /// Softmax over channels at each position; needs at least two channels.
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub kd_weight: f64,
    pub softmax_axis: SoftmaxAxis,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 1.0, kd_weight: 3.0, softmax_axis: SoftmaxAxis::Spatial }
    }
}

impl LossConfig {
    pub fn new(temperature: f64, kd_weight: f64, softmax_axis: SoftmaxAxis) -> Result<Self> {
        let cfg = Self { temperature, kd_weight, softmax_axis };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            bail!(Config, "distillation weight must be finite and >= 0, got {}", self.kd_weight);
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        bail!(Config, "temperature must be finite and > 0, got {tau}");
    }
    Ok(())
}

/// Element-wise mean of the teacher logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    values: LogitsMap,
    num_teachers: usize,
}

impl EnsembleOutput {
    pub fn values(&self) -> &LogitsMap {
        &self.values
    }

    pub fn num_teachers(&self) -> usize {
        self.num_teachers
    }

    /// Wraps a single logits map as a one-teacher ensemble.
    pub fn single(values: LogitsMap) -> Self {
        Self { values, num_teachers: 1 }
    }
}

/// Averages the teachers' logits element-wise.
///
/// Each element is reduced as `min + sum(v - min) / D` over the sorted
/// values, so the result does not depend on teacher order and `D` identical
/// teachers reproduce their logits exactly.
pub fn ensemble_teachers(teacher_logits: &[LogitsMap]) -> Result<EnsembleOutput> {
    let Some(first) = teacher_logits.first() else {
        bail!(Argument, "cannot ensemble an empty teacher list");
    };
    for (d, t) in teacher_logits.iter().enumerate().skip(1) {
        first.check_same_shape(t, &alloc::format!("teacher {d} shape differs from teacher 0"))?;
    }
    let count = teacher_logits.len();
    let mut column = Vec::with_capacity(count);
    let mut out = first.clone();
    for (i, slot) in out.values_mut().iter_mut().enumerate() {
        column.clear();
        column.extend(teacher_logits.iter().map(|t| t.values()[i]));
        column.sort_by(f64::total_cmp);
        let base = column[0];
        let spread: f64 = column.iter().map(|v| v - base).sum();
        *slot = base + spread / count as f64;
    }
    Ok(EnsembleOutput { values: out, num_teachers: count })
}

fn log_softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|v| libm::exp(v - max)).sum();
    let lse = max + libm::log(sum);
    for v in xs.iter_mut() {
        *v -= lse;
    }
}

/// Per-channel log-softmax over the flattened spatial positions of `logits / tau`.
pub fn spatial_log_softmax(logits: &LogitsMap, tau: f64) -> Result<LogitsMap> {
    check_temperature(tau)?;
    logits.check_finite("spatial softmax")?;
    let mut out = logits.map(|v| v / tau);
    for c in 0..out.channels() {
        log_softmax_in_place(out.channel_mut(c));
    }
    Ok(out)
}

/// Per-position log-softmax over the channels of `logits / tau`.
pub fn channel_log_softmax(logits: &LogitsMap, tau: f64) -> Result<LogitsMap> {
    check_temperature(tau)?;
    if logits.channels() < 2 {
        bail!(
            Config,
            "channel softmax needs at least 2 channels; a single-channel (binary) map must use the spatial formulation"
        );
    }
    logits.check_finite("channel softmax")?;
    let (channels, n) = (logits.channels(), logits.positions());
    let mut out = logits.map(|v| v / tau);
    let mut column = Vec::with_capacity(channels);
    for i in 0..n {
        column.clear();
        column.extend((0..channels).map(|c| out.values()[c * n + i]));
        log_softmax_in_place(&mut column);
        for (c, v) in column.iter().enumerate() {
            out.values_mut()[c * n + i] = *v;
        }
    }
    Ok(out)
}

pub fn spatial_softmax(logits: &LogitsMap, tau: f64) -> Result<LogitsMap> {
    Ok(spatial_log_softmax(logits, tau)?.map(libm::exp))
}

pub fn channel_softmax(logits: &LogitsMap, tau: f64) -> Result<LogitsMap> {
    Ok(channel_log_softmax(logits, tau)?.map(libm::exp))
}

/// A scalar loss and its gradient with respect to the student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: LogitsMap,
}

fn kl_term(log_p: f64, log_q: f64) -> f64 {
    let p = libm::exp(log_p);
    if p < KL_MASS_FLOOR {
        0.0
    } else {
        p * (log_p - log_q)
    }
}

/// Spatial-softmax distillation loss:
/// `tau^2 / C * sum_c KL(phi(teacher_c) || phi(student_c))`.
pub fn kd_loss_spatial(teacher: &EnsembleOutput, student: &LogitsMap, tau: f64) -> Result<f64> {
    Ok(kd_loss_spatial_grad(teacher, student, tau)?.value)
}

pub fn kd_loss_spatial_grad(
    teacher: &EnsembleOutput,
    student: &LogitsMap,
    tau: f64,
) -> Result<LossGrad> {
    teacher.values.check_same_shape(student, "teacher/student logits")?;
    let log_p = spatial_log_softmax(&teacher.values, tau)?;
    let log_q = spatial_log_softmax(student, tau)?;
    let channels = student.channels() as f64;
    let kl: f64 = log_p.values().iter().zip(log_q.values()).map(|(&lp, &lq)| kl_term(lp, lq)).sum();
    // d/ds KL(p || softmax(s / tau)) = (q - p) / tau
    let scale = tau / channels;
    let mut grad = log_q.clone();
    for ((g, &lp), &lq) in grad.values_mut().iter_mut().zip(log_p.values()).zip(log_q.values()) {
        *g = scale * (libm::exp(lq) - libm::exp(lp));
    }
    Ok(LossGrad { value: tau * tau / channels * kl, grad })
}

/// Channel-softmax distillation loss: `tau^2 * mean_i KL(p_i || q_i)` over positions.
pub fn kd_loss_channel(teacher: &EnsembleOutput, student: &LogitsMap, tau: f64) -> Result<f64> {
    Ok(kd_loss_channel_grad(teacher, student, tau)?.value)
}

pub fn kd_loss_channel_grad(
    teacher: &EnsembleOutput,
    student: &LogitsMap,
    tau: f64,
) -> Result<LossGrad> {
    teacher.values.check_same_shape(student, "teacher/student logits")?;
    let log_p = channel_log_softmax(&teacher.values, tau)?;
    let log_q = channel_log_softmax(student, tau)?;
    let positions = student.positions() as f64;
    let kl: f64 = log_p.values().iter().zip(log_q.values()).map(|(&lp, &lq)| kl_term(lp, lq)).sum();
    let scale = tau / positions;
    let mut grad = log_q.clone();
    for ((g, &lp), &lq) in grad.values_mut().iter_mut().zip(log_p.values()).zip(log_q.values()) {
        *g = scale * (libm::exp(lq) - libm::exp(lp));
    }
    Ok(LossGrad { value: tau * tau * kl / positions, grad })
}

fn check_mask(mask: &Mask, student: &LogitsMap) -> Result<()> {
    if mask.width() != student.width() || mask.height() != student.height() {
        bail!(
            Shape,
            "mask {}x{} vs logits {}x{}",
            mask.width(),
            mask.height(),
            student.width(),
            student.height()
        );
    }
    Ok(())
}

/// Logistic function evaluated without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of a single-channel logit map against a mask.
pub fn bce_loss(mask: &Mask, student: &LogitsMap) -> Result<f64> {
    Ok(bce_loss_grad(mask, student)?.value)
}

pub fn bce_loss_grad(mask: &Mask, student: &LogitsMap) -> Result<LossGrad> {
    if student.channels() != 1 {
        bail!(Config, "binary cross-entropy expects 1 channel, got {}", student.channels());
    }
    check_mask(mask, student)?;
    student.check_finite("binary cross-entropy")?;
    let n = student.positions() as f64;
    let mut total = 0.0;
    let mut grad = student.clone();
    for ((g, &z), &y) in grad.values_mut().iter_mut().zip(student.values()).zip(mask.data()) {
        let y = f64::from(y);
        // -[y log s(z) + (1 - y) log(1 - s(z))] = max(z, 0) - z y + log(1 + e^{-|z|})
        total += z.max(0.0) - z * y + libm::log1p(libm::exp(-z.abs()));
        *g = (sigmoid(z) - y) / n;
    }
    Ok(LossGrad { value: total / n, grad })
}

/// Mean softmax cross-entropy of a multi-channel map; the mask value is the class index.
pub fn softmax_ce_loss_grad(mask: &Mask, student: &LogitsMap) -> Result<LossGrad> {
    check_mask(mask, student)?;
    let log_q = channel_log_softmax(student, 1.0)?;
    let n = student.positions();
    let mut total = 0.0;
    let mut grad = log_q.map(libm::exp);
    for (i, &y) in mask.data().iter().enumerate() {
        let k = usize::from(y);
        total -= log_q.values()[k * n + i];
        grad.values_mut()[k * n + i] -= 1.0;
    }
    for g in grad.values_mut() {
        *g /= n as f64;
    }
    Ok(LossGrad { value: total / n as f64, grad })
}

/// Task loss for the map's channel count: binary cross-entropy for one
/// channel, softmax cross-entropy otherwise.
pub fn task_loss_grad(mask: &Mask, student: &LogitsMap) -> Result<LossGrad> {
    if student.channels() == 1 {
        bce_loss_grad(mask, student)
    } else {
        softmax_ce_loss_grad(mask, student)
    }
}

/// Per-pixel foreground probability: the logistic of a single-channel map,
/// or the softmax mass of channel 1 otherwise.
pub fn foreground_probabilities(student: &LogitsMap) -> Result<Vec<f64>> {
    if student.channels() == 1 {
        Ok(student.values().iter().map(|&z| sigmoid(z)).collect())
    } else {
        Ok(channel_softmax(student, 1.0)?.channel(1).to_vec())
    }
}

/// Components of the combined objective for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub grad: LogitsMap,
}

/// `L = L_CE + lambda * L_KD`, with the distillation term chosen by the
/// configured softmax axis. Without a teacher the KD term is zero.
pub fn total_loss(
    mask: &Mask,
    teacher: Option<&EnsembleOutput>,
    student: &LogitsMap,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let ce = task_loss_grad(mask, student)?;
    let mut grad = ce.grad;
    let kd = match teacher {
        None => 0.0,
        Some(teacher) => {
            let kd = match cfg.softmax_axis {
                SoftmaxAxis::Spatial => kd_loss_spatial_grad(teacher, student, cfg.temperature)?,
                SoftmaxAxis::Channel => kd_loss_channel_grad(teacher, student, cfg.temperature)?,
            };
            for (g, k) in grad.values_mut().iter_mut().zip(kd.grad.values()) {
                *g += cfg.kd_weight * k;
            }
            kd.value
        }
    };
    Ok(LossTerms { total: ce.value + cfg.kd_weight * kd, ce: ce.value, kd, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn map(c: usize, h: usize, w: usize, v: &[f64]) -> LogitsMap {
        LogitsMap::new(c, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn ensemble_of_two_is_midpoint() {
        let e = ensemble_teachers(&[map(1, 1, 2, &[1.0, 3.0]), map(1, 1, 2, &[3.0, 1.0])]).unwrap();
        assert_eq!(e.values().values(), &[2.0, 2.0]);
        assert_eq!(e.num_teachers(), 2);
    }

    #[test]
    fn ensemble_rejects_empty_and_mismatched() {
        assert!(matches!(ensemble_teachers(&[]), Err(crate::Error::Argument(_))));
        let err = ensemble_teachers(&[map(1, 1, 2, &[0.0, 0.0]), map(1, 2, 1, &[0.0, 0.0])]);
        assert!(matches!(err, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn identical_teachers_are_reproduced_bit_exactly() {
        let t = map(1, 1, 3, &[0.1, -7.3, 1e-9]);
        let e = ensemble_teachers(&[t.clone(), t.clone(), t.clone()]).unwrap();
        assert_eq!(e.values(), &t);
    }

    #[test]
    fn uniform_spatial_softmax() {
        let p = spatial_softmax(&LogitsMap::zeros(1, 2, 2), 1.0).unwrap();
        assert!(p.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn spatial_softmax_hand_value() {
        let p = spatial_softmax(&map(1, 1, 2, &[0.0, libm::log(2.0)]), 1.0).unwrap();
        assert!((p.values()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.values()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_softmax_rejects_non_finite() {
        let err = spatial_softmax(&map(1, 1, 2, &[0.0, f64::NAN]), 1.0);
        assert!(matches!(err, Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn channel_softmax_values() {
        let p = channel_softmax(&map(2, 1, 1, &[0.0, libm::log(3.0)]), 1.0).unwrap();
        assert!((p.values()[0] - 0.25).abs() < 1e-12);
        assert!((p.values()[1] - 0.75).abs() < 1e-12);
        // [5, -5] / 1000 leaves a 0.01 logit gap: sigmoid(0.01) = 0.5025
        let flat = channel_softmax(&map(2, 1, 1, &[5.0, -5.0]), 1000.0).unwrap();
        assert!((flat.values()[0] - sigmoid(0.01)).abs() < 1e-12);
        let flatter = channel_softmax(&map(2, 1, 1, &[5.0, -5.0]), 1e4).unwrap();
        assert!((flatter.values()[0] - 0.5).abs() < 1e-3);
        let eq = channel_softmax(&map(2, 2, 1, &[1.0, -2.0, 1.0, -2.0]), 1.0).unwrap();
        assert!(eq.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn channel_softmax_refuses_single_channel() {
        let err = channel_softmax(&LogitsMap::zeros(1, 2, 2), 1.0);
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn spatial_kd_hand_value() {
        let t = EnsembleOutput::single(map(1, 1, 2, &[0.0, libm::log(2.0)]));
        let s = map(1, 1, 2, &[0.0, 0.0]);
        let expected = (1.0 / 3.0) * libm::log(2.0 / 3.0) + (2.0 / 3.0) * libm::log(4.0 / 3.0);
        let got = kd_loss_spatial(&t, &s, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!((got - 0.05663).abs() < 1e-5);
    }

    #[test]
    fn channel_kd_hand_value() {
        let t = EnsembleOutput::single(map(2, 1, 1, &[0.0, libm::log(3.0)]));
        let s = map(2, 1, 1, &[0.0, 0.0]);
        let expected = 0.25 * libm::log(0.5) + 0.75 * libm::log(1.5);
        let got = kd_loss_channel(&t, &s, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!((got - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn kd_of_identical_maps_is_zero() {
        let s = map(2, 2, 2, &[0.3, -1.0, 2.0, 0.5, 0.0, 0.1, -0.2, 4.0]);
        let t = EnsembleOutput::single(s.clone());
        assert_eq!(kd_loss_spatial(&t, &s, 2.0).unwrap(), 0.0);
        assert_eq!(kd_loss_channel(&t, &s, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn channel_kd_requires_two_channels() {
        let s = LogitsMap::zeros(1, 2, 2);
        let t = EnsembleOutput::single(s.clone());
        assert!(matches!(kd_loss_channel(&t, &s, 1.0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn bce_values() {
        let m = Mask::new(2, 1, vec![0, 1]).unwrap();
        let zero = bce_loss(&m, &LogitsMap::zeros(1, 1, 2)).unwrap();
        assert!((zero - libm::log(2.0)).abs() < 1e-15);

        let one = Mask::new(1, 1, vec![1]).unwrap();
        let v = bce_loss(&one, &map(1, 1, 1, &[libm::log(3.0)])).unwrap();
        assert!((v - (-libm::log(0.75))).abs() < 1e-14);
        assert!((v - 0.2877).abs() < 1e-4);

        let sat = bce_loss(&m, &map(1, 1, 2, &[-40.0, 40.0])).unwrap();
        assert!(sat < 1e-10 && sat >= 0.0);
    }

    #[test]
    fn bce_rejects_shape_mismatch() {
        let m = Mask::zeros(3, 1);
        assert!(matches!(bce_loss(&m, &LogitsMap::zeros(1, 1, 2)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn zero_weight_total_is_exactly_ce() {
        let m = Mask::new(2, 1, vec![1, 0]).unwrap();
        let s = map(1, 1, 2, &[0.7, -0.2]);
        let t = EnsembleOutput::single(map(1, 1, 2, &[3.0, -1.0]));
        let cfg = LossConfig::new(1.0, 0.0, SoftmaxAxis::Spatial).unwrap();
        let terms = total_loss(&m, Some(&t), &s, &cfg).unwrap();
        let ce = bce_loss_grad(&m, &s).unwrap();
        assert_eq!(terms.total, ce.value);
        assert_eq!(terms.grad, ce.grad);
    }

    #[test]
    fn total_combines_components() {
        let m = Mask::new(2, 1, vec![1, 0]).unwrap();
        let s = map(1, 1, 2, &[0.7, -0.2]);
        let t = EnsembleOutput::single(map(1, 1, 2, &[3.0, -1.0]));
        let cfg = LossConfig::default();
        assert_eq!((cfg.temperature, cfg.kd_weight), (1.0, 3.0));
        let terms = total_loss(&m, Some(&t), &s, &cfg).unwrap();
        let ce = bce_loss(&m, &s).unwrap();
        let kd = kd_loss_spatial(&t, &s, 1.0).unwrap();
        assert_eq!(terms.ce, ce);
        assert_eq!(terms.kd, kd);
        assert!((terms.total - (ce + 3.0 * kd)).abs() < 1e-15);
    }

    #[test]
    fn confident_self_distillation_sits_on_the_ce_floor() {
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let s = map(1, 2, 2, &[30.0, -30.0, -30.0, 30.0]);
        let t = EnsembleOutput::single(s.clone());
        let terms = total_loss(&m, Some(&t), &s, &LossConfig::default()).unwrap();
        assert!(terms.kd == 0.0);
        assert!((terms.total - terms.ce).abs() < 1e-6 && terms.ce < 1e-6);
    }

    #[test]
    fn loss_config_rejects_bad_temperature() {
        assert!(LossConfig::new(0.0, 1.0, SoftmaxAxis::Spatial).is_err());
        assert!(LossConfig::new(1.0, -1.0, SoftmaxAxis::Spatial).is_err());
    }

    #[test]
    fn two_channel_ce_matches_bce_of_logit_difference() {
        let m = Mask::new(3, 1, vec![1, 0, 1]).unwrap();
        let two = map(2, 1, 3, &[0.0, 0.4, -1.0, 1.5, -0.3, 2.0]);
        let diff = map(1, 1, 3, &[1.5, -0.7, 3.0]);
        let a = softmax_ce_loss_grad(&m, &two).unwrap().value;
        let b = bce_loss(&m, &diff).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
