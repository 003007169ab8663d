//! Classification metrics and the paired t-test used to compare models.

use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 methods take over when std is on
use num_traits::Float;

use crate::error::CoreError;
use crate::phase::{PhaseLabel, NUM_PHASES};

/// Fraction of predictions equal to the truth.
pub fn accuracy(preds: &[PhaseLabel], truths: &[PhaseLabel]) -> Result<f64, CoreError> {
    if preds.len() != truths.len() {
        return Err(CoreError::invalid(alloc::format!(
            "accuracy: {} predictions vs {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(CoreError::invalid("accuracy: empty inputs"));
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// 3x3 confusion matrix; rows index the true phase, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_PHASES]; NUM_PHASES],
}

impl ConfusionMatrix {
    pub fn from_predictions(
        preds: &[PhaseLabel],
        truths: &[PhaseLabel],
    ) -> Result<Self, CoreError> {
        if preds.len() != truths.len() {
            return Err(CoreError::invalid(alloc::format!(
                "confusion: {} predictions vs {} truths",
                preds.len(),
                truths.len()
            )));
        }
        let mut counts = [[0u64; NUM_PHASES]; NUM_PHASES];
        for (p, t) in preds.iter().zip(truths) {
            counts[t.index()][p.index()] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Sum of the diagonal: correctly classified count.
    pub fn trace(&self) -> u64 {
        (0..NUM_PHASES).map(|i| self.counts[i][i]).sum()
    }

    /// Row-normalized rates. Rows with no observations stay all-zero
    /// instead of dividing by zero; `zero_rows` lists them.
    pub fn normalized(&self) -> [[f64; NUM_PHASES]; NUM_PHASES] {
        let mut out = [[0.0; NUM_PHASES]; NUM_PHASES];
        for (r, row) in self.counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total > 0 {
                for (c, &v) in row.iter().enumerate() {
                    out[r][c] = v as f64 / total as f64;
                }
            }
        }
        out
    }

    /// True phases that never occur in the evaluated set.
    pub fn zero_rows(&self) -> Vec<PhaseLabel> {
        PhaseLabel::ALL
            .iter()
            .copied()
            .filter(|p| self.counts[p.index()].iter().sum::<u64>() == 0)
            .collect()
    }
}

/// Outcome of a paired two-sided t-test.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TTestResult {
    pub t: f64,
    pub p_value: f64,
    pub dof: u64,
    /// Set when the differences have zero sample variance; `t` and
    /// `p_value` then take their limiting values rather than NaN.
    pub degenerate: bool,
}

/// Paired two-sided t-test of `a` against `b`.
///
/// The statistic is `mean(d) / (sd(d) / sqrt(n))` with `d = a - b` and the
/// n-1 denominator in `sd`. The p-value comes from the exact Student-t
/// distribution with n-1 degrees of freedom, not a normal approximation.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult, CoreError> {
    if a.len() != b.len() {
        return Err(CoreError::invalid(alloc::format!(
            "paired_ttest: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(CoreError::invalid(
            "paired_ttest: need at least 2 pairs to estimate a variance",
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(CoreError::invalid("paired_ttest: non-finite input"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    let dof = (n - 1) as u64;

    if sd == 0.0 {
        // All differences identical: the statistic degenerates.
        return Ok(if mean == 0.0 {
            TTestResult { t: 0.0, p_value: 1.0, dof, degenerate: true }
        } else {
            TTestResult {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                p_value: 0.0,
                dof,
                degenerate: true,
            }
        });
    }

    let t = mean / (sd / (n as f64).sqrt());
    let p_value = student_t_two_sided_p(t, dof as f64);
    Ok(TTestResult { t, p_value, dof, degenerate: false })
}

/// Two-sided Student-t tail probability: P(|T_dof| >= |t|).
///
/// Uses the identity with the regularized incomplete beta function:
/// p = I_x(dof/2, 1/2) at x = dof / (dof + t^2).
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_nan() || dof <= 0.0 {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    reg_inc_beta(0.5 * dof, 0.5, x).clamp(0.0, 1.0)
}

/// Regularized incomplete beta function I_x(a, b).
///
/// Continued-fraction evaluation; converges to near machine precision for
/// the small (a, b) this crate needs.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "reg_inc_beta needs positive parameters");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fastest below the distribution mode;
    // above it, evaluate the mirrored fraction.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3.0e-16;
    const TINY: f64 = 1.0e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Natural log of the gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let pi = core::f64::consts::PI;
    if x < 0.5 {
        // Reflection formula keeps the approximation in its accurate range.
        pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = COEF[0];
        for (i, &c) in COEF.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * pi).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}
