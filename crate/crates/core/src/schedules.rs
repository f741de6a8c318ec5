//! Learning-rate schedules, discriminative rates, gradual unfreezing and the
//! learning-rate range test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `2.6⁴`, the ratio between the highest and lowest group rate.
pub const DISCRIMINATIVE_DIVISOR: f64 = 45.6976;

/// Slanted triangular rate at step `t` of `total`: a linear climb from
/// `lr_max / ratio` to `lr_max` over the first `⌊total · cut_frac⌋` steps,
/// then a linear decay back.
pub fn stlr(t: usize, total: usize, cut_frac: f64, ratio: f64, lr_max: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("slanted triangular schedule over zero steps"));
    }
    if t > total {
        return Err(Error::invalid(format!("step {t} beyond schedule length {total}")));
    }
    if !(0.0..1.0).contains(&cut_frac) || ratio < 1.0 {
        return Err(Error::invalid("cut_frac must be in [0, 1) and ratio at least 1"));
    }
    let cut = (total as f64 * cut_frac).floor() as usize;
    let p = if t < cut {
        t as f64 / cut as f64
    } else {
        1.0 - (t - cut) as f64 / (total - cut) as f64
    };
    Ok(lr_max * (1.0 + p * (ratio - 1.0)) / ratio)
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`.
pub fn sgdr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine schedule over zero steps"));
    }
    if t > total {
        return Err(Error::invalid(format!("step {t} beyond schedule length {total}")));
    }
    let x = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + x.cos()))
}

/// Geometric rates from `lr_high / divisor` (first group) to `lr_high` (last
/// group).
pub fn discriminative_lrs(lr_high: f64, n_groups: usize, divisor: f64) -> Result<Vec<f64>> {
    if !(lr_high > 0.0 && lr_high.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr_high} must be positive")));
    }
    if n_groups < 2 {
        return Err(Error::invalid("discriminative rates need at least 2 groups"));
    }
    if !(divisor >= 1.0) {
        return Err(Error::invalid("divisor must be at least 1"));
    }
    let lr_low = lr_high / divisor;
    let last = n_groups - 1;
    Ok((0..n_groups)
        .map(|g| match g {
            0 => lr_low,
            g if g == last => lr_high,
            g => lr_low * divisor.powf(g as f64 / last as f64),
        })
        .collect())
}

/// Trainable flags per group after `step` unfreezing steps: step 0 trains only
/// the last group, each further step adds the next group towards the front.
pub fn unfreeze_plan(n_groups: usize, step: usize) -> Vec<bool> {
    let trainable = (step + 1).min(n_groups);
    (0..n_groups).map(|g| g >= n_groups - trainable).collect()
}

/// Adam β1 moving opposite to the learning rate: `high` at `lr_min`, `low`
/// at `lr_max`. A flat schedule uses `high`.
pub fn momentum_for(lr: f64, lr_min: f64, lr_max: f64, (high, low): (f64, f64)) -> f64 {
    if lr_max <= lr_min {
        return high;
    }
    let frac = ((lr - lr_min) / (lr_max - lr_min)).clamp(0.0, 1.0);
    high - (high - low) * frac
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrFindConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub steps: usize,
    pub smoothing: f64,
    pub divergence_factor: f64,
}

impl Default for LrFindConfig {
    fn default() -> Self {
        LrFindConfig {
            lr_start: 1e-7,
            lr_end: 10.0,
            steps: 100,
            smoothing: 0.98,
            divergence_factor: 4.0,
        }
    }
}

impl LrFindConfig {
    /// Rate of step `i` on the exponential grid.
    pub fn lr_at(&self, i: usize) -> f64 {
        if self.steps < 2 {
            return self.lr_start;
        }
        self.lr_start * (self.lr_end / self.lr_start).powf(i as f64 / (self.steps - 1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrCurve {
    /// `(learning rate, smoothed loss)` per completed step.
    pub points: Vec<(f64, f64)>,
    pub suggestion: f64,
}

impl LrCurve {
    /// Two-column CSV followed by the suggestion.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr,smoothed_loss\n");
        for (lr, loss) in &self.points {
            out.push_str(&format!("{lr:e},{loss:e}\n"));
        }
        out.push_str(&format!("# suggested_lr,{:e}\n", self.suggestion));
        out
    }
}

/// Central differences inside, one-sided at the ends.
fn gradient(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| match i {
            0 => y[1] - y[0],
            i if i == n - 1 => y[n - 1] - y[n - 2],
            i => (y[i + 1] - y[i - 1]) / 2.0,
        })
        .collect()
}

/// Learning-rate range test. `train_step(lr)` performs one optimizer step at
/// `lr` and returns the batch loss; the caller is responsible for restoring
/// model and optimizer state afterwards.
pub fn lr_find<F>(mut train_step: F, config: &LrFindConfig) -> Result<LrCurve>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(config.lr_start > 0.0 && config.lr_end > config.lr_start) || config.steps == 0 {
        return Err(Error::invalid("learning-rate range needs 0 < lr_start < lr_end and steps >= 1"));
    }
    if !(0.0..1.0).contains(&config.smoothing) {
        return Err(Error::invalid("smoothing must be in [0, 1)"));
    }
    let beta = config.smoothing;
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    let mut points = Vec::with_capacity(config.steps);
    for i in 0..config.steps {
        let lr = config.lr_at(i);
        let loss = train_step(lr)?;
        if !loss.is_finite() {
            if i == 0 {
                return Err(Error::NonFinite(format!("loss {loss} at the first range-test step")));
            }
            break;
        }
        avg = beta * avg + (1.0 - beta) * loss;
        let smoothed = avg / (1.0 - beta.powi(i as i32 + 1));
        points.push((lr, smoothed));
        if smoothed > config.divergence_factor * best {
            break;
        }
        best = best.min(smoothed);
    }
    let suggestion = if points.len() < 2 {
        config.lr_start
    } else {
        let losses: Vec<f64> = points.iter().map(|p| p.1).collect();
        let slopes = gradient(&losses);
        let (idx, slope) = slopes
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, s)| if s < acc.1 { (i, s) } else { acc });
        if slope < 0.0 {
            points[idx].0
        } else {
            config.lr_start
        }
    };
    Ok(LrCurve { points, suggestion })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stlr_examples() {
        assert_eq!(stlr(0, 1000, 0.1, 32.0, 0.01).unwrap(), 0.01 / 32.0);
        assert_eq!(stlr(100, 1000, 0.1, 32.0, 0.01).unwrap(), 0.01);
        assert!((stlr(550, 1000, 0.1, 32.0, 0.01).unwrap() - 5.15625e-3).abs() < 1e-15);
        assert!((stlr(1000, 1000, 0.1, 32.0, 0.01).unwrap() - 0.01 / 32.0).abs() < 1e-18);
        assert!(stlr(0, 0, 0.1, 32.0, 0.01).is_err());
    }

    #[test]
    fn sgdr_examples() {
        assert_eq!(sgdr(0, 10, 0.1, 0.0).unwrap(), 0.1);
        assert!(sgdr(10, 10, 0.1, 0.0).unwrap().abs() < 1e-18);
        assert!((sgdr(5, 10, 0.1, 0.02).unwrap() - 0.06).abs() < 1e-15);
        assert!(sgdr(0, 0, 0.1, 0.0).is_err());
    }

    #[test]
    fn discriminative_examples() {
        let lrs = discriminative_lrs(1e-2, 5, DISCRIMINATIVE_DIVISOR).unwrap();
        assert!((lrs[0] - 2.18829e-4).abs() < 1e-9);
        assert_eq!(lrs[4], 1e-2);
        for w in lrs.windows(2) {
            assert!((w[1] / w[0] - 2.6).abs() < 1e-12);
        }
        assert_eq!(discriminative_lrs(0.5, 2, 4.0).unwrap(), vec![0.125, 0.5]);
        assert!(discriminative_lrs(0.0, 5, 2.0).is_err());
        assert!(discriminative_lrs(0.1, 1, 2.0).is_err());
    }

    #[test]
    fn unfreezing_order() {
        assert_eq!(unfreeze_plan(5, 0), vec![false, false, false, false, true]);
        assert_eq!(unfreeze_plan(5, 1), vec![false, false, false, true, true]);
        assert_eq!(unfreeze_plan(5, 4), vec![true; 5]);
        assert_eq!(unfreeze_plan(5, 9), vec![true; 5]);
    }

    #[test]
    fn momentum_opposes_rate() {
        assert_eq!(momentum_for(0.1, 0.0, 0.1, (0.8, 0.7)), 0.7);
        assert_eq!(momentum_for(0.0, 0.0, 0.1, (0.8, 0.7)), 0.8);
        assert!((momentum_for(0.05, 0.0, 0.1, (0.8, 0.7)) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn finder_grid_endpoints() {
        let c = LrFindConfig::default();
        assert_eq!(c.lr_at(0), 1e-7);
        assert!((c.lr_at(99) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn increasing_loss_stops_early_at_start() {
        let mut loss = 1.0;
        let curve = lr_find(
            |_| {
                loss *= 2.0;
                Ok(loss)
            },
            &LrFindConfig::default(),
        )
        .unwrap();
        assert!(curve.points.len() < 100);
        assert_eq!(curve.suggestion, 1e-7);
    }

    #[test]
    fn non_finite_first_loss_is_an_error() {
        assert!(lr_find(|_| Ok(f64::NAN), &LrFindConfig::default()).is_err());
    }

    fn parabola(lr: f64) -> Result<f64> {
        Ok((lr.log10() + 3.0).powi(2))
    }

    #[test]
    fn unsmoothed_parabola_suggests_steepest_point() {
        // Raw slope 2(x + 3) on an even log grid is most negative at the left end.
        let config = LrFindConfig {
            smoothing: 0.0,
            ..LrFindConfig::default()
        };
        let curve = lr_find(parabola, &config).unwrap();
        assert!(curve.suggestion <= config.lr_at(1));
    }

    #[test]
    fn smoothed_parabola_matches_recomputation() {
        let config = LrFindConfig::default();
        let curve = lr_find(parabola, &config).unwrap();
        // Independent recomputation of the smoothed curve and its steepest descent.
        let mut avg = 0.0;
        let mut best = f64::INFINITY;
        let mut expect = Vec::new();
        for i in 0..100 {
            let lr = config.lr_at(i);
            avg = 0.98 * avg + 0.02 * parabola(lr).unwrap();
            let s = avg / (1.0 - 0.98f64.powi(i as i32 + 1));
            expect.push((lr, s));
            if s > 4.0 * best {
                break;
            }
            best = best.min(s);
        }
        assert_eq!(curve.points.len(), expect.len());
        for (a, b) in curve.points.iter().zip(&expect) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() <= 1e-12 * b.1.abs());
        }
        let n = expect.len();
        let mut steepest = (0, f64::INFINITY);
        for i in 0..n {
            let d = if i == 0 {
                expect[1].1 - expect[0].1
            } else if i == n - 1 {
                expect[n - 1].1 - expect[n - 2].1
            } else {
                (expect[i + 1].1 - expect[i - 1].1) / 2.0
            };
            if d < steepest.1 {
                steepest = (i, d);
            }
        }
        assert_eq!(curve.suggestion, expect[steepest.0].0);
        assert!(curve.suggestion < 1e-3);
    }
}
