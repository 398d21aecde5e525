use super::{TrainConfig, TrainError};

/// `max(1, round(warmup_fraction · steps_per_epoch))`.
pub fn warmup_steps(cfg: &TrainConfig, steps_per_epoch: usize) -> usize {
    ((cfg.warmup_fraction * steps_per_epoch as f64).round() as usize).max(1)
}

/// Linear warmup from `lr_start` to `lr_peak` over the warmup steps, then
/// cosine decay to `lr_end` at the final step.
///
/// Both halves of the cosine are written so that their endpoints come out
/// exactly: the first half is measured down from the peak and the second
/// half up from the end value.
pub fn lr_at(
    step: usize,
    steps_per_epoch: usize,
    total_steps: usize,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let w = warmup_steps(cfg, steps_per_epoch);
    if total_steps <= w + 1 {
        return Err(TrainError::InvalidConfig(format!(
            "{total_steps} total steps leave no room for decay after {w} warmup steps"
        )));
    }
    if step >= total_steps {
        return Err(TrainError::InvalidConfig(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let (start, peak, end) = (cfg.lr_start, cfg.lr_peak, cfg.lr_end);
    if step <= w {
        let f = step as f64 / w as f64;
        return Ok(start * (1.0 - f) + peak * f);
    }
    let t = (step - w) as f64 / (total_steps - 1 - w) as f64;
    let c = (std::f64::consts::PI * t).cos();
    Ok(if t <= 0.5 {
        peak - (peak - end) * (1.0 - c) / 2.0
    } else {
        end + (peak - end) * (1.0 + c) / 2.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn endpoints_are_exact() {
        // 100 steps per epoch: warmup 5 steps; 1000 steps total
        let c = cfg();
        assert_eq!(lr_at(0, 100, 1000, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(5, 100, 1000, &c).unwrap(), 5e-4);
        assert_eq!(lr_at(999, 100, 1000, &c).unwrap(), 1e-5);
        let mid = lr_at(502, 100, 1000, &c).unwrap();
        assert!((mid - 2.55e-4).abs() <= 1e-12 * 2.55e-4);
    }

    #[test]
    fn warmup_is_linear_and_clamped() {
        let c = cfg();
        assert_eq!(warmup_steps(&c, 3), 1);
        assert_eq!(warmup_steps(&c, 100), 5);
        let third = lr_at(2, 100, 1000, &c).unwrap();
        assert!((third - (1e-4 + 0.4 * 4e-4)).abs() < 1e-18);
    }

    #[test]
    fn too_short_schedules_are_rejected() {
        let c = cfg();
        assert!(lr_at(0, 100, 5, &c).is_err());
        assert!(lr_at(0, 100, 6, &c).is_err());
        assert!(lr_at(6, 100, 6, &c).is_err());
        assert!(lr_at(0, 100, 7, &c).is_ok());
    }

    proptest! {
        #[test]
        fn continuous_at_boundary_and_non_increasing_after(spe in 1usize..400, epochs in 1usize..20) {
            let c = cfg();
            let total = spe * epochs;
            let w = warmup_steps(&c, spe);
            prop_assume!(total > w + 1);
            let at = |s| lr_at(s, spe, total, &c).unwrap();
            prop_assert_eq!(at(w), c.lr_peak);
            let step_size = (c.lr_peak - c.lr_end) * (std::f64::consts::PI / (total - 1 - w) as f64);
            prop_assert!(c.lr_peak - at(w + 1) <= step_size);
            for s in w + 1..total {
                prop_assert!(at(s) <= at(s - 1), "step {}: {} > {}", s, at(s), at(s - 1));
            }
            for s in 1..=w {
                prop_assert!(at(s) >= at(s - 1));
            }
        }
    }
}
