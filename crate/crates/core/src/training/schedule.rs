use serde::{Deserialize, Serialize};

use crate::config::{DecayShape, TrainingSettings};

/// Linear warmup from `start` to `peak`, then decay to `floor` at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub start: f64,
    pub peak: f64,
    pub warmup: usize,
    pub floor: f64,
    pub total: usize,
    pub decay: DecayShape,
}

impl ScheduleParams {
    pub fn pretrain(settings: &TrainingSettings) -> Self {
        Self {
            start: settings.lr_start,
            peak: settings.lr_peak,
            warmup: settings.warmup_iterations,
            floor: settings.lr_floor,
            total: settings.pretrain_iterations,
            decay: settings.decay,
        }
    }

    /// Constant learning rate.
    pub fn flat(lr: f64) -> Self {
        Self {
            start: lr,
            peak: lr,
            warmup: 0,
            floor: lr,
            total: 0,
            decay: DecayShape::Linear,
        }
    }
}

pub fn lr_at(iteration: usize, p: &ScheduleParams) -> f64 {
    if iteration <= p.warmup {
        if p.warmup == 0 {
            return p.peak;
        }
        let f = iteration as f64 / p.warmup as f64;
        return p.start * (1.0 - f) + p.peak * f;
    }
    if iteration >= p.total {
        return p.floor;
    }
    let f = (iteration - p.warmup) as f64 / (p.total - p.warmup) as f64;
    let g = match p.decay {
        DecayShape::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * f).cos()),
        DecayShape::Linear => 1.0 - f,
    };
    p.floor + (p.peak - p.floor) * g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper(total: usize) -> ScheduleParams {
        ScheduleParams {
            total,
            ..ScheduleParams::pretrain(&TrainingSettings::default())
        }
    }

    #[test]
    fn anchor_points() {
        let p = paper(20_000);
        assert_eq!(lr_at(0, &p), 1e-7);
        assert_eq!(lr_at(5000, &p), 1e-5);
        assert_eq!(lr_at(20_000, &p), 1e-6);
        assert_eq!(lr_at(30_000, &p), 1e-6);
    }

    #[test]
    fn continuous_and_non_increasing_after_warmup() {
        for decay in [DecayShape::Cosine, DecayShape::Linear] {
            let p = ScheduleParams { decay, ..paper(12_000) };
            // no jump larger than one step of the steepest linear segment
            let step = (p.peak - p.floor) / (p.total - p.warmup) as f64;
            assert!((lr_at(5001, &p) - lr_at(5000, &p)).abs() <= step * (1.0 + 1e-9));
            assert!((lr_at(4999, &p) - lr_at(5000, &p)).abs() < 1e-8);
            let mut prev = lr_at(5000, &p);
            for it in 5001..=12_500 {
                let lr = lr_at(it, &p);
                assert!(lr <= prev);
                prev = lr;
            }
        }
    }

    #[test]
    fn warmup_is_increasing() {
        let p = paper(20_000);
        for it in 1..=5000 {
            assert!(lr_at(it, &p) > lr_at(it - 1, &p));
        }
    }

    #[test]
    fn flat_schedule() {
        let p = ScheduleParams::flat(6e-5);
        for it in [0, 1, 100, 10_000] {
            assert_eq!(lr_at(it, &p), 6e-5);
        }
    }
}
