//! Learning-rate schedule: linear warmup, cosine decay, constant floor.
//!
//! Positions are measured in samples (sequences), not steps.

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_samples: u64,
    pub decay_samples: u64,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak_lr: lr,
            min_lr: lr,
            warmup_samples: 0,
            decay_samples: 1,
        }
    }
}

/// LR at a sample position: 0 -> peak linearly over the warmup window, then
/// cosine down to the minimum over the decay window, then constant.
pub fn lr_at(schedule: &Schedule, samples_seen: u64) -> f64 {
    let s = schedule;
    debug_assert!(s.min_lr <= s.peak_lr);
    if samples_seen < s.warmup_samples {
        return s.peak_lr * samples_seen as f64 / s.warmup_samples as f64;
    }
    let into_decay = samples_seen - s.warmup_samples;
    if into_decay >= s.decay_samples {
        return s.min_lr;
    }
    let progress = into_decay as f64 / s.decay_samples as f64;
    s.min_lr + (s.peak_lr - s.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
