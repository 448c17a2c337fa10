use std::f64::consts::PI;

/// Cosine annealing from `lr_init` at step 0 to `lr_min` at step `t_max`,
/// constant afterwards.
pub fn cosine_lr(step: usize, lr_init: f64, lr_min: f64, t_max: usize) -> f64 {
    if t_max == 0 || step >= t_max {
        return lr_min;
    }
    if step == 0 {
        return lr_init;
    }
    let t = step as f64 / t_max as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * t).cos())
}

/// Scheduler step reached after `episode` completed episodes.
pub fn schedule_step(episode: usize, stride: usize) -> usize {
    episode / stride.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 1e-3, 1e-6, 50), 1e-3);
        assert_eq!(cosine_lr(50, 1e-3, 1e-6, 50), 1e-6);
        assert_eq!(cosine_lr(80, 1e-3, 1e-6, 50), 1e-6);
        assert!((cosine_lr(25, 1e-3, 1e-6, 50) - 5.005e-4).abs() < 1e-15);
    }

    #[test]
    fn monotone_decay() {
        let lrs: Vec<f64> = (0..=50).map(|t| cosine_lr(t, 1e-3, 1e-6, 50)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(schedule_step(39, 20), 1);
    }
}
