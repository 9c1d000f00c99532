use std::f64::consts::PI;

/// Linear warmup to `base` over `warmup` epochs, then cosine decay towards 0 at `epochs`.
pub fn lr_at(epoch: usize, base: f64, warmup: usize, epochs: usize) -> f64 {
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let span = epochs.saturating_sub(warmup).max(1) as f64;
    let t = (epoch - warmup) as f64 / span;
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// Learning-rate multipliers per layer group: patch embedding, each block, then the head.
/// Group `g` gets `decay^(depth + 1 - g)`.
pub fn layer_lr_scales(decay: f64, depth: usize) -> Vec<f64> {
    (0..=depth + 1).map(|g| decay.powi((depth + 1 - g) as i32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn warmup_examples() {
        assert!((lr_at(39, 1.5e-4, 40, 1000) - 1.5e-4).abs() < 1e-18);
        assert!((lr_at(19, 1.5e-4, 40, 1000) - 7.5e-5).abs() < 1e-18);
        assert!((lr_at(40, 1.5e-4, 40, 1000) - 1.5e-4).abs() < 1e-18);
        assert!(lr_at(999, 1.5e-4, 40, 1000) < 1e-9);
    }

    #[test]
    fn layer_scale_examples() {
        let s = layer_lr_scales(0.75, 12);
        assert_eq!(s.len(), 14);
        assert_eq!(s[13], 1.0);
        assert_eq!(s[12], 0.75);
        assert!((s[0] - 0.75f64.powi(13)).abs() < 1e-15);
        assert!((s[0] - 0.0238).abs() < 1e-4);
        assert!(layer_lr_scales(1.0, 5).iter().all(|&v| v == 1.0));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn nonincreasing_after_warmup(warmup in 0usize..20, extra in 1usize..200, base in 1e-6f64..1.0) {
            let epochs = warmup + extra;
            for e in warmup.max(1)..epochs {
                prop_assert!(lr_at(e, base, warmup, epochs) <= lr_at(e - 1, base, warmup, epochs) + 1e-18 || e - 1 < warmup);
            }
            if warmup > 0 {
                prop_assert!((lr_at(warmup, base, warmup, epochs) - lr_at(warmup - 1, base, warmup, epochs)).abs() < 1e-15);
            }
        }
    }
}
