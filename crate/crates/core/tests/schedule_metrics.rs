use agridistill_core::metrics::{confusion, iou, IoUConfig};
use agridistill_core::raster::Mask;
use agridistill_core::schedule::PolyDecay;
use agridistill_core::stats::{mean, sample_std};
use agridistill_core::Error;
use proptest::prelude::*;

#[test]
fn linear_midpoint() {
    let lr = PolyDecay::default().lr_at(500, 1000).unwrap();
    assert!((lr - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
}

#[test]
fn schedule_rejects_bad_arguments() {
    let s = PolyDecay::default();
    assert!(matches!(s.lr_at(0, 0), Err(Error::Argument(_))));
    assert!(matches!(s.lr_at(11, 10), Err(Error::Argument(_))));
    assert!(PolyDecay { lr_start: 1e-5, lr_end: 1e-3, power: 1.0 }.validate().is_err());
    assert!(PolyDecay { power: 0.0, ..PolyDecay::default() }.validate().is_err());
}

#[test]
fn threshold_is_inclusive() {
    let mask = Mask::new(3, 1, vec![1, 1, 0]).unwrap();
    let cfg = IoUConfig::default();
    assert_eq!(confusion(&[0.9, 0.8999, 0.95], &mask, &cfg).unwrap(), (1, 3));
    assert!((iou(&[0.9, 0.8999, 0.95], &mask, &cfg).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn iou_config_bounds() {
    assert!(IoUConfig::new(0.0).is_err());
    assert!(IoUConfig::new(1.0).is_err());
    assert!(IoUConfig::new(0.5).is_ok());
}

#[test]
fn seed_statistics() {
    assert_eq!(mean(&[0.25, 0.75]), 0.5);
    assert!((sample_std(&[0.25, 0.75]) - 0.125f64.sqrt()).abs() < 1e-15);
    assert_eq!(sample_std(&[0.4]), 0.0);
}

proptest! {
    #[test]
    fn decay_is_monotone_and_bounded(
        start in 1e-4f64..1e-1,
        ratio in 1e-3f64..1.0,
        power in 0.25f64..4.0,
        total in 1usize..2000,
    ) {
        let s = PolyDecay { lr_start: start, lr_end: start * ratio, power };
        let mut prev = s.lr_at(0, total).unwrap();
        prop_assert_eq!(prev, start);
        for step in 1..=total {
            let lr = s.lr_at(step, total).unwrap();
            prop_assert!(lr <= prev && lr >= s.lr_end);
            prev = lr;
        }
        prop_assert!((prev - s.lr_end).abs() <= 1e-15 * start);
    }

    #[test]
    fn iou_lies_in_the_unit_interval(
        probs in prop::collection::vec(0.0f64..=1.0, 16),
        bits in prop::collection::vec(any::<bool>(), 16),
        t in 0.05f64..0.95,
    ) {
        let mask = Mask::new(4, 4, bits.iter().map(|&b| u8::from(b)).collect()).unwrap();
        let v = iou(&probs, &mask, &IoUConfig::new(t).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let perfect: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
        prop_assert_eq!(iou(&perfect, &mask, &IoUConfig::new(t).unwrap()).unwrap(), 1.0);
    }
}
