use thermoviab::io::{RoiMask, ThermalFrame};
use thermoviab::phantom::{generate_case, PhantomSpec};
use thermoviab::segmentation::{dice, train_segmenter, TrainConfig};

#[test]
fn overfit_loss_mostly_decreases() {
    let data: Vec<(ThermalFrame, RoiMask)> = (0..5u64)
        .map(|s| {
            let case = generate_case(&PhantomSpec::small(48, 32, 60 + s), "c", "p").unwrap();
            (case.sequence.frames()[0].clone(), case.mask)
        })
        .collect();
    let cfg = TrainConfig { epochs: 200, learning_rate: 1e-2, batch_size: 5, seed: 1, ..TrainConfig::default() };
    let losses = train_segmenter(&data, &cfg).unwrap().losses;
    let pairs = losses.len() - 1;
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.9 * pairs as f64, "{down} of {pairs} epochs decreased: {losses:?}");
    assert!(losses[pairs] < 0.5 * losses[0]);
}

#[test]
fn dice_is_symmetric() {
    let a = RoiMask::from_fn(30, 20, |x, y| (x - 12.0).hypot(y - 10.0) < 6.0);
    let b = RoiMask::from_fn(30, 20, |x, y| (x - 16.0).abs() < 5.0 && (y - 9.0).abs() < 7.0);
    assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
}
