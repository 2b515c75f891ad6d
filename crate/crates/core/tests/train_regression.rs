//! Recorded training-run baseline on a periodic-stripe reference.

use microrecon::losses::References;
use microrecon::network::NetworkSpec;
use microrecon::trainer::{train, TrainConfig};
use microrecon::volume::Image2D;

/// Mean of a window of per-iteration losses; single late iterations are
/// noisy because every sample sees a different slab.
fn window_mean(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}

#[test]
fn stripe_reference_loss_drops_below_a_quarter() {
    let stripes = Image2D::from_fn(64, 64, |_, x| x % 8 < 4).unwrap();
    let spec = NetworkSpec::new(3, 8).unwrap();
    let cfg = TrainConfig { iterations: 300, log_every: 0, seed: 3, ..Default::default() };
    let (params, report) = train(&References::Isotropic(stripes), spec, &cfg).unwrap();
    assert_eq!(report.losses.len(), 300);
    // The untrained network's loss; the window smooths only the end point.
    let first = report.losses[0];
    let last = window_mean(&report.losses[290..]);
    assert!(last < 0.25 * first, "loss {first:.4e} -> {last:.4e}");
    assert_eq!(params.train_steps, 300);
    assert_eq!(params.reference_porosity, Some(0.5));
}
