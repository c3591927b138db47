mod common;

use common::ScalarAdam;
use proptest::prelude::*;
use tlkit::optim::{adam_step, AdamConfig, AdamState};
use tlkit::Tensor64;

#[test]
fn matches_scalar_transcription() {
    common::adam_criterion().unwrap();
}

#[test]
fn single_scalar_first_step() {
    let mut w = Tensor64::new(vec![1], vec![1.0]).unwrap();
    let grads = [("w".to_string(), Tensor64::new(vec![1], vec![0.5]).unwrap())].into_iter().collect();
    adam_step(&mut AdamState::new(), vec![("w", &mut w)], &grads, &AdamConfig::default()).unwrap();
    assert_eq!(format!("{:.6}", w.data()[0]), "0.999000");
}

proptest! {
    #[test]
    fn first_step_is_alpha_sign(g in prop_oneof![0.1f64..1e4, -1e4f64..-0.1], alpha in 1e-5f64..1.0) {
        let mut p = Tensor64::new(vec![1], vec![0.0]).unwrap();
        let grads = [("p".to_string(), Tensor64::new(vec![1], vec![g]).unwrap())].into_iter().collect();
        adam_step(&mut AdamState::new(), vec![("p", &mut p)], &grads, &AdamConfig::default().with_alpha(alpha)).unwrap();
        prop_assert!((p.data()[0] + alpha * g.signum()).abs() <= 0.01 * alpha);
    }

    #[test]
    fn tracks_oracle_on_arbitrary_gradients(gs in prop::collection::vec(-5.0f64..5.0, 1..15)) {
        let cfg = AdamConfig::default().with_alpha(0.01);
        let mut p = Tensor64::new(vec![1], vec![0.2]).unwrap();
        let mut state = AdamState::new();
        let mut oracle = ScalarAdam::new();
        let mut theta = 0.2;
        for g in gs {
            let grads = [("p".to_string(), Tensor64::new(vec![1], vec![g]).unwrap())].into_iter().collect();
            adam_step(&mut state, vec![("p", &mut p)], &grads, &cfg).unwrap();
            theta = oracle.step(theta, g, cfg.alpha, cfg.beta1, cfg.beta2, cfg.epsilon);
            prop_assert!((p.data()[0] - theta).abs() < 1e-10);
        }
    }
}
