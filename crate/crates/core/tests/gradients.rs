//! Analytic backward passes against central finite differences.

mod support;

use chanmap::nn::Mode;
use support::grad::{self, Check};

const INSTANCES: u64 = 20;

fn assert_all(checks: Vec<Check>) {
    for c in checks {
        assert!(c.passed(), "{c}");
    }
}

#[test]
fn conv3d_gradients() {
    (0..INSTANCES).for_each(|s| assert_all(grad::conv_instance(s)));
}

#[test]
fn batchnorm_gradients() {
    (0..INSTANCES).for_each(|s| assert_all(grad::batchnorm_instance(100 + s)));
}

#[test]
fn relu_gradient() {
    (0..INSTANCES).for_each(|s| assert_all(grad::relu_instance(200 + s)));
}

#[test]
fn resblock_gradients() {
    (0..INSTANCES).for_each(|s| assert_all(grad::resblock_instance(300 + s)));
}

#[test]
fn network_loss_gradients() {
    for s in 0..INSTANCES {
        let (batch, mode) = if s % 2 == 0 { (1, Mode::Eval) } else { (2, Mode::Train) };
        assert_all(grad::network_instance(batch, mode, 2, 400 + s));
    }
}

#[test]
fn network_loss_gradients_wider() {
    assert_all(grad::network_instance(2, Mode::Train, 4, 500));
}
