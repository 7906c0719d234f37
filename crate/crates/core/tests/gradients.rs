mod common;

use common::{gradcheck, GradCheck};
use mrsr::losses::LossWeights;
use mrsr::model::GeneratorConfig;

const TOL: f64 = 1e-3;

fn assert_close(c: GradCheck) {
    assert!(c.checked > 0);
    println!("{c:?}");
    assert!(c.worst < TOL, "{c:?}");
    // Kinks are rare; a large share would point at a broken backward pass.
    assert!(c.refined * 50 < c.checked, "{c:?}");
}

#[test]
fn isotropic_generator_mse_gradients() {
    assert_close(gradcheck::generator_mse(
        GeneratorConfig::isotropic(2).unwrap(),
    ));
}

#[test]
fn anisotropic_generator_mse_gradients() {
    assert_close(gradcheck::generator_mse(
        GeneratorConfig::anisotropic(4).unwrap(),
    ));
}

#[test]
fn perceptual_gradient_with_default_weights() {
    assert_close(gradcheck::perceptual_wrt_sr(LossWeights::default()));
}

#[test]
fn perceptual_gradient_with_strong_adversarial_term() {
    let w = LossWeights {
        w_content: 1.0,
        w_adversarial: 1.0,
    };
    assert_close(gradcheck::perceptual_wrt_sr(w));
}

#[test]
fn adversarial_only_gradient() {
    let w = LossWeights {
        w_content: 0.0,
        w_adversarial: 1.0,
    };
    assert_close(gradcheck::perceptual_wrt_sr(w));
}

#[test]
fn generator_gradients_under_perceptual_loss() {
    let w = LossWeights {
        w_content: 1.0,
        w_adversarial: 0.1,
    };
    assert_close(gradcheck::generator_perceptual(w));
}

#[test]
fn discriminator_parameter_gradients() {
    assert_close(gradcheck::discriminator());
}
