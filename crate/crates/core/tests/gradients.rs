use latsep::gradcheck::{block_kind, check_generator, BLOCK_KINDS};
use latsep::tensor::Tensor;
use latsep::unet::{GeneratorModel, UNetConfig};

fn irregular(rows: usize, cols: usize, salt: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * 1.37 + salt).sin() * 0.8 + 0.05 * r as f64)
}

fn small_config() -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        groups: 4,
        fourier_features: 4,
        time_embed_channels: 8,
        ..UNetConfig::toy(4)
    }
}

#[test]
fn every_parameter_has_a_block_kind() {
    let m = GeneratorModel::new(small_config(), 0).unwrap();
    for p in m.params.iter() {
        assert!(block_kind(&p.name).is_some(), "unclassified parameter {}", p.name);
    }
    // The toy layout exercises every block type.
    for (kind, _) in BLOCK_KINDS {
        assert!(m.params.iter().any(|p| block_kind(&p.name) == Some(kind)), "no {kind} parameters");
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let m = GeneratorModel::new(small_config(), 3).unwrap();
    let (x, cond, target) = (irregular(4, 16, 0.1), irregular(4, 16, 2.3), irregular(4, 16, 4.7));
    for sigma in [0.1, 0.73] {
        let checks = check_generator(&m, &x, sigma, &cond, &target, 2, 1e-5, 11).unwrap();
        assert!(checks.len() >= 20, "{} checks", checks.len());
        for c in &checks {
            assert!(c.rel_error() < 1e-3, "{c:?} rel {}", c.rel_error());
            assert!(c.analytic.abs() > 0.0, "{c:?} has a dead gradient");
        }
    }
}
