//! Central finite-difference checks of the generator's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{ensure, Result};
use crate::params::ParamStore;
use crate::tensor::{LatentTensor, Tensor};
use crate::unet::GeneratorModel;

/// Block types and the name fragment identifying each; first match wins.
pub const BLOCK_KINDS: [(&str, &str); 17] = [
    ("time_mlp", "time.mlp"),
    ("attn_norm", ".attn.norm."),
    ("attn_query", ".attn.q."),
    ("attn_key", ".attn.k."),
    ("attn_value", ".attn.v."),
    ("attn_out", ".attn.out."),
    ("out_norm", "out.norm."),
    ("out_conv", "out.conv."),
    ("input_conv", "input."),
    ("cond_merge", ".merge."),
    ("film_scale", ".film.scale."),
    ("film_shift", ".film.shift."),
    ("res_skip", ".skip."),
    ("downsample", ".down."),
    ("upsample", ".up."),
    ("res_norm", ".norm"),
    ("res_conv", ".conv"),
];

/// Block type of a generator parameter name.
pub fn block_kind(name: &str) -> Option<&'static str> {
    BLOCK_KINDS.iter().find(|(_, pat)| name.contains(pat)).map(|(k, _)| *k)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub param: String,
    pub kind: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

fn loss_of(model: &GeneratorModel, params: &ParamStore, x: &LatentTensor, sigma: f64, cond: &LatentTensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let c = g.constant(cond.clone());
    let out = model.forward_graph(&params.bind(0, false), &mut g, xv, sigma, c)?;
    let l = g.mse_loss(out, target);
    Ok(g.value(l).get(0, 0))
}

/// Compares `∂ MSE(m(x, σ, C), target) / ∂θ` against central differences with
/// step `h` for `per_kind` parameters of every block type present. Within a
/// parameter the element with the largest gradient among a few random
/// candidates is checked, so the comparison is not dominated by round-off.
#[allow(clippy::too_many_arguments)]
pub fn check_generator(
    model: &GeneratorModel,
    x: &LatentTensor,
    sigma: f64,
    cond: &LatentTensor,
    target: &Tensor,
    per_kind: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    ensure!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let c = g.constant(cond.clone());
    let out = model.forward_graph(&model.params.bind(0, true), &mut g, xv, sigma, c)?;
    let l = g.mse_loss(out, target);
    let grads = g.backward(l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for (kind, _) in BLOCK_KINDS {
        let slots: Vec<usize> = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| block_kind(&p.name) == Some(kind))
            .map(|(i, _)| i)
            .collect();
        // Some parameters are structurally gradient-free (a key bias shifts
        // every attention score of a query equally); they are skipped.
        let live = slots.into_iter().filter_map(|s| grads.get(s).map(|g| (s, g))).filter(|(_, g)| g.max_abs() > 1e-15);
        for (slot, grad) in live.take(per_kind) {
            let n = grad.len();
            let index = (0..8.min(n))
                .map(|_| rng.random_range(0..n))
                .max_by(|&a, &b| grad.data()[a].abs().total_cmp(&grad.data()[b].abs()))
                .expect("parameters are non-empty");
            let mut p = model.params.clone();
            let base = p.iter().nth(slot).expect("slot exists").value.data()[index];
            let mut eval = |v: f64| -> Result<f64> {
                p.iter_mut().nth(slot).expect("slot exists").value.data_mut()[index] = v;
                loss_of(model, &p, x, sigma, cond, target)
            };
            let numeric = (eval(base + h)? - eval(base - h)?) / (2.0 * h);
            checks.push(GradCheck {
                param: model.params.iter().nth(slot).expect("slot exists").name.clone(),
                kind,
                index,
                analytic: grad.data()[index],
                numeric,
            });
        }
    }
    Ok(checks)
}
