//! Central finite-difference check of the analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::transformer::{Model, ModelError, Sequence};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates passed over because a ±step probe changed a max-pooling
    /// winner, so the difference quotient straddles a kink.
    pub straddling: usize,
    pub max_rel_error: f64,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and numeric gradients of the mean batch loss on up to
/// `per_tensor` coordinates of every tensor (all coordinates when the tensor
/// is smaller). Coordinates whose probes straddle a max-pooling switch are
/// replaced by further random draws.
pub fn check_gradients<R: Rng + ?Sized>(
    model: &Model<f64>,
    seqs: &[&Sequence],
    labels: &[f64],
    per_tensor: usize,
    rng: &mut R,
) -> Result<Vec<TensorCheck>, ModelError> {
    let (_, grad) = model.loss_and_grad(seqs, labels)?;
    let (_, winners) = model.loss_and_winners(seqs, labels)?;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (name, range) in model.layout().tensors() {
        let mut order: Vec<usize> = (0..range.len()).collect();
        order.shuffle(rng);
        let (mut checked, mut straddling) = (0, 0);
        let mut worst = 0.0f64;
        for c in order {
            if checked == per_tensor {
                break;
            }
            let i = range.start + c;
            let orig = probe.params[i];
            probe.params[i] = orig + FD_STEP;
            let (up, w_up) = probe.loss_and_winners(seqs, labels)?;
            probe.params[i] = orig - FD_STEP;
            let (down, w_down) = probe.loss_and_winners(seqs, labels)?;
            probe.params[i] = orig;
            if w_up != winners || w_down != winners {
                straddling += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(grad[i], numeric));
            checked += 1;
        }
        out.push(TensorCheck {
            name: name.clone(),
            checked,
            straddling,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
