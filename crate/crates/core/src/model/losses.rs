//! Adversarial, reconstruction, classification and task losses. All of them
//! average over the batch.

use crate::error::Result;
use crate::numcore::{Tape, Var};

/// Discriminator scores are clamped into `[D_CLAMP, 1 - D_CLAMP]` before
/// any logarithm.
pub const D_CLAMP: f64 = 1e-7;

fn mean_log(tape: &mut Tape<'_>, scores: Var, complement: bool) -> Var {
    let s = if complement {
        let neg = tape.neg(scores);
        tape.add_scalar(neg, 1.0)
    } else {
        scores
    };
    let s = tape.clamp(s, D_CLAMP, 1.0 - D_CLAMP);
    let l = tape.ln(s);
    tape.mean(l)
}

/// `-w · [log D(e_s1) + log D(e_s2)]`; the generators' side of the game.
/// `w` is a `[1, 1]` node, `source_scores` are `[batch, 1]` discriminator
/// outputs for the two source modalities.
pub fn fake_adversarial(tape: &mut Tape<'_>, w: Var, source_scores: [Var; 2]) -> Result<Var> {
    let a = mean_log(tape, source_scores[0], false);
    let b = mean_log(tape, source_scores[1], false);
    let s = tape.add(a, b)?;
    let ws = tape.mul(w, s)?;
    Ok(tape.neg(ws))
}

/// `-w · [log(1 - D(e_s1)) + log(1 - D(e_s2)) + log D(e_t)]`; the
/// discriminator's side of the game.
pub fn true_adversarial(
    tape: &mut Tape<'_>,
    w: Var,
    target_scores: Var,
    source_scores: [Var; 2],
) -> Result<Var> {
    let a = mean_log(tape, source_scores[0], true);
    let b = mean_log(tape, source_scores[1], true);
    let t = mean_log(tape, target_scores, false);
    let s = tape.add_all(&[a, b, t])?;
    let ws = tape.mul(w, s)?;
    Ok(tape.neg(ws))
}

/// Mean over rows of `‖a_r − b_r‖₂`.
fn mean_row_distance(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let n = tape.row_norm(diff);
    Ok(tape.mean(n))
}

/// `Σ_m ‖x̃_m − x_m‖₂` over the given modalities.
pub fn reconstruction(tape: &mut Tape<'_>, reconstructed: &[Var], original: &[Var]) -> Result<Var> {
    assert_eq!(reconstructed.len(), original.len());
    let terms = reconstructed
        .iter()
        .zip(original)
        .map(|(r, x)| mean_row_distance(tape, *r, *x))
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

/// `Σ_m ‖ŷ_m − y‖₂` with one-hot `y`.
pub fn classification(tape: &mut Tape<'_>, predictions: &[Var], onehot: Var) -> Result<Var> {
    let terms = predictions
        .iter()
        .map(|p| mean_row_distance(tape, *p, onehot))
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

/// Mean squared error over every entry.
pub fn mse(tape: &mut Tape<'_>, prediction: Var, target: Var) -> Result<Var> {
    let d = tape.sub(prediction, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}
