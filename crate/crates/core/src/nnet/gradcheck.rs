//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

/// Gradients whose magnitude stays below this are compared absolutely;
/// finite-difference round-off sits well under it.
const SCALE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-input relative error, `|a - n|_inf / max(|a|_inf, |n|_inf, 1e-7)`.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
    /// Coordinates whose `+-h` probes landed on a different side of a ReLU,
    /// L1 or AdaIN-floor kink than the base point. Central differences do
    /// not estimate a derivative there, so they are left out of the error.
    pub coords_skipped: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// The output of `f` is reduced to a scalar through a fixed random
/// projection, since a plain sum has identically zero gradient through some
/// operators (normalisation layers among them). With `max_coords`, each input
/// is checked on a random subset of that many coordinates.
pub fn grad_check<F>(inputs: &[Tensor], f: F, h: f64, max_coords: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_pattern = tape.kink_pattern();
    let proj = Tensor::uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let loss = tape.weighted_sum(out, proj.clone())?;
    let mut grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok((t.value(o).dot(&proj), t.kink_pattern()))
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let (mut coords_checked, mut coords_skipped) = (0, 0);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.take_or_zeros(vars[i], input.shape());
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => {
                let mut c = sample(&mut rng, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for &j in &coords {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (fp, pp) = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let (fm, pm) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if pp != base_pattern || pm != base_pattern {
                coords_skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            coords_checked += 1;
        }
        per_input.push(diff / scale.max(SCALE_FLOOR));
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        coords_checked,
        coords_skipped,
    })
}
