//! Central-finite-difference verification of tape gradients.
//!
//! The checker only uses forward evaluations of a user-supplied graph
//! builder, so it is independent of the backward pass it validates. Run it
//! in f64; f32 truncation error swamps the comparison.

use crate::{NodeId, Result, Tape, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely instead of dividing by noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Check the analytic gradient of `build`'s scalar output with respect to
/// every tensor in `inputs`.
///
/// `samples_per_tensor = None` checks every coordinate; `Some(k)` checks a
/// seeded random subset of `k` coordinates per tensor (for large models).
/// `build` must be deterministic: if it uses dropout, seed the RNG inside
/// the closure.
pub fn check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    h: f64,
    samples_per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            grads
                .get(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = StdRng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0 };

    for (k, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let coords: Vec<usize> = match samples_per_tensor {
            Some(s) if s < numel => {
                let mut picked: Vec<usize> =
                    (0..s).map(|_| rng.gen_range(0..numel)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..numel).collect(),
        };
        for &i in &coords {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let f_plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let f_minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let err = rel_err(analytic[k][i], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
