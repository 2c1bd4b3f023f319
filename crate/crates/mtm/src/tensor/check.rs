//! Central-difference gradient checking against the tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Tape, Tensor, TensorError};

/// Named parameter set handed to a graph builder.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares tape gradients against central finite differences
/// `(f(p + h) - f(p - h)) / 2h` on every sampled coordinate.
///
/// `build` must construct a scalar loss from the leafed parameters it is
/// given; a graph that recorded train-mode dropout is rejected. At most
/// `max_coords_per_tensor` coordinates are sampled per parameter (all of
/// them when the tensor is small enough), drawn deterministically from
/// `seed`. The relative error is
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-6)`.
pub fn grad_check<F>(
    params: &ParamMap,
    h: f64,
    max_coords_per_tensor: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, &BTreeMap<String, NodeId>) -> NodeId,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(TensorError::BadStep { h });
    }

    // Analytic pass.
    let tape = Tape::new();
    let mut leafed = BTreeMap::new();
    for (name, t) in params {
        leafed.insert(name.clone(), tape.leaf(t.clone()));
    }
    let loss = build(&tape, &leafed);
    if tape.is_stochastic() {
        return Err(TensorError::StochasticGraph);
    }
    let grads = tape.backward(loss);

    let eval = |p: &ParamMap| -> f64 {
        let tape = Tape::new();
        let mut leafed = BTreeMap::new();
        for (name, t) in p {
            leafed.insert(name.clone(), tape.leaf(t.clone()));
        }
        tape.value(build(&tape, &leafed)).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, coords_checked: 0 };
    for (name, tensor) in params {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= max_coords_per_tensor {
            (0..n).collect()
        } else {
            (0..max_coords_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        let g_ad = grads.get(leafed[name]);
        for c in coords {
            let orig = tensor.data()[c];
            work.get_mut(name).unwrap().data_mut()[c] = orig + h;
            let f_plus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[c] = orig - h;
            let f_minus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[c] = orig;

            let g_fd = (f_plus - f_minus) / (2.0 * h);
            let g_an = g_ad.map(|t| t.data()[c]).unwrap_or(0.0);
            let rel = (g_an - g_fd).abs() / g_an.abs().max(g_fd.abs()).max(1e-6);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), c));
            }
        }
    }
    Ok(report)
}
