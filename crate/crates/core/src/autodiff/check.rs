use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Smallest step tried, relative to the initial one.
const MIN_STEP_FRACTION: f64 = 1e-3;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares backward-pass gradients of `f` against central differences on a
/// random subsample of at most `samples` trainable coordinates.
///
/// Each coordinate starts at step `eps` and halves it until two successive
/// central differences agree to 1e-5, which keeps non-smooth points out of
/// the stencil. Halving also stops once the two estimates differ by less than
/// the round-off of the loss, keeping the coarser one.
///
/// The relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParamStore, f: F, eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    let analytic = graph.backward(loss)?.param_grads(&graph);

    let mut coords: Vec<(ParamId, usize, f64)> = Vec::new();
    for (id, g) in &analytic {
        for (k, &v) in g.data().iter().enumerate() {
            coords.push((*id, k, v));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        let mut p = rand::seq::index::sample(&mut rng, coords.len(), samples).into_vec();
        p.sort_unstable();
        p
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, store)?;
        Ok(g.scalar(l))
    };

    // Round-off bound for a central difference with step `h`.
    let f0 = eval(store)?;
    let noise = |h: f64| 8.0 * f64::EPSILON * f0.abs().max(f64::MIN_POSITIVE) / h;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: picks.len(),
        worst: None,
    };
    for i in picks {
        let (id, k, a) = coords[i];
        let orig = store.value(id).data()[k];
        let mut central = |h: f64| -> Result<f64> {
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        // Halve the step until two successive estimates agree, so that the
        // stencil does not straddle a ReLU, max or nearest-neighbour switch.
        let mut h = eps;
        let mut coarse = central(h)?;
        let n = loop {
            let fine = central(h / 2.0)?;
            if (coarse - fine).abs() <= noise(h / 2.0) {
                break coarse;
            }
            let agree = (coarse - fine).abs() <= 1e-5 * coarse.abs().max(fine.abs()).max(1e-8);
            h /= 2.0;
            if agree || h < eps * MIN_STEP_FRACTION {
                break fine;
            }
            coarse = fine;
        };
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.param(id).name.clone(), k, a, n));
        }
    }
    Ok(report)
}
