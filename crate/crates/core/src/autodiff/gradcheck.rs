use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name, flat index, analytic and numeric derivative at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

const MIN_COORDS: usize = 50;

/// Compares analytic gradients with central differences.
///
/// `f` builds the scalar objective on an evaluation-mode graph, so dropout
/// is off. Checks every coordinate when the store has at most 50 scalars,
/// otherwise a seeded sample that covers every parameter and favours
/// coordinates with a nonzero analytic gradient. The error per coordinate
/// is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F, E>(store: &mut ParamStore<f64>, f: F, eps: f64, seed: u64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(value).into());
        }
        let grads = g.backward(loss);
        store
            .ids()
            .map(|id| match grads.param(id) {
                Some(a) => a.data().to_vec(),
                None => vec![0.0; store.value(id).len()],
            })
            .collect()
    };

    let coords = sample_coords(store, &analytic, seed);
    let eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let v = g.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFinite(v).into())
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (id, k) in coords {
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + eps;
        let plus = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig - eps;
        let minus = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[id.index()][k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.coords_checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((store.get(id).name.clone(), k, a, numeric));
        }
    }
    Ok(report)
}

fn sample_coords(store: &ParamStore<f64>, analytic: &[Vec<f64>], seed: u64) -> Vec<(ParamId, usize)> {
    let total = store.num_scalars();
    if total <= MIN_COORDS {
        return store
            .ids()
            .flat_map(|id| (0..store.value(id).len()).map(move |k| (id, k)))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_param = MIN_COORDS.div_ceil(store.len()).max(6);
    let mut out = Vec::new();
    for id in store.ids() {
        let grad = &analytic[id.index()];
        let mut nonzero: Vec<usize> = (0..grad.len()).filter(|&k| grad[k] != 0.0).collect();
        let mut all: Vec<usize> = (0..grad.len()).collect();
        nonzero.shuffle(&mut rng);
        all.shuffle(&mut rng);
        let mut picked: Vec<usize> = nonzero.into_iter().take(per_param - per_param / 3).collect();
        for k in all {
            if picked.len() >= per_param.min(grad.len()) {
                break;
            }
            if !picked.contains(&k) {
                picked.push(k);
            }
        }
        out.extend(picked.into_iter().map(|k| (id, k)));
    }
    out
}
