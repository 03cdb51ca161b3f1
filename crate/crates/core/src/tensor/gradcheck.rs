use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{invalid, ParamId, ParamStore, Tape, TensorError, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`.
    pub max_rel_error: f64,
    /// Parameter and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Parameters whose analytic gradient is missing or identically zero.
    pub zero_grad_params: Vec<String>,
}

const REL_FLOOR: f64 = 1e-4;

/// Compares reverse-mode gradients of the scalar `f` with central finite
/// differences at up to `coords_per_param` sampled coordinates per parameter.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    f: F,
    h: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(invalid("grad_check", format!("step {h} outside [1e-6, 1e-4]")));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::new().with_finite_check(true);
        let out = f(&mut t, s)?;
        if t.value(out).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                t.shape(out)
            )));
        }
        Ok(t.value(out).item())
    };
    let mut tape = Tape::new().with_finite_check(true);
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0, zero_grad_params: Vec::new() };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let analytic = grads.param(id).map(|g| g.data().to_vec());
        if analytic.as_ref().is_none_or(|g| g.iter().all(|v| *v == 0.0)) {
            report.zero_grad_params.push(store.name(id).to_string());
        }
        let analytic = analytic.unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> =
            if n <= coords_per_param { (0..n).collect() } else { (0..coords_per_param).map(|_| rng.random_range(0..n)).collect() };
        for j in coords {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coords_checked += 1;
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
