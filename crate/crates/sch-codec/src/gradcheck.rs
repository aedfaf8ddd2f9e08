//! Central finite-difference gradient checking.
//!
//! The checker perturbs stored parameters one coordinate at a time and
//! compares `(f(θ+h) − f(θ−h)) / 2h` against the tape gradient. It is the
//! independent oracle for every parameterized block, so it deliberately goes
//! through nothing but the public tape API.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with an absolute floor: |a−b| / max(|a|, |b|, 1).
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare tape gradients of a scalar-valued graph against central finite
/// differences for up to `coords_per_tensor` random coordinates of each
/// listed parameter. The closure must build the same graph on every call.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    mut f: F,
    coords_per_tensor: usize,
    seed: u64,
) -> CheckReport
where
    F: FnMut(&mut Tape<f64>, &ParamStore) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss);

    let mut analytic: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(params.len());
    for pid in params {
        let g = tape
            .param_var(*pid)
            .and_then(|v| grads.get(v).cloned());
        analytic.push(g);
    }
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport { max_err: 0.0, worst: String::new(), checked: 0 };
    let h_base = f64::EPSILON.powf(1.0 / 3.0);

    for (pi, pid) in params.iter().enumerate() {
        let len = store.value(*pid).len();
        let ncoords = coords_per_tensor.min(len);
        let mut picked = std::collections::HashSet::new();
        while picked.len() < ncoords {
            picked.insert(rng.gen_range(0..len));
        }
        for idx in picked {
            let theta = store.value(*pid).as_slice().expect("standard layout")[idx];
            let h = h_base * theta.abs().max(1.0);

            store.value_mut(*pid).as_slice_mut().unwrap()[idx] = theta + h;
            let mut tp = Tape::<f64>::new();
            let lp = f(&mut tp, store);
            let fp = tp.scalar(lp);
            drop(tp);

            store.value_mut(*pid).as_slice_mut().unwrap()[idx] = theta - h;
            let mut tm = Tape::<f64>::new();
            let lm = f(&mut tm, store);
            let fm = tm.scalar(lm);
            drop(tm);

            store.value_mut(*pid).as_slice_mut().unwrap()[idx] = theta;

            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[pi]
                .as_ref()
                .map(|g| g.as_slice().unwrap()[idx])
                .unwrap_or(0.0);
            let err = rel_err(ad, fd);
            report.checked += 1;
            if err > report.max_err {
                report.max_err = err;
                report.worst = format!(
                    "{}[{}]: analytic={:.6e} fd={:.6e}",
                    store.name(*pid),
                    idx,
                    ad,
                    fd
                );
            }
        }
    }
    report
}

/// Panic unless all checked gradients are within `tol`.
pub fn assert_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    f: F,
    coords_per_tensor: usize,
    seed: u64,
    tol: f64,
) where
    F: FnMut(&mut Tape<f64>, &ParamStore) -> Var,
{
    let report = check_gradients(store, params, f, coords_per_tensor, seed);
    assert!(
        report.max_err <= tol,
        "gradient check failed: max err {:.3e} > {:.1e} at {} ({} coords)",
        report.max_err,
        tol,
        report.worst,
        report.checked
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn quadratic_gradient_matches() {
        let mut store = ParamStore::new();
        let x = store.add("x", ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.2, 2.0]).unwrap());
        // f = sum(x^2) + mean(3x)
        assert_gradients(
            &mut store,
            &[x],
            |t, s| {
                let xv = t.param(s, x);
                let sq = t.sq(xv);
                let s1 = t.sum(sq);
                let scaled = t.scale(xv, 3.0);
                let s2 = t.mean(scaled);
                t.add(s1, s2)
            },
            3,
            7,
            1e-6,
        );
    }
}
