//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Which coordinates of the inputs get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// `count` coordinates drawn without replacement across all inputs.
    Random { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Discrepancy>,
}

/// Relative error floor: discrepancies are divided by
/// `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences `(f(x + h) - f(x - h)) / 2h` on the selected coordinates and
/// reports the worst relative discrepancy.
///
/// `f` receives tensors that require gradients on the analytic pass and
/// plain constants on the perturbed passes.
pub fn finite_difference_check<F>(
    f: F,
    inputs: &[(Vec<f64>, Vec<usize>)],
    coords: Coords,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(invalid("finite_difference_check", "step must be positive"));
    }
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s))
        .collect::<Result<_>>()?;
    let loss = f(&params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let flat: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, (d, _))| (0..d.len()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = match coords {
        Coords::All => flat,
        Coords::Random { count, seed } => {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, flat.len(), count.min(flat.len())).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|k| flat[k]).collect()
        }
    };

    let eval = |which: usize, index: usize, delta: f64| -> Result<f64> {
        let consts: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, (d, s))| {
                let mut d = d.clone();
                if i == which {
                    d[index] += delta;
                }
                Tensor::new(d, s)
            })
            .collect::<Result<_>>()?;
        Ok(f(&consts)?.item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for (i, j) in chosen {
        let numeric = (eval(i, j, step)? - eval(i, j, -step)?) / (2.0 * step);
        let a = analytic[i][j];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(Discrepancy { input: i, index: j, analytic: a, numeric });
        }
    }
    Ok(report)
}

/// Contracts a tensor to a scalar with fixed pseudo-random weights so that
/// every output element contributes a distinct gradient signal.
pub fn weighted_sum(t: &Tensor, seed: u64) -> Result<Tensor> {
    use rand::Rng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let w: Vec<f64> = (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    t.mul(&Tensor::new(w, t.shape())?).map(|p| p.sum())
}

/// Finite-difference check of `loss(session)` with respect to `count`
/// randomly chosen trainable coordinates of `store`.
///
/// The analytic pass binds the store in training mode; perturbed passes
/// also run in training mode (so batch statistics are used consistently)
/// but their gradients are discarded.
pub fn store_gradient_check<F>(
    store: &crate::ParamStore,
    loss: F,
    count: usize,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&crate::Session) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(invalid("store_gradient_check", "step must be positive"));
    }
    let session = store.session(true);
    loss(&session)?.backward()?;
    let grads = session.grads();
    let flat: Vec<(usize, usize)> = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(i, e)| (0..e.data.len()).map(move |j| (i, j)))
        .collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, flat.len(), count.min(flat.len())).into_vec();
    idx.sort_unstable();

    let mut probe = store.clone();
    let ids: Vec<crate::ParamId> = store.ids().collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for k in idx {
        let (i, j) = flat[k];
        let original = store.entries()[i].data[j];
        let mut at = |delta: f64| -> Result<f64> {
            probe.get_mut(ids[i]).data[j] = original + delta;
            let v = loss(&probe.session(true))?.item();
            probe.get_mut(ids[i]).data[j] = original;
            Ok(v)
        };
        let numeric = (at(step)? - at(-step)?) / (2.0 * step);
        let a = grads[i].as_ref().map_or(0.0, |g| g[j]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(Discrepancy { input: i, index: j, analytic: a, numeric });
        }
    }
    Ok(report)
}
