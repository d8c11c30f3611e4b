//! Central finite-difference comparison against analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Parameters;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Discrepancy>,
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is numerically zero from dividing round-off by round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Samples `coords` coordinates round-robin over tensors (optionally filtered
/// by name) and compares analytic and central-difference derivatives.
pub fn check_gradients(
    params: &Parameters<f64>,
    loss: &dyn Fn(&Parameters<f64>, Option<&mut Parameters<f64>>) -> Result<f64>,
    coords: usize,
    eps: f64,
    floor: f64,
    seed: u64,
    filter: &dyn Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    let mut grads = params.zeros_like();
    loss(params, Some(&mut grads))?;
    let names: Vec<String> = params.names().into_iter().filter(|n| filter(n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for k in 0..coords {
        let name = &names[k % names.len()];
        let len = params.get(name).expect("listed").len();
        let idx = rng.gen_range(0..len);
        let original = params.get(name).expect("listed").data[idx];
        let set = |probe: &mut Parameters<f64>, value: f64| {
            probe.visit_mut(&mut |n, m| {
                if &n == name {
                    m.data[idx] = value;
                }
            });
        };
        set(&mut probe, original + eps);
        let plus = loss(&probe, None)?;
        set(&mut probe, original - eps);
        let minus = loss(&probe, None)?;
        set(&mut probe, original);
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(name).expect("mirrors parameters").data[idx];
        let rel = relative_error(analytic, numeric, floor);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(Discrepancy { tensor: name.clone(), index: idx, analytic, numeric, rel_error: rel });
        }
    }
    Ok(report)
}
