//! Central-difference gradient verification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares the analytic gradients stored in `params` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` on up to `sample` trainable
/// coordinates, chosen with a generator seeded by `seed`.
///
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(mut f: F, params: &ParamStore, h: f64, sample: usize, seed: u64) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(
        (1e-7..=1e-3).contains(&h),
        "finite-difference step {h} outside [1e-7, 1e-3]"
    );
    let coords: Vec<(usize, usize)> = params
        .canonical_ids()
        .filter(|&id| params.entry(id).trainable)
        .flat_map(|id| (0..params.entry(id).value.len()).map(move |i| (id.index(), i)))
        .collect();
    let chosen: Vec<(usize, usize)> = if sample >= coords.len() {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = rand::seq::index::sample(&mut rng, coords.len(), sample).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| coords[i]).collect()
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: chosen.len(),
    };
    for (raw_id, i) in chosen {
        let id = super::params::ParamId(raw_id);
        let original = probe.entry(id).value.data()[i];
        probe.entry_mut(id).value.data_mut()[i] = original + h;
        let plus = f(&probe);
        probe.entry_mut(id).value.data_mut()[i] = original - h;
        let minus = f(&probe);
        probe.entry_mut(id).value.data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = params.entry(id).grad.data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || report.worst_path.is_empty() {
            report.max_rel_error = rel;
            report.worst_path = params.entry(id).path.clone();
            report.worst_index = i;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    report
}
