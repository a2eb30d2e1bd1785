//! Central-finite-difference gradient verification.

use super::store::{GradMap, NamedParamStore};

/// Default perturbation step for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// One verified coordinate: analytic vs numeric derivative.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares analytic gradients against central finite differences at the
/// given parameter coordinates.
///
/// `loss_fn` must be a deterministic function of the store contents; it is
/// called once at the center point (for the analytic gradients) and twice
/// per coordinate at `±h`. The store is returned to its original values.
/// Report-only: nothing fails here, callers assert on `rel_err`.
pub fn finite_difference_check(
    store: &mut NamedParamStore,
    loss_fn: impl Fn(&NamedParamStore) -> (f64, GradMap),
    coords: &[(String, usize)],
    h: f64,
) -> Vec<FdReport> {
    let (_, grads) = loss_fn(store);
    let mut out = Vec::with_capacity(coords.len());
    for (name, index) in coords {
        let tensor = store.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        assert!(*index < tensor.numel(), "coordinate {index} out of range for {name:?}");
        let original = tensor.data()[*index];

        store.get_mut(name).unwrap().data_mut()[*index] = original + h;
        let plus = loss_fn(store).0;
        store.get_mut(name).unwrap().data_mut()[*index] = original - h;
        let minus = loss_fn(store).0;
        store.get_mut(name).unwrap().data_mut()[*index] = original;

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[*index]);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        out.push(FdReport { name: name.clone(), index: *index, analytic, numeric, rel_err });
    }
    out
}
