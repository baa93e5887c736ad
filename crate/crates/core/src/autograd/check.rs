//! Central finite-difference gradient checking.

use ndarray::Array2;

use super::params::{ParamId, ParamStore};

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` with respect to one entry of a parameter.
pub fn param_central_difference(
    store: &mut ParamStore,
    id: ParamId,
    index: (usize, usize),
    h: f64,
    f: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.value(id)[index];
    store.value_mut(id)[index] = orig + h;
    let plus = f(store);
    store.value_mut(id)[index] = orig - h;
    let minus = f(store);
    store.value_mut(id)[index] = orig;
    (plus - minus) / (2.0 * h)
}

/// Central difference of `f` with respect to one entry of a free input.
pub fn input_central_difference(
    x: &mut Array2<f64>,
    index: (usize, usize),
    h: f64,
    f: &mut dyn FnMut(&Array2<f64>) -> f64,
) -> f64 {
    let orig = x[index];
    x[index] = orig + h;
    let plus = f(x);
    x[index] = orig - h;
    let minus = f(x);
    x[index] = orig;
    (plus - minus) / (2.0 * h)
}
