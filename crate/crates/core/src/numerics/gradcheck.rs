use super::{Graph, NumericsError, ParamStore, Var};

/// Central-difference step. Smaller steps let f64 rounding swamp gradients
/// near 1e-8, which the relative-error floor of 1e-8 does not absorb.
pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn grad_check<F>(f: F, store: &mut ParamStore, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumericsError>,
{
    grad_check_report(f, store, h).map(|r| r.max_rel_error)
}

/// Compares `d f / d theta` from [`Graph::backward`] with
/// `(f(theta + h) - f(theta - h)) / 2h` for every coordinate of every parameter.
/// The relative error uses the denominator `max(|a|, |n|, 1e-8)`.
/// Parameter values are restored bitwise afterwards; gradients are left zeroed.
#[allow(clippy::needless_range_loop)]
pub fn grad_check_report<F>(
    f: F,
    store: &mut ParamStore,
    h: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumericsError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |store: &ParamStore| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.scalar(loss)
            .ok_or(NumericsError::NonScalarLoss(g.shape(loss)))
    };

    store.zero_grad();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss, store)?;
    }
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for k in 0..store.value(id).len() {
            let original = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = original + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = original - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
