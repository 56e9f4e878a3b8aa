/// Compares an analytic gradient against central finite differences.
///
/// `f` evaluates the scalar function at a point and returns its value along
/// with the analytic gradient (typically by building a tape and calling
/// backward). The step is relative, `1e-3 * max(|x_i|, 1)`. Returns the
/// worst relative error `|a - n| / max(|a|, |n|, 1e-6)` over coordinates and
/// logs a warning when it exceeds `tolerance`.
pub fn grad_check<F>(mut f: F, point: &[f64], tolerance: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(
        analytic.len(),
        point.len(),
        "analytic gradient length must match the point"
    );
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let h = 1e-3 * point[i].abs().max(1.0);
        let mut plus = point.to_vec();
        plus[i] += h;
        let mut minus = point.to_vec();
        minus[i] -= h;
        let numeric = (f(&plus).0 - f(&minus).0) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
    }
    if worst > tolerance {
        log::warn!("grad_check: max relative error {worst:.3e} exceeds tolerance {tolerance:.3e}");
    }
    worst
}
