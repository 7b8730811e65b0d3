/// Central-difference gradient of `f` at `x`.
///
/// Coordinate k is `(f(x + h e_k) - f(x - h e_k)) / 2h`. A NaN from `f`
/// propagates into the result; callers decide what that means.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = f(&probe);
        probe[k] = x[k] - h;
        let minus = f(&probe);
        probe[k] = x[k];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Central differences at shrinking steps `h, h/1.4, h/1.4², …`, extrapolated
/// to zero step (Ridders' method).
///
/// Starts from a large step so cancellation noise stays small, and stops once
/// the extrapolation error estimate begins to grow.
pub fn extrapolated_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    const SHRINK: f64 = 1.4;
    const ROWS: usize = 3;
    let mut probe = x.to_vec();
    let mut central = |probe: &mut Vec<f64>, k: usize, step: f64| {
        probe[k] = x[k] + step;
        let plus = f(probe);
        probe[k] = x[k] - step;
        let minus = f(probe);
        probe[k] = x[k];
        (plus - minus) / (2.0 * step)
    };
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let mut step = h;
        let mut prev = vec![central(&mut probe, k, step)];
        let mut best = prev[0];
        let mut err = f64::INFINITY;
        for _ in 1..ROWS {
            step /= SHRINK;
            let mut row = vec![central(&mut probe, k, step)];
            let mut fac = SHRINK * SHRINK;
            for j in 1..=prev.len() {
                let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
                fac *= SHRINK * SHRINK;
                let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
                if e <= err {
                    err = e;
                    best = v;
                }
                row.push(v);
            }
            let diverging = (row[row.len() - 1] - prev[prev.len() - 1]).abs() >= 2.0 * err;
            prev = row;
            if diverging {
                break;
            }
        }
        grad.push(best);
    }
    grad
}

/// Floor used in the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(REL_ERR_FLOOR);
    (a - b).abs() / denom
}

/// Largest element-wise [`relative_error`]. Mismatched lengths or any NaN give `+inf`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    if analytic.len() != numeric.len() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for (&a, &b) in analytic.iter().zip(numeric) {
        let e = relative_error(a, b);
        if e.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(e);
    }
    worst
}
