//! Central finite differences against analytic gradients.

/// Default perturbation for central differences at double precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `∂f/∂x_i ≈ (f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Normwise relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// One named comparison in a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradComparison {
    pub name: String,
    pub rel_error: f64,
}

/// Checks `analytic` against central differences of `f` at `x`.
pub fn compare<F>(name: &str, f: F, x: &[f64], analytic: &[f64], step: f64) -> GradComparison
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = central_difference(f, x, step);
    GradComparison {
        name: name.to_string(),
        rel_error: relative_error(analytic, &numeric),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], DEFAULT_STEP);
        assert!(relative_error(&[4.0, 3.0], &g) < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let c = compare("q", |x| x[0] * x[0], &[1.0], &[2.1], DEFAULT_STEP);
        assert!(c.rel_error > 0.04);
    }

    #[test]
    fn zero_vectors() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }
}
