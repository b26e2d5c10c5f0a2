//! Quasi-Newton minimization with inverse-Hessian BFGS updates and a
//! backtracking Armijo line search.

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimizes `fg`, which returns the objective and its gradient.
pub fn minimize<F>(fg: F, x0: &[f64], opts: BfgsOptions) -> BfgsResult
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = fg(&x);
    let mut hinv = identity(n);
    let mut fresh = true;
    let mut iterations = 0;

    if !f.is_finite() {
        return BfgsResult { grad_norm: inf_norm(&g), x, f, iterations, converged: false };
    }

    while iterations < opts.max_iterations {
        let gn = inf_norm(&g);
        if gn <= opts.gradient_tolerance || f == 0.0 {
            return BfgsResult { x, f, grad_norm: gn, iterations, converged: true };
        }
        iterations += 1;

        let mut p: Vec<f64> = (0..n).map(|i| -dot(&hinv[i], &g)).collect();
        let mut slope = dot(&p, &g);
        if !(slope < 0.0) {
            hinv = identity(n);
            fresh = true;
            p = g.iter().map(|v| -v).collect();
            slope = dot(&p, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + step * b).collect();
            let (fnew, gnew) = fg(&xn);
            if fnew.is_finite() && fnew <= f + 1e-4 * step * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }

        let Some((xn, fnew, gnew)) = accepted else {
            if fresh {
                // Steepest descent cannot decrease f: stationary to rounding.
                let gn = inf_norm(&g);
                let converged = gn <= opts.gradient_tolerance.sqrt();
                return BfgsResult { x, f, grad_norm: gn, iterations, converged };
            }
            hinv = identity(n);
            fresh = true;
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                for (i, row) in hinv.iter_mut().enumerate() {
                    row[i] = scale;
                }
            }
            update_inverse(&mut hinv, &s, &y, sy);
            fresh = false;
        }
        let converged_f = (f - fnew).abs() <= 1e-16 * f.abs().max(1e-300) && step < 1e-10;
        x = xn;
        f = fnew;
        g = gnew;
        if converged_f {
            let gn = inf_norm(&g);
            return BfgsResult { x, f, grad_norm: gn, iterations, converged: gn <= opts.gradient_tolerance.sqrt() };
        }
    }
    let gn = inf_norm(&g);
    BfgsResult { x, f, grad_norm: gn, iterations, converged: gn <= opts.gradient_tolerance }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
fn update_inverse(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Central-difference gradient with step `rel_step · max(1, |x_i|)`.
pub fn central_gradient<F>(f: F, x: &[f64], rel_step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> BfgsOptions {
        BfgsOptions { max_iterations: 500, gradient_tolerance: 1e-10 }
    }

    #[test]
    fn rosenbrock() {
        let fg = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (f, g)
        };
        let r = minimize(fg, &[-1.2, 1.0], opts());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_with_numeric_gradient() {
        let f = |x: &[f64]| 3.0 * (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2) + x[0] * x[1];
        let fg = |x: &[f64]| (f(x), central_gradient(f, x, 1e-6));
        let r = minimize(fg, &[0.0, 0.0], BfgsOptions { max_iterations: 200, gradient_tolerance: 1e-7 });
        // Stationary point of the quadratic.
        let (x0, x1) = (26.0 / 11.0, -24.0 / 11.0);
        assert!((r.x[0] - x0).abs() < 1e-5 && (r.x[1] - x1).abs() < 1e-5);
    }
}
