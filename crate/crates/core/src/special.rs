//! Modified Bessel function of the second kind for real order.
//!
//! Temme's series for small arguments and Steed's continued fraction for
//! large ones, both at the reduced order |μ| ≤ 1/2, followed by forward
//! recurrence to the requested order.

use statrs::function::gamma::gamma;

const EPS: f64 = 1e-16;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const MAX_TERMS: usize = 10_000;

/// Returns (Γ₁(μ), Γ₂(μ), 1/Γ(1+μ), 1/Γ(1−μ)) for |μ| ≤ 1/2, where
/// Γ₁ = (1/Γ(1−μ) − 1/Γ(1+μ)) / (2μ) and Γ₂ = (1/Γ(1−μ) + 1/Γ(1+μ)) / 2.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let gampl = 1.0 / gamma(1.0 + mu);
    let gammi = 1.0 / gamma(1.0 - mu);
    let gam2 = 0.5 * (gammi + gampl);
    let gam1 = if mu.abs() < 1e-3 {
        // Taylor series of 1/Γ(1+x) = 1 + γx + c₃x² + c₄x³ + …; Γ₁ keeps the odd part.
        const C4: f64 = -0.042_002_635_034_095_2;
        const C6: f64 = -0.042_197_734_555_544_3;
        let m2 = mu * mu;
        -(EULER_GAMMA + C4 * m2 + C6 * m2 * m2)
    } else {
        (gammi - gampl) / (2.0 * mu)
    };
    (gam1, gam2, gampl, gammi)
}

/// (e^x K_μ(x), e^x K_{μ+1}(x)) for |μ| ≤ 1/2 and x > 0.
fn scaled_pair(mu: f64, x: f64) -> (f64, f64) {
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = std::f64::consts::PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..MAX_TERMS {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu * mu);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            let del1 = c * (p - fi * ff);
            sum1 += del1;
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        let scale = x.exp();
        (sum * scale, sum1 * (2.0 / x) * scale)
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu * mu;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 1..MAX_TERMS {
            let fi = i as f64;
            a -= 2.0 * fi;
            c = -a * c / (fi + 1.0);
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        let h = a1 * h;
        let kmu = (std::f64::consts::PI / (2.0 * x)).sqrt() / s;
        let k1 = kmu * (mu + x + 0.5 - h) / x;
        (kmu, k1)
    }
}

/// Exponentially scaled e^x K_ν(x) for ν ≥ 0 (negative ν uses K_{−ν} = K_ν) and x > 0.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let nu = nu.abs();
    let n = (nu + 0.5).floor();
    let mu = nu - n;
    let (mut k_prev, mut k_cur) = scaled_pair(mu, x);
    if n == 0.0 {
        return k_prev;
    }
    for i in 1..(n as usize) {
        let order = mu + i as f64;
        let next = k_prev + 2.0 * order / x * k_cur;
        k_prev = k_cur;
        k_cur = next;
    }
    k_cur
}

/// Modified Bessel function of the second kind K_ν(x), x > 0.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    bessel_k_scaled(nu, x) * (-x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    // K_ν(x) = ∫₀^∞ exp(−x cosh s) cosh(νs) ds, trapezoid rule on a truncated range.
    fn quadrature_oracle(nu: f64, x: f64) -> f64 {
        let upper = ((50.0 + nu * 40.0) / x + 1.0).ln().max(1.0) + 2.0;
        let n = 200_000;
        let h = upper / n as f64;
        let f = |s: f64| (-x * s.cosh() + x).exp() * (nu * s).cosh();
        let mut acc = 0.5 * (f(0.0) + f(upper));
        for i in 1..n {
            acc += f(i as f64 * h);
        }
        acc * h * (-x).exp()
    }

    #[test]
    fn integer_orders_reference() {
        // Reference values of K_0 and K_1.
        assert!(rel(bessel_k(0.0, 1.0), 0.421_024_438_240_708_34) < 1e-13);
        assert!(rel(bessel_k(1.0, 1.0), 0.601_907_230_197_234_6) < 1e-13);
        assert!(rel(bessel_k(0.0, 2.0), 0.113_893_872_749_533_41) < 1e-13);
        assert!(rel(bessel_k(1.0, 2.0), 0.139_865_881_816_522_46) < 1e-13);
    }

    #[test]
    fn half_integer_closed_forms() {
        for &x in &[1e-6, 1e-3, 0.1, 0.7, 1.9999, 2.0, 3.3, 10.0, 49.0] {
            let base = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
            assert!(rel(bessel_k(0.5, x), base) < 1e-12, "x={x}");
            assert!(rel(bessel_k(1.5, x), base * (1.0 + 1.0 / x)) < 1e-12, "x={x}");
            let k25 = base * (1.0 + 3.0 / x + 3.0 / (x * x));
            assert!(rel(bessel_k(2.5, x), k25) < 1e-12, "x={x}");
        }
    }

    #[test]
    fn fractional_orders_against_quadrature() {
        for &(nu, x) in &[(0.3, 0.7), (2.2, 3.5), (1.7, 0.05), (0.1, 1.5), (4.5, 0.3), (0.9, 25.0)] {
            let a = bessel_k(nu, x);
            let b = quadrature_oracle(nu, x);
            assert!(rel(a, b) < 1e-10, "nu={nu} x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn temme_gamma_branches_agree() {
        for &mu in &[9.9e-4f64, -9.9e-4, 1.0e-3, 0.2, -0.5] {
            let (g1, g2, gp, gm) = temme_gammas(mu);
            let direct = (1.0 / gamma(1.0 - mu) - 1.0 / gamma(1.0 + mu)) / (2.0 * mu);
            assert!((g1 - direct).abs() < 1e-11, "mu={mu}");
            assert!((gp - 1.0 / gamma(1.0 + mu)).abs() < 1e-15);
            assert!((gm - 1.0 / gamma(1.0 - mu)).abs() < 1e-15);
            assert!((g2 - 0.5 * (gp + gm)).abs() < 1e-15);
        }
        let (g1, _, _, _) = temme_gammas(0.0);
        assert!((g1 + EULER_GAMMA).abs() < 1e-15);
    }

    #[test]
    fn continuity_across_branch_switch() {
        for &nu in &[0.0, 0.25, 0.5, 1.3, 3.0] {
            let lo = bessel_k(nu, 2.0 - 1e-12);
            let hi = bessel_k(nu, 2.0);
            assert!(rel(lo, hi) < 1e-10, "nu={nu}");
        }
    }
}
