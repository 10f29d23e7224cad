//! Modified Bessel function of the second kind `K_nu(x)` for real `nu >= 0`.

use std::f64::consts::PI;

use statrs::function::gamma::gamma;

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;
const EULER: f64 = 0.577_215_664_901_532_9;

/// `K_nu(x)` for `x > 0`.
///
/// Half-integer orders use the elementary closed forms; other orders use
/// Temme's series for `x < 2` and Steed's continued fraction otherwise,
/// followed by upward recurrence in the order.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0 && nu.is_finite(), "bessel_k needs x > 0");
    let nu = nu.abs();
    if x > 705.0 {
        return 0.0;
    }
    let twice = 2.0 * nu;
    if (twice - twice.round()).abs() < 1e-14 && twice.round() as i64 % 2 == 1 {
        return half_integer(twice.round() as usize / 2, x);
    }
    let nl = (nu + 0.5).floor() as usize;
    let mu = nu - nl as f64;
    let (mut k_mu, mut k_mu1) = if x < 2.0 { temme(mu, x) } else { steed(mu, x) };
    for i in 1..=nl {
        let next = (mu + i as f64) * (2.0 / x) * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = next;
    }
    k_mu
}

/// `K_{n + 1/2}(x)`.
fn half_integer(n: usize, x: f64) -> f64 {
    let k_half = (PI / (2.0 * x)).sqrt() * (-x).exp();
    if n == 0 {
        return k_half;
    }
    let mut prev = k_half;
    let mut cur = k_half * (1.0 + 1.0 / x);
    for i in 1..n {
        let nu = i as f64 + 0.5;
        let next = prev + 2.0 * nu / x * cur;
        prev = cur;
        cur = next;
    }
    cur
}

/// `(Gamma_1(mu), Gamma_2(mu), 1/Gamma(1+mu), 1/Gamma(1-mu))`.
fn gammas(mu: f64) -> (f64, f64, f64, f64) {
    let gampl = 1.0 / gamma(1.0 + mu);
    let gammi = 1.0 / gamma(1.0 - mu);
    let m2 = mu * mu;
    let gam1 = if mu.abs() < 1e-3 {
        -EULER + 0.042_002_635_034_095_2 * m2 + 0.042_197_734_555_544_3 * m2 * m2
    } else {
        (gammi - gampl) / (2.0 * mu)
    };
    let gam2 = (gammi + gampl) / 2.0;
    (gam1, gam2, gampl, gammi)
}

/// `(K_mu(x), K_{mu+1}(x))` for `|mu| <= 1/2`, `x < 2`.
fn temme(mu: f64, x: f64) -> (f64, f64) {
    let x2 = 0.5 * x;
    let pimu = PI * mu;
    let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
    let d = -x2.ln();
    let e = mu * d;
    let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
    let (gam1, gam2, gampl, gammi) = gammas(mu);
    let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
    let mut sum = ff;
    let ee = e.exp();
    let mut p = 0.5 * ee / gampl;
    let mut q = 0.5 / (ee * gammi);
    let mut c = 1.0;
    let dd = x2 * x2;
    let mut sum1 = p;
    for i in 1..MAX_ITER {
        let fi = i as f64;
        ff = (fi * ff + p + q) / (fi * fi - mu * mu);
        c *= dd / fi;
        p /= fi - mu;
        q /= fi + mu;
        let del = c * ff;
        sum += del;
        sum1 += c * (p - fi * ff);
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    (sum, sum1 * 2.0 / x)
}

/// `(K_mu(x), K_{mu+1}(x))` for `|mu| <= 1/2`, `x >= 2`.
fn steed(mu: f64, x: f64) -> (f64, f64) {
    let a1 = 0.25 - mu * mu;
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut h = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..MAX_ITER {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < EPS {
            break;
        }
    }
    h *= a1;
    let k_mu = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
    let k_mu1 = k_mu * (mu + x + 0.5 - h) / x;
    (k_mu, k_mu1)
}
