use serde::{Deserialize, Serialize};

use super::EvalError;

/// Lanczos approximation (g = 7, n = 9) of ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// CDF of Student's t with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// min(1, m p).
pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m.max(1) as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean: f64,
    pub t: f64,
    pub p_raw: f64,
    pub p_bonferroni: f64,
    pub cohens_d: f64,
    /// Set when the differences have zero variance.
    pub degenerate: bool,
}

/// Two-sided paired t-test on differences. Zero variance gives p = 1 when the
/// mean is zero and p = 0 (flagged degenerate) otherwise.
pub fn paired_t_test(diffs: &[f64], m_comparisons: usize) -> Result<TTest, EvalError> {
    let n = diffs.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples("paired t-test needs at least 2 differences".into()));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let (t, p, d, degenerate) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0, 0.0, false)
        } else {
            (mean.signum() * f64::INFINITY, 0.0, mean.signum() * f64::INFINITY, true)
        }
    } else {
        let t = mean / (sd / nf.sqrt());
        let dof = nf - 1.0;
        let p = regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t)).min(1.0);
        (t, p, mean / sd, false)
    };
    Ok(TTest {
        n,
        mean,
        t,
        p_raw: p,
        p_bonferroni: bonferroni(p, m_comparisons),
        cohens_d: d,
        degenerate,
    })
}

/// One-way ANOVA F = (SSB / (k-1)) / (SSW / (N-k)). None when fewer than two
/// groups or no residual degrees of freedom; 0 when the group means agree.
pub fn one_way_anova_f(groups: &[Vec<f64>]) -> Option<f64> {
    let groups: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let k = groups.len();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    if k < 2 || n <= k {
        return None;
    }
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in &groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand) * (m - grand);
        ssw += g.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    }
    if ssb == 0.0 {
        return Some(0.0);
    }
    Some((ssb / (k - 1) as f64) / (ssw / (n - k) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_on_one_to_five() {
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], 1).unwrap();
        assert!((r.t - 3.0 / (2.5f64.sqrt() / 5f64.sqrt())).abs() < 1e-12);
        assert!((r.t - 4.2426).abs() < 1e-4);
        assert!((r.cohens_d - 3.0 / 2.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_conventions() {
        let r = paired_t_test(&[0.0; 4], 3).unwrap();
        assert_eq!((r.p_raw, r.p_bonferroni, r.degenerate), (1.0, 1.0, false));
        let r = paired_t_test(&[0.2; 4], 3).unwrap();
        assert_eq!((r.p_raw, r.degenerate), (0.0, true));
        assert!(paired_t_test(&[1.0], 1).is_err());
    }

    #[test]
    fn gamma_values() {
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn t_cdf_closed_forms() {
        // one degree of freedom is Cauchy: 1/2 + atan(t)/pi
        for t in [-3.0, -0.5, 0.0, 0.7, 2.0, 10.0] {
            let want = 0.5 + f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0) - want).abs() < 1e-13);
        }
        // two degrees: 1/2 + t / (2 sqrt(2 + t^2))
        for t in [-4.0, -1.0, 0.3, 5.0] {
            let want = 0.5 + t / (2.0 * (2.0 + t * t as f64).sqrt());
            assert!((student_t_cdf(t, 2.0) - want).abs() < 1e-13);
        }
    }

    #[test]
    fn anova_hand_example() {
        // groups (1,2,3), (4,5,6): grand 3.5, SSB = 2*3*1.5^2 = 13.5, SSW = 4
        let f = one_way_anova_f(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert!((f - 13.5 / (4.0 / 4.0)).abs() < 1e-12);
        assert_eq!(one_way_anova_f(&[vec![1.0, 3.0], vec![2.0, 2.0]]), Some(0.0));
        assert_eq!(one_way_anova_f(&[vec![1.0]]), None);
    }
}
