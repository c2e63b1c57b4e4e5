//! Small statistics kernels shared by the analytics tables.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Sample (n-1) standard deviation.
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Mean with its standard error and 95% confidence half-width. The spread
/// terms are absent for a single observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub n: usize,
    pub mean: f64,
    pub se: Option<f64>,
    pub ci95: Option<f64>,
}

pub fn mean_se(xs: &[f64]) -> Option<MeanSe> {
    let m = mean(xs)?;
    let se = sample_sd(xs).map(|s| s / (xs.len() as f64).sqrt());
    let ci95 = se.map(|se| {
        let df = (xs.len() - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, df)
            .map(|d| d.inverse_cdf(0.975))
            .unwrap_or(1.959964);
        t * se
    });
    Some(MeanSe {
        n: xs.len(),
        mean: m,
        se,
        ci95,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub n: usize,
    pub r: f64,
    /// Two-sided p from the t statistic with n-2 degrees of freedom.
    pub p: f64,
}

/// Sample Pearson correlation. Absent for fewer than three points, unequal
/// lengths, or zero variance in either series.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<Correlation> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return None;
    }
    let mx = mean(x)?;
    let my = mean(y)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Some(Correlation {
        n,
        r,
        p: t_test_p(r, n),
    })
}

fn t_test_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if df == 0.0 {
        return 1.0;
    }
    if 1.0 - r.abs() < 1e-15 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Exact two-sided permutation p-value for the Pearson correlation:
/// the fraction of all n! pairings whose |r| is at least the observed |r|.
/// Limited to n <= 12.
pub fn permutation_p(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if !(3..=12).contains(&n) || y.len() != n {
        return None;
    }
    pearson(x, y)?;
    let mx = mean(x)?;
    let my = mean(y)?;
    let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let mut yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    // r is proportional to the centered cross product, so compare that.
    let mut s: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    let threshold = s.abs() * (1.0 - 1e-9) - 1e-12;
    let mut extreme: u64 = 1;
    let mut total: u64 = 1;
    // Heap's algorithm; each step swaps two y entries and updates s in O(1).
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            let j = if i % 2 == 0 { 0 } else { c[i] };
            s += (xc[j] - xc[i]) * (yc[i] - yc[j]);
            yc.swap(i, j);
            total += 1;
            if s.abs() >= threshold {
                extreme += 1;
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Some(extreme as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Residual-based standard error of the slope; needs three points.
    pub slope_se: Option<f64>,
}

/// Ordinary least squares of `y` on `x`. Absent with fewer than two points
/// or no spread in `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = mean(x)?;
    let my = mean(y)?;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = (n > 2).then(|| {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    });
    Some(LinearFit {
        slope,
        intercept,
        slope_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_se_of_zero_and_one() {
        let s = mean_se(&[0.0, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert!((s.se.unwrap() - 0.5).abs() < 1e-12);
        assert!(mean_se(&[0.3]).unwrap().se.is_none());
        assert!(mean_se(&[0.2, 0.2, 0.2]).unwrap().se.unwrap() < 1e-12);
        assert!(mean_se(&[]).is_none());
    }

    #[test]
    fn pearson_hand_values() {
        let c = pearson(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((c.r - 0.5).abs() < 1e-12);
        let up = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((up.r - 1.0).abs() < 1e-12);
        let down = pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap();
        assert!((down.r + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn pearson_p_for_r_half_n3() {
        // t = 0.5 * sqrt(1 / 0.75), df 1: p = 1 - 2/pi * atan(t)
        let c = pearson(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        let t: f64 = 0.5 / 0.75f64.sqrt();
        let expected = 1.0 - 2.0 / std::f64::consts::PI * t.atan();
        assert!((c.p - expected).abs() < 1e-9);
    }

    #[test]
    fn permutation_p_small_case() {
        // x=[1,2,3], y=[2,1,3]: the six pairings give r in {1, .5, .5, -.5, -.5, -1}
        let p = permutation_p(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        let p = permutation_p(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((p - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ols_three_points() {
        let f = ols(&[0.0, 1.0, 2.0], &[0.0, 0.5, 1.0]).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!(f.intercept.abs() < 1e-12);
        assert!(f.slope_se.unwrap() < 1e-12);
        assert!(ols(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    proptest! {
        #[test]
        fn pearson_of_affine_map_is_sign(
            xs in prop::collection::vec(-100.0f64..100.0, 3..30),
            a in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0],
            b in -100.0f64..100.0,
        ) {
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let c = pearson(&xs, &ys).unwrap();
            prop_assert!((c.r - a.signum()).abs() < 1e-9);
        }

        #[test]
        fn ols_matches_closed_form(
            ys in prop::collection::vec(0.0f64..1.0, 2..40),
        ) {
            let xs: Vec<f64> = (0..ys.len()).map(|i| (i * i % 7 + i) as f64).collect();
            let mx = xs.iter().sum::<f64>() / xs.len() as f64;
            let my = ys.iter().sum::<f64>() / ys.len() as f64;
            let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            prop_assume!(den > 0.0);
            let f = ols(&xs, &ys).unwrap();
            prop_assert!((f.slope - num / den).abs() < 1e-9);
        }
    }
}
