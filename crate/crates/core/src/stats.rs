//! Sample statistics used by the harness and the acceptance checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample std (`n - 1` denominator), 0 for a single sample.
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn single_sample(&self) -> bool {
        self.count == 1
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> f64 {
        self.std / (self.count as f64).sqrt()
    }
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::arg("cannot aggregate an empty record set"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Summary {
        mean,
        std,
        count: values.len(),
    })
}

/// Pearson correlation; `None` when either side has zero variance or the
/// lengths differ.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// One-sample Kolmogorov-Smirnov statistic and asymptotic p-value against
/// a continuous CDF.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Option<(f64, f64)> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    Some((d, kolmogorov_p((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d)))
}

/// `P(K > t)` for the Kolmogorov distribution.
fn kolmogorov_p(t: f64) -> f64 {
    if t < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powi(k as i32 - 1) * (-2.0 * k * k * t * t).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// One-sided paired t-test of `mean(a - b) > 0`; returns the p-value.
pub fn paired_greater_p(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::arg("paired test needs two equal-length samples of size >= 2"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = aggregate(&diffs)?;
    if s.std == 0.0 {
        return Ok(if s.mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = s.mean / s.sem();
    let dist = StudentsT::new(0.0, 1.0, (s.count - 1) as f64).expect("valid t");
    Ok(1.0 - dist.cdf(t))
}

/// One-sided Welch test of `mean(a) < mean(b)` from summaries; returns the
/// p-value.
pub fn welch_less_p(a: &Summary, b: &Summary) -> f64 {
    let va = a.std.powi(2) / a.count as f64;
    let vb = b.std.powi(2) / b.count as f64;
    let se = (va + vb).sqrt();
    if se == 0.0 {
        return if a.mean < b.mean { 0.0 } else { 1.0 };
    }
    let t = (a.mean - b.mean) / se;
    let df_den = va * va / (a.count as f64 - 1.0).max(1.0) + vb * vb / (b.count as f64 - 1.0).max(1.0);
    let df = if df_den > 0.0 { (va + vb).powi(2) / df_den } else { 1.0 };
    StudentsT::new(0.0, 1.0, df.max(1.0)).expect("valid t").cdf(t)
}

/// One-sided F-test p-value for `var(a) > var(b)`.
pub fn variance_greater_p(a: &Summary, b: &Summary) -> f64 {
    if a.count < 2 || b.count < 2 {
        return 1.0;
    }
    let (va, vb) = (a.std.powi(2), b.std.powi(2));
    if vb == 0.0 {
        return if va > 0.0 { 0.0 } else { 1.0 };
    }
    let f = FisherSnedecor::new(a.count as f64 - 1.0, b.count as f64 - 1.0).expect("valid F");
    f.sf(va / vb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal as RNormal};

    #[test]
    fn variance_test_examples() {
        let s = |std: f64, count| Summary { mean: 0.0, std, count };
        // F(4, 4) upper 5% point is 6.388.
        assert!((variance_greater_p(&s(6.388f64.sqrt(), 5), &s(1.0, 5)) - 0.05).abs() < 1e-3);
        assert!(variance_greater_p(&s(0.64, 5), &s(0.47, 5)) > 0.2);
        assert_eq!(variance_greater_p(&s(1.0, 5), &s(0.0, 5)), 0.0);
        assert_eq!(variance_greater_p(&s(1.0, 1), &s(0.5, 5)), 1.0);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[1.0, 1.0, 1.0]).unwrap(), Summary { mean: 1.0, std: 0.0, count: 3 });
        let s = aggregate(&[0.0, 2.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        let one = aggregate(&[4.0]).unwrap();
        assert!(one.single_sample() && one.std == 0.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_clt_bounds() {
        let mut rng = crate::rng::seeded(12);
        let d = RNormal::new(5.0, 2.0).unwrap();
        let v: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        let s = aggregate(&v).unwrap();
        assert!((s.mean - 5.0).abs() < 0.08);
        assert!((s.std - 2.0).abs() < 0.06);
    }

    #[test]
    fn correlations() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[8.0, 6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[3.0; 4]), None);
        assert!((spearman(&x, &[1.0, 10.0, 100.0, 1000.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn ks_accepts_uniform_and_rejects_shift() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let (_, p) = ks_test(&v, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(p > 0.99);
        let shifted: Vec<f64> = v.iter().map(|x| x * 0.8).collect();
        let (_, p) = ks_test(&shifted, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(p < 1e-6);
    }

    #[test]
    fn paired_test_direction() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.5, 1.4, 2.6, 3.5, 4.4];
        assert!(paired_greater_p(&a, &b).unwrap() < 0.01);
        assert!(paired_greater_p(&b, &a).unwrap() > 0.99);
    }
}
