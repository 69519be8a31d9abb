//! Aggregate metrics reports are built from: correlation, worst-case
//! error, and rank-based separation.

/// Pearson correlation between paired samples; `None` when fewer than
/// two pairs exist, lengths differ, or either side has zero variance.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Largest absolute difference between paired samples.
pub fn max_abs_error(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return None;
    }
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - y).abs())
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.max(d))))
}

/// Area under the ROC curve for separating `high` from `low` scores:
/// the probability that a random `high` exceeds a random `low`, with
/// ties counted half.  `None` when either group is empty or any score
/// is not finite.
pub fn auroc(high: &[f64], low: &[f64]) -> Option<f64> {
    if high.is_empty() || low.is_empty() {
        return None;
    }
    if high.iter().chain(low).any(|s| !s.is_finite()) {
        return None;
    }
    let mut wins = 0.0;
    for h in high {
        for l in low {
            if h > l {
                wins += 1.0;
            } else if h == l {
                wins += 0.5;
            }
        }
    }
    Some(wins / (high.len() as f64 * low.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_recovers_perfect_lines() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -0.5 * x).collect();
        assert!((pearson_r(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_r(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson_r(&xs, &[1.0, 1.0, 1.0, 1.0]), None);
        assert_eq!(pearson_r(&xs, &xs[..2]), None);
    }

    #[test]
    fn max_abs_error_picks_the_worst_pair() {
        let xs = [1.0, 2.0, 3.0];
        let ys = [1.1, 1.7, 3.05];
        assert!((max_abs_error(&xs, &ys).unwrap() - 0.3) < 1e-12);
        assert_eq!(max_abs_error(&xs, &[]), None);
    }

    #[test]
    fn auroc_handles_separation_overlap_and_ties() {
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]), Some(1.0));
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]), Some(0.0));
        assert_eq!(auroc(&[1.0], &[1.0]), Some(0.5));
        let sym = auroc(&[1.0, 3.0], &[2.0, 2.0]).unwrap();
        assert!((sym - 0.5).abs() < 1e-12);
        assert_eq!(auroc(&[], &[1.0]), None);
        assert_eq!(auroc(&[f64::NAN], &[1.0]), None);
    }
}
