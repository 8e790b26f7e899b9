//! Small numeric helpers shared across modules.

/// Pairwise (cascade) summation: deterministic and far more accurate than a
/// naive left fold for the long reductions used by the quadrature code.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let (lo, hi) = xs.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Mean and (batch-means) standard error of a time series.  The series is cut
/// into `n_batches` contiguous batches; the spread of the batch means gives a
/// correlation-robust error estimate for the global mean.
pub fn batch_mean_and_stderr(xs: &[f64], n_batches: usize) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(xs) / n as f64;
    let nb = n_batches.clamp(2, n.max(2));
    let batch = (n / nb).max(1);
    let mut means = Vec::with_capacity(nb);
    let mut i = 0;
    while i + batch <= n {
        means.push(pairwise_sum(&xs[i..i + batch]) / batch as f64);
        i += batch;
    }
    let m = means.len() as f64;
    if means.len() < 2 {
        return (mean, 0.0);
    }
    let mu = means.iter().sum::<f64>() / m;
    let var = means.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Five-point 4th-order central first derivative of a sampled series with
/// uniform spacing `h`.  Returns `None` near the ends where the stencil does
/// not fit.
pub fn central_derivative_4(series: &[f64], i: usize, h: f64) -> Option<f64> {
    if i < 2 || i + 2 >= series.len() {
        return None;
    }
    Some((8.0 * (series[i + 1] - series[i - 1]) - (series[i + 2] - series[i - 2])) / (12.0 * h))
}
