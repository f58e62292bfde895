//! Aggregation statistics for evaluation results.

/// Arithmetic mean; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n−1 denominator); 0 below two samples.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

/// Normal-approximation 95% confidence half-width: 1.96·sd/√n.
pub fn ci95_half_width(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    1.96 * sample_std(xs) / (xs.len() as f64).sqrt()
}

/// One-sided sign test: with `wins + losses` informative pairs (ties
/// dropped) and the null that either side wins a pair with probability
/// ½, the probability of at least `wins` wins.
pub fn sign_test_p_greater(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // Cumulative ln-factorials keep the binomial tail exact at n≈600.
    let mut ln_fact = vec![0.0; n + 1];
    for i in 1..=n {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let ln_half_n = n as f64 * 2.0_f64.ln();
    let mut p = 0.0;
    for k in wins..=n {
        p += (ln_fact[n] - ln_fact[k] - ln_fact[n - k] - ln_half_n).exp();
    }
    p.min(1.0)
}
