//! Log-space arithmetic shared by the samplers, the trie and the models.

/// log(exp(a) + exp(b)) without overflow.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log(exp(a) - exp(b)) for b <= a, computed as a + log1p(-exp(b - a)).
///
/// Returns -inf whenever the difference is zero or rounding pushes b above a,
/// so callers never see a NaN or a negative probability.
pub fn logdiffexp(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if b >= a {
        return f64::NEG_INFINITY;
    }
    let d = (b - a).exp_m1(); // in (-1, 0)
    a + (-d).ln()
}

/// log(sum_i exp(x_i)); -inf for an empty or all-(-inf) slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - mx).exp()).sum();
    mx + s.ln()
}

/// Normalizes logits into log-probabilities in place.
///
/// A row whose mass is entirely removed (all -inf) is left unchanged rather
/// than turned into NaN.
pub fn log_softmax_in_place(xs: &mut [f64]) {
    let lse = logsumexp(xs);
    if lse == f64::NEG_INFINITY {
        return;
    }
    for x in xs.iter_mut() {
        *x -= lse;
    }
}
