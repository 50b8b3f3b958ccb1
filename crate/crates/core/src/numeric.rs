//! Small numeric helpers shared across modules.

/// Compensated (Kahan–Neumaier) summation accumulator.
///
/// Used wherever a reported value must be reproducible to ~1e-12 regardless
/// of term magnitudes, e.g. the mean of per-episode estimator terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of a slice in its given order.
pub fn kahan_sum(xs: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Log-softmax of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logits);
    logits.iter().map(|&x| x - z).collect()
}

/// Softmax of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|&lp| lp.exp()).collect()
}

/// Exact KL divergence between two probability rows, `sum p (ln p - ln q)`.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    debug_assert_eq!(log_p.len(), log_q.len());
    let mut acc = KahanSum::new();
    for (lp, lq) in log_p.iter().zip(log_q) {
        acc.add(lp.exp() * (lp - lq));
    }
    // Rounding can leave a tiny negative residue on identical rows.
    acc.value().max(0.0)
}

/// Sample variance (n-1 denominator); 0 for fewer than two points.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = kahan_sum(xs) / n as f64;
    let mut acc = KahanSum::new();
    for &x in xs {
        let d = x - mean;
        acc.add(d * d);
    }
    acc.value() / (n as f64 - 1.0)
}

/// Draw an index from an explicit probability row.
///
/// The row is expected to sum to ~1; any rounding shortfall falls to the last
/// index so the draw is always valid.
pub fn sample_categorical<R: rand::Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}
