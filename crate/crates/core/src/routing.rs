//! Gate computation and expert selection.
//!
//! Dynamic routing keeps every expert whose (possibly noised) gate value is
//! strictly above a percentile threshold `θ`. The threshold is the
//! nearest-rank statistic that admits at most `K_max = ⌈(1 - τ)·N⌉` winners:
//! the `(N - K_max)`-th smallest gate value, or `-∞` when `K_max = N`. If
//! ties leave nothing above `θ`, the lowest-index argmax is selected so every
//! token reaches at least one expert.
//!
//! Fixed Top-K routing is the baseline. Its combination uses the raw gate
//! values as weights, while dynamic routing renormalizes the selected gates
//! with a temperature softmax.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Threshold computed from each token's own gate vector.
    DynamicPerToken,
    /// Threshold computed from the pooled gate values of the whole batch at
    /// a layer; per-token counts are still capped at `K_max`.
    DynamicBatch,
    /// Fixed Top-K with raw gate weights. `K` is clamped to the layer's
    /// expert count.
    FixedTopk(usize),
}

impl RoutingMode {
    pub fn is_dynamic(self) -> bool {
        !matches!(self, RoutingMode::FixedTopk(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub tau: f64,
    pub temperature: f64,
    pub noise_sigma: f64,
    pub mode: RoutingMode,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            tau: 0.7,
            temperature: 0.5,
            noise_sigma: 0.1,
            mode: RoutingMode::DynamicPerToken,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("routing.tau", format!("{} not in (0, 1)", self.tau)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "routing.temperature",
                format!("{} must be positive", self.temperature),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "routing.noise_sigma",
                format!("{} must be non-negative", self.noise_sigma),
            ));
        }
        if let RoutingMode::FixedTopk(0) = self.mode {
            return Err(Error::config("routing.mode", "fixed_topk needs K >= 1"));
        }
        Ok(())
    }

    /// Number of experts Top-K selects in a layer with `n_experts` experts.
    pub fn topk_for(&self, n_experts: usize) -> Option<usize> {
        match self.mode {
            RoutingMode::FixedTopk(k) => Some(k.min(n_experts)),
            _ => None,
        }
    }
}

/// Softmax probabilities over a layer's experts.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector(pub Vec<f64>);

impl GateVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Experts chosen for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Sorted ascending, no duplicates.
    pub indices: Vec<usize>,
    /// Dynamic threshold; `None` for Top-K.
    pub threshold: Option<f64>,
    /// Combination weights aligned with `indices`; empty until filled.
    pub weights: Vec<f64>,
}

impl SelectionResult {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// `⌈(1 - τ)·n⌉`, clamped to `[1, n]`.
///
/// The product is nudged down by 1e-9 before the ceiling so that values
/// like `0.3 * 10 = 3.0000000000000004` do not round up to 4.
pub fn k_max(tau: f64, n: usize) -> usize {
    let raw = ((1.0 - tau) * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n.max(1))
}

pub fn gate_probs(logits: &[f64]) -> Result<GateVector> {
    if logits.is_empty() {
        return Err(Error::Domain("gate needs at least one logit".into()));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gate logit {bad}")));
    }
    Ok(GateVector(softmax(logits)))
}

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `g + ε` with `ε ~ N(0, σ²)` i.i.d. per entry. The result may leave the
/// simplex.
pub fn add_gate_noise<R: Rng + ?Sized>(g: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return g.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    g.iter().map(|&v| v + normal.sample(rng)).collect()
}

/// Nearest-rank percentile threshold: the `(n - cap)`-th smallest of
/// `values`, or `-∞` when `cap >= n`.
pub fn rank_threshold(values: &[f64], cap: usize) -> f64 {
    let n = values.len();
    if cap >= n {
        return f64::NEG_INFINITY;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[n - cap - 1]
}

/// Keeps every index whose value is strictly above `threshold`, at most
/// `cap` of them (largest first, lowest index on ties). Falls back to the
/// lowest-index argmax when nothing clears the threshold.
pub fn select_above(values: &[f64], threshold: f64, cap: usize) -> SelectionResult {
    let mut above: Vec<usize> = (0..values.len()).filter(|&i| values[i] > threshold).collect();
    if above.len() > cap {
        above.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        above.truncate(cap);
        above.sort_unstable();
    }
    if above.is_empty() {
        above.push(argmax(values));
    }
    SelectionResult {
        indices: above,
        threshold: Some(threshold),
        weights: Vec::new(),
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-token dynamic selection. Weights are left empty.
pub fn select_dynamic(values: &[f64], tau: f64) -> SelectionResult {
    let cap = k_max(tau, values.len());
    let theta = rank_threshold(values, cap);
    select_above(values, theta, cap)
}

/// Indices of the `k` largest values, lowest index on ties.
pub fn select_topk(values: &[f64], k: usize) -> Result<SelectionResult> {
    if k == 0 || k > values.len() {
        return Err(Error::Domain(format!(
            "top-k with k = {k} over {} experts",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(SelectionResult {
        indices: order,
        threshold: None,
        weights: Vec::new(),
    })
}

/// `softmax(selected / T)`.
pub fn dynamic_weights(selected_gates: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = selected_gates.iter().map(|g| g / temperature).collect();
    softmax(&scaled)
}

fn weighted_sum(weights: &[f64], outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != outputs.len() || outputs.is_empty() {
        return Err(Error::shape(
            "combine",
            format!("{} weights for {} expert outputs", weights.len(), outputs.len()),
        ));
    }
    let dim = outputs[0].len();
    if outputs.iter().any(|o| o.len() != dim) {
        return Err(Error::shape("combine", "expert outputs differ in width"));
    }
    let mut out = vec![0.0; dim];
    for (w, o) in weights.iter().zip(outputs) {
        for (acc, v) in out.iter_mut().zip(o) {
            *acc += w * v;
        }
    }
    Ok(out)
}

/// Temperature-softmax combination of the selected experts' outputs.
pub fn combine_dynamic(
    selected_gates: &[f64],
    expert_outputs: &[Vec<f64>],
    temperature: f64,
) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Domain(format!("temperature {temperature} must be positive")));
    }
    if selected_gates.len() != expert_outputs.len() {
        return Err(Error::shape(
            "combine_dynamic",
            format!(
                "{} gates for {} expert outputs",
                selected_gates.len(),
                expert_outputs.len()
            ),
        ));
    }
    weighted_sum(&dynamic_weights(selected_gates, temperature), expert_outputs)
}

/// `Σ g_i · E_i(x)` with raw gate values; weights are not renormalized.
pub fn combine_topk(gates: &[f64], expert_outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    weighted_sum(gates, expert_outputs)
}

/// `C(n, k)`.
pub fn count_patterns_fixed(n: usize, k: usize) -> Result<u128> {
    if n > 64 {
        return Err(Error::Domain(format!("n = {n} exceeds 64")));
    }
    if k > n {
        return Err(Error::Domain(format!("k = {k} exceeds n = {n}")));
    }
    Ok(binomial(n as u128, k as u128))
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    // c stays an exact binomial after every step: c·(n-i)/(i+1) = C(n, i+1)
    (0..k).fold(1u128, |c, i| c * (n - i) / (i + 1))
}

/// `Σ_{k=1}^{k_max} C(n, k)`: activation patterns reachable by dynamic
/// routing.
pub fn count_patterns_dynamic(n: usize, k_max: usize) -> Result<u128> {
    if n > 64 {
        return Err(Error::Domain(format!("n = {n} exceeds 64")));
    }
    if k_max < 1 || k_max > n {
        return Err(Error::Domain(format!("k_max = {k_max} not in [1, {n}]")));
    }
    Ok((1..=k_max).map(|k| binomial(n as u128, k as u128)).sum())
}

/// Pattern counts for dynamic routing against fixed Top-K, with the
/// single-term lower bound `C(n, K_max) / C(n, K)` on their ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PatternComparison {
    pub n: usize,
    pub k_fixed: usize,
    pub k_max: usize,
    pub fixed: u128,
    pub dynamic: u128,
    pub ratio: f64,
    pub lower_bound: f64,
}

pub fn compare_patterns(n: usize, tau: f64, k_fixed: usize) -> Result<PatternComparison> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("tau = {tau} not in (0, 1)")));
    }
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let k_max = k_max(tau, n);
    let fixed = count_patterns_fixed(n, k_fixed)?;
    let dynamic = count_patterns_dynamic(n, k_max)?;
    let lower_bound = if k_max > k_fixed {
        count_patterns_fixed(n, k_max)? as f64 / fixed as f64
    } else {
        1.0
    };
    Ok(PatternComparison {
        n,
        k_fixed,
        k_max,
        fixed,
        dynamic,
        ratio: dynamic as f64 / fixed as f64,
        lower_bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ActiveBounds {
    pub lower: usize,
    pub upper: usize,
    pub nominal: f64,
}

/// Bounds on the expected number of active experts per token.
pub fn expected_active_bounds(tau: f64, n: usize) -> Result<ActiveBounds> {
    if !(tau > 0.0 && tau < 1.0) || n == 0 {
        return Err(Error::Domain(format!("invalid tau = {tau} or n = {n}")));
    }
    Ok(ActiveBounds {
        lower: 1,
        upper: k_max(tau, n),
        nominal: (1.0 - tau) * n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    // Enumerate every bitmask over n items and count those of popcount in range.
    fn enumerate_subsets(n: usize, lo: usize, hi: usize) -> u128 {
        (0u64..(1u64 << n))
            .filter(|m| (lo..=hi).contains(&(m.count_ones() as usize)))
            .count() as u128
    }

    // Direct rule: sort, pick the (N - K_max)-th smallest, keep strictly
    // greater, else argmax.
    fn select_brute(values: &[f64], tau: f64) -> Vec<usize> {
        let n = values.len();
        let cap = ((1.0 - tau) * n as f64 - 1e-9).ceil().max(1.0) as usize;
        let theta = if cap >= n {
            f64::NEG_INFINITY
        } else {
            let mut s = values.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s[n - cap - 1]
        };
        let mut out: Vec<usize> = (0..n).filter(|&i| values[i] > theta).collect();
        if out.is_empty() {
            let m = values.iter().cloned().fold(f64::MIN, f64::max);
            out.push(values.iter().position(|&v| v == m).unwrap());
        }
        out
    }

    #[test]
    fn softmax_cases() {
        assert!(close(gate_probs(&[0.0; 4]).unwrap().values(), &[0.25; 4], 1e-15));
        let g = gate_probs(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(g.values(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        let g = gate_probs(&[1000.0, 999.0, -5.0, 3.0, 0.1, 0.2, 7.0, -1e3]).unwrap();
        assert!((g.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gate_probs(&[f64::NAN]).is_err());
        assert!(gate_probs(&[]).is_err());
    }

    #[test]
    fn noise_properties() {
        let g = vec![0.25; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(add_gate_noise(&g, 0.0, &mut rng), g);
        let a = add_gate_noise(&g, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        let b = add_gate_noise(&g, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = vec![0.5];
        let draws = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let d = add_gate_noise(&base, 0.1, &mut rng)[0] - 0.5;
            sum += d;
            sq += d * d;
        }
        let mean = sum / draws as f64;
        assert!(mean.abs() < 0.002, "mean {mean}");
        let var = sq / draws as f64 - mean * mean;
        assert!((var - 0.01).abs() < 5e-4, "var {var}");
    }

    #[test]
    fn dynamic_selection_cases() {
        let s = select_dynamic(&[0.4, 0.3, 0.2, 0.1], 0.7);
        assert_eq!(s.indices, vec![0, 1]);
        assert_eq!(s.threshold, Some(0.2));
        assert_eq!(s.indices, select_brute(&[0.4, 0.3, 0.2, 0.1], 0.7));

        assert_eq!(select_dynamic(&[0.125; 8], 0.7).indices, vec![0]);
        assert_eq!(select_dynamic(&[0.0; 3], 0.5).indices, vec![0]);
        assert_eq!(select_dynamic(&[0.9], 0.7).indices, vec![0]);
        assert_eq!(k_max(0.7, 8), 3);
        assert_eq!(k_max(0.7, 10), 3);
        assert_eq!(k_max(0.9, 10), 1);
    }

    #[test]
    fn topk_cases() {
        assert_eq!(select_topk(&[0.1, 0.5, 0.4], 2).unwrap().indices, vec![1, 2]);
        assert_eq!(select_topk(&[0.3, 0.3, 0.3], 1).unwrap().indices, vec![0]);
        assert_eq!(select_topk(&[0.3, 0.1, 0.6], 3).unwrap().indices, vec![0, 1, 2]);
        assert!(select_topk(&[0.3, 0.1], 3).is_err());
    }

    #[test]
    fn combine_cases() {
        let u = vec![1.0, -2.0, 3.0];
        let v = vec![0.5, 4.0, -1.0];
        assert_eq!(combine_dynamic(&[0.7], std::slice::from_ref(&u), 0.5).unwrap(), u);
        let mean = combine_dynamic(&[0.3, 0.3], &[u.clone(), v.clone()], 0.5).unwrap();
        assert!(close(&mean, &[0.75, 1.0, 1.0], 1e-12));

        // softmax([1.2, 0.6]) by hand: 1 / (1 + e^-0.6)
        let w0 = 1.0 / (1.0 + (-0.6f64).exp());
        let w = dynamic_weights(&[0.6, 0.3], 0.5);
        assert!(close(&w, &[w0, 1.0 - w0], 1e-12));
        assert!((w[0] - 0.6457).abs() < 1e-4);

        assert_eq!(combine_topk(&[1.0], std::slice::from_ref(&u)).unwrap(), u);
        let half = combine_topk(&[0.5, 0.5], &[u.clone(), v.clone()]).unwrap();
        assert!(close(&half, &[0.75, 1.0, 1.0], 1e-12));
        let partial = combine_topk(&[0.4, 0.2], &[u.clone(), v.clone()]).unwrap();
        assert!(close(&partial, &[0.5, 0.0, 1.0], 1e-12));
        assert!(combine_topk(&[0.4], &[u.clone(), v.clone()]).is_err());
        assert!(combine_dynamic(&[0.4, 0.1], &[u, vec![1.0]], 1.0).is_err());
    }

    #[test]
    fn pattern_counts() {
        assert_eq!(count_patterns_fixed(8, 2).unwrap(), enumerate_subsets(8, 2, 2));
        assert_eq!(count_patterns_fixed(8, 2).unwrap(), 28);
        assert_eq!(count_patterns_fixed(13, 0).unwrap(), 1);
        assert_eq!(count_patterns_fixed(13, 13).unwrap(), 1);
        assert!(count_patterns_fixed(3, 4).is_err());
        assert_eq!(count_patterns_dynamic(8, 3).unwrap(), 92);
        assert_eq!(count_patterns_dynamic(8, 3).unwrap(), enumerate_subsets(8, 1, 3));
        assert_eq!(count_patterns_dynamic(11, 1).unwrap(), 11);
        assert_eq!(count_patterns_dynamic(64, 64).unwrap(), u64::MAX as u128);
        assert_eq!(count_patterns_fixed(64, 32).unwrap(), 1_832_624_140_942_590_534);
        for n in 0..=16 {
            for k in 0..=n {
                assert_eq!(count_patterns_fixed(n, k).unwrap(), enumerate_subsets(n, k, k));
                if k >= 1 {
                    assert_eq!(count_patterns_dynamic(n, k).unwrap(), enumerate_subsets(n, 1, k));
                }
            }
        }
        let cmp = compare_patterns(8, 0.7, 2).unwrap();
        assert_eq!((cmp.dynamic, cmp.fixed, cmp.k_max), (92, 28, 3));
        assert_eq!(cmp.lower_bound, 2.0);
        assert!(cmp.ratio >= cmp.lower_bound);
    }

    #[test]
    fn active_bounds() {
        let b = expected_active_bounds(0.7, 8).unwrap();
        assert_eq!((b.lower, b.upper), (1, 3));
        assert!((b.nominal - 2.4).abs() < 1e-12);
        let b = expected_active_bounds(0.5, 2).unwrap();
        assert_eq!((b.lower, b.upper, b.nominal), (1, 1, 1.0));
        let b = expected_active_bounds(0.9, 16).unwrap();
        assert_eq!(b.upper, 2);
        assert!((b.nominal - 1.6).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_concentrates() {
        let w = dynamic_weights(&[0.31, 0.30, 0.2], 1e-3);
        assert!(w[0] > 0.99);
    }

    proptest! {
        #[test]
        fn selection_invariants(values in prop::collection::vec(0.0f64..1.0, 1..32),
                                tau in 0.05f64..0.95,
                                shift in -3.0f64..3.0) {
            let n = values.len();
            let s = select_dynamic(&values, tau);
            let cap = k_max(tau, n);
            prop_assert!(s.k() >= 1 && s.k() <= cap);
            prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(&s.indices, &select_brute(&values, tau));
            let theta = s.threshold.unwrap();
            let above = values.iter().filter(|&&v| v > theta).count();
            if above > 0 {
                for i in 0..n {
                    prop_assert_eq!(s.indices.contains(&i), values[i] > theta);
                }
            }
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            prop_assert_eq!(&select_dynamic(&shifted, tau).indices, &s.indices);

            let mut distinct = values.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if distinct.len() == n && above == cap {
                prop_assert_eq!(&select_topk(&values, cap).unwrap().indices, &s.indices);
            }

            let sel: Vec<f64> = s.indices.iter().map(|&i| values[i]).collect();
            let w = dynamic_weights(&sel, 0.5);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let w_shift = dynamic_weights(&sel.iter().map(|g| g + shift).collect::<Vec<_>>(), 0.5);
            prop_assert!(close(&w, &w_shift, 1e-9));
        }
    }
}
