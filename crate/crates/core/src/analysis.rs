//! Expert utilization, efficiency and convergence metrics, the empirical
//! gate-gradient variance probe, and plain-text report tables.
//!
//! Usage distributions count token-routings: a token that selects three
//! experts contributes one count to each of them.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Block, Model};
use crate::routing::{RoutingMode, SelectionResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUsageStats {
    /// 1-based layer index.
    pub layer: usize,
    pub n_experts: usize,
    pub avg_active: f64,
    pub utilization_pct: f64,
    pub usage_entropy_bits: f64,
}

impl LayerUsageStats {
    /// Builds stats from raw counts: `routings[i]` token-routings to expert
    /// `i`, over `tokens` tokens.
    pub fn from_counts(layer: usize, routings: &[u64], tokens: u64) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Domain(format!("layer {layer}: no tokens recorded")));
        }
        let n_experts = routings.len();
        let total: u64 = routings.iter().sum();
        let avg_active = total as f64 / tokens as f64;
        Ok(LayerUsageStats {
            layer,
            n_experts,
            avg_active,
            utilization_pct: 100.0 * avg_active / n_experts as f64,
            usage_entropy_bits: entropy_bits(routings),
        })
    }
}

/// Shannon entropy in bits of the distribution proportional to `counts`.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Running per-layer routing counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UsageAccumulator {
    routings: Vec<Vec<u64>>,
    tokens: Vec<u64>,
}

impl UsageAccumulator {
    pub fn new(expert_counts: &[usize]) -> Self {
        UsageAccumulator {
            routings: expert_counts.iter().map(|&n| vec![0; n]).collect(),
            tokens: vec![0; expert_counts.len()],
        }
    }

    /// Adds one batch of selections, indexed `[layer][token]`.
    pub fn record(&mut self, selections: &[Vec<SelectionResult>]) -> Result<()> {
        if selections.len() != self.routings.len() {
            return Err(Error::shape(
                "usage_record",
                format!("{} layers recorded, {} expected", selections.len(), self.routings.len()),
            ));
        }
        for ((counts, tokens), layer) in self.routings.iter_mut().zip(&mut self.tokens).zip(selections) {
            for sel in layer {
                for &i in &sel.indices {
                    let n = counts.len();
                    let slot = counts
                        .get_mut(i)
                        .ok_or_else(|| Error::Domain(format!("expert index {i} in a {n}-expert layer")))?;
                    *slot += 1;
                }
                *tokens += 1;
            }
        }
        Ok(())
    }

    pub fn routing_counts(&self) -> &[Vec<u64>] {
        &self.routings
    }

    pub fn stats(&self) -> Result<Vec<LayerUsageStats>> {
        self.routings
            .iter()
            .zip(&self.tokens)
            .enumerate()
            .map(|(l, (counts, &tokens))| LayerUsageStats::from_counts(l + 1, counts, tokens))
            .collect()
    }
}

/// Usage statistics straight from selection records `[layer][token]`.
pub fn usage_stats(expert_counts: &[usize], records: &[Vec<SelectionResult>]) -> Result<Vec<LayerUsageStats>> {
    if records.is_empty() {
        return Err(Error::Domain("no selection records".into()));
    }
    let mut acc = UsageAccumulator::new(expert_counts);
    acc.record(records)?;
    acc.stats()
}

/// Accuracy percent per 10,000 parameters.
pub fn efficiency(accuracy_pct: f64, params: usize) -> Result<f64> {
    if params == 0 {
        return Err(Error::Domain("efficiency needs params > 0".into()));
    }
    Ok(accuracy_pct / (params as f64 / 10_000.0))
}

/// First epoch (1-based) whose accuracy reaches `fraction` of the final
/// epoch's accuracy. Returns `None` only for an empty curve.
pub fn epochs_to_fraction(accuracies: &[f64], fraction: f64) -> Option<usize> {
    let last = *accuracies.last()?;
    let target = fraction * last;
    accuracies.iter().position(|&a| a >= target).map(|i| i + 1)
}

/// One routing mode's share of a gradient-variance probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mode: RoutingMode,
    pub n_batches: usize,
    /// Mean over gate-weight coordinates of the across-batch variance of
    /// the gradient.
    pub mean_variance: f64,
    /// Mean over tokens and layers of the entropy (bits) of the normalized
    /// combination weights.
    pub routing_entropy_bits: f64,
}

/// Measures how much the gate-weight gradient varies from batch to batch
/// under each routing mode. Gradients are taken in evaluation mode (no
/// gate noise) on the first `n_batches` batches of a seeded shuffle, so
/// the result is a pure function of the arguments. Descriptive only.
pub fn grad_variance_probe(
    model: &Model,
    dataset: &Dataset,
    modes: &[RoutingMode],
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ProbeResult>> {
    if n_batches < 2 {
        return Err(Error::Domain(format!("variance probe needs at least 2 batches, got {n_batches}")));
    }
    let gate_slots: Vec<usize> = model
        .named_params()
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name.ends_with(".gate"))
        .map(|(i, _)| i)
        .collect();
    if gate_slots.is_empty() {
        return Err(Error::Domain("model has no gating networks".into()));
    }
    let picked: Vec<_> = batches(dataset, batch_size, seed, 0).take(n_batches).collect();
    if picked.len() < n_batches {
        return Err(Error::Domain(format!(
            "dataset of {} samples yields only {} batches of {batch_size}",
            dataset.len(),
            picked.len()
        )));
    }

    let mut results = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut probe = model.clone();
        let mut routing = probe.config.routing;
        routing.mode = mode;
        routing.validate()?;
        probe.set_routing(routing);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n_batches);
        let mut entropy_sum = 0.0;
        let mut entropy_n = 0usize;
        for batch in &picked {
            let out = probe.loss_and_grads(&batch.inputs, &batch.labels, false, &mut rng)?;
            samples.push(
                gate_slots
                    .iter()
                    .flat_map(|&i| out.grads[i].data().iter().copied())
                    .collect(),
            );
            for (layer, block) in out.selections.iter().zip(&probe.blocks) {
                if !matches!(block, Block::Moe(_)) {
                    continue;
                }
                for sel in layer {
                    entropy_sum += weight_entropy_bits(&sel.weights);
                    entropy_n += 1;
                }
            }
        }
        results.push(ProbeResult {
            mode,
            n_batches,
            mean_variance: mean_elementwise_variance(&samples),
            routing_entropy_bits: if entropy_n == 0 { 0.0 } else { entropy_sum / entropy_n as f64 },
        });
    }
    Ok(results)
}

/// Unbiased sample variance per coordinate, averaged over coordinates.
pub fn mean_elementwise_variance(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let dim = samples[0].len();
    if dim == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..dim {
        let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n as f64;
        total += samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    total / dim as f64
}

fn weight_entropy_bits(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    if total <= 0.0 {
        return 0.0;
    }
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// A row of the run comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub params: usize,
    /// Percent.
    pub accuracy_pct: f64,
    pub efficiency: f64,
    pub epochs_to_95: usize,
    pub wall_seconds: Option<f64>,
}

/// Rows sorted by accuracy (descending), ties by label.
pub fn rank_rows(rows: &mut [ComparisonRow]) {
    rows.sort_by(|a, b| {
        b.accuracy_pct
            .total_cmp(&a.accuracy_pct)
            .then_with(|| a.label.cmp(&b.label))
    });
}

pub fn format_comparison_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>9}  {:>9}  {:>10}  {:>6}  {:>8}",
        "model", "params", "acc (%)", "efficiency", "ep95", "time (s)"
    );
    for r in rows {
        let time = r.wall_seconds.map_or_else(|| "-".to_string(), |t| format!("{t:.1}"));
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9.2}  {:>10.2}  {:>6}  {:>8}",
            r.label, r.params, r.accuracy_pct, r.efficiency, r.epochs_to_95, time
        );
    }
    s
}

pub fn format_usage_table(stats: &[LayerUsageStats]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5}  {:>7}  {:>10}  {:>15}  {:>12}",
        "layer", "experts", "avg active", "utilization (%)", "entropy (b)"
    );
    for st in stats {
        let _ = writeln!(
            s,
            "{:>5}  {:>7}  {:>10.2}  {:>15.1}  {:>12.2}",
            st.layer, st.n_experts, st.avg_active, st.utilization_pct, st.usage_entropy_bits
        );
    }
    s
}
