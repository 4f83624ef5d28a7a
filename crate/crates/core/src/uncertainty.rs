//! Monte Carlo dropout: repeated stochastic passes and their summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::training::{Layer, Masks, Network, Regime, Task, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McdConfig {
    /// Number of stochastic passes.
    pub repeats: usize,
    /// Drop probability used in every active dropout layer.
    pub rate: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for McdConfig {
    fn default() -> Self {
        Self {
            repeats: 20,
            rate: 0.5,
            tau: 0.5,
            seed: 0,
        }
    }
}

impl McdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 repeats, got {}",
                self.repeats
            )));
        }
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate {} outside [0, 1)",
                self.rate
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidParameter(format!("tau {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdPredictionSet {
    pub input_id: String,
    pub task: Task,
    pub predictions: Vec<f64>,
}

impl McdPredictionSet {
    pub fn repeats(&self) -> usize {
        self.predictions.len()
    }
}

/// Network input split at the first stochastic layer: everything before it
/// is computed once, the rest `repeats` times.
#[derive(Debug, Clone)]
pub struct McdInput {
    pub start: usize,
    pub activation: Tensor,
}

/// Runs the deterministic prefix of `net` for MC inference. `x` enters the
/// network at layer `from` (0 for raw inputs).
pub fn mcd_prefix(net: &Network, regime: Regime, x: &Tensor, from: usize) -> Result<McdInput> {
    let start = net.stochastic_start(regime).max(from);
    let activation = net.forward_range(x, from, start, Masks::Off)?;
    Ok(McdInput { start, activation })
}

/// `repeats` stochastic passes with masks keyed by `(seed, input id, repeat)`.
pub fn mcd_predict(
    net: &Network,
    task: Task,
    input: &McdInput,
    input_id: &str,
    cfg: &McdConfig,
) -> Result<McdPredictionSet> {
    cfg.validate()?;
    let id = rng::id_hash(input_id);
    let predictions = (0..cfg.repeats)
        .map(|t| {
            let key = [id, t as u64];
            let masks = Masks::Keyed {
                seed: cfg.seed,
                key: &key,
                rate: Some(cfg.rate),
            };
            Ok(net.output.apply(net.raw_from(&input.activation, input.start, masks)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(McdPredictionSet {
        input_id: input_id.to_string(),
        task,
        predictions,
    })
}

// Both moments work on offsets from the first repeat, so equal repeats give
// that value back exactly and a variance of exactly zero.
fn offsets(set: &McdPredictionSet) -> (f64, Vec<f64>, f64) {
    let p0 = set.predictions[0];
    let d: Vec<f64> = set.predictions.iter().map(|p| p - p0).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    (p0, d, m)
}

pub fn mc_mean(set: &McdPredictionSet) -> f64 {
    let (p0, _, m) = offsets(set);
    p0 + m
}

/// Population variance of the repeats.
pub fn mc_var(set: &McdPredictionSet) -> f64 {
    let (_, d, m) = offsets(set);
    d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// Fraction of repeats at or above the threshold.
    pub phi_raw: f64,
    /// `max(phi_raw, 1 - phi_raw)`.
    pub agreement: f64,
}

pub fn agreement_index(set: &McdPredictionSet, tau: f64) -> Result<Agreement> {
    if set.task != Task::Grade {
        return Err(Error::InvalidParameter(
            "agreement index needs a classification task".into(),
        ));
    }
    let above = set.predictions.iter().filter(|&&p| p >= tau).count();
    let phi_raw = above as f64 / set.predictions.len() as f64;
    Ok(Agreement {
        phi_raw,
        agreement: phi_raw.max(1.0 - phi_raw),
    })
}

/// Repeat-aligned average over the epochs of one recording.
pub fn aggregate_recording(recording_id: &str, epochs: &[McdPredictionSet]) -> Result<McdPredictionSet> {
    let first = epochs
        .first()
        .ok_or_else(|| Error::InvalidParameter(format!("recording {recording_id} has no epoch predictions")))?;
    let t = first.repeats();
    if let Some(bad) = epochs.iter().find(|e| e.repeats() != t || e.task != first.task) {
        return Err(Error::InvalidParameter(format!(
            "epoch {} has {} repeats, expected {t}",
            bad.input_id,
            bad.repeats()
        )));
    }
    let n = epochs.len() as f64;
    let predictions = (0..t)
        .map(|r| epochs.iter().map(|e| e.predictions[r]).sum::<f64>() / n)
        .collect();
    Ok(McdPredictionSet {
        input_id: recording_id.to_string(),
        task: first.task,
        predictions,
    })
}

/// Every dropout mask of the stochastic layers with its probability and the
/// resulting prediction. Limited to 12 droppable units.
pub fn enumerate_dropout_outcomes(net: &Network, input: &McdInput, rate: f64) -> Result<Vec<(f64, f64)>> {
    let layers = net.layers();
    let units: usize = (input.start..layers.len())
        .filter(|&i| matches!(layers[i], Layer::Dropout { .. }))
        .map(|i| net.shape_at(i).iter().product::<usize>())
        .sum();
    if units > 12 {
        return Err(Error::InvalidParameter(format!(
            "{units} droppable units is too many to enumerate"
        )));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut outcomes = Vec::with_capacity(1 << units);
    for bits in 0u32..(1 << units) {
        let kept = bits.count_ones() as i32;
        let prob = (1.0 - rate).powi(kept) * rate.powi(units as i32 - kept);
        let mut offset = 0;
        let mut cur = input.activation.clone();
        for (i, layer) in layers.iter().enumerate().skip(input.start) {
            let mask = matches!(layer, Layer::Dropout { .. }).then(|| {
                let m: Vec<f64> = (0..cur.len())
                    .map(|u| if bits >> (offset + u) & 1 == 1 { keep } else { 0.0 })
                    .collect();
                offset += cur.len();
                m
            });
            cur = net.forward_layer(i, &cur, mask.as_deref())?;
        }
        outcomes.push((prob, net.output.apply(cur.data()[0])));
    }
    Ok(outcomes)
}

/// Exact mean and population variance over all dropout masks.
pub fn exact_dropout_moments(net: &Network, input: &McdInput, rate: f64) -> Result<(f64, f64)> {
    let outcomes = enumerate_dropout_outcomes(net, input, rate)?;
    let mean: f64 = outcomes.iter().map(|(p, y)| p * y).sum();
    let var = outcomes.iter().map(|(p, y)| p * (y - mean).powi(2)).sum();
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{Architecture, OutputMap};

    fn set(values: &[f64]) -> McdPredictionSet {
        McdPredictionSet {
            input_id: "x".into(),
            task: Task::Grade,
            predictions: values.to_vec(),
        }
    }

    fn three_unit_head() -> Network {
        let arch = Architecture::Custom {
            input_shape: vec![2],
            layers: vec![
                Layer::Linear { inputs: 2, outputs: 3 },
                Layer::Tanh,
                Layer::Dropout { p: 0.5 },
                Layer::Linear { inputs: 3, outputs: 1 },
            ],
            head_start: 2,
        };
        let mut net = Network::new(arch, 21).unwrap();
        net.output = OutputMap::Affine {
            offset: 0.0,
            scale: 1.0,
        };
        net
    }

    #[test]
    fn moments_examples() {
        let s = set(&[0.3; 5]);
        assert_eq!(mc_mean(&s), 0.3);
        assert_eq!(mc_var(&s), 0.0);
        let s = set(&[0.0, 1.0]);
        assert_eq!(mc_mean(&s), 0.5);
        assert_eq!(mc_var(&s), 0.25);
    }

    #[test]
    fn agreement_examples() {
        let a = agreement_index(&set(&[0.9; 4]), 0.5).unwrap();
        assert_eq!((a.phi_raw, a.agreement), (1.0, 1.0));
        let a = agreement_index(&set(&[0.9, 0.1, 0.8, 0.2]), 0.5).unwrap();
        assert_eq!((a.phi_raw, a.agreement), (0.5, 0.5));
        let a = agreement_index(&set(&[0.1; 4]), 0.5).unwrap();
        assert_eq!((a.phi_raw, a.agreement), (0.0, 1.0));
        let mut age = set(&[30.0, 40.0]);
        age.task = Task::Age;
        assert!(agreement_index(&age, 0.5).is_err());
    }

    #[test]
    fn aggregation_is_repeat_aligned() {
        let a = set(&[0.1, 0.5, 0.9]);
        let b = set(&[0.3, 0.5, 0.7]);
        let r = aggregate_recording("rec", &[a.clone(), b]).unwrap();
        assert_eq!(r.predictions, vec![0.2, 0.5, 0.8]);
        assert_eq!(
            aggregate_recording("rec", std::slice::from_ref(&a))
                .unwrap()
                .predictions,
            a.predictions
        );
        assert!(aggregate_recording("rec", &[a, set(&[0.1])]).is_err());
        assert!(aggregate_recording("rec", &[]).is_err());
    }

    #[test]
    fn zero_rate_gives_identical_repeats() {
        let net = three_unit_head();
        let input = mcd_prefix(&net, Regime::FrozenEncoder, &Tensor::vector(vec![0.4, -1.2]), 0).unwrap();
        let cfg = McdConfig {
            rate: 0.0,
            ..McdConfig::default()
        };
        let s = mcd_predict(&net, Task::Age, &input, "e0", &cfg).unwrap();
        assert!(s.predictions.iter().all(|&p| p == s.predictions[0]));
    }

    #[test]
    fn predictions_are_reproducible() {
        let net = three_unit_head();
        let input = mcd_prefix(&net, Regime::Full, &Tensor::vector(vec![0.4, -1.2]), 0).unwrap();
        let cfg = McdConfig::default();
        let a = mcd_predict(&net, Task::Age, &input, "e0", &cfg).unwrap();
        let b = mcd_predict(&net, Task::Age, &input, "e0", &cfg).unwrap();
        let c = mcd_predict(&net, Task::Age, &input, "e1", &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.predictions, c.predictions);
    }

    #[test]
    fn monte_carlo_matches_enumeration() {
        let net = three_unit_head();
        let input = mcd_prefix(&net, Regime::Full, &Tensor::vector(vec![0.7, 0.3]), 0).unwrap();
        assert_eq!(input.start, 2);
        let (mean, var) = exact_dropout_moments(&net, &input, 0.5).unwrap();
        let cfg = McdConfig {
            repeats: 10_000,
            ..McdConfig::default()
        };
        let s = mcd_predict(&net, Task::Age, &input, "probe", &cfg).unwrap();
        let n = s.repeats() as f64;
        let se_mean = (var / n).sqrt();
        assert!((mc_mean(&s) - mean).abs() <= 3.0 * se_mean);
        let fourth: f64 = s.predictions.iter().map(|p| (p - mean).powi(4)).sum::<f64>() / n;
        let se_var = ((fourth - var * var).max(0.0) / n).sqrt();
        assert!((mc_var(&s) - var).abs() <= 3.0 * se_var);
    }
}
