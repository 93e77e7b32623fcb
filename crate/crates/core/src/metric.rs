//! Composite evaluation score: per-group probability normalisation,
//! sample-weighted log loss per label group, a derived any-injury group,
//! and the mean of all of those losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ensemble::PatientSet;
use crate::error::{ensure, Error, Result};
use crate::schema::LabelSchema;

/// How a group's loss is normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    /// Divide the weighted sum by the sample count `N`.
    #[default]
    Count,
    /// Divide the weighted sum by the sum of weights.
    WeightSum,
}

/// What counts as one sample of a group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// One sample per study: the true state against the rest.
    #[default]
    Studies,
    /// One binary sample per (study, state) pair.
    StudyStates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Probabilities are clipped to `[clip, 1 - clip]` before logs.
    pub clip: f64,
    pub weight_norm: WeightNorm,
    pub sample_mode: SampleMode,
    /// Replace an all-zero group by a uniform distribution instead of failing.
    pub uniform_fallback: bool,
    /// Weights of the any-injury group's (negative, positive) samples.
    pub any_injury_weights: [f64; 2],
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            clip: 1e-15,
            weight_norm: WeightNorm::Count,
            sample_mode: SampleMode::Studies,
            uniform_fallback: false,
            any_injury_weights: [1.0, 1.0],
        }
    }
}

/// Significant bits kept by [`normalize_probs`].
pub const NORMALIZED_BITS: u32 = 32;

/// Round to `NORMALIZED_BITS` significant bits (ties away from zero). The
/// normalised probabilities then do not depend on the last-bit rounding of
/// a rescaled input, so rescaling a group leaves the score bit-identical.
fn round_significand(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let drop = 52 - (NORMALIZED_BITS - 1);
    let bits = v.to_bits();
    let half = 1u64 << (drop - 1);
    let mask = !((1u64 << drop) - 1);
    f64::from_bits((bits + half) & mask)
}

/// Divide each group's state values by their sum.
pub fn normalize_probs(p: &[f64], schema: &LabelSchema, uniform_fallback: bool) -> Result<Vec<f64>> {
    ensure!(
        p.len() == schema.total_states(),
        Contract,
        "{} probabilities for {} states",
        p.len(),
        schema.total_states()
    );
    ensure!(
        p.iter().all(|v| v.is_finite() && *v >= 0.0),
        Contract,
        "probabilities must be finite and non-negative"
    );
    let mut out = vec![0.0; p.len()];
    for (grp, o) in schema.groups.iter().zip(schema.offsets()) {
        let k = grp.state_count();
        let total: f64 = p[o..o + k].iter().sum();
        if total > 0.0 {
            for s in 0..k {
                out[o + s] = round_significand(p[o + s] / total);
            }
        } else if uniform_fallback {
            out[o..o + k].fill(1.0 / k as f64);
        } else {
            return Err(Error::Degenerate(format!(
                "group {} has all-zero probabilities",
                grp.name
            )));
        }
    }
    Ok(out)
}

/// `-(1/N) Σ [y log p + (1 − y) log(1 − p)] w` with `p` clipped to
/// `[clip, 1 − clip]`; `WeightSum` divides by `Σ w` instead of `N`.
pub fn group_log_loss(y: &[f64], p: &[f64], w: &[f64], clip: f64, norm: WeightNorm) -> Result<f64> {
    ensure!(
        y.len() == p.len() && p.len() == w.len(),
        Contract,
        "length mismatch: y {}, p {}, w {}",
        y.len(),
        p.len(),
        w.len()
    );
    ensure!(!y.is_empty(), Contract, "log loss over zero samples");
    ensure!((0.0..0.5).contains(&clip), Contract, "clip must be in [0, 0.5)");
    let mut acc = 0.0;
    for ((&yi, &pi), &wi) in y.iter().zip(p).zip(w) {
        let pc = pi.clamp(clip, 1.0 - clip);
        acc += (yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln()) * wi;
    }
    let denom = match norm {
        WeightNorm::Count => y.len() as f64,
        WeightNorm::WeightSum => w.iter().sum(),
    };
    ensure!(denom > 0.0, Contract, "zero normaliser");
    Ok(-acc / denom)
}

/// `max over groups of (1 − p(healthy))` for one patient's normalised
/// probabilities.
pub fn any_injury(p: &[f64], schema: &LabelSchema) -> Result<f64> {
    ensure!(p.len() == schema.total_states(), Contract, "state count mismatch");
    Ok(schema
        .groups
        .iter()
        .zip(schema.offsets())
        .map(|(g, o)| 1.0 - p[o + g.healthy])
        .fold(0.0, f64::max)
        .clamp(0.0, 1.0))
}

/// Mean of the `M` group losses and the any-injury loss.
pub fn final_score(group_losses: &[f64], any_loss: f64) -> Result<f64> {
    ensure!(!group_losses.is_empty(), Contract, "final score needs at least one group");
    Ok((group_losses.iter().sum::<f64>() + any_loss) / (group_losses.len() + 1) as f64)
}

/// True state index per group, per study.
pub type GroundTruth = BTreeMap<String, Vec<usize>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupLoss {
    pub group: String,
    pub loss: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub group_losses: Vec<GroupLoss>,
    pub any_injury_loss: f64,
    pub final_score: f64,
    pub studies: usize,
    pub options: MetricOptions,
}

/// Score patient-level predictions against ground truth.
pub fn evaluate(
    preds: &PatientSet,
    truth: &GroundTruth,
    schema: &LabelSchema,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    schema.validate()?;
    ensure!(!truth.is_empty(), Contract, "no ground-truth studies");
    if let Some(id) = truth.keys().find(|id| !preds.contains_key(*id)) {
        return Err(Error::Contract(format!("missing prediction for study {id}")));
    }
    if let Some(id) = preds.keys().find(|id| !truth.contains_key(*id)) {
        return Err(Error::Contract(format!("prediction for unknown study {id}")));
    }
    let offsets = schema.offsets();
    let mut normalized = Vec::with_capacity(truth.len());
    for (id, states) in truth {
        schema.check_states(states)?;
        let p = normalize_probs(&preds[id].values, schema, opts.uniform_fallback)
            .map_err(|e| Error::Contract(format!("study {id}: {e}")))?;
        normalized.push((states, p));
    }

    let mut group_losses = Vec::with_capacity(schema.group_count());
    for (g, grp) in schema.groups.iter().enumerate() {
        let (mut y, mut p, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for (states, probs) in &normalized {
            let truth_state = states[g];
            match opts.sample_mode {
                SampleMode::Studies => {
                    y.push(1.0);
                    p.push(probs[offsets[g] + truth_state]);
                    w.push(grp.weights[truth_state]);
                }
                SampleMode::StudyStates => {
                    for s in 0..grp.state_count() {
                        y.push(if s == truth_state { 1.0 } else { 0.0 });
                        p.push(probs[offsets[g] + s]);
                        w.push(grp.weights[truth_state]);
                    }
                }
            }
        }
        group_losses.push(GroupLoss {
            group: grp.name.clone(),
            loss: group_log_loss(&y, &p, &w, opts.clip, opts.weight_norm)?,
            samples: y.len(),
        });
    }

    let (mut y, mut p, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for (states, probs) in &normalized {
        let injured = schema.groups.iter().zip(states.iter()).any(|(g, &s)| s != g.healthy);
        y.push(if injured { 1.0 } else { 0.0 });
        p.push(any_injury(probs, schema)?);
        w.push(opts.any_injury_weights[usize::from(injured)]);
    }
    let any_injury_loss = group_log_loss(&y, &p, &w, opts.clip, opts.weight_norm)?;
    let losses: Vec<f64> = group_losses.iter().map(|g| g.loss).collect();
    Ok(MetricReport {
        final_score: final_score(&losses, any_injury_loss)?,
        group_losses,
        any_injury_loss,
        studies: truth.len(),
        options: opts.clone(),
    })
}
