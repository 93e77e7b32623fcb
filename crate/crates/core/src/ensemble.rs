//! Prediction integration: slice-level averaging across models, per-patient
//! max aggregation, averaging across folds/architectures, and fold
//! assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::schema::LabelSchema;

/// Per-slice state probabilities, flattened over groups in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceProbs {
    pub slices: Vec<Vec<f64>>,
}

/// Per-patient state probabilities, flattened over groups in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientProbs {
    pub values: Vec<f64>,
}

fn mean_rows<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, width: usize) -> Vec<f64> {
    let k = rows.len() as f64;
    let mut acc = vec![0.0; width];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter().map(|v| v / k).collect()
}

/// Mean over `K` models of each slice's probabilities.
pub fn slice_ensemble(preds: &[SliceProbs]) -> Result<SliceProbs> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("slice ensemble of zero models".into()))?;
    let n = first.slices.len();
    for (k, p) in preds.iter().enumerate() {
        ensure!(
            p.slices.len() == n,
            Contract,
            "model {k} has {} slices, expected {n}",
            p.slices.len()
        );
        for (s, row) in p.slices.iter().enumerate() {
            ensure!(
                row.len() == first.slices[s].len(),
                Contract,
                "model {k} slice {s} has {} states",
                row.len()
            );
        }
    }
    let slices = (0..n)
        .map(|s| mean_rows(preds.iter().map(|p| p.slices[s].as_slice()), first.slices[s].len()))
        .collect();
    Ok(SliceProbs { slices })
}

/// Per-patient max over slices. Each non-healthy state takes its maximum
/// over slices; the healthy state becomes `1 − max(non-healthy maxima)`
/// clipped to `[0, 1]`; the group is then renormalised.
pub fn patient_aggregate(slices: &SliceProbs, schema: &LabelSchema) -> Result<PatientProbs> {
    ensure!(!slices.slices.is_empty(), Contract, "patient aggregation over zero slices");
    let c = schema.total_states();
    ensure!(
        slices.slices.iter().all(|r| r.len() == c),
        Contract,
        "slice rows must have {c} states"
    );
    let mut out = vec![0.0; c];
    for (grp, g) in schema.groups.iter().zip(schema.offsets()) {
        let k = grp.state_count();
        let mut worst = 0.0f64;
        for s in (0..k).filter(|&s| s != grp.healthy) {
            let m = slices
                .slices
                .iter()
                .map(|r| r[g + s])
                .fold(f64::NEG_INFINITY, f64::max);
            out[g + s] = m;
            worst = worst.max(m);
        }
        out[g + grp.healthy] = (1.0 - worst).clamp(0.0, 1.0);
        let total: f64 = out[g..g + k].iter().sum();
        ensure!(total > 0.0, Degenerate, "group {} has no probability mass", grp.name);
        for v in &mut out[g..g + k] {
            *v /= total;
        }
    }
    Ok(PatientProbs { values: out })
}

/// Patient-level predictions for a set of studies.
pub type PatientSet = BTreeMap<String, PatientProbs>;

/// Mean over `N` models' patient predictions; all models must cover the
/// same studies.
pub fn final_ensemble(sets: &[PatientSet]) -> Result<PatientSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Contract("final ensemble of zero models".into()))?;
    for (n, s) in sets.iter().enumerate() {
        if let Some(id) = first.keys().find(|id| !s.contains_key(*id)) {
            return Err(Error::Contract(format!("model {n} is missing study {id}")));
        }
        if let Some(id) = s.keys().find(|id| !first.contains_key(*id)) {
            return Err(Error::Contract(format!("model {n} has extra study {id}")));
        }
    }
    first
        .iter()
        .map(|(id, p)| {
            let w = p.values.len();
            ensure!(
                sets.iter().all(|s| s[id].values.len() == w),
                Contract,
                "study {id}: state counts differ across models"
            );
            let values = mean_rows(sets.iter().map(|s| s[id].values.as_slice()), w);
            Ok((id.clone(), PatientProbs { values }))
        })
        .collect()
}

/// Validation partitions. `k == None` is the "full" mode: a single model
/// trained on everything with no validation split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSpec {
    pub k: Option<usize>,
    pub seed: u64,
    /// Validation study ids per fold. Empty single fold in full mode.
    pub folds: Vec<Vec<String>>,
}

impl FoldSpec {
    pub fn full(seed: u64) -> Self {
        Self {
            k: None,
            seed,
            folds: vec![Vec::new()],
        }
    }

    pub fn fold_count(&self) -> usize {
        self.folds.len()
    }

    /// Training ids of fold `f` in the order given by `all`.
    pub fn train_ids<'a>(&self, f: usize, all: &'a [String]) -> Vec<&'a String> {
        all.iter().filter(|id| !self.folds[f].contains(id)).collect()
    }

    pub fn validate(&self, all: &[String]) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for fold in &self.folds {
            for id in fold {
                ensure!(all.contains(id), Contract, "fold lists unknown study {id}");
                ensure!(seen.insert(id), Contract, "study {id} appears in two folds");
            }
        }
        if self.k.is_some() {
            ensure!(seen.len() == all.len(), Contract, "folds do not cover every study");
        }
        Ok(())
    }
}

/// Seeded shuffle then round-robin assignment into `k` folds.
pub fn make_folds(study_ids: &[String], k: usize, seed: u64) -> Result<FoldSpec> {
    ensure!(k >= 2, Contract, "fold count must be >= 2 (use full mode otherwise), got {k}");
    ensure!(
        k <= study_ids.len(),
        Contract,
        "fold count {k} exceeds study count {}",
        study_ids.len()
    );
    let mut order: Vec<&String> = study_ids.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id.clone());
    }
    Ok(FoldSpec { k: Some(k), seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::LabelGroup;

    fn binary() -> LabelSchema {
        LabelSchema {
            groups: vec![LabelGroup::new("effusion", &["healthy", "injury"])],
        }
    }

    fn sp(rows: &[&[f64]]) -> SliceProbs {
        SliceProbs {
            slices: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn slice_mean_examples() {
        let a = sp(&[&[0.8, 0.2], &[0.5, 0.5]]);
        assert_eq!(slice_ensemble(std::slice::from_ref(&a)).unwrap(), a);
        let b = sp(&[&[0.6, 0.4], &[0.5, 0.5]]);
        let m = slice_ensemble(&[a, b]).unwrap();
        assert!((m.slices[0][1] - 0.3).abs() < 1e-15);
        assert!(slice_ensemble(&[]).is_err());
        assert!(slice_ensemble(&[sp(&[&[1.0, 0.0]]), sp(&[])]).is_err());
    }

    #[test]
    fn max_aggregation_binary() {
        let s = sp(&[&[0.9, 0.1], &[0.3, 0.7], &[0.7, 0.3]]);
        let p = patient_aggregate(&s, &binary()).unwrap();
        assert!((p.values[1] - 0.7).abs() < 1e-15);
        assert!((p.values[0] - 0.3).abs() < 1e-15);
        let single = sp(&[&[0.4, 0.6]]);
        assert_eq!(patient_aggregate(&single, &binary()).unwrap().values, vec![0.4, 0.6]);
        assert!(patient_aggregate(&sp(&[]), &binary()).is_err());
    }

    #[test]
    fn final_mean_examples() {
        let set = |v: f64| -> PatientSet {
            [("a".to_string(), PatientProbs { values: vec![1.0 - v, v] })].into_iter().collect()
        };
        let m = final_ensemble(&[set(0.2), set(0.6)]).unwrap();
        assert!((m["a"].values[1] - 0.4).abs() < 1e-15);
        assert_eq!(final_ensemble(&[set(0.2)]).unwrap(), set(0.2));
        let mut other = set(0.2);
        other.insert("b".into(), PatientProbs { values: vec![0.5, 0.5] });
        assert!(final_ensemble(&[set(0.2), other]).is_err());
    }

    #[test]
    fn folds_partition() {
        let ids: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
        let f = make_folds(&ids, 4, 3).unwrap();
        assert!(f.folds.iter().all(|v| v.len() == 2));
        assert_eq!(f, make_folds(&ids, 4, 3).unwrap());
        f.validate(&ids).unwrap();
        let mut all: Vec<String> = f.folds.concat();
        all.sort();
        assert_eq!(all, ids);
        assert!(make_folds(&ids, 9, 3).is_err());
        assert!(make_folds(&ids, 1, 3).is_err());
        assert_eq!(f.train_ids(0, &ids).len(), 6);
        assert_eq!(FoldSpec::full(0).train_ids(0, &ids).len(), 8);
    }
}
