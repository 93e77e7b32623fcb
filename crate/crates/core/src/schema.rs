//! Label groups: the prediction targets, their mutually exclusive states and weights.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelGroup {
    pub name: String,
    pub states: Vec<String>,
    pub healthy: usize,
    /// Per-state sample weight applied by the weighted log loss.
    pub weights: Vec<f64>,
}

impl LabelGroup {
    pub fn new(name: &str, states: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            states: states.iter().map(|s| s.to_string()).collect(),
            healthy: 0,
            weights: vec![1.0; states.len()],
        }
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSchema {
    pub groups: Vec<LabelGroup>,
}

impl Default for LabelSchema {
    /// Three 3-state organ groups and one binary effusion group, unit weights.
    fn default() -> Self {
        let organ = ["healthy", "low", "high"];
        Self {
            groups: vec![
                LabelGroup::new("liver", &organ),
                LabelGroup::new("spleen", &organ),
                LabelGroup::new("kidney", &organ),
                LabelGroup::new("effusion", &["healthy", "injury"]),
            ],
        }
    }
}

impl LabelSchema {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.groups.is_empty(), Config, "schema has no label groups");
        for (i, g) in self.groups.iter().enumerate() {
            ensure!(
                g.state_count() >= 2,
                Config,
                "group {} ({}) needs at least 2 states",
                i,
                g.name
            );
            ensure!(
                g.healthy < g.state_count(),
                Config,
                "group {}: healthy index {} out of range",
                g.name,
                g.healthy
            );
            ensure!(
                g.weights.len() == g.state_count(),
                Config,
                "group {}: {} weights for {} states",
                g.name,
                g.weights.len(),
                g.state_count()
            );
            ensure!(
                g.weights.iter().all(|w| w.is_finite() && *w > 0.0),
                Config,
                "group {}: weights must be positive",
                g.name
            );
            ensure!(
                !self.groups[..i].iter().any(|o| o.name == g.name),
                Config,
                "duplicate group name {}",
                g.name
            );
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Total number of states across all groups (the classifier width).
    pub fn total_states(&self) -> usize {
        self.groups.iter().map(LabelGroup::state_count).sum()
    }

    /// Start offset of each group inside a flattened state vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.groups
            .iter()
            .scan(0, |acc, g| {
                let o = *acc;
                *acc += g.state_count();
                Some(o)
            })
            .collect()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Check that `states[g]` is a valid state index of group `g`.
    pub fn check_states(&self, states: &[usize]) -> Result<()> {
        ensure!(
            states.len() == self.groups.len(),
            Contract,
            "{} state indices for {} groups",
            states.len(),
            self.groups.len()
        );
        for (g, (&s, grp)) in states.iter().zip(&self.groups).enumerate() {
            ensure!(
                s < grp.state_count(),
                Contract,
                "state {} invalid for group {} ({})",
                s,
                g,
                grp.name
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_layout() {
        let s = LabelSchema::default();
        s.validate().unwrap();
        assert_eq!(s.total_states(), 11);
        assert_eq!(s.offsets(), vec![0, 3, 6, 9]);
    }

    #[test]
    fn rejects_bad_groups() {
        let mut s = LabelSchema::default();
        s.groups[0].healthy = 3;
        assert!(s.validate().is_err());
        let mut s = LabelSchema::default();
        s.groups[1].weights[0] = 0.0;
        assert!(s.validate().is_err());
        let mut s = LabelSchema::default();
        s.groups[2].states.truncate(1);
        s.groups[2].weights.truncate(1);
        assert!(s.validate().is_err());
        let s = LabelSchema { groups: vec![] };
        assert!(s.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"groups": [], "extra": 1}"#;
        assert!(serde_json::from_str::<LabelSchema>(bad).is_err());
    }
}
