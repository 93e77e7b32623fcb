//! Scalar-loop reference scorer, written without touching the library's
//! metric code.

use rand::Rng;

use traumakit::ensemble::{PatientProbs, PatientSet};
use traumakit::metric::GroundTruth;
use traumakit::{LabelGroup, LabelSchema};

/// Keep 32 significant bits, rounding half away from zero.
pub fn keep_32_bits(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let mut e = 0i32;
    let mut scale = 1.0f64;
    // Smallest power of two strictly above |x|.
    while scale <= x.abs() {
        scale *= 2.0;
        e += 1;
    }
    while scale / 2.0 > x.abs() {
        scale /= 2.0;
        e -= 1;
    }
    // |x| in [2^(e-1), 2^e): 32 significant bits means a step of 2^(e-32).
    let q = 2f64.powi(e - 32);
    (x / q).round() * q
}

pub struct Instance {
    pub schema: LabelSchema,
    pub preds: PatientSet,
    pub truth: GroundTruth,
}

pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let m = rng.random_range(1..=4);
    let groups = (0..m)
        .map(|g| {
            let k = rng.random_range(2..=3);
            let names: Vec<String> = (0..k).map(|s| format!("s{s}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut grp = LabelGroup::new(&format!("g{g}"), &refs);
            grp.healthy = rng.random_range(0..k);
            grp.weights = (0..k).map(|_| rng.random_range(0.5..6.0)).collect();
            grp
        })
        .collect();
    let schema = LabelSchema { groups };
    let n = rng.random_range(1..=8);
    let c: usize = schema.groups.iter().map(|g| g.states.len()).sum();
    let mut preds = PatientSet::new();
    let mut truth = GroundTruth::new();
    for i in 0..n {
        let id = format!("p{i}");
        let values = (0..c)
            .map(|_| if rng.random::<f64>() < 0.05 { 0.0 } else { rng.random_range(0.0..10.0) })
            .collect();
        preds.insert(id.clone(), PatientProbs { values });
        truth.insert(id, schema.groups.iter().map(|g| rng.random_range(0..g.states.len())).collect());
    }
    // Keep every group sum positive.
    for p in preds.values_mut() {
        let mut o = 0;
        for g in &schema.groups {
            if p.values[o..o + g.states.len()].iter().all(|v| *v == 0.0) {
                p.values[o] = 1.0;
            }
            o += g.states.len();
        }
    }
    Instance { schema, preds, truth }
}

fn clipped_ll(y: f64, p: f64) -> f64 {
    let eps = 1e-15;
    let p = if p < eps { eps } else if p > 1.0 - eps { 1.0 - eps } else { p };
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Default options: one sample per study per group, weights of the true
/// state, divided by the study count; unit any-injury weights.
pub fn score(inst: &Instance) -> f64 {
    let schema = &inst.schema;
    let n = inst.truth.len() as f64;
    let mut losses = vec![0.0; schema.groups.len()];
    let mut any_loss = 0.0;
    for (id, states) in &inst.truth {
        let raw = &inst.preds[id].values;
        let mut start = 0;
        let mut worst_unhealthy = 0.0f64;
        let mut injured = false;
        for (g, grp) in schema.groups.iter().enumerate() {
            let k = grp.states.len();
            let mut total = 0.0;
            for s in 0..k {
                total += raw[start + s];
            }
            let mut norm = vec![0.0; k];
            for s in 0..k {
                norm[s] = keep_32_bits(raw[start + s] / total);
            }
            let t = states[g];
            losses[g] += grp.weights[t] * clipped_ll(1.0, norm[t]);
            let u = 1.0 - norm[grp.healthy];
            if u > worst_unhealthy {
                worst_unhealthy = u;
            }
            if t != grp.healthy {
                injured = true;
            }
            start += k;
        }
        let p_any = worst_unhealthy.clamp(0.0, 1.0);
        any_loss += clipped_ll(if injured { 1.0 } else { 0.0 }, p_any);
    }
    let mut total = any_loss / n;
    for l in &losses {
        total += l / n;
    }
    total / (losses.len() + 1) as f64
}
