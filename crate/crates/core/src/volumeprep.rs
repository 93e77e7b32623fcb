//! Preprocessing: intensity windowing, study-level mask cropping, equidistant
//! 96-slice stacks, 2.5D triplets, and slice/patient label processing.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::phantom::PhantomStudy;
use crate::schema::LabelSchema;
use crate::volume::{round_index, Box3, CtVolume, Grid3, Mask3};

/// Number of equidistant slices in a prepared volume.
pub const SLICE_COUNT: usize = 96;
/// Triplets per prepared volume: centers at slices 1..=94 (zero-based).
pub const TRIPLET_COUNT: usize = SLICE_COUNT - 2;

/// Elementwise `clamp((raw - lo) / (hi - lo), 0, 1)`.
pub fn normalize_volume(raw: &CtVolume, lo: f32, hi: f32) -> Result<CtVolume> {
    ensure!(
        lo.is_finite() && hi.is_finite() && lo < hi,
        Config,
        "window requires lo < hi, got ({lo}, {hi})"
    );
    ensure!(
        raw.data().iter().all(|v| v.is_finite()),
        Contract,
        "volume contains non-finite values"
    );
    let span = hi - lo;
    Ok(raw.map(|v| ((v - lo) / span).clamp(0.0, 1.0)))
}

/// Multiply by the mask, then restrict to the mask's bounding box grown by
/// `margin` voxels and clipped to the volume. Returns the crop and its box.
pub fn apply_mask_crop(norm: &CtVolume, mask: &Mask3, margin: usize) -> Result<(CtVolume, Box3)> {
    norm.check_same_dims(mask)?;
    let bbox = mask
        .bounding_box()
        .ok_or(Error::DegenerateMask { fallback: true })?
        .expand(margin, norm.dims());
    let mut masked = norm.clone();
    for (v, &m) in masked.data_mut().iter_mut().zip(mask.data()) {
        if m == 0 {
            *v = 0.0;
        }
    }
    Ok((masked.crop(&bbox)?, bbox))
}

/// Source slice index for each of `n` equidistant output slices:
/// `round(i * (depth - 1) / (n - 1))`.
pub fn equidistant_indices(depth: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![round_index((depth - 1) as f64 / 2.0)];
    }
    (0..n)
        .map(|i| round_index(i as f64 * (depth - 1) as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceVolume96 {
    /// Depth is [`SLICE_COUNT`].
    pub volume: CtVolume,
    pub source_indices: Vec<usize>,
}

fn pick_slices<T: Copy>(vol: &Grid3<T>, indices: &[usize]) -> Grid3<T> {
    let mut data = Vec::with_capacity(indices.len() * vol.height() * vol.width());
    for &z in indices {
        data.extend_from_slice(vol.slice(z));
    }
    Grid3::from_vec([indices.len(), vol.height(), vol.width()], data).expect("slice stack dims")
}

/// Stack 96 equidistant slices by nearest-index selection.
pub fn resample_96(vol: &CtVolume) -> Result<SliceVolume96> {
    ensure!(!vol.is_empty(), Contract, "cannot resample an empty volume");
    let source_indices = equidistant_indices(vol.depth(), SLICE_COUNT);
    Ok(SliceVolume96 {
        volume: pick_slices(vol, &source_indices),
        source_indices,
    })
}

/// Same slice selection applied to a mask.
pub fn resample_mask_96(mask: &Mask3) -> Result<Mask3> {
    ensure!(!mask.is_empty(), Contract, "cannot resample an empty mask");
    Ok(pick_slices(mask, &equidistant_indices(mask.depth(), SLICE_COUNT)))
}

/// In-plane nearest-index resize of every slice to `height x width`.
pub fn resize_slices<T: Copy>(vol: &Grid3<T>, height: usize, width: usize) -> Result<Grid3<T>> {
    ensure!(height >= 1 && width >= 1, Contract, "resize target must be non-empty");
    ensure!(!vol.is_empty(), Contract, "cannot resize an empty volume");
    let ys = equidistant_indices(vol.height(), height);
    let xs = equidistant_indices(vol.width(), width);
    let mut data = Vec::with_capacity(vol.depth() * height * width);
    for z in 0..vol.depth() {
        for &y in &ys {
            for &x in &xs {
                data.push(vol.get(z, y, x));
            }
        }
    }
    Grid3::from_vec([vol.depth(), height, width], data)
}

/// Ordered 3-channel slice stacks. `data` holds `len() * 3 * height * width`
/// values; triplet `t` channel `c` starts at `((t * 3) + c) * height * width`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSequence {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Zero-based center slice of each triplet, strictly increasing.
    pub center_indices: Vec<usize>,
    /// Per triplet, per label group.
    pub slice_labels: Vec<Vec<f64>>,
}

impl TripletSequence {
    pub fn len(&self) -> usize {
        self.center_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center_indices.is_empty()
    }

    pub fn triplet(&self, t: usize) -> &[f32] {
        let n = 3 * self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }
}

/// Channels `(i-1, i, i+1)` for every interior slice `i` of a 96-slice stack.
pub fn make_triplets(vol: &SliceVolume96) -> Result<TripletSequence> {
    let v = &vol.volume;
    ensure!(
        v.depth() == SLICE_COUNT,
        Contract,
        "make_triplets needs exactly {SLICE_COUNT} slices, got {}",
        v.depth()
    );
    let plane = v.height() * v.width();
    let mut data = Vec::with_capacity(TRIPLET_COUNT * 3 * plane);
    for i in 1..SLICE_COUNT - 1 {
        for z in i - 1..=i + 1 {
            data.extend_from_slice(v.slice(z));
        }
    }
    Ok(TripletSequence {
        height: v.height(),
        width: v.width(),
        data,
        center_indices: (1..SLICE_COUNT - 1).collect(),
        slice_labels: vec![Vec::new(); TRIPLET_COUNT],
    })
}

/// Positions of `t` equidistant picks out of `n` items.
pub fn sequence_positions(n: usize, t: usize) -> Result<Vec<usize>> {
    ensure!(t >= 1 && t <= n, Contract, "sequence length {t} outside 1..={n}");
    Ok(equidistant_indices(n, t))
}

/// Subsample `t` triplets at equidistant positions, labels alongside.
pub fn select_sequence(trip: &TripletSequence, t: usize) -> Result<TripletSequence> {
    let pos = sequence_positions(trip.len(), t)?;
    let mut data = Vec::with_capacity(t * 3 * trip.height * trip.width);
    for &p in &pos {
        data.extend_from_slice(trip.triplet(p));
    }
    Ok(TripletSequence {
        height: trip.height,
        width: trip.width,
        data,
        center_indices: pos.iter().map(|&p| trip.center_indices[p]).collect(),
        slice_labels: pos.iter().map(|&p| trip.slice_labels[p].clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector {
    pub values: Vec<f64>,
}

impl LabelVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// `L / max(L)`; an all-zero vector stays all zero.
pub fn normalize_labels(raw: &LabelVector) -> Result<LabelVector> {
    ensure!(
        raw.values.iter().all(|v| v.is_finite() && *v >= 0.0),
        Contract,
        "labels must be finite and non-negative"
    );
    let max = raw.values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(LabelVector::new(vec![0.0; raw.values.len()]));
    }
    Ok(LabelVector::new(raw.values.iter().map(|v| v / max).collect()))
}

/// Elementwise `norm * patient`.
pub fn combine_patient_label(norm: &LabelVector, patient: f64) -> Result<LabelVector> {
    ensure!(
        (0.0..=1.0).contains(&patient),
        Contract,
        "patient label {patient} outside [0,1]"
    );
    ensure!(
        norm.values.iter().all(|v| (0.0..=1.0).contains(v)),
        Contract,
        "normalized labels must lie in [0,1]"
    );
    Ok(LabelVector::new(norm.values.iter().map(|v| v * patient).collect()))
}

/// Positive-pixel count per slice divided by the largest per-slice count.
pub fn compute_visibility(mask: &Mask3) -> Result<LabelVector> {
    ensure!(!mask.is_empty(), Contract, "visibility of an empty mask volume");
    let counts = mask.slice_counts().into_iter().map(|c| c as f64).collect();
    normalize_labels(&LabelVector::new(counts))
}

/// Per-slice target for one group: visibility times the patient-level label
/// (1 when the patient's state for the group is not healthy).
pub fn slice_labels(mask: &Mask3, patient: f64) -> Result<LabelVector> {
    combine_patient_label(&compute_visibility(mask)?, patient)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepParams {
    pub window_lo: f32,
    pub window_hi: f32,
    pub margin: usize,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for PrepParams {
    fn default() -> Self {
        Self {
            window_lo: 0.0,
            window_hi: 1.0,
            margin: 2,
            seq_len: 32,
            height: 32,
            width: 32,
        }
    }
}

impl PrepParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.window_lo < self.window_hi, Config, "window_lo must be < window_hi");
        ensure!(
            (1..=TRIPLET_COUNT).contains(&self.seq_len),
            Config,
            "seq_len must be in 1..={TRIPLET_COUNT}"
        );
        ensure!(self.height >= 1 && self.width >= 1, Config, "height/width must be >= 1");
        Ok(())
    }
}

/// Model-ready form of one study.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedStudy {
    pub study_id: String,
    pub sequence: TripletSequence,
    /// Organ masks of each selected triplet's center slice, `T x G x H x W`.
    pub center_masks: Vec<u8>,
    pub patient_states: Vec<usize>,
    pub crop_box: Box3,
    /// True when the study mask was empty and the full volume was used.
    pub degenerate: bool,
}

impl PreparedStudy {
    pub fn seq_len(&self) -> usize {
        self.sequence.len()
    }
}

/// Full chain for one study given per-organ masks (oracle or predicted).
pub fn prepare_study(
    study: &PhantomStudy,
    masks: &[Mask3],
    schema: &LabelSchema,
    params: &PrepParams,
) -> Result<PreparedStudy> {
    params.validate()?;
    ensure!(
        masks.len() == schema.group_count(),
        Contract,
        "{} masks for {} groups",
        masks.len(),
        schema.group_count()
    );
    schema.check_states(&study.patient_labels)?;
    let norm = normalize_volume(&study.volume, params.window_lo, params.window_hi)?;
    let union = Mask3::union(masks)?;
    let (cropped, crop_box, degenerate) = match apply_mask_crop(&norm, &union, params.margin) {
        Ok((c, b)) => (c, b, false),
        Err(Error::DegenerateMask { .. }) => (norm.clone(), Box3::full(norm.dims()), true),
        Err(e) => return Err(e),
    };
    let stack = resample_96(&cropped)?;
    let image = resize_slices(&stack.volume, params.height, params.width)?;
    let organ_stacks = masks
        .iter()
        .map(|m| {
            let c = m.crop(&crop_box)?;
            resize_slices(&resample_mask_96(&c)?, params.height, params.width)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_group = Vec::with_capacity(schema.group_count());
    for ((g, m), &state) in schema.groups.iter().zip(&organ_stacks).zip(&study.patient_labels) {
        let patient = if state == g.healthy { 0.0 } else { 1.0 };
        per_group.push(slice_labels(m, patient)?.values);
    }

    let mut trip = make_triplets(&SliceVolume96 {
        volume: image,
        source_indices: stack.source_indices,
    })?;
    trip.slice_labels = trip
        .center_indices
        .iter()
        .map(|&c| per_group.iter().map(|v| v[c]).collect())
        .collect();
    let seq = select_sequence(&trip, params.seq_len)?;

    let plane = params.height * params.width;
    let mut center_masks = Vec::with_capacity(seq.len() * masks.len() * plane);
    for &c in &seq.center_indices {
        for m in &organ_stacks {
            center_masks.extend_from_slice(m.slice(c));
        }
    }
    Ok(PreparedStudy {
        study_id: study.study_id.clone(),
        sequence: seq,
        center_masks,
        patient_states: study.patient_labels.clone(),
        crop_box,
        degenerate,
    })
}
