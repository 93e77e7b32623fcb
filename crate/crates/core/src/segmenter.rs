//! Study-level 3D segmentation: a small encoder-decoder producing per-organ
//! probabilities on a downsampled grid, mask thresholding at full
//! resolution, and per-organ crops. An oracle mode passes ground truth
//! through untouched.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::layers::Conv3d;
use crate::nn::loss::{dice_loss_with_grad, DICE_EPS};
use crate::nn::ops::{self, Pooled};
use crate::nn::{Adam, ParamSet, Tensor};
use crate::phantom::PhantomStudy;
use crate::volume::{Box3, CtVolume, Mask3};
use crate::volumeprep::equidistant_indices;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    /// Edge length of the cubic working grid.
    pub resolution: usize,
    /// Encoder widths of the two levels.
    pub channels: [usize; 2],
    pub organs: usize,
    pub steps: usize,
    pub lr: f64,
    pub threshold: f64,
    pub margin: usize,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: [8, 8],
            organs: 4,
            steps: 200,
            lr: 0.02,
            threshold: 0.5,
            margin: 2,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.resolution >= 4 && self.resolution % 4 == 0,
            Config,
            "segmenter resolution must be a positive multiple of 4"
        );
        ensure!(self.channels.iter().all(|&c| c >= 1), Config, "segmenter channels must be >= 1");
        ensure!(self.organs >= 1, Config, "segmenter needs at least one organ channel");
        ensure!(self.lr.is_finite() && self.lr > 0.0, Config, "segmenter lr must be > 0");
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            Config,
            "threshold must be in (0, 1)"
        );
        Ok(())
    }
}

/// Two-level 3D encoder-decoder with additive skips.
///
/// `32³·1 → conv·relu (c0) → pool → conv·relu (c1) → pool → conv·relu (c1)
/// → up + skip → conv·relu (c0) → up + skip → 1x1 conv → softmax`, the
/// softmax running over a background channel plus one channel per organ.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: SegConfig,
    pub params: ParamSet,
    enc1: Conv3d,
    enc2: Conv3d,
    mid: Conv3d,
    dec2: Conv3d,
    out: Conv3d,
}

struct SegCache {
    x: Tensor,
    e1_pre: Tensor,
    e1: Tensor,
    p1: Pooled,
    e2_pre: Tensor,
    e2: Tensor,
    p2: Pooled,
    m_pre: Tensor,
    s2: Tensor,
    d2_pre: Tensor,
    s1: Tensor,
    /// Softmax over background + organ channels, `[1, organs + 1, r, r, r]`.
    soft: Tensor,
    /// Organ channels of `soft`, `[1, organs, r, r, r]`.
    y: Tensor,
}

impl SegModel {
    pub fn new(config: SegConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let [c0, c1] = config.channels;
        let enc1 = Conv3d::new(&mut ps, "enc1", 1, c0, 3, 1, &mut rng);
        let enc2 = Conv3d::new(&mut ps, "enc2", c0, c1, 3, 1, &mut rng);
        let mid = Conv3d::new(&mut ps, "mid", c1, c1, 3, 1, &mut rng);
        let dec2 = Conv3d::new(&mut ps, "dec2", c1, c0, 3, 1, &mut rng);
        // Channel 0 is "no organ"; the softmax makes organs compete per voxel.
        let out = Conv3d::new(&mut ps, "out", c0, config.organs + 1, 1, 0, &mut rng);
        Ok(Self {
            config,
            params: ps,
            enc1,
            enc2,
            mid,
            dec2,
            out,
        })
    }

    fn forward_with(&self, ps: &ParamSet, x: &Tensor) -> Result<SegCache> {
        let e1_pre = self.enc1.forward(ps, x)?;
        let e1 = ops::relu(&e1_pre);
        let p1 = ops::maxpool3d(&e1)?;
        let e2_pre = self.enc2.forward(ps, &p1.y)?;
        let e2 = ops::relu(&e2_pre);
        let p2 = ops::maxpool3d(&e2)?;
        let m_pre = self.mid.forward(ps, &p2.y)?;
        let mut s2 = ops::upsample2x(&ops::relu(&m_pre), 3)?;
        s2.add_assign(&e2)?;
        let d2_pre = self.dec2.forward(ps, &s2)?;
        let mut s1 = ops::upsample2x(&ops::relu(&d2_pre), 3)?;
        s1.add_assign(&e1)?;
        let soft = ops::softmax(&self.out.forward(ps, &s1)?, 1)?;
        let y = organ_channels(&soft)?;
        Ok(SegCache {
            x: x.clone(),
            e1_pre,
            e1,
            p1,
            e2_pre,
            e2,
            p2,
            m_pre,
            s2,
            d2_pre,
            s1,
            soft,
            y,
        })
    }

    fn backward(&self, ps: &ParamSet, c: &SegCache, d_soft: &Tensor) -> Result<ParamSet> {
        let mut g = ps.zeros_like();
        let d_logit = ops::softmax_backward(&c.soft, d_soft, 1)?;
        let d_s1 = self.out.backward(ps, &c.s1, &d_logit, &mut g)?;
        let d_up1 = ops::upsample2x_backward(c.d2_pre.shape(), &d_s1, 3)?;
        let d_d2 = ops::relu_backward(&c.d2_pre, &d_up1)?;
        let d_s2 = self.dec2.backward(ps, &c.s2, &d_d2, &mut g)?;
        let d_up2 = ops::upsample2x_backward(c.m_pre.shape(), &d_s2, 3)?;
        let d_m = ops::relu_backward(&c.m_pre, &d_up2)?;
        let d_p2 = self.mid.backward(ps, &c.p2.y, &d_m, &mut g)?;
        let mut d_e2 = ops::maxpool_backward(c.e2.shape(), &c.p2.argmax, &d_p2)?;
        d_e2.add_assign(&d_s2)?;
        let d_e2 = ops::relu_backward(&c.e2_pre, &d_e2)?;
        let d_p1 = self.enc2.backward(ps, &c.p1.y, &d_e2, &mut g)?;
        let mut d_e1 = ops::maxpool_backward(c.e1.shape(), &c.p1.argmax, &d_p1)?;
        d_e1.add_assign(&d_s1)?;
        let d_e1 = ops::relu_backward(&c.e1_pre, &d_e1)?;
        self.enc1.backward(ps, &c.x, &d_e1, &mut g)?;
        Ok(g)
    }

    /// Per-organ probabilities `[organs, r, r, r]` for a working-grid input.
    pub fn probabilities(&self, grid: &Tensor) -> Result<Tensor> {
        let r = self.config.resolution;
        let y = self.forward_grid(&self.params, grid)?.y;
        y.reshape(&[self.config.organs, r, r, r])
    }

    /// Training objective and its parameter gradient: mean organ-channel
    /// Dice loss plus voxelwise cross-entropy over all softmax channels.
    pub fn loss_and_grad(&self, ps: &ParamSet, grid: &Tensor, target: &Tensor) -> Result<(f64, ParamSet)> {
        let cache = self.forward_grid(ps, grid)?;
        let (dice, dy) = channel_dice(&cache.y, target, self.config.organs)?;
        let (ce, mut d_soft) = voxel_cross_entropy(&cache.soft, target)?;
        let cell = dy.numel() / self.config.organs;
        for (d, g) in d_soft.data_mut()[cell..].iter_mut().zip(dy.data()) {
            *d += g;
        }
        Ok((dice + ce, self.backward(ps, &cache, &d_soft)?))
    }

    pub fn loss(&self, ps: &ParamSet, grid: &Tensor, target: &Tensor) -> Result<f64> {
        let cache = self.forward_grid(ps, grid)?;
        let dice = channel_dice(&cache.y, target, self.config.organs)?.0;
        Ok(dice + voxel_cross_entropy(&cache.soft, target)?.0)
    }

    /// Mean organ-channel Dice loss alone.
    pub fn dice_loss(&self, ps: &ParamSet, grid: &Tensor, target: &Tensor) -> Result<f64> {
        let y = self.forward_grid(ps, grid)?.y;
        channel_dice(&y, target, self.config.organs).map(|(l, _)| l)
    }

    fn forward_grid(&self, ps: &ParamSet, grid: &Tensor) -> Result<SegCache> {
        let r = self.config.resolution;
        ensure!(grid.shape() == [r, r, r], Contract, "segmenter input must be {r}³");
        self.forward_with(ps, &grid.clone().reshape(&[1, 1, r, r, r])?)
    }
}

/// Mean voxelwise cross-entropy of the softmax `[1, organs + 1, ...]`
/// against organ targets, the background target being whatever the organs
/// leave uncovered. Soft Dice alone lets a channel that loses its organ early
/// stay dead; this term keeps every misclassified voxel pulling.
fn voxel_cross_entropy(soft: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    ensure!(soft.numel() > target.numel(), Contract, "segmenter target size mismatch");
    let cell = soft.numel() - target.numel();
    ensure!(target.numel() % cell == 0, Contract, "segmenter target size mismatch");
    let (s, t) = (soft.data(), target.data());
    let mut grad = vec![0.0; soft.numel()];
    let mut loss = 0.0;
    for v in 0..cell {
        let covered: f64 = t[v..].iter().step_by(cell).sum();
        let mut tv = |c: usize, w: f64| {
            if w > 0.0 {
                let p = s[c * cell + v].max(1e-12);
                loss -= w * p.ln();
                grad[c * cell + v] = -w / (p * cell as f64);
            }
        };
        tv(0, (1.0 - covered).max(0.0));
        for (k, &w) in t[v..].iter().step_by(cell).enumerate() {
            tv(k + 1, w);
        }
    }
    Ok((loss / cell as f64, Tensor::from_vec(soft.shape(), grad)?))
}

fn organ_channels(soft: &Tensor) -> Result<Tensor> {
    let s = soft.shape();
    let cell: usize = s[2..].iter().product();
    let mut shape = s.to_vec();
    shape[1] -= 1;
    Tensor::from_vec(&shape, soft.data()[cell..].to_vec())
}

fn channel_dice(y: &Tensor, target: &Tensor, k: usize) -> Result<(f64, Tensor)> {
    ensure!(y.numel() == target.numel(), Contract, "segmenter target size mismatch");
    let per = y.numel() / k;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y.numel());
    for c in 0..k {
        let p = Tensor::from_vec(&[per], y.data()[c * per..(c + 1) * per].to_vec())?;
        let t = Tensor::from_vec(&[per], target.data()[c * per..(c + 1) * per].to_vec())?;
        let (l, g) = dice_loss_with_grad(&p, &t, DICE_EPS)?;
        loss += l / k as f64;
        grad.extend(g.data().iter().map(|v| v / k as f64));
    }
    Ok((loss, Tensor::from_vec(y.shape(), grad)?))
}

fn axis_maps(dims: [usize; 3], r: usize) -> [Vec<usize>; 3] {
    dims.map(|d| equidistant_indices(d, r))
}

/// Nearest-index resampling of a volume onto the cubic working grid, with
/// intensities mapped from [0, 1] to [-1, 1].
pub fn to_grid(volume: &CtVolume, r: usize) -> Result<Tensor> {
    ensure!(!volume.is_empty(), Contract, "empty volume");
    let [mz, my, mx] = axis_maps(volume.dims(), r);
    let mut out = Vec::with_capacity(r * r * r);
    for &z in &mz {
        for &y in &my {
            for &x in &mx {
                out.push(2.0 * volume.get(z, y, x) as f64 - 1.0);
            }
        }
    }
    Tensor::from_vec(&[r, r, r], out)
}

/// Organ masks resampled onto the grid, stacked `[organs, r, r, r]`.
pub fn masks_to_grid(masks: &[Mask3], r: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(masks.len() * r * r * r);
    for m in masks {
        let [mz, my, mx] = axis_maps(m.dims(), r);
        for &z in &mz {
            for &y in &my {
                for &x in &mx {
                    out.push(if m.get(z, y, x) != 0 { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Tensor::from_vec(&[masks.len(), r, r, r], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainReport {
    /// Mean Dice loss over the training set, evaluated every `eval_every` steps.
    pub loss_curve: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// Train on ground-truth masks, one study per step in seeded shuffled order.
pub fn train_segmenter(studies: &[&PhantomStudy], config: &SegConfig) -> Result<(SegModel, SegTrainReport)> {
    ensure!(!studies.is_empty(), Contract, "segmenter training needs at least one study");
    let mut model = SegModel::new(config.clone())?;
    let r = config.resolution;
    let data: Vec<(Tensor, Tensor)> = studies
        .iter()
        .map(|s| {
            ensure!(
                s.organ_masks.len() == config.organs,
                Contract,
                "study {} has {} organ masks, segmenter expects {}",
                s.study_id,
                s.organ_masks.len(),
                config.organs
            );
            Ok((to_grid(&s.volume, r)?, masks_to_grid(&s.organ_masks, r)?))
        })
        .collect::<Result<_>>()?;
    let mean_loss = |m: &SegModel| -> Result<f64> {
        let mut acc = 0.0;
        for (x, t) in &data {
            acc += m.dice_loss(&m.params, x, t)?;
        }
        Ok(acc / data.len() as f64)
    };
    let eval_every = 20;
    let mut curve = vec![(0, mean_loss(&model)?)];
    let mut opt = Adam::new(config.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=config.steps {
        if order.is_empty() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let i = order.pop().expect("non-empty order");
        let (_, grads) = model.loss_and_grad(&model.params, &data[i].0, &data[i].1)?;
        ensure!(grads.is_finite(), Numeric, "non-finite segmenter gradient at step {step}");
        opt.step(&mut model.params, &grads)?;
        if step % eval_every == 0 || step == config.steps {
            let l = mean_loss(&model)?;
            log::debug!("segmenter step {step}: dice loss {l:.4}");
            curve.push((step, l));
        }
    }
    let final_loss = curve.last().expect("curve has the initial point").1;
    Ok((
        model,
        SegTrainReport {
            loss_curve: curve,
            final_loss,
        },
    ))
}

/// Threshold per-organ grid probabilities at full resolution. Each output
/// voxel reads the grid cell given by the same nearest-index mapping used to
/// build the grid.
pub fn threshold_masks(probs: &Tensor, dims: [usize; 3], threshold: f64) -> Result<Vec<Mask3>> {
    ensure!(
        threshold > 0.0 && threshold < 1.0,
        Contract,
        "threshold must be in (0, 1), got {threshold}"
    );
    ensure!(probs.rank() == 4, Contract, "probabilities must be [organs, r, r, r]");
    let s = probs.shape();
    let (k, r) = (s[0], s[1]);
    ensure!(s[2] == r && s[3] == r, Contract, "probability grid must be cubic");
    let [bz, by, bx] = dims.map(|d| equidistant_indices(r, d));
    let cell = r * r * r;
    (0..k)
        .map(|c| {
            let p = &probs.data()[c * cell..(c + 1) * cell];
            let mut m = Mask3::filled(dims, 0);
            for (z, &gz) in bz.iter().enumerate() {
                for (y, &gy) in by.iter().enumerate() {
                    for (x, &gx) in bx.iter().enumerate() {
                        if p[(gz * r + gy) * r + gx] >= threshold {
                            m.set(z, y, x, 1);
                        }
                    }
                }
            }
            Ok(m)
        })
        .collect()
}

pub fn predict_mask(model: &SegModel, volume: &CtVolume, threshold: f64) -> Result<Vec<Mask3>> {
    let r = model.config.resolution;
    ensure!(
        volume.dims().iter().all(|&d| d >= 2),
        Contract,
        "volume {:?} is below the segmenter minimum of 2 voxels per axis",
        volume.dims()
    );
    let probs = model.probabilities(&to_grid(volume, r)?)?;
    threshold_masks(&probs, volume.dims(), threshold)
}

pub fn oracle_masks(study: &PhantomStudy) -> Vec<Mask3> {
    study.organ_masks.clone()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrganCrop {
    pub organ: String,
    pub bbox: Box3,
    pub mask: Mask3,
    pub volume: CtVolume,
    pub degenerate: bool,
}

/// Per organ: the mask's bounding box grown by `margin` and clipped, or the
/// full volume with `degenerate` set when the mask is empty.
pub fn mask_to_crops(masks: &[Mask3], names: &[String], volume: &CtVolume, margin: usize) -> Result<Vec<OrganCrop>> {
    ensure!(masks.len() == names.len(), Contract, "{} masks for {} organ names", masks.len(), names.len());
    masks
        .iter()
        .zip(names)
        .map(|(m, name)| {
            m.check_same_dims(volume)?;
            let (bbox, degenerate) = match m.bounding_box() {
                Some(b) => (b.expand(margin, m.dims()), false),
                None => (Box3::full(m.dims()), true),
            };
            Ok(OrganCrop {
                organ: name.clone(),
                bbox,
                mask: m.crop(&bbox)?,
                volume: volume.crop(&bbox)?,
                degenerate,
            })
        })
        .collect()
}

/// The `seg_<study>.json` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegRecord {
    pub study_id: String,
    pub mode: String,
    pub organs: Vec<CropRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropRecord {
    pub organ: String,
    pub bbox: Box3,
    pub degenerate: bool,
    pub voxels: usize,
}

impl SegRecord {
    pub fn new(study_id: &str, mode: &str, crops: &[OrganCrop]) -> Self {
        Self {
            study_id: study_id.to_string(),
            mode: mode.to_string(),
            organs: crops
                .iter()
                .map(|c| CropRecord {
                    organ: c.organ.clone(),
                    bbox: c.bbox,
                    degenerate: c.degenerate,
                    voxels: c.mask.count_positive(),
                })
                .collect(),
        }
    }
}

/// Mean Dice overlap of binary masks across organs.
pub fn mask_dice(pred: &[Mask3], truth: &[Mask3]) -> Result<f64> {
    ensure!(pred.len() == truth.len() && !pred.is_empty(), Contract, "mask list mismatch");
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        p.check_same_dims(t)?;
        let (mut i, mut sp, mut st) = (0usize, 0usize, 0usize);
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let (a, b) = (a != 0, b != 0);
            i += (a && b) as usize;
            sp += a as usize;
            st += b as usize;
        }
        acc += if sp + st == 0 { 1.0 } else { 2.0 * i as f64 / (sp + st) as f64 };
    }
    Ok(acc / pred.len() as f64)
}
