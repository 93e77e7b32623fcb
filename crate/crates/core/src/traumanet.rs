//! 2.5D slice classifier: a per-slice 2D CNN backbone over triplet channels,
//! a recurrent layer across the slice sequence, per-slice class scores, and
//! two auxiliary segmentation heads on the final and penultimate backbone
//! blocks trained with Dice loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{patient_aggregate, FoldSpec, PatientProbs, SliceProbs};
use crate::error::{ensure, Result};
use crate::nn::gru::{BiGru, BiGruCache, Gru, GruCache};
use crate::nn::layers::{Conv2d, Dense};
use crate::nn::loss::{aux_seg_loss_with_grad, weighted_ce_with_grad, DICE_EPS};
use crate::nn::ops::{self, Pooled, Reduce};
use crate::nn::{ParamSet, Sgd, Tensor};
use crate::schema::LabelSchema;
use crate::volumeprep::PreparedStudy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraumaNetConfig {
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv-relu-pool backbone block.
    pub widths: Vec<usize>,
    pub hidden: usize,
    /// Total state count across label groups.
    pub n_classes: usize,
    /// Channels of each auxiliary mask (one per organ).
    pub aux_channels: usize,
    /// Weight of the auxiliary Dice loss.
    pub aux_weight: f64,
    pub bidirectional: bool,
}

impl Default for TraumaNetConfig {
    fn default() -> Self {
        Self {
            seq_len: 32,
            height: 32,
            width: 32,
            widths: vec![16, 32, 64, 64],
            hidden: 32,
            n_classes: 11,
            aux_channels: 4,
            aux_weight: 1.0,
            bidirectional: true,
        }
    }
}

impl TraumaNetConfig {
    pub fn for_schema(schema: &LabelSchema) -> Self {
        Self {
            n_classes: schema.total_states(),
            aux_channels: schema.group_count(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.seq_len >= 1, Config, "seq_len must be >= 1");
        ensure!(self.widths.len() >= 2, Config, "backbone needs at least 2 blocks");
        ensure!(self.widths.iter().all(|&w| w >= 1), Config, "block widths must be >= 1");
        let f = 1usize << self.widths.len();
        ensure!(
            self.height >= f && self.width >= f && self.height % f == 0 && self.width % f == 0,
            Config,
            "height/width must be positive multiples of {f} for {} blocks",
            self.widths.len()
        );
        ensure!(self.hidden >= 1, Config, "hidden size must be >= 1");
        ensure!(self.n_classes >= 2, Config, "n_classes must be >= 2");
        ensure!(self.aux_channels >= 1, Config, "aux_channels must be >= 1");
        ensure!(
            self.aux_weight.is_finite() && self.aux_weight >= 0.0,
            Config,
            "aux_weight must be >= 0"
        );
        Ok(())
    }

    /// Spatial downsampling factor of the (penultimate, final) aux heads.
    pub fn aux_factors(&self) -> [usize; 2] {
        let nb = self.widths.len();
        [1 << (nb - 2), 1 << (nb - 1)]
    }
}

/// Initial bias of the auxiliary heads, `σ(-3) ≈ 0.047`.
const AUX_PRIOR_LOGIT: f64 = -3.0;

#[derive(Clone, Debug)]
enum Recurrent {
    Bi(BiGru),
    Uni(Gru),
}

enum RecurrentCache {
    Bi(BiGruCache),
    Uni(GruCache),
}

/// Layer layout; parameters live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct TraumaNetArch {
    pub config: TraumaNetConfig,
    blocks: Vec<Conv2d>,
    /// Heads on the penultimate and final blocks.
    aux_heads: [Conv2d; 2],
    rnn: Recurrent,
    head: Dense,
}

#[derive(Clone, Debug)]
pub struct TraumaNet {
    pub arch: TraumaNetArch,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraumaNetOutput {
    /// `[B, T, n_classes]`.
    pub class_scores: Tensor,
    /// Sigmoid masks `[B, T, aux_channels, h, w]` at 1/4 and 1/8 resolution
    /// (for the default four blocks).
    pub aux_maps: [Tensor; 2],
}

struct BlockCache {
    input: Tensor,
    pre: Tensor,
    act: Tensor,
    pool: Pooled,
}

struct ForwardCache {
    batch: usize,
    steps: usize,
    blocks: Vec<BlockCache>,
    pooled_shape: Vec<usize>,
    rnn: RecurrentCache,
    head_in: Tensor,
}

impl TraumaNet {
    pub fn new(config: TraumaNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut in_c = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            blocks.push(Conv2d::new(&mut ps, &format!("backbone.{i}"), in_c, w, 3, 1, 1, &mut rng));
            in_c = w;
        }
        let nb = config.widths.len();
        let aux_heads = [
            Conv2d::new(&mut ps, "aux.penultimate", config.widths[nb - 2], config.aux_channels, 1, 1, 0, &mut rng),
            Conv2d::new(&mut ps, "aux.final", config.widths[nb - 1], config.aux_channels, 1, 1, 0, &mut rng),
        ];
        // Each organ channel covers a few percent of a slice; starting the
        // heads near that prior keeps the Dice gradient from vanishing on the
        // background.
        for head in &aux_heads {
            ps.get_mut(head.b).data_mut().fill(AUX_PRIOR_LOGIT);
        }
        let feat = config.widths[nb - 1];
        let (rnn, rnn_width) = if config.bidirectional {
            let r = BiGru::new(&mut ps, "rnn", feat, config.hidden, &mut rng);
            let w = r.output_width();
            (Recurrent::Bi(r), w)
        } else {
            (Recurrent::Uni(Gru::new(&mut ps, "rnn", feat, config.hidden, &mut rng)), config.hidden)
        };
        // The head sees the recurrent output next to the slice's own pooled
        // features, so image evidence reaches the scores without passing
        // through the recurrent gates.
        let head = Dense::zeros(&mut ps, "head", rnn_width + feat, config.n_classes);
        Ok(Self {
            arch: TraumaNetArch {
                config,
                blocks,
                aux_heads,
                rnn,
                head,
            },
            params: ps,
        })
    }

    pub fn config(&self) -> &TraumaNetConfig {
        &self.arch.config
    }

    pub fn forward(&self, batch: &Tensor) -> Result<TraumaNetOutput> {
        self.arch.forward(&self.params, batch).map(|(o, _)| o)
    }
}

impl TraumaNetArch {
    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let c = &self.config;
        ensure!(
            x.rank() == 5 && x.shape()[2] == 3 && x.shape()[3] == c.height && x.shape()[4] == c.width,
            Contract,
            "input must be [B, T, 3, {}, {}], got {:?}",
            c.height,
            c.width,
            x.shape()
        );
        ensure!(x.shape()[0] >= 1 && x.shape()[1] >= 1, Contract, "empty batch or sequence");
        Ok((x.shape()[0], x.shape()[1]))
    }

    /// Forward pass over `[B, T, 3, H, W]`. Any `T >= 1` is accepted; the
    /// configured `seq_len` is the length used for training and prediction.
    fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<(TraumaNetOutput, ForwardCache)> {
        let (b, t) = self.check_input(x)?;
        let c = &self.config;
        let n = b * t;
        let mut h = x.clone().reshape(&[n, 3, c.height, c.width])?;
        let nb = self.blocks.len();
        let mut caches = Vec::with_capacity(nb);
        let mut aux_maps = Vec::with_capacity(2);
        for (i, conv) in self.blocks.iter().enumerate() {
            let pre = conv.forward(ps, &h)?;
            let act = ops::relu(&pre);
            if i + 2 >= nb {
                let head = &self.aux_heads[i + 2 - nb];
                let m = ops::sigmoid(&head.forward(ps, &act)?);
                let s = m.shape().to_vec();
                aux_maps.push(m.reshape(&[b, t, s[1], s[2], s[3]])?);
            }
            let pool = ops::maxpool2d(&act)?;
            let next = pool.y.clone();
            caches.push(BlockCache {
                input: std::mem::replace(&mut h, next),
                pre,
                act,
                pool,
            });
        }
        let pooled_shape = h.shape().to_vec();
        let (ch, ph, pw) = (pooled_shape[1], pooled_shape[2], pooled_shape[3]);
        let (gap, _) = ops::reduce(&h.reshape(&[n, ch, ph * pw])?, 2, Reduce::Mean)?;
        let seq = gap.reshape(&[b, t, ch])?;
        let (rnn_out, rnn_cache) = match &self.rnn {
            Recurrent::Bi(r) => {
                let (y, cch) = r.forward(ps, &seq)?;
                (y, RecurrentCache::Bi(cch))
            }
            Recurrent::Uni(r) => {
                let (y, cch) = r.forward(ps, &seq)?;
                (y, RecurrentCache::Uni(cch))
            }
        };
        let rw = rnn_out.shape()[2];
        let mut head_in = Vec::with_capacity(n * (rw + ch));
        for (r, g) in rnn_out.data().chunks(rw).zip(seq.data().chunks(ch)) {
            head_in.extend_from_slice(r);
            head_in.extend_from_slice(g);
        }
        let flat = Tensor::from_vec(&[n, rw + ch], head_in)?;
        let scores = self.head.forward(ps, &flat)?.reshape(&[b, t, c.n_classes])?;
        let aux_final = aux_maps.pop().expect("final aux map");
        let aux_pen = aux_maps.pop().expect("penultimate aux map");
        Ok((
            TraumaNetOutput {
                class_scores: scores,
                aux_maps: [aux_pen, aux_final],
            },
            ForwardCache {
                batch: b,
                steps: t,
                blocks: caches,
                pooled_shape,
                rnn: rnn_cache,
                head_in: flat,
            },
        ))
    }

    /// Gradients of all parameters given output gradients.
    fn backward(
        &self,
        ps: &ParamSet,
        out: &TraumaNetOutput,
        cache: &ForwardCache,
        d_scores: &Tensor,
        d_aux: &[Tensor; 2],
    ) -> Result<ParamSet> {
        let c = &self.config;
        let (b, t) = (cache.batch, cache.steps);
        let n = b * t;
        let mut grads = ps.zeros_like();
        let d_scores = d_scores.clone().reshape(&[n, c.n_classes])?;
        let d_head_in = self.head.backward(ps, &cache.head_in, &d_scores, &mut grads)?;
        let ps_shape = &cache.pooled_shape;
        let (ch, ph, pw) = (ps_shape[1], ps_shape[2], ps_shape[3]);
        let rw = d_head_in.shape()[1] - ch;
        let mut d_rnn = Vec::with_capacity(n * rw);
        let mut d_direct = Vec::with_capacity(n * ch);
        for row in d_head_in.data().chunks(rw + ch) {
            d_rnn.extend_from_slice(&row[..rw]);
            d_direct.extend_from_slice(&row[rw..]);
        }
        let d_rnn = Tensor::from_vec(&[b, t, rw], d_rnn)?;
        let d_seq = match (&self.rnn, &cache.rnn) {
            (Recurrent::Bi(r), RecurrentCache::Bi(cc)) => r.backward(ps, cc, &d_rnn, &mut grads)?,
            (Recurrent::Uni(r), RecurrentCache::Uni(cc)) => r.backward(ps, cc, &d_rnn, &mut grads)?,
            _ => unreachable!("recurrent cache kind matches layer kind"),
        };
        let mut d_gap = d_seq.reshape(&[n, ch])?;
        d_gap.add_assign(&Tensor::from_vec(&[n, ch], d_direct)?)?;
        let mut d_h = ops::reduce_backward(&[n, ch, ph * pw], 2, Reduce::Mean, &[], &d_gap)?
            .reshape(ps_shape)?;
        let nb = self.blocks.len();
        for i in (0..nb).rev() {
            let bc = &cache.blocks[i];
            let mut d_act = ops::maxpool_backward(bc.act.shape(), &bc.pool.argmax, &d_h)?;
            if i + 2 >= nb {
                let j = i + 2 - nb;
                let m = &out.aux_maps[j];
                let s = m.shape().to_vec();
                let flat_shape = [n, s[2], s[3], s[4]];
                let m = m.clone().reshape(&flat_shape)?;
                let dm = d_aux[j].clone().reshape(&flat_shape)?;
                let d_logit = ops::sigmoid_backward(&m, &dm)?;
                let d_from_aux = self.aux_heads[j].backward(ps, &bc.act, &d_logit, &mut grads)?;
                d_act.add_assign(&d_from_aux)?;
            }
            let d_pre = ops::relu_backward(&bc.pre, &d_act)?;
            d_h = self.blocks[i].backward(ps, &bc.input, &d_pre, &mut grads)?;
        }
        Ok(grads)
    }
}

/// Soft per-slice targets: for each group, probability `v` on the patient's
/// true state and `1 − v` on the healthy state, where `v` is the slice label
/// (visibility times the patient-level injury label). Healthy patients get a
/// one-hot healthy target.
pub fn slice_targets(study: &PreparedStudy, schema: &LabelSchema) -> Result<Tensor> {
    let c = schema.total_states();
    let t = study.seq_len();
    let offsets = schema.offsets();
    let mut data = vec![0.0; t * c];
    for (pos, labels) in study.sequence.slice_labels.iter().enumerate() {
        ensure!(labels.len() == schema.group_count(), Contract, "slice label width mismatch");
        for (g, grp) in schema.groups.iter().enumerate() {
            let state = study.patient_states[g];
            let o = pos * c + offsets[g];
            if state == grp.healthy {
                data[o + grp.healthy] = 1.0;
            } else {
                let v = labels[g].clamp(0.0, 1.0);
                data[o + state] = v;
                data[o + grp.healthy] = 1.0 - v;
            }
        }
    }
    Tensor::from_vec(&[t, c], data)
}

/// Nearest downsampling of the centre-slice organ masks by `factor`, picking
/// the pixel at `i * factor + factor / 2`.
pub fn aux_targets(study: &PreparedStudy, channels: usize, factor: usize) -> Result<Tensor> {
    let (h, w) = (study.sequence.height, study.sequence.width);
    let t = study.seq_len();
    ensure!(
        study.center_masks.len() == t * channels * h * w,
        Contract,
        "centre masks do not hold {channels} channels"
    );
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(t * channels * oh * ow);
    for plane in study.center_masks.chunks(h * w) {
        for y in 0..oh {
            for x in 0..ow {
                let v = plane[(y * factor + factor / 2) * w + x * factor + factor / 2];
                out.push(if v != 0 { 1.0 } else { 0.0 });
            }
        }
    }
    Tensor::from_vec(&[1, t, channels, oh, ow], out)
}

/// A model-ready minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T, 3, H, W]`.
    pub input: Tensor,
    /// Soft targets `[B * T, n_classes]`.
    pub targets: Tensor,
    /// Aux mask targets matching the two aux heads.
    pub masks: [Tensor; 2],
}

fn concat_first_axis(parts: &[Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data)
}

pub fn make_batch(studies: &[&PreparedStudy], config: &TraumaNetConfig, schema: &LabelSchema) -> Result<Batch> {
    ensure!(!studies.is_empty(), Contract, "empty batch");
    let t = studies[0].seq_len();
    let (h, w) = (config.height, config.width);
    let mut input = Vec::with_capacity(studies.len() * t * 3 * h * w);
    let mut targets = Vec::with_capacity(studies.len());
    let mut m0 = Vec::with_capacity(studies.len());
    let mut m1 = Vec::with_capacity(studies.len());
    let [f0, f1] = config.aux_factors();
    for s in studies {
        ensure!(
            s.seq_len() == t && s.sequence.height == h && s.sequence.width == w,
            Contract,
            "study {} has shape T={} {}x{}, expected T={t} {h}x{w}",
            s.study_id,
            s.seq_len(),
            s.sequence.height,
            s.sequence.width
        );
        input.extend(s.sequence.data.iter().map(|&v| v as f64));
        targets.push(slice_targets(s, schema)?);
        m0.push(aux_targets(s, config.aux_channels, f0)?);
        m1.push(aux_targets(s, config.aux_channels, f1)?);
    }
    Ok(Batch {
        input: Tensor::from_vec(&[studies.len(), t, 3, h, w], input)?,
        targets: concat_first_axis(&targets)?,
        masks: [concat_first_axis(&m0)?, concat_first_axis(&m1)?],
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub classification: f64,
    pub auxiliary: f64,
}

/// `weighted CE(class scores, slice targets) + λ · Σ_heads Dice(aux map, mask)`.
pub fn total_loss(
    out: &TraumaNetOutput,
    targets: &Tensor,
    masks: &[Tensor; 2],
    lambda: f64,
    schema: &LabelSchema,
) -> Result<LossParts> {
    total_loss_with_grad(out, targets, masks, lambda, schema).map(|(l, _, _)| l)
}

fn total_loss_with_grad(
    out: &TraumaNetOutput,
    targets: &Tensor,
    masks: &[Tensor; 2],
    lambda: f64,
    schema: &LabelSchema,
) -> Result<(LossParts, Tensor, [Tensor; 2])> {
    ensure!(lambda.is_finite() && lambda >= 0.0, Contract, "lambda must be >= 0");
    let s = out.class_scores.shape();
    let logits = out.class_scores.clone().reshape(&[s[0] * s[1], s[2]])?;
    let (ce, d_logits) = weighted_ce_with_grad(&logits, targets, schema)?;
    let (aux, d_aux) = aux_seg_loss_with_grad(&out.aux_maps, masks, DICE_EPS)?;
    let d_scores = d_logits.reshape(s)?;
    let d_aux: Vec<Tensor> = d_aux.into_iter().map(|g| g.scale(lambda)).collect();
    let [a, b]: [Tensor; 2] = d_aux.try_into().expect("two aux heads");
    Ok((
        LossParts {
            total: ce + lambda * aux,
            classification: ce,
            auxiliary: aux,
        },
        d_scores,
        [a, b],
    ))
}

impl TraumaNet {
    /// Loss and parameter gradients for one batch under explicit parameters.
    pub fn loss_and_grad(&self, params: &ParamSet, batch: &Batch, schema: &LabelSchema) -> Result<(LossParts, ParamSet)> {
        let (out, cache) = self.arch.forward(params, &batch.input)?;
        let (parts, d_scores, d_aux) =
            total_loss_with_grad(&out, &batch.targets, &batch.masks, self.config().aux_weight, schema)?;
        let grads = self.arch.backward(params, &out, &cache, &d_scores, &d_aux)?;
        Ok((parts, grads))
    }

    pub fn batch_loss(&self, params: &ParamSet, batch: &Batch, schema: &LabelSchema) -> Result<LossParts> {
        let (out, _) = self.arch.forward(params, &batch.input)?;
        total_loss(&out, &batch.targets, &batch.masks, self.config().aux_weight, schema)
    }

    /// Per-slice, per-group softmax probabilities for one prepared study.
    pub fn predict_study(&self, study: &PreparedStudy, schema: &LabelSchema) -> Result<SliceProbs> {
        let c = self.config();
        ensure!(
            study.seq_len() == c.seq_len,
            Contract,
            "study {} has sequence length {}, model expects {}",
            study.study_id,
            study.seq_len(),
            c.seq_len
        );
        ensure!(c.n_classes == schema.total_states(), Contract, "model classes do not match the schema");
        let batch = make_batch(&[study], c, schema)?;
        let out = self.forward(&batch.input)?;
        Ok(group_softmax(&out.class_scores, schema))
    }

    /// Per-study dice overlap (1 − Dice loss) of each aux head against the
    /// downsampled organ masks.
    pub fn aux_dice(&self, studies: &[&PreparedStudy], schema: &LabelSchema) -> Result<[f64; 2]> {
        let mut acc = [0.0; 2];
        for s in studies {
            let batch = make_batch(&[*s], self.config(), schema)?;
            let out = self.forward(&batch.input)?;
            for (j, a) in acc.iter_mut().enumerate() {
                *a += 1.0 - crate::nn::dice_loss(&out.aux_maps[j], &batch.masks[j], DICE_EPS)?;
            }
        }
        let n = studies.len().max(1) as f64;
        Ok([acc[0] / n, acc[1] / n])
    }
}

/// Softmax within each label group of `[B, T, C]` scores (batch 0 only is
/// returned when `B == 1`; rows are concatenated otherwise).
pub fn group_softmax(scores: &Tensor, schema: &LabelSchema) -> SliceProbs {
    let c = schema.total_states();
    let offsets = schema.offsets();
    let slices = scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut p = vec![0.0; c];
            for (grp, &o) in schema.groups.iter().zip(&offsets) {
                let z = &row[o..o + grp.state_count()];
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for (k, ev) in e.iter().enumerate() {
                    p[o + k] = ev / s;
                }
            }
            p
        })
        .collect();
    SliceProbs { slices }
}

/// Patient-level probabilities via per-state max over slices.
pub fn predict_patient(model: &TraumaNet, study: &PreparedStudy, schema: &LabelSchema) -> Result<PatientProbs> {
    patient_aggregate(&model.predict_study(study, schema)?, schema)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// L2 penalty added to the (clipped) gradient.
    pub weight_decay: f64,
    /// Cosine learning-rate decay from `lr` towards zero over the epochs.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 2,
            lr: 0.02,
            momentum: 0.9,
            clip_norm: 5.0,
            weight_decay: 1e-3,
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(self.lr.is_finite() && self.lr > 0.0, Config, "lr must be > 0");
        ensure!((0.0..1.0).contains(&self.momentum), Config, "momentum must be in [0, 1)");
        ensure!(self.clip_norm.is_finite() && self.clip_norm >= 0.0, Config, "clip_norm must be >= 0");
        ensure!(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            Config,
            "weight_decay must be >= 0"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the training split with the epoch's final parameters.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub fold: usize,
    /// Seed of the initial weights and batch order.
    pub seed: u64,
    pub model: TraumaNet,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// Entry 0 is the initial model (before any update).
    pub history: Vec<EpochRecord>,
}

fn mean_loss(model: &TraumaNet, studies: &[&PreparedStudy], schema: &LabelSchema, bs: usize) -> Result<f64> {
    let mut acc = 0.0;
    for chunk in studies.chunks(bs) {
        let b = make_batch(chunk, model.config(), schema)?;
        acc += model.batch_loss(&model.params, &b, schema)?.total * chunk.len() as f64;
    }
    Ok(acc / studies.len() as f64)
}

/// Fit one model on `train` from initial weights given by `seed`.
pub fn fit(
    model_cfg: &TraumaNetConfig,
    train_cfg: &TrainConfig,
    train: &[&PreparedStudy],
    val: &[&PreparedStudy],
    schema: &LabelSchema,
    seed: u64,
) -> Result<(TraumaNet, Vec<EpochRecord>)> {
    train_cfg.validate()?;
    ensure!(!train.is_empty(), Contract, "empty training split");
    let mut model = TraumaNet::new(model_cfg.clone(), seed)?;
    let mut opt = Sgd::new(train_cfg.lr, train_cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_BA7C4);
    let record = |model: &TraumaNet, epoch: usize| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            train_loss: mean_loss(model, train, schema, train_cfg.batch_size)?,
            val_loss: if val.is_empty() {
                None
            } else {
                Some(mean_loss(model, val, schema, train_cfg.batch_size)?)
            },
        })
    };
    let mut history = vec![record(&model, 0)?];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        if train_cfg.cosine_decay {
            let frac = (epoch - 1) as f64 / train_cfg.epochs as f64;
            opt.lr = train_cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        for chunk in order.chunks(train_cfg.batch_size) {
            let studies: Vec<&PreparedStudy> = chunk.iter().map(|&i| train[i]).collect();
            let batch = make_batch(&studies, model_cfg, schema)?;
            let (_, mut grads) = model.loss_and_grad(&model.params, &batch, schema)?;
            ensure!(grads.is_finite(), Numeric, "non-finite gradient at epoch {epoch}");
            if train_cfg.clip_norm > 0.0 {
                let norm = grads.global_norm();
                if norm > train_cfg.clip_norm {
                    grads.scale_all(train_cfg.clip_norm / norm);
                }
            }
            if train_cfg.weight_decay > 0.0 {
                for (g, p) in grads.tensors_mut().iter_mut().zip(model.params.tensors()) {
                    for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                        *gv += train_cfg.weight_decay * pv;
                    }
                }
            }
            opt.step(&mut model.params, &grads)?;
        }
        history.push(record(&model, epoch)?);
        log::info!(
            "epoch {epoch}: train {:.5} val {:?}",
            history[epoch].train_loss,
            history[epoch].val_loss
        );
    }
    Ok((model, history))
}

/// One model per fold (a single model in full mode). Deterministic given
/// `train_cfg.seed`.
pub fn train(
    dataset: &[PreparedStudy],
    folds: &FoldSpec,
    model_cfg: &TraumaNetConfig,
    train_cfg: &TrainConfig,
    schema: &LabelSchema,
) -> Result<Vec<TrainedModel>> {
    let ids: Vec<String> = dataset.iter().map(|s| s.study_id.clone()).collect();
    folds.validate(&ids)?;
    (0..folds.fold_count())
        .map(|f| {
            let val_ids = &folds.folds[f];
            let train_set: Vec<&PreparedStudy> = dataset.iter().filter(|s| !val_ids.contains(&s.study_id)).collect();
            let val_set: Vec<&PreparedStudy> = dataset.iter().filter(|s| val_ids.contains(&s.study_id)).collect();
            ensure!(!train_set.is_empty(), Contract, "fold {f} has an empty training split");
            let seed = crate::phantom::splitmix64(train_cfg.seed ^ (f as u64).wrapping_mul(0x9E37_79B9));
            let (model, history) = fit(model_cfg, train_cfg, &train_set, &val_set, schema, seed)?;
            Ok(TrainedModel {
                fold: f,
                seed,
                model,
                train_ids: train_set.iter().map(|s| s.study_id.clone()).collect(),
                val_ids: val_ids.clone(),
                history,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(seq_len: usize) -> TraumaNetConfig {
        TraumaNetConfig {
            seq_len,
            height: 16,
            width: 16,
            widths: vec![3, 4, 4, 5],
            hidden: 3,
            ..TraumaNetConfig::default()
        }
    }

    fn random_batch(cfg: &TraumaNetConfig, b: usize, schema: &LabelSchema, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = cfg.seq_len;
        let input = Tensor::uniform(&[b, t, 3, cfg.height, cfg.width], 0.0, 1.0, &mut rng);
        let mut targets = vec![0.0; b * t * cfg.n_classes];
        for row in targets.chunks_mut(cfg.n_classes) {
            for (g, o) in schema.groups.iter().zip(schema.offsets()) {
                let v: f64 = rng.random();
                let k = rng.random_range(1..g.states.len());
                row[o + k] = v;
                row[o + g.healthy] += 1.0 - v;
            }
        }
        let masks = cfg.aux_factors().map(|f| {
            let (h, w) = (cfg.height / f, cfg.width / f);
            let m: Vec<f64> = (0..b * t * cfg.aux_channels * h * w)
                .map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 })
                .collect();
            Tensor::from_vec(&[b, t, cfg.aux_channels, h, w], m).unwrap()
        });
        Batch {
            input,
            targets: Tensor::from_vec(&[b * t, cfg.n_classes], targets).unwrap(),
            masks,
        }
    }

    #[test]
    fn output_shapes_and_uniform_start() {
        let schema = LabelSchema::default();
        let cfg = tiny(3);
        let net = TraumaNet::new(cfg.clone(), 1).unwrap();
        let batch = random_batch(&cfg, 2, &schema, 2);
        let out = net.forward(&batch.input).unwrap();
        assert_eq!(out.class_scores.shape(), &[2, 3, 11]);
        assert_eq!(out.aux_maps[0].shape(), &[2, 3, 4, 4, 4]);
        assert_eq!(out.aux_maps[1].shape(), &[2, 3, 4, 2, 2]);
        assert!(out.class_scores.data().iter().all(|&v| v == 0.0));
        let p = group_softmax(&out.class_scores, &schema);
        assert!((p.slices[0][0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.slices[0][9] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input_shape() {
        let net = TraumaNet::new(tiny(2), 1).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 2, 3, 8, 16])).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 2, 2, 16, 16])).is_err());
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let schema = LabelSchema::default();
        for seed in 0..3u64 {
            let cfg = tiny(2);
            let mut net = TraumaNet::new(cfg.clone(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            // Give the zero-initialised head a nonzero start so every layer gets gradient.
            for (name, t) in net.params.clone().iter() {
                if name.starts_with("head") {
                    let id = net.params.names().iter().position(|n| n == name).unwrap();
                    net.params.tensors_mut()[id] = Tensor::randn(t.shape(), 0.5, &mut rng);
                }
            }
            let batch = random_batch(&cfg, 1, &schema, seed);
            let template = net.params.clone();
            let f = |flat: &Tensor| -> Result<(f64, Tensor)> {
                let ps = template.unflatten(flat)?;
                let (l, g) = net.loss_and_grad(&ps, &batch, &schema)?;
                Ok((l.total, g.flatten()))
            };
            // Central differences of a loss near 5 carry ~1e-10 of round-off,
            // which swamps the relative error of the tiniest recurrent-weight
            // gradients; allow that much absolute slack on top of 1e-4.
            let x = template.flatten();
            let (_, analytic) = f(&x).unwrap();
            for (i, &a) in analytic.data().iter().enumerate() {
                let num = |d: f64| {
                    let mut p = x.clone();
                    p.data_mut()[i] += d;
                    f(&p).unwrap().0
                };
                let n = (num(1e-5) - num(-1e-5)) / 2e-5;
                let slack = 1e-4 * (a.abs() + n.abs()) + 1e-9;
                assert!((a - n).abs() <= slack, "seed {seed} coordinate {i}: {a:e} vs {n:e}");
            }
        }
    }
}
