mod common;

use traumakit::ensemble::make_folds;
use traumakit::nn::Tensor;
use traumakit::traumanet::{fit, make_batch, predict_patient, total_loss, train, TrainConfig, TraumaNet, TraumaNetConfig};
use traumakit::volumeprep::{PrepParams, PreparedStudy};
use traumakit::LabelSchema;

fn small(schema: &LabelSchema) -> (TraumaNetConfig, PrepParams) {
    let prep = PrepParams {
        seq_len: 8,
        height: 16,
        width: 16,
        ..PrepParams::default()
    };
    let model = TraumaNetConfig {
        seq_len: 8,
        height: 16,
        width: 16,
        widths: vec![8, 8, 16, 16],
        hidden: 8,
        ..TraumaNetConfig::for_schema(schema)
    };
    (model, prep)
}

#[test]
fn full_mode_training_lowers_the_loss_and_is_seed_deterministic() {
    let schema = LabelSchema::default();
    let (cfg, prep) = small(&schema);
    let (_, data) = common::oracle_prepared(1, 6, &schema, &prep);
    let ids: Vec<String> = data.iter().map(|s| s.study_id.clone()).collect();
    let folds = traumakit::ensemble::FoldSpec::full(0);
    let tc = TrainConfig { epochs: 8, ..TrainConfig::default() };
    let a = train(&data, &folds, &cfg, &tc, &schema).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].train_ids, ids);
    let h = &a[0].history;
    assert!(h.last().unwrap().train_loss < h[0].train_loss, "{h:?}");
    let b = train(&data, &folds, &cfg, &tc, &schema).unwrap();
    assert_eq!(a[0].model.params.flatten(), b[0].model.params.flatten());

    let k = make_folds(&ids, 3, 0).unwrap();
    let per_fold = train(&data, &k, &cfg, &TrainConfig { epochs: 1, ..tc }, &schema).unwrap();
    assert_eq!(per_fold.len(), 3);
    for m in &per_fold {
        assert!(m.val_ids.iter().all(|id| !m.train_ids.contains(id)));
        assert!(m.history.iter().all(|r| r.val_loss.is_some()));
    }
}

#[test]
fn a_single_injured_study_is_memorised() {
    let schema = LabelSchema::default();
    let (cfg, prep) = small(&schema);
    let (_, data) = common::oracle_prepared(5, 12, &schema, &prep);
    let study = data
        .iter()
        .find(|s| s.patient_states.iter().zip(&schema.groups).any(|(&st, g)| st != g.healthy))
        .expect("an injured phantom");
    // A capacity check, so the regularising defaults are switched off.
    let tc = TrainConfig { epochs: 120, batch_size: 1, weight_decay: 0.0, cosine_decay: false, ..TrainConfig::default() };
    let (model, _) = fit(&cfg, &tc, &[study], &[], &schema, 3).unwrap();

    // Slice targets are soft, so the best attainable cross-entropy is their
    // entropy (unit weights in the default schema).
    let batch = make_batch(&[study], &cfg, &schema).unwrap();
    let ce = model.batch_loss(&model.params, &batch, &schema).unwrap().classification;
    let rows = batch.targets.numel() / schema.total_states();
    let floor = -batch.targets.data().iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>() / rows as f64;
    assert!(ce - floor < 0.02, "cross-entropy {ce} vs floor {floor}");

    let p = predict_patient(&model, study, &schema).unwrap();
    for ((g, o), &st) in schema.groups.iter().zip(schema.offsets()).zip(&study.patient_states) {
        let probs = &p.values[o..o + g.states.len()];
        assert!(probs.iter().all(|&v| v <= probs[st]) && probs[st] > 0.8, "group {}: {probs:?}", g.name);
    }
}

#[test]
fn predictions_are_distributions_per_group() {
    let schema = LabelSchema::default();
    let (cfg, prep) = small(&schema);
    let (_, data) = common::oracle_prepared(2, 2, &schema, &prep);
    let net = TraumaNet::new(cfg, 4).unwrap();
    for s in &data {
        let slices = net.predict_study(s, &schema).unwrap();
        assert_eq!(slices.slices.len(), 8);
        for row in slices.slices.iter().chain(std::iter::once(&predict_patient(&net, s, &schema).unwrap().values)) {
            for (g, o) in schema.groups.iter().zip(schema.offsets()) {
                let sum: f64 = row[o..o + g.states.len()].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_order_permutes_outputs_and_loss_grows_with_lambda() {
    let schema = LabelSchema::default();
    let (cfg, prep) = small(&schema);
    let (_, data) = common::oracle_prepared(3, 3, &schema, &prep);
    let net = TraumaNet::new(cfg.clone(), 5).unwrap();
    let fwd: Vec<&PreparedStudy> = data.iter().collect();
    let rev: Vec<&PreparedStudy> = data.iter().rev().collect();
    let a = net.forward(&make_batch(&fwd, &cfg, &schema).unwrap().input).unwrap().class_scores;
    let b = net.forward(&make_batch(&rev, &cfg, &schema).unwrap().input).unwrap().class_scores;
    let per = a.numel() / 3;
    for i in 0..3 {
        let x = Tensor::from_vec(&[per], a.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let y = Tensor::from_vec(&[per], b.data()[(2 - i) * per..(3 - i) * per].to_vec()).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    let batch = make_batch(&fwd, &cfg, &schema).unwrap();
    let out = net.forward(&batch.input).unwrap();
    let mut last = f64::NEG_INFINITY;
    for lambda in [0.0, 0.5, 1.0, 2.0] {
        let l = total_loss(&out, &batch.targets, &batch.masks, lambda, &schema).unwrap();
        assert!(l.auxiliary >= 0.0 && l.total >= last);
        assert!((l.total - (l.classification + lambda * l.auxiliary)).abs() < 1e-12);
        last = l.total;
    }
}
