use traumakit::phantom::{generate_studies, PhantomConfig, PhantomStudy};
use traumakit::segmenter::{mask_dice, predict_mask, train_segmenter, SegConfig};
use traumakit::LabelSchema;

fn studies(root: u64, n: usize) -> Vec<PhantomStudy> {
    generate_studies(root, n, &PhantomConfig::default(), &LabelSchema::default()).unwrap()
}

#[test]
fn eight_studies_train_below_point_three_and_generalize() {
    let train = studies(40, 8);
    let refs: Vec<&PhantomStudy> = train.iter().collect();
    let cfg = SegConfig::default();
    let (model, report) = train_segmenter(&refs, &cfg).unwrap();
    assert!(report.final_loss < 0.3, "curve {:?}", report.loss_curve);
    assert!(report.loss_curve[0].1 > report.final_loss);

    let held_out = studies(41, 4);
    let dice: f64 = held_out
        .iter()
        .map(|s| mask_dice(&predict_mask(&model, &s.volume, cfg.threshold).unwrap(), &s.organ_masks).unwrap())
        .sum::<f64>()
        / held_out.len() as f64;
    assert!(dice > 0.5, "held-out Dice {dice}");
}

#[test]
fn a_single_study_is_fit_almost_exactly() {
    let one = studies(42, 1);
    let (_, report) = train_segmenter(&[&one[0]], &SegConfig::default()).unwrap();
    assert!(report.final_loss < 0.1, "curve {:?}", report.loss_curve);
}

#[test]
fn training_is_deterministic() {
    let s = studies(43, 2);
    let refs: Vec<&PhantomStudy> = s.iter().collect();
    let cfg = SegConfig { steps: 4, resolution: 16, ..SegConfig::default() };
    let (a, ra) = train_segmenter(&refs, &cfg).unwrap();
    let (b, rb) = train_segmenter(&refs, &cfg).unwrap();
    assert_eq!(ra.loss_curve, rb.loss_curve);
    assert_eq!(a.params.flatten(), b.params.flatten());
}
