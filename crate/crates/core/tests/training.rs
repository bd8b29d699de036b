use tpmamba_core::checkpoint::Checkpoint;
use tpmamba_core::config::{AugmentConfig, TrainConfig};
use tpmamba_core::loss::{argmax_classes, dice_score, Labels};
use tpmamba_core::synth::{gen_synth, synth_volume};
use tpmamba_core::train::Trainer;
use tpmamba_core::volume::preprocess;

fn small_cfg(epochs: usize, augment: AugmentConfig) -> TrainConfig {
    let mut cfg = TrainConfig { epochs, lr_start: 1e-3, crop: [8, 32, 32], augment, ..TrainConfig::default() };
    cfg.window.window = [8, 32, 32];
    cfg.finish().unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn loss_falls_over_training() {
    let data = gen_synth(2, 32, 2, 3).unwrap();
    let mut t = Trainer::new(small_cfg(100, AugmentConfig::ALL)).unwrap();
    let rows = t.fit(&data, |_| {}).unwrap();
    let early = median(rows[..10].iter().map(|m| m.loss).collect());
    let late = median(rows[90..].iter().map(|m| m.loss).collect());
    assert!(late < early, "early {early} late {late}");
    assert!((rows.last().unwrap().lr - 1e-5).abs() < 1e-15);
}

#[test]
fn window_sized_eval_matches_single_pass() {
    let rec = synth_volume([8, 32, 32], 2, 4).unwrap();
    let mut t = Trainer::new(small_cfg(5, AugmentConfig::NONE)).unwrap();
    t.fit(std::slice::from_ref(&rec), |_| {}).unwrap();

    let prepared = preprocess(&rec).unwrap();
    let x = prepared.voxels.reshape(&[1, 1, 8, 32, 32]).unwrap();
    let direct = argmax_classes(&t.model.predict(&t.store, &x).unwrap()).unwrap();
    let l = prepared.labels.as_ref().unwrap();
    let gt = Labels::new(&[1, 8, 32, 32], l.data.clone()).unwrap();
    let expected = dice_score(&direct, &gt, 2).unwrap();
    assert_eq!(t.evaluate(&rec).unwrap(), expected);
}

#[test]
fn restored_trainer_predicts_identically() {
    let rec = synth_volume([8, 32, 32], 2, 5).unwrap();
    let mut t = Trainer::new(small_cfg(2, AugmentConfig::NONE)).unwrap();
    t.fit(std::slice::from_ref(&rec), |_| {}).unwrap();
    let back = Trainer::from_checkpoint(&Checkpoint::from_bytes(&t.checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.cfg, t.cfg);
    assert_eq!(back.infer(&rec).unwrap().labels, t.infer(&rec).unwrap().labels);
}
