use std::collections::HashSet;

use densescan::evalbench::{
    decode_rle, encode_rle, evaluate, iou, EvalError, PredictionRecord, SegmentationSample,
    DEFAULT_THRESHOLDS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle_iou(a: &[bool], b: &[bool]) -> f64 {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let p: f64 = rng.random();
    (0..n).map(|_| rng.random_bool(p)).collect()
}

fn sample(id: &str, n: usize, gt: &[u32]) -> SegmentationSample {
    SegmentationSample {
        sample_id: id.into(),
        scene_id: "s".into(),
        question_text: "q".into(),
        gt_point_indices: gt.to_vec(),
        num_points: n,
    }
}

fn pred(id: &str, mask: &[bool]) -> PredictionRecord {
    PredictionRecord {
        sample_id: id.into(),
        scene_id: "s".into(),
        mask_rle: encode_rle(mask),
        num_points: mask.len(),
    }
}

#[test]
fn iou_matches_set_oracle_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(0..=200);
        let a = random_mask(&mut rng, n);
        let b = random_mask(&mut rng, n);
        let got = iou(&a, &b).unwrap();
        assert_eq!(got.to_bits(), oracle_iou(&a, &b).to_bits());
        assert_eq!(got.to_bits(), iou(&b, &a).unwrap().to_bits());
    }
}

#[test]
fn rle_round_trip_every_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in 0..=256 {
        for _ in 0..8 {
            let m = random_mask(&mut rng, n);
            assert_eq!(decode_rle(&encode_rle(&m), n).unwrap(), m);
        }
    }
}

#[test]
fn two_samples_mean_and_accuracy() {
    let samples = [sample("a", 4, &[0, 1]), sample("b", 4, &[2])];
    let preds = [
        pred("a", &[true, true, false, false]),
        pred("b", &[true, false, false, false]),
    ];
    let r = evaluate(&samples, &preds, &DEFAULT_THRESHOLDS).unwrap();
    assert_eq!(r.miou, 0.5);
    assert_eq!(r.acc(0.25), Some(0.5));
    assert_eq!(r.acc(0.5), Some(0.5));
    assert_eq!(r.per_sample[0].iou, 1.0);
    assert_eq!(r.per_sample[1].iou, 0.0);
}

#[test]
fn threshold_is_strict() {
    // 3 of 10 overlap
    let gt: Vec<u32> = (0..10).collect();
    let mut m = vec![false; 10];
    m[..3].fill(true);
    let r = evaluate(&[sample("a", 10, &gt)], &[pred("a", &m)], &[0.25, 0.3, 0.5]).unwrap();
    assert_eq!(r.per_sample[0].iou, 0.3);
    assert_eq!(r.acc(0.25), Some(1.0));
    assert_eq!(r.acc(0.3), Some(0.0));
    assert_eq!(r.acc(0.5), Some(0.0));
}

#[test]
fn missing_prediction_scores_zero_and_is_flagged() {
    let samples = [sample("a", 3, &[0]), sample("b", 3, &[1])];
    let r = evaluate(&samples, &[pred("a", &[true, false, false])], &DEFAULT_THRESHOLDS).unwrap();
    assert_eq!(r.n_missing, 1);
    assert!(r.per_sample[1].missing);
    assert_eq!(r.per_sample[1].iou, 0.0);
    assert_eq!(r.miou, 0.5);
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(json["per_sample"][1]["missing"], true);
    assert_eq!(json["acc_at"]["0.25"], 0.5);
    assert!(json.get("mIoU").is_some());
}

#[test]
fn duplicate_and_unknown_predictions_error() {
    let samples = [sample("a", 2, &[0])];
    let p = pred("a", &[true, false]);
    assert_eq!(
        evaluate(&samples, &[p.clone(), p.clone()], &DEFAULT_THRESHOLDS),
        Err(EvalError::DuplicatePrediction("a".into()))
    );
    assert_eq!(
        evaluate(&samples, &[pred("zz", &[true, false])], &DEFAULT_THRESHOLDS),
        Err(EvalError::UnknownSample("zz".into()))
    );
    assert!(matches!(
        evaluate(&samples, &[pred("a", &[true, false, true])], &DEFAULT_THRESHOLDS),
        Err(EvalError::DimensionMismatch { expected: 2, found: 3 })
    ));
}

#[test]
fn accuracy_non_increasing_in_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    for k in 0..200 {
        let n = rng.random_range(1..=60);
        let mut gt = random_mask(&mut rng, n);
        gt[rng.random_range(0..n)] = true;
        let idx: Vec<u32> = (0..n as u32).filter(|&i| gt[i as usize]).collect();
        let id = format!("x{k}");
        samples.push(sample(&id, n, &idx));
        preds.push(pred(&id, &random_mask(&mut rng, n)));
    }
    let ts: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let r = evaluate(&samples, &preds, &ts).unwrap();
    let accs: Vec<f64> = ts.iter().map(|&t| r.acc(t).unwrap()).collect();
    assert!(accs.windows(2).all(|w| w[0] >= w[1]));
    assert!((0.0..=1.0).contains(&r.miou));
    let mean = r.per_sample.iter().map(|s| s.iou).sum::<f64>() / 200.0;
    assert_eq!(r.miou, mean);
}
