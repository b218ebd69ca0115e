//! Landmark, occlusion and pose metrics, and whole-dataset evaluation.

use serde::{Deserialize, Serialize};

use crate::cascade::{predict_trajectory, CascadeModel, InstanceState};
use crate::dataset::{Dataset, TrainingSample};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, PoseAngles, Shape2D};
use crate::regression::AnnotationMask;

/// Yaw error below which a pose counts as correctly classified, in degrees.
pub const POSE_CLASS_TOLERANCE_DEG: f64 = 7.5;
pub const TARGET_PRECISION: f64 = 0.8;

fn check_shapes(pred: &Shape2D, truth: &Shape2D, mask: &AnnotationMask) -> Result<()> {
    if pred.len() != truth.len() || mask.n_points() != truth.len() {
        return Err(Error::invalid(format!(
            "landmark count mismatch: prediction {}, truth {}, mask {}",
            pred.len(),
            truth.len(),
            mask.n_points()
        )));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean euclidean error over annotated points, in pixels.
pub fn pixel_error(pred: &Shape2D, truth: &Shape2D, mask: &AnnotationMask) -> Result<f64> {
    check_shapes(pred, truth, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for k in (0..truth.len()).filter(|&k| mask.is_annotated(k)) {
        sum += dist(pred.point(k), truth.point(k));
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no annotated landmarks".into()));
    }
    Ok(sum / n as f64)
}

/// Mean error over annotated points as a percentage of the inter-ocular
/// distance.
pub fn normalized_error(
    pred: &Shape2D,
    truth: &Shape2D,
    mask: &AnnotationMask,
    left_eye: usize,
    right_eye: usize,
) -> Result<f64> {
    check_shapes(pred, truth, mask)?;
    if left_eye >= truth.len() || right_eye >= truth.len() {
        return Err(Error::invalid("eye index out of range"));
    }
    if !mask.is_annotated(left_eye) || !mask.is_annotated(right_eye) {
        return Err(Error::UndefinedMetric(
            "eye landmark is not annotated".into(),
        ));
    }
    let iod = dist(truth.point(left_eye), truth.point(right_eye));
    if !(iod > 0.0) {
        return Err(Error::UndefinedMetric(
            "inter-ocular distance is zero".into(),
        ));
    }
    Ok(pixel_error(pred, truth, mask)? / iod * 100.0)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("no positive labels".into()));
    }
    Ok(positives)
}

/// Highest recall among thresholds `score >= s` whose precision reaches
/// `target_precision`; 0 if none does.
pub fn recall_at_precision(scores: &[f64], labels: &[bool], target_precision: f64) -> Result<f64> {
    let positives = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: f64 = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        if precision >= target_precision {
            best = best.max(tp as f64 / positives as f64);
        }
    }
    Ok(best)
}

/// Area under the ROC curve; tied scores count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let positives = check_scores(scores, labels)?;
    let negatives = labels.len() - positives;
    if negatives == 0 {
        return Err(Error::UndefinedMetric("no negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks with ties averaged.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = 0.5 * ((i + 1) + j) as f64;
        rank_sum += avg_rank * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    /// Mean absolute wrapped error per axis (pitch, yaw, roll), degrees.
    pub mae_deg: [f64; 3],
    /// Share of samples with yaw error below 7.5 degrees.
    pub yaw_accuracy: f64,
    /// Share of samples with every axis error below 7.5 degrees.
    pub all_axis_accuracy: f64,
}

/// Absolute wrapped angle difference in degrees, per axis.
pub fn angle_errors_deg(pred: &PoseAngles, truth: &PoseAngles) -> [f64; 3] {
    let (p, t) = (pred.as_array(), truth.as_array());
    std::array::from_fn(|i| wrap_angle(p[i] - t[i]).abs().to_degrees())
}

pub fn pose_metrics(pred: &[PoseAngles], truth: &[PoseAngles]) -> Result<PoseMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(
            "prediction and truth lists differ in length",
        ));
    }
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("no poses".into()));
    }
    let n = pred.len() as f64;
    let mut mae = [0.0; 3];
    let (mut yaw_ok, mut all_ok) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let e = angle_errors_deg(p, t);
        for a in 0..3 {
            mae[a] += e[a];
        }
        yaw_ok += usize::from(e[1] < POSE_CLASS_TOLERANCE_DEG);
        all_ok += usize::from(e.iter().all(|v| *v < POSE_CLASS_TOLERANCE_DEG));
    }
    Ok(PoseMetrics {
        mae_deg: mae.map(|v| v / n),
        yaw_accuracy: yaw_ok as f64 / n,
        all_axis_accuracy: all_ok as f64 / n,
    })
}

/// Dataset-level means after one cascade stage (stage 0 is the initialization).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCurve {
    pub stage: usize,
    pub mean_landmark_error: f64,
    pub yaw_mae: Option<f64>,
    pub recall_at_p80: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Percent of inter-ocular distance; `None` without usable eye landmarks.
    pub mean_normalized_error: Option<f64>,
    /// Samples left out of the normalized error because an eye is unannotated.
    pub normalized_error_skipped: usize,
    pub mean_pixel_error: f64,
    /// `None` when no landmark is occluded.
    pub occlusion_recall_at_p80: Option<f64>,
    pub occlusion_auc: Option<f64>,
    /// `None` without pose ground truth.
    pub pose_mae_deg: Option<[f64; 3]>,
    pub pose_yaw_accuracy: Option<f64>,
    pub pose_all_axis_accuracy: Option<f64>,
    pub per_stage_curves: Vec<StageCurve>,
}

fn undefined_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn occlusion_scores(
    states: &[&InstanceState],
    samples: &[TrainingSample],
) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (s, t) in states.iter().zip(samples) {
        scores.extend(s.c.as_slice().iter().map(|c| 1.0 - c));
        labels.extend(t.c_true.iter().map(|c| *c == 0.0));
    }
    (scores, labels)
}

fn mean_pixel_error(states: &[&InstanceState], samples: &[TrainingSample]) -> Result<f64> {
    let mut errs = Vec::new();
    for (s, t) in states.iter().zip(samples) {
        if let Some(e) = undefined_to_none(pixel_error(&s.x, &t.x_true, &t.mask))? {
            errs.push(e);
        }
    }
    if errs.is_empty() {
        return Err(Error::UndefinedMetric(
            "no annotated landmarks in the dataset".into(),
        ));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

fn pose_truth(samples: &[TrainingSample]) -> Option<Vec<PoseAngles>> {
    samples
        .iter()
        .map(|s| s.truth.as_ref().map(|t| t.h))
        .collect()
}

/// Scores per-sample trajectories (initialization followed by every stage).
pub fn evaluate_trajectories(
    trajectories: &[Vec<InstanceState>],
    samples: &[TrainingSample],
    eye_indices: Option<[usize; 2]>,
) -> Result<EvalReport> {
    if trajectories.len() != samples.len() || samples.is_empty() {
        return Err(Error::invalid("need one nonempty trajectory per sample"));
    }
    let n_steps = trajectories[0].len();
    if n_steps == 0 || trajectories.iter().any(|t| t.len() != n_steps) {
        return Err(Error::invalid(
            "trajectories must have equal nonzero length",
        ));
    }
    let truth_h = pose_truth(samples);
    let at =
        |stage: usize| -> Vec<&InstanceState> { trajectories.iter().map(|t| &t[stage]).collect() };

    let mut per_stage_curves = Vec::with_capacity(n_steps);
    for stage in 0..n_steps {
        let states = at(stage);
        let (scores, labels) = occlusion_scores(&states, samples);
        let yaw_mae = match &truth_h {
            Some(t) => {
                let pred: Vec<PoseAngles> = states.iter().map(|s| s.h).collect();
                Some(pose_metrics(&pred, t)?.mae_deg[1])
            }
            None => None,
        };
        per_stage_curves.push(StageCurve {
            stage,
            mean_landmark_error: mean_pixel_error(&states, samples)?,
            yaw_mae,
            recall_at_p80: undefined_to_none(recall_at_precision(
                &scores,
                &labels,
                TARGET_PRECISION,
            ))?,
        });
    }

    let last = at(n_steps - 1);
    let mut normalized = Vec::new();
    let mut skipped = 0;
    if let Some([l, r]) = eye_indices {
        for (s, t) in last.iter().zip(samples) {
            match undefined_to_none(normalized_error(&s.x, &t.x_true, &t.mask, l, r))? {
                Some(e) => normalized.push(e),
                None => skipped += 1,
            }
        }
    }
    let (scores, labels) = occlusion_scores(&last, samples);
    let pose = match &truth_h {
        Some(t) => Some(pose_metrics(
            &last.iter().map(|s| s.h).collect::<Vec<_>>(),
            t,
        )?),
        None => None,
    };
    Ok(EvalReport {
        n_samples: samples.len(),
        mean_normalized_error: (!normalized.is_empty())
            .then(|| normalized.iter().sum::<f64>() / normalized.len() as f64),
        normalized_error_skipped: skipped,
        mean_pixel_error: per_stage_curves[n_steps - 1].mean_landmark_error,
        occlusion_recall_at_p80: per_stage_curves[n_steps - 1].recall_at_p80,
        occlusion_auc: undefined_to_none(auc(&scores, &labels))?,
        pose_mae_deg: pose.as_ref().map(|p| p.mae_deg),
        pose_yaw_accuracy: pose.as_ref().map(|p| p.yaw_accuracy),
        pose_all_axis_accuracy: pose.as_ref().map(|p| p.all_axis_accuracy),
        per_stage_curves,
    })
}

/// Runs the model on every sample's image and box and scores the result.
pub fn evaluate(model: &CascadeModel, data: &Dataset) -> Result<EvalReport> {
    let trajectories: Vec<Vec<InstanceState>> = data
        .samples
        .iter()
        .map(|s| predict_trajectory(model, &s.image, &s.face_box))
        .collect::<Result<_>>()?;
    evaluate_trajectories(
        &trajectories,
        &data.samples,
        data.meta.eye_indices.or(model.eye_indices),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(points: &[[f64; 2]]) -> Shape2D {
        Shape2D::from_points(points.iter().copied()).unwrap()
    }

    fn brute_recall(scores: &[f64], labels: &[bool], target: f64) -> f64 {
        let pos = labels.iter().filter(|l| **l).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.push(f64::INFINITY);
        let mut best: f64 = 0.0;
        for th in thresholds {
            let tp = (0..scores.len())
                .filter(|&i| scores[i] >= th && labels[i])
                .count();
            let fp = (0..scores.len())
                .filter(|&i| scores[i] >= th && !labels[i])
                .count();
            if tp + fp > 0 && tp as f64 / (tp + fp) as f64 >= target {
                best = best.max(tp as f64 / pos);
            }
        }
        best
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn identical_shapes_have_zero_error() {
        let s = shape(&[[1.0, 2.0], [5.0, 2.0], [3.0, 7.0]]);
        let m = AnnotationMask::all(3);
        assert_eq!(pixel_error(&s, &s, &m).unwrap(), 0.0);
        assert_eq!(normalized_error(&s, &s, &m, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn one_point_off_by_interocular_distance() {
        let truth =
            Shape2D::from_points((0..29).map(|k| [k as f64 * 2.0, (k % 3) as f64])).unwrap();
        let iod = {
            let (a, b) = (truth.point(0), truth.point(1));
            dist(a, b)
        };
        let mut pred = truth.clone();
        let p = pred.point(10);
        pred.set_point(10, [p[0] + iod, p[1]]);
        let e = normalized_error(&pred, &truth, &AnnotationMask::all(29), 0, 1).unwrap();
        assert!((e - 100.0 / 29.0).abs() < 1e-12);
        assert!((e - 3.448).abs() < 1e-3);
    }

    #[test]
    fn unannotated_points_are_ignored() {
        let truth = shape(&[[0.0, 0.0], [10.0, 0.0], [5.0, 5.0]]);
        let mut pred = truth.clone();
        pred.set_point(2, [500.0, -300.0]);
        let mask = AnnotationMask::from_points(&[true, true, false]);
        assert_eq!(normalized_error(&pred, &truth, &mask, 0, 1).unwrap(), 0.0);
        assert_eq!(pixel_error(&pred, &truth, &mask).unwrap(), 0.0);
    }

    #[test]
    fn metric_errors() {
        let same_eyes = shape(&[[1.0, 1.0], [1.0, 1.0], [4.0, 4.0]]);
        let all = AnnotationMask::all(3);
        assert!(matches!(
            normalized_error(&same_eyes, &same_eyes, &all, 0, 1),
            Err(Error::UndefinedMetric(_))
        ));
        let none = AnnotationMask::from_points(&[false; 3]);
        assert!(matches!(
            pixel_error(&same_eyes, &same_eyes, &none),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            recall_at_precision(&[0.1, 0.2], &[false, false], 0.8),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            pose_metrics(&[], &[]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn three_four_five_offset() {
        let truth = shape(&[[0.0, 0.0], [10.0, 3.0], [-2.0, 8.0]]);
        let pred = Shape2D::from_points(truth.points().map(|p| [p[0] + 3.0, p[1] + 4.0])).unwrap();
        assert!((pixel_error(&pred, &truth, &AnnotationMask::all(3)).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        let labels = [true, true, false, false];
        assert_eq!(
            recall_at_precision(&[0.9, 0.8, 0.2, 0.1], &labels, 0.8).unwrap(),
            1.0
        );
        assert_eq!(recall_at_precision(&[0.5; 4], &labels, 0.8).unwrap(), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
    }

    #[test]
    fn pose_examples() {
        let t = vec![PoseAngles::from_degrees(3.0, -20.0, 1.0); 2];
        let m = pose_metrics(&t, &t).unwrap();
        assert_eq!(m.mae_deg, [0.0; 3]);
        assert_eq!(m.yaw_accuracy, 1.0);

        let truth = vec![PoseAngles::zero(); 2];
        let pred = vec![
            PoseAngles::from_degrees(0.0, 7.4, 0.0),
            PoseAngles::from_degrees(0.0, 7.6, 0.0),
        ];
        assert_eq!(pose_metrics(&pred, &truth).unwrap().yaw_accuracy, 0.5);

        let wrapped = pose_metrics(
            &[PoseAngles::from_degrees(0.0, -179.0, 0.0)],
            &[PoseAngles::from_degrees(0.0, 179.0, 0.0)],
        )
        .unwrap();
        assert!((wrapped.mae_deg[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn recall_and_auc_match_exhaustive_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(1..40);
            // Coarse scores so that ties are common.
            let scores: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..8) as f64 / 8.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
            labels[0] = true;
            let target = [0.5, 0.8, 0.9][rng.random_range(0..3)];
            let r = recall_at_precision(&scores, &labels, target).unwrap();
            assert_eq!(r, brute_recall(&scores, &labels, target));
            if labels.iter().any(|l| !l) {
                assert!(
                    (auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-12
                );
            }
        }
    }

    proptest! {
        #[test]
        fn pixel_error_matches_loop(coords in prop::collection::vec(-100.0f64..100.0, 4..40),
                                    off in prop::collection::vec(-5.0f64..5.0, 40),
                                    flags in prop::collection::vec(any::<bool>(), 20)) {
            let n = coords.len() / 2;
            let truth = Shape2D::new(coords[..2 * n].to_vec()).unwrap();
            let pred = truth.add_update(&off[..2 * n]).unwrap();
            let mut f = flags[..n].to_vec();
            f[0] = true;
            let mask = AnnotationMask::from_points(&f);
            let mut sum = 0.0;
            let mut cnt = 0.0;
            for k in 0..n {
                if f[k] {
                    sum += (off[2 * k].powi(2) + off[2 * k + 1].powi(2)).sqrt();
                    cnt += 1.0;
                }
            }
            prop_assert!((pixel_error(&pred, &truth, &mask).unwrap() - sum / cnt).abs() < 1e-12);
        }

        #[test]
        fn recall_is_a_fraction(scores in prop::collection::vec(0.0f64..1.0, 1..30)) {
            let labels: Vec<bool> = scores.iter().map(|s| *s > 0.3).collect();
            prop_assume!(labels.iter().any(|l| *l));
            let r = recall_at_precision(&scores, &labels, 0.8).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r, 1.0);
        }
    }
}
