//! Tracking accuracy metrics on the 256x256 evaluation grid.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::trajectory::TrajectoryState;

pub const EVAL_GRID: f64 = 256.0;
pub const DELTA_THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];

/// Prediction/reference pair rescaled to the evaluation grid.
#[derive(Debug, Clone)]
pub struct EvalFrame {
    pred: Vec<f64>,
    reference: Vec<f64>,
    frames: usize,
    points: usize,
    /// Per-point validity; invalid points are excluded from every statistic.
    pub valid: Vec<bool>,
    /// Recorded (x, y) rescale factors.
    pub scale: (f64, f64),
}

impl EvalFrame {
    /// Rescale both trajectories from an `input_w` x `input_h` frame to the
    /// evaluation grid: x scales by 256/W, y by 256/H.
    pub fn new<S: Scalar>(
        pred: &TrajectoryState<S>,
        reference: &TrajectoryState<S>,
        input_h: usize,
        input_w: usize,
    ) -> Result<Self> {
        if pred.positions.shape() != reference.positions.shape() {
            return Err(Error::ShapeMismatch {
                op: "eval",
                lhs: pred.positions.shape().to_vec(),
                rhs: reference.positions.shape().to_vec(),
            });
        }
        let (frames, points) = (pred.frames(), pred.points());
        if frames == 0 || points == 0 {
            return Err(Error::InvalidInput("empty trajectories".into()));
        }
        let sx = EVAL_GRID / input_w as f64;
        let sy = EVAL_GRID / input_h as f64;
        let rescale = |t: &TrajectoryState<S>| {
            t.positions
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v.to_f64() * if i % 2 == 0 { sx } else { sy })
                .collect()
        };
        Ok(Self {
            pred: rescale(pred),
            reference: rescale(reference),
            frames,
            points,
            valid: vec![true; points],
            scale: (sx, sy),
        })
    }

    /// L1 errors over all valid (frame, point) pairs, in evaluation pixels.
    pub fn l1_errors(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.frames * self.points);
        for t in 0..self.frames {
            for i in 0..self.points {
                if !self.valid[i] {
                    continue;
                }
                let off = (t * self.points + i) * 2;
                let dx = (self.pred[off] - self.reference[off]).abs();
                let dy = (self.pred[off + 1] - self.reference[off + 1]).abs();
                out.push(dx + dy);
            }
        }
        out
    }
}

/// Percentage of point-frame pairs within a strict L1 tolerance of `x` pixels.
pub fn delta_accuracy(ev: &EvalFrame, x: f64) -> f64 {
    let errors = ev.l1_errors();
    if errors.is_empty() {
        return 0.0;
    }
    let hits = errors.iter().filter(|&&e| e < x).count();
    100.0 * hits as f64 / errors.len() as f64
}

/// Mean of the delta accuracies at 1, 2, and 4 pixels.
pub fn delta_avg(ev: &EvalFrame) -> f64 {
    DELTA_THRESHOLDS
        .iter()
        .map(|&x| delta_accuracy(ev, x))
        .sum::<f64>()
        / DELTA_THRESHOLDS.len() as f64
}

/// Median trajectory error: median L1 over all (frame, point) pairs, with the
/// even-count median taken as the mean of the two central order statistics.
pub fn mte(ev: &EvalFrame) -> Result<f64> {
    let mut errors = ev.l1_errors();
    if errors.is_empty() {
        return Err(Error::InvalidInput("no valid point-frame pairs".into()));
    }
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = errors.len();
    Ok(if n % 2 == 1 {
        errors[n / 2]
    } else {
        0.5 * (errors[n / 2 - 1] + errors[n / 2])
    })
}

/// Wall-clock seconds per video, averaged over every run after the first
/// (the first run is warm-up and is excluded). A single video is run twice.
pub fn average_inference_time<F>(videos: usize, mut run: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<()>,
{
    if videos == 0 {
        return Err(Error::InvalidInput("no videos to time".into()));
    }
    run(0)?; // warm-up
    let timed: Vec<usize> = if videos == 1 {
        vec![0]
    } else {
        (1..videos).collect()
    };
    let start = Instant::now();
    for &i in &timed {
        run(i)?;
    }
    Ok(start.elapsed().as_secs_f64() / timed.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn traj(positions: Vec<f64>, frames: usize, points: usize) -> TrajectoryState<f64> {
        let queries = Tensor::new(vec![points, 2], positions[..points * 2].to_vec()).unwrap();
        TrajectoryState {
            positions: Tensor::new(vec![frames, points, 2], positions).unwrap(),
            query_frame: 0,
            queries,
        }
    }

    fn offset_pair(dx: f64, dy: f64) -> EvalFrame {
        let reference = traj((0..24).map(|i| 10.0 + i as f64).collect(), 4, 3);
        let pred = traj(
            (0..24)
                .map(|i| 10.0 + i as f64 + if i % 2 == 0 { dx } else { dy })
                .collect(),
            4,
            3,
        );
        // input already on the 256 grid so the rescale is identity
        EvalFrame::new(&pred, &reference, 256, 256).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_100_everywhere() {
        let ev = offset_pair(0.0, 0.0);
        for x in DELTA_THRESHOLDS {
            assert_eq!(delta_accuracy(&ev, x), 100.0);
        }
        assert_eq!(delta_avg(&ev), 100.0);
        assert_eq!(mte(&ev).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_case() {
        // offset (1.5, 0): delta1 = 0, delta2 = 100, delta4 = 100, avg = 66.67
        let ev = offset_pair(1.5, 0.0);
        assert_eq!(delta_accuracy(&ev, 1.0), 0.0);
        assert_eq!(delta_accuracy(&ev, 2.0), 100.0);
        assert_eq!(delta_accuracy(&ev, 4.0), 100.0);
        assert!((delta_avg(&ev) - 200.0 / 3.0).abs() < 1e-9);
        assert!((mte(&ev).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn delta_uses_strict_inequality() {
        let ev = offset_pair(2.0, 0.0);
        assert_eq!(delta_accuracy(&ev, 2.0), 0.0);
    }

    #[test]
    fn median_rules() {
        // odd count: {1, 2, 9} -> 2; even count: {1, 3} -> 2
        let reference = traj(vec![0.0; 6], 3, 1);
        let pred = traj(vec![1.0, 0.0, 2.0, 0.0, 9.0, 0.0], 3, 1);
        let ev = EvalFrame::new(&pred, &reference, 256, 256).unwrap();
        assert_eq!(mte(&ev).unwrap(), 2.0);

        let reference = traj(vec![0.0; 4], 2, 1);
        let pred = traj(vec![1.0, 0.0, 3.0, 0.0], 2, 1);
        let ev = EvalFrame::new(&pred, &reference, 256, 256).unwrap();
        assert_eq!(mte(&ev).unwrap(), 2.0);
    }

    #[test]
    fn mte_matches_sort_oracle_on_random_input() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let reference = traj((0..40).map(|_| rng.random_range(0.0..200.0)).collect(), 5, 4);
        let pred = traj((0..40).map(|_| rng.random_range(0.0..200.0)).collect(), 5, 4);
        let ev = EvalFrame::new(&pred, &reference, 256, 256).unwrap();
        let mut sorted = ev.l1_errors();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let oracle = 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        assert_eq!(mte(&ev).unwrap(), oracle);
    }

    #[test]
    fn metrics_invariant_under_shared_translation() {
        let reference = traj((0..24).map(|i| 30.0 + (i * 7 % 13) as f64).collect(), 4, 3);
        let pred = traj((0..24).map(|i| 30.0 + (i * 5 % 11) as f64).collect(), 4, 3);
        let shift = |t: &TrajectoryState<f64>| {
            traj(t.positions.data().iter().map(|v| v + 17.0).collect(), 4, 3)
        };
        let a = EvalFrame::new(&pred, &reference, 256, 256).unwrap();
        let b = EvalFrame::new(&shift(&pred), &shift(&reference), 256, 256).unwrap();
        assert_eq!(delta_avg(&a), delta_avg(&b));
        assert_eq!(mte(&a).unwrap(), mte(&b).unwrap());
    }

    #[test]
    fn delta_is_monotone_in_threshold() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let reference = traj((0..16).map(|_| rng.random_range(0.0..250.0)).collect(), 4, 2);
            let pred = traj((0..16).map(|_| rng.random_range(0.0..250.0)).collect(), 4, 2);
            let ev = EvalFrame::new(&pred, &reference, 256, 256).unwrap();
            let d1 = delta_accuracy(&ev, 1.0);
            let d2 = delta_accuracy(&ev, 2.0);
            let d4 = delta_accuracy(&ev, 4.0);
            assert!(d4 >= d2 && d2 >= d1);
        }
    }

    #[test]
    fn rescaling_doubles_errors_on_half_size_input() {
        let reference = traj(vec![10.0, 10.0], 1, 1);
        let pred = traj(vec![11.0, 10.0], 1, 1); // 1 px error at 128x128
        let ev = EvalFrame::new(&pred, &reference, 128, 128).unwrap();
        assert_eq!(ev.l1_errors(), vec![2.0]);
        assert_eq!(ev.scale, (2.0, 2.0));
    }

    #[test]
    fn timing_is_positive_and_excludes_warmup() {
        let mut calls = Vec::new();
        let ait = average_inference_time(3, |i| {
            calls.push(i);
            std::thread::sleep(std::time::Duration::from_millis(2));
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, vec![0, 1, 2]);
        assert!(ait > 0.0);
    }
}
