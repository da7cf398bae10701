//! Strain and observer-agreement statistics.

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::trajectory::TrajectoryState;

/// Wall polyline length per frame and the derived peak strain.
#[derive(Debug, Clone)]
pub struct GlsSeries {
    /// L(t), in pixels, or physical units when a pixel spacing was given.
    pub lengths: Vec<f64>,
    pub ed_index: usize,
    /// 100 * (min_t L(t) - L(ed)) / L(ed); negative for shortening.
    pub peak_gls: f64,
}

/// Global longitudinal strain of a tracked wall polyline.
///
/// `wall_order` gives the point indices along the wall; consecutive pairs
/// form the polyline segments. `pixel_spacing` is (sx, sy) physical units per
/// pixel, identity when absent. `ed_index` is the end-diastole frame.
pub fn gls<S: Scalar>(
    traj: &TrajectoryState<S>,
    wall_order: &[usize],
    pixel_spacing: Option<(f64, f64)>,
    ed_index: usize,
) -> Result<GlsSeries> {
    let (frames, points) = (traj.frames(), traj.points());
    if wall_order.len() < 2 {
        return Err(Error::InvalidInput(
            "gls needs at least 2 points along the wall".into(),
        ));
    }
    if wall_order.iter().any(|&i| i >= points) {
        return Err(Error::InvalidInput("wall order indexes missing points".into()));
    }
    if ed_index >= frames {
        return Err(Error::InvalidInput(format!(
            "end-diastole index {ed_index} outside 0..{frames}"
        )));
    }
    let (sx, sy) = pixel_spacing.unwrap_or((1.0, 1.0));
    let mut lengths = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut len = 0.0;
        for pair in wall_order.windows(2) {
            let dx = (traj.x(t, pair[1]) - traj.x(t, pair[0])).to_f64() * sx;
            let dy = (traj.y(t, pair[1]) - traj.y(t, pair[0])).to_f64() * sy;
            len += (dx * dx + dy * dy).sqrt();
        }
        if len <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "degenerate wall polyline at frame {t}"
            )));
        }
        lengths.push(len);
    }
    let l_ed = lengths[ed_index];
    let l_min = lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    let peak_gls = 100.0 * (l_min - l_ed) / l_ed;
    Ok(GlsSeries {
        lengths,
        ed_index,
        peak_gls,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Method-vs-reference agreement statistics over paired measurements.
#[derive(Debug, Clone)]
pub struct Agreement {
    pub method_mean: f64,
    pub method_sd: f64,
    pub reference_mean: f64,
    pub reference_sd: f64,
    /// Mean of (method - reference).
    pub mu: f64,
    /// Sample standard deviation (n-1) of the differences.
    pub sigma: f64,
    /// Mean absolute difference.
    pub mad: f64,
}

pub fn agreement(pairs: &[(f64, f64)]) -> Result<Agreement> {
    if pairs.len() < 2 {
        return Err(Error::InvalidInput(
            "agreement needs at least 2 measurement pairs".into(),
        ));
    }
    let method: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let reference: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let d: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    Ok(Agreement {
        method_mean: mean(&method),
        method_sd: sample_sd(&method),
        reference_mean: mean(&reference),
        reference_sd: sample_sd(&reference),
        mu: mean(&d),
        sigma: sample_sd(&d),
        mad: mean(&d.iter().map(|x| x.abs()).collect::<Vec<_>>()),
    })
}

/// Repeatability statistics over repeated-acquisition pairs.
#[derive(Debug, Clone)]
pub struct TestRetest {
    pub mad: f64,
    /// Within-subject coefficient of variation in percent:
    /// 100 * sqrt(mean(d^2)/2) / |grand mean|.
    pub cv_percent: f64,
    pub grand_mean: f64,
    pub grand_sd: f64,
}

pub fn test_retest(pairs: &[(f64, f64)]) -> Result<TestRetest> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput(
            "test-retest needs at least one acquisition pair".into(),
        ));
    }
    let d: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    let all: Vec<f64> = pairs.iter().flat_map(|p| [p.0, p.1]).collect();
    let grand_mean = mean(&all);
    if grand_mean.abs() < 1e-12 {
        return Err(Error::InvalidInput(
            "test-retest coefficient of variation undefined: grand mean is zero".into(),
        ));
    }
    let msd = d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
    Ok(TestRetest {
        mad: mean(&d.iter().map(|x| x.abs()).collect::<Vec<_>>()),
        cv_percent: 100.0 * (msd / 2.0).sqrt() / grand_mean.abs(),
        grand_mean,
        grand_sd: sample_sd(&all),
    })
}
