//! Synthetic echo-like cine sequences with analytic ground-truth motion.
//!
//! A speckle texture is generated once in material coordinates, then advected
//! by a time-varying similarity about the annulus center composed with a small
//! longitudinal translation, so the texture rides with the tissue. Trajectories
//! are closed-form, which gives the metric kit exact targets (including GLS).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::TrajectoryState;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Frames per cycle (end-diastole at the first and last frame).
    pub frames: usize,
    pub points: usize,
    /// Peak fractional shortening, in [0, 0.3].
    pub amplitude: f64,
    /// Per-sample amplitude variation in [0, 1]: each sample draws its
    /// effective amplitude from [amplitude*(1-jitter), amplitude]. Zero keeps
    /// the deformation identical across seeds (analytic examples stay exact).
    pub amplitude_jitter: f64,
    /// Rotate the wall seeding by a per-sample random angle so trajectories
    /// differ across samples.
    pub random_phase: bool,
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Speckle grain scale in pixels (Gaussian low-pass of white noise).
    pub grain_sigma: f64,
    /// Additive observation noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 16,
            points: 16,
            amplitude: 0.15,
            amplitude_jitter: 0.0,
            random_phase: false,
            inner_radius: 4.0,
            outer_radius: 25.0,
            grain_sigma: 1.5,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// One generated sample: video [T,H,W,1] with unit-interval intensities,
/// exact trajectories, and the wall polyline ordering of the points.
#[derive(Debug, Clone)]
pub struct PhantomSample<S: Scalar> {
    pub video: Tensor<S>,
    pub gt: TrajectoryState<S>,
    /// Point index order along the mid-wall polyline.
    pub wall_order: Vec<usize>,
    pub spec: PhantomSpec,
}

impl PhantomSpec {
    /// Contraction time profile: 0 at both cycle ends, 1 mid-cycle.
    fn profile(&self, t: usize) -> f64 {
        let phase = std::f64::consts::PI * t as f64 / (self.frames - 1) as f64;
        phase.sin().powi(2)
    }

    fn scale_at(&self, t: usize) -> f64 {
        1.0 - self.amplitude * self.profile(t)
    }

    fn mid_radius(&self) -> f64 {
        0.5 * (self.inner_radius + self.outer_radius)
    }

    /// Upper bound every generated trajectory must respect: no point moves
    /// more than `amplitude * outer_radius * pi / frames` pixels (L1) between
    /// consecutive frames.
    pub fn displacement_bound(&self) -> f64 {
        self.amplitude * self.outer_radius * std::f64::consts::PI / self.frames as f64
    }

    /// Analytic worst case of the per-frame L1 step over all wall angles.
    fn worst_step_l1(&self) -> f64 {
        let max_dg = (0..self.frames - 1)
            .map(|t| (self.profile(t + 1) - self.profile(t)).abs())
            .fold(0.0, f64::max);
        self.amplitude * max_dg * (2f64.sqrt() * self.mid_radius() + self.inner_radius / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(format!("phantom: {msg}")));
        if self.frames < 2 {
            return fail(format!("frames must be >= 2, got {}", self.frames));
        }
        if self.points < 1 {
            return fail("points must be >= 1".into());
        }
        if self.height < 8 || self.width < 8 {
            return fail(format!("frame {}x{} too small", self.height, self.width));
        }
        if !(0.0..=0.3).contains(&self.amplitude) {
            return fail(format!("amplitude {} outside [0, 0.3]", self.amplitude));
        }
        if !(0.0..=1.0).contains(&self.amplitude_jitter) {
            return fail(format!(
                "amplitude_jitter {} outside [0, 1]",
                self.amplitude_jitter
            ));
        }
        if !(self.inner_radius > 0.0 && self.inner_radius < self.outer_radius) {
            return fail(format!(
                "radii ({}, {}) must satisfy 0 < inner < outer",
                self.inner_radius, self.outer_radius
            ));
        }
        let half = 0.5 * self.height.min(self.width) as f64;
        if self.outer_radius + self.amplitude * self.inner_radius / 2.0 > half - 1.0 {
            return fail(format!(
                "annulus (outer {}) does not fit a {}x{} frame",
                self.outer_radius, self.height, self.width
            ));
        }
        if self.worst_step_l1() > self.displacement_bound() + 1e-12 {
            return fail(format!(
                "deformation violates the local-motion bound: worst inter-frame step {:.4} px \
                 exceeds {:.4} px; use a larger outer radius or more frames",
                self.worst_step_l1(),
                self.displacement_bound()
            ));
        }
        if self.grain_sigma <= 0.0 || self.noise_sigma < 0.0 {
            return fail("grain_sigma must be > 0 and noise_sigma >= 0".into());
        }
        Ok(())
    }

    /// Peak GLS of the generated wall polyline, in percent (closed form:
    /// lengths scale with s(t), translation is rigid).
    pub fn analytic_peak_gls(&self) -> f64 {
        let min_scale = (0..self.frames)
            .map(|t| self.scale_at(t))
            .fold(f64::INFINITY, f64::min);
        (min_scale - 1.0) * 100.0
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with clamped borders.
fn blur(grid: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let mut rows = vec![0.0; grid.len()];
    exec::for_each_chunk_mut(&mut rows, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xi = (x as i64 + i as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * grid[y * w + xi];
            }
            *o = acc;
        }
    });
    let mut out = vec![0.0; grid.len()];
    exec::for_each_chunk_mut(&mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yi = (y as i64 + i as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * rows[yi * w + x];
            }
            *o = acc;
        }
    });
    out
}

fn bilinear_at(grid: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor() as i64;
    let x0 = x.floor() as i64;
    let ty = y - y0 as f64;
    let tx = x - x0 as f64;
    let mut acc = 0.0;
    for dy in 0..2i64 {
        let yy = y0 + dy;
        if yy < 0 || yy >= h as i64 {
            continue;
        }
        let wy = if dy == 0 { 1.0 - ty } else { ty };
        for dx in 0..2i64 {
            let xx = x0 + dx;
            if xx < 0 || xx >= w as i64 {
                continue;
            }
            let wx = if dx == 0 { 1.0 - tx } else { tx };
            acc += wy * wx * grid[(yy as usize) * w + xx as usize];
        }
    }
    acc
}

/// Deterministic standard normal draw (Box-Muller).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate one phantom sample. Identical `(spec, seed)` pairs produce
/// bit-identical samples.
pub fn generate<S: Scalar>(spec: &PhantomSpec, seed: u64) -> Result<PhantomSample<S>> {
    spec.validate()?;
    let (h, w, t_len, n) = (spec.height, spec.width, spec.frames, spec.points);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // per-sample deformation draws happen before the texture so the stream
    // layout stays stable
    let amp = if spec.amplitude_jitter > 0.0 {
        let u: f64 = rng.random_range(0.0..1.0);
        spec.amplitude * (1.0 - spec.amplitude_jitter * u)
    } else {
        spec.amplitude
    };
    let theta0 = if spec.random_phase {
        rng.random_range(0.0..2.0 * std::f64::consts::PI)
    } else {
        0.0
    };
    let scale_at = |t: usize| 1.0 - amp * spec.profile(t);
    let translation_at = |t: usize| amp * spec.inner_radius / 2.0 * spec.profile(t);

    // material speckle texture, defined at end-diastole coordinates
    let white: Vec<f64> = (0..h * w).map(|_| normal(&mut rng)).collect();
    let mut texture = blur(&white, h, w, spec.grain_sigma);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &texture {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    for v in &mut texture {
        *v = (*v - lo) / span;
    }

    // ground-truth trajectories of mid-wall points, ordered along the wall
    let r_mid = spec.mid_radius();
    let mut gt = vec![0.0f64; t_len * n * 2];
    for i in 0..n {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let px = cx + r_mid * (theta0 + theta).cos();
        let py = cy + r_mid * (theta0 + theta).sin();
        for t in 0..t_len {
            let s = scale_at(t);
            let tau = translation_at(t);
            gt[(t * n + i) * 2] = cx + s * (px - cx);
            gt[(t * n + i) * 2 + 1] = cy + s * (py - cy) + tau;
        }
    }

    // advected texture masked to the annulus
    let frames: Vec<Vec<f64>> = exec::map_collect(t_len, |t| {
        let s = scale_at(t);
        let tau = translation_at(t);
        let mut frame = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                // material preimage of this pixel
                let mx = cx + (x as f64 - cx) / s;
                let my = cy + (y as f64 - cy - tau) / s;
                let r = ((mx - cx).powi(2) + (my - cy).powi(2)).sqrt();
                if r >= spec.inner_radius && r <= spec.outer_radius {
                    frame[y * w + x] = bilinear_at(&texture, h, w, my, mx);
                }
            }
        }
        frame
    });

    let mut video = vec![0.0f64; t_len * h * w];
    for (t, frame) in frames.iter().enumerate() {
        video[t * h * w..(t + 1) * h * w].copy_from_slice(frame);
    }
    if spec.noise_sigma > 0.0 {
        for v in &mut video {
            *v += spec.noise_sigma * normal(&mut rng);
        }
    }
    for v in &mut video {
        *v = v.clamp(0.0, 1.0);
    }

    let video = Tensor::from_fn(&[t_len, h, w, 1], |i| S::from_f64(video[i]));
    let positions = Tensor::from_fn(&[t_len, n, 2], |i| S::from_f64(gt[i]));
    let queries = Tensor::from_fn(&[n, 2], |i| S::from_f64(gt[i]));
    Ok(PhantomSample {
        video,
        gt: TrajectoryState {
            positions,
            query_frame: 0,
            queries,
        },
        wall_order: (0..n).collect(),
        spec: spec.clone(),
    })
}

/// Largest inter-frame L1 step over all points of a trajectory.
pub fn max_step_l1<S: Scalar>(traj: &TrajectoryState<S>) -> f64 {
    let (t_len, n) = (traj.frames(), traj.points());
    let mut worst = 0.0f64;
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..n {
            let dx = (traj.x(t + 1, i) - traj.x(t, i)).to_f64().abs();
            let dy = (traj.y(t + 1, i) - traj.y(t, i)).to_f64().abs();
            worst = worst.max(dx + dy);
        }
    }
    worst
}
