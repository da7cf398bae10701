//! Temporally-aware multi-scale feature extraction.
//!
//! Four residual blocks downsample the video; temporal context enters through
//! one of five strategies selected by [`BackboneVariant`]. The injected
//! variant compounds shift modules between blocks so the temporal receptive
//! field grows with depth (±1/±2/±3/±3 frames across the four levels); the
//! blockwise and fusion variants see ±1 frame at every level; `plain` stays
//! temporally independent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamSpecs};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    Plain,
    FuseAdd,
    FuseCat,
    Btsm,
    Itsm,
}

impl BackboneVariant {
    pub const ALL: [BackboneVariant; 5] = [
        BackboneVariant::Plain,
        BackboneVariant::FuseAdd,
        BackboneVariant::FuseCat,
        BackboneVariant::Btsm,
        BackboneVariant::Itsm,
    ];

    pub fn token(self) -> &'static str {
        match self {
            BackboneVariant::Plain => "plain",
            BackboneVariant::FuseAdd => "fuse-add",
            BackboneVariant::FuseCat => "fuse-cat",
            BackboneVariant::Btsm => "btsm",
            BackboneVariant::Itsm => "itsm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.token() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown backbone variant `{s}`")))
    }

    /// Expected temporal receptive field (frames each direction) per level.
    pub fn receptive_field(self) -> [usize; 4] {
        match self {
            BackboneVariant::Plain => [0, 0, 0, 0],
            BackboneVariant::FuseAdd | BackboneVariant::FuseCat | BackboneVariant::Btsm => {
                [1, 1, 1, 1]
            }
            BackboneVariant::Itsm => [1, 2, 3, 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Channel width of each level.
    pub widths: [usize; 4],
    /// Cumulative spatial stride of each level relative to the input.
    pub strides: [usize; 4],
    /// Fraction of channels shifted per direction, in (0, 0.5].
    pub shift_fraction: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::Itsm,
            widths: [16, 32, 48, 64],
            strides: [2, 4, 8, 16],
            shift_fraction: 0.125,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(format!("backbone: {msg}")));
        if self.widths.contains(&0) {
            return fail("level widths must be >= 1".into());
        }
        let mut prev = 1;
        for (l, &s) in self.strides.iter().enumerate() {
            if s < prev {
                return fail(format!("strides must be non-decreasing, level {l} has {s}"));
            }
            if s % prev != 0 {
                return fail(format!(
                    "stride {s} at level {l} must be a multiple of the previous stride {prev}"
                ));
            }
            prev = s;
        }
        if !(self.shift_fraction > 0.0 && self.shift_fraction <= 0.5) {
            return fail(format!(
                "shift_fraction {} outside (0, 0.5]",
                self.shift_fraction
            ));
        }
        Ok(())
    }

    fn block_stride(&self, level: usize) -> usize {
        let prev = if level == 0 { 1 } else { self.strides[level - 1] };
        self.strides[level] / prev
    }

    fn shifted_channels(&self, level: usize) -> usize {
        ((self.widths[level] as f64 * self.shift_fraction) as usize).max(1)
    }

    /// Declare every backbone parameter for `input_channels` video channels.
    pub fn declare_params(&self, input_channels: usize, specs: &mut ParamSpecs) {
        let mut cin = input_channels;
        for (l, &cout) in self.widths.iter().enumerate() {
            let p = format!("backbone.block{l}");
            specs.declare(
                format!("{p}.conv1.w"),
                &[3, 3, cin, cout],
                Init::HeUniform { fan_in: 9 * cin },
            );
            specs.declare(format!("{p}.conv1.b"), &[cout], Init::Zeros);
            specs.declare(
                format!("{p}.conv2.w"),
                &[3, 3, cout, cout],
                Init::HeUniform { fan_in: 9 * cout },
            );
            specs.declare(format!("{p}.conv2.b"), &[cout], Init::Zeros);
            if cin != cout || self.block_stride(l) != 1 {
                specs.declare(
                    format!("{p}.skip.w"),
                    &[1, 1, cin, cout],
                    Init::HeUniform { fan_in: cin },
                );
                specs.declare(format!("{p}.skip.b"), &[cout], Init::Zeros);
            }
            match self.variant {
                BackboneVariant::Itsm if l < 3 => {
                    declare_mix(specs, &format!("backbone.tsm{l}"), cout, cout);
                }
                BackboneVariant::Btsm => {
                    declare_mix(specs, &format!("backbone.tsm{l}"), cout, cout);
                }
                BackboneVariant::FuseCat => {
                    declare_mix(specs, &format!("backbone.fuse{l}"), 3 * cout, cout);
                }
                _ => {}
            }
            cin = cout;
        }
    }
}

fn declare_mix(specs: &mut ParamSpecs, prefix: &str, cin: usize, cout: usize) {
    specs.declare(
        format!("{prefix}.mix.w"),
        &[1, 1, cin, cout],
        Init::HeUniform { fan_in: cin },
    );
    specs.declare(format!("{prefix}.mix.b"), &[cout], Init::Zeros);
}

/// Per-level feature maps of one video: level `l` is [T, H/k, W/k, d] on the
/// tape, with stride `k = strides[l]` and width `d = widths[l]`.
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: [usize; 4],
    pub widths: [usize; 4],
}

/// Indices of the three pyramid levels used for correlation.
pub const CORR_LEVELS: [usize; 3] = [0, 1, 3];

fn residual_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    stride: usize,
    projected: bool,
) -> Result<Var> {
    let c1 = tape.conv2d(x, params.var(&format!("{prefix}.conv1.w")), stride)?;
    let c1 = tape.add_lastdim(c1, params.var(&format!("{prefix}.conv1.b")))?;
    let r1 = tape.relu(c1);
    let c2 = tape.conv2d(r1, params.var(&format!("{prefix}.conv2.w")), 1)?;
    let c2 = tape.add_lastdim(c2, params.var(&format!("{prefix}.conv2.b")))?;
    let skip = if projected {
        let s = tape.conv2d(x, params.var(&format!("{prefix}.skip.w")), stride)?;
        tape.add_lastdim(s, params.var(&format!("{prefix}.skip.b")))?
    } else {
        x
    };
    let sum = tape.add(c2, skip)?;
    Ok(tape.relu(sum))
}

/// Channel shift in time followed by a learnable 1x1 mixing convolution.
pub fn temporal_shift<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    shifted: usize,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let moved = tape.time_shift(x, shifted, shifted)?;
    let mixed = tape.conv2d(moved, params.var(&format!("{prefix}.mix.w")), 1)?;
    tape.add_lastdim(mixed, params.var(&format!("{prefix}.mix.b")))
}

/// Whole tensor moved one frame toward earlier (+1) or later (-1) time.
fn neighbor_frame<S: Scalar>(tape: &mut Tape<S>, x: Var, toward_next: bool) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap();
    if toward_next {
        tape.time_shift(x, c, 0)
    } else {
        tape.time_shift(x, 0, c)
    }
}

/// Run the backbone over a video [T,H,W,C] (C = 1 or 3).
pub fn extract_pyramid<S: Scalar>(
    tape: &mut Tape<S>,
    video: Var,
    cfg: &BackboneConfig,
    params: &BoundParams,
) -> Result<FeaturePyramid> {
    cfg.validate()?;
    let shape = tape.shape(video).to_vec();
    if shape.len() != 4 || (shape[3] != 1 && shape[3] != 3) {
        return Err(Error::BadOperand {
            op: "extract_pyramid",
            shape,
            reason: "video must be [T,H,W,C] with C = 1 or 3".into(),
        });
    }
    if shape[0] == 0 {
        return Err(Error::InvalidInput("video has zero frames".into()));
    }

    let mut levels = Vec::with_capacity(4);
    let mut flow = video;
    let mut cin = shape[3];
    for l in 0..4 {
        let stride = cfg.block_stride(l);
        let projected = cin != cfg.widths[l] || stride != 1;
        let block_out = residual_block(
            tape,
            flow,
            params,
            &format!("backbone.block{l}"),
            stride,
            projected,
        )?;
        let shifted = cfg.shifted_channels(l);
        let (next_flow, level) = match cfg.variant {
            BackboneVariant::Plain => (block_out, block_out),
            BackboneVariant::Itsm => {
                if l < 3 {
                    let mixed =
                        temporal_shift(tape, block_out, shifted, params, &format!("backbone.tsm{l}"))?;
                    (mixed, mixed)
                } else {
                    (block_out, block_out)
                }
            }
            BackboneVariant::Btsm => {
                // side branch only; the main flow stays temporally independent
                let side =
                    temporal_shift(tape, block_out, shifted, params, &format!("backbone.tsm{l}"))?;
                (block_out, side)
            }
            BackboneVariant::FuseAdd => {
                let next = neighbor_frame(tape, block_out, true)?;
                let prev = neighbor_frame(tape, block_out, false)?;
                let sum = tape.add(block_out, next)?;
                let fused = tape.add(sum, prev)?;
                (block_out, fused)
            }
            BackboneVariant::FuseCat => {
                let next = neighbor_frame(tape, block_out, true)?;
                let prev = neighbor_frame(tape, block_out, false)?;
                let cat = tape.concat_lastdim(&[prev, block_out, next])?;
                let proj = tape.conv2d(cat, params.var(&format!("backbone.fuse{l}.mix.w")), 1)?;
                let fused = tape.add_lastdim(proj, params.var(&format!("backbone.fuse{l}.mix.b")))?;
                (block_out, fused)
            }
        };
        levels.push(level);
        flow = next_flow;
        cin = cfg.widths[l];
    }

    Ok(FeaturePyramid {
        levels,
        strides: cfg.strides,
        widths: cfg.widths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn build_params(cfg: &BackboneConfig, seed: u64) -> crate::params::ModelParams<f32> {
        let mut specs = ParamSpecs::default();
        cfg.declare_params(1, &mut specs);
        specs.build(seed)
    }

    fn run(
        cfg: &BackboneConfig,
        video: &Tensor<f32>,
        seed: u64,
    ) -> (Tape<f32>, FeaturePyramid) {
        let params = build_params(cfg, seed);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let v = tape.constant(video.clone());
        let pyr = extract_pyramid(&mut tape, v, cfg, &bound).unwrap();
        (tape, pyr)
    }

    fn test_video(t: usize, hw: usize, seed: u64) -> Tensor<f32> {
        Tensor::from_fn(&[t, hw, hw, 1], |i| {
            (((i as u64).wrapping_mul(2654435761).wrapping_add(seed)) % 1000) as f32 / 1000.0
        })
    }

    #[test]
    fn level_extents_follow_strides() {
        let cfg = BackboneConfig::default();
        let video = test_video(3, 64, 0);
        let (tape, pyr) = run(&cfg, &video, 1);
        let expect = [32, 16, 8, 4];
        for (l, &lvl) in pyr.levels.iter().enumerate() {
            assert_eq!(
                tape.shape(lvl),
                &[3, expect[l], expect[l], cfg.widths[l]],
                "level {l}"
            );
        }
    }

    /// Frames whose features change when frame `t` of the input is perturbed.
    fn changed_frames(cfg: &BackboneConfig, level: usize, t_perturb: usize, seed: u64) -> Vec<usize> {
        let t_len = 8;
        let video = test_video(t_len, 32, seed);
        let mut bumped = video.data().to_vec();
        let frame_len = 32 * 32;
        for (i, v) in bumped[t_perturb * frame_len..(t_perturb + 1) * frame_len]
            .iter_mut()
            .enumerate()
        {
            *v += 0.37 + (i % 5) as f32 * 0.01;
        }
        let bumped = Tensor::new(video.shape().to_vec(), bumped).unwrap();
        let (tape_a, pyr_a) = run(cfg, &video, seed);
        let (tape_b, pyr_b) = run(cfg, &bumped, seed);
        let a = tape_a.value(pyr_a.levels[level]);
        let b = tape_b.value(pyr_b.levels[level]);
        let per_frame = a.len() / t_len;
        (0..t_len)
            .filter(|&t| {
                a.data()[t * per_frame..(t + 1) * per_frame]
                    != b.data()[t * per_frame..(t + 1) * per_frame]
            })
            .collect()
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn temporal_receptive_fields_match_variants() {
        for variant in BackboneVariant::ALL {
            let cfg = BackboneConfig {
                variant,
                strides: [1, 1, 2, 2],
                ..Default::default()
            };
            let rf = variant.receptive_field();
            for level in 0..4 {
                let t_perturb = 4;
                let changed = changed_frames(&cfg, level, t_perturb, 9);
                let lo = t_perturb - rf[level];
                let hi = t_perturb + rf[level];
                assert!(
                    changed.iter().all(|&t| t >= lo && t <= hi),
                    "{}: level {level} leaked outside +-{}: {changed:?}",
                    variant.token(),
                    rf[level]
                );
                assert!(
                    changed.contains(&t_perturb),
                    "{}: level {level} did not react at the perturbed frame",
                    variant.token()
                );
                if rf[level] > 0 {
                    assert!(
                        changed.contains(&lo) && changed.contains(&hi),
                        "{}: level {level} receptive field not tight: {changed:?}",
                        variant.token()
                    );
                }
            }
        }
    }

    #[test]
    fn plain_variant_is_frame_isolated() {
        // per-frame features of a video equal features of each frame alone
        let cfg = BackboneConfig {
            variant: BackboneVariant::Plain,
            ..Default::default()
        };
        let video = test_video(3, 32, 4);
        let (tape_all, pyr_all) = run(&cfg, &video, 5);
        let frame_len = 32 * 32;
        for t in 0..3 {
            let single = Tensor::new(
                vec![1, 32, 32, 1],
                video.data()[t * frame_len..(t + 1) * frame_len].to_vec(),
            )
            .unwrap();
            let (tape_one, pyr_one) = run(&cfg, &single, 5);
            for level in 0..4 {
                let full = tape_all.value(pyr_all.levels[level]);
                let one = tape_one.value(pyr_one.levels[level]);
                let per_frame = full.len() / 3;
                assert_eq!(
                    &full.data()[t * per_frame..(t + 1) * per_frame],
                    one.data(),
                    "frame {t} level {level}"
                );
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn plain_variant_is_translation_covariant() {
        let cfg = BackboneConfig {
            variant: BackboneVariant::Plain,
            ..Default::default()
        };
        let hw = 192;
        let video = test_video(1, hw, 6);
        // shift input down by one stride-k cell for each level and compare
        // interiors; the boundary region polluted by the zero fill widens with
        // depth (conv reach of 3 cells per block, halved by each stride)
        let margin = [2usize, 4, 5, 5];
        for level in 0..4 {
            let k = cfg.strides[level];
            let shifted = Tensor::from_fn(&[1, hw, hw, 1], |i| {
                let y = i / hw;
                let x = i % hw;
                if y >= k {
                    video.data()[(y - k) * hw + x]
                } else {
                    0.0
                }
            });
            let (tape_a, pyr_a) = run(&cfg, &video, 7);
            let (tape_b, pyr_b) = run(&cfg, &shifted, 7);
            let a = tape_a.value(pyr_a.levels[level]);
            let b = tape_b.value(pyr_b.levels[level]);
            let side = hw / k;
            let d = cfg.widths[level];
            let m = margin[level];
            assert!(side > 2 * m, "level {level} too small to probe");
            let mut cells = 0;
            for y in m..side - m {
                for x in 2..side - 2 {
                    for c in 0..d {
                        let va = a.at(&[0, y - 1, x, c]);
                        let vb = b.at(&[0, y, x, c]);
                        assert!(
                            (va - vb).abs() < 1e-5,
                            "level {level} cell ({y},{x},{c}): {va} vs {vb}"
                        );
                        cells += 1;
                    }
                }
            }
            assert!(cells > 0);
        }
    }

    #[test]
    fn forward_shift_copies_previous_frame() {
        let cfg = BackboneConfig::default();
        let params = build_params(&cfg, 8);
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_fn(&[3, 2, 2, 16], |i| i as f32 * 0.01));
        let shifted_n = cfg.shifted_channels(0);
        // raw shift stage (before mixing): forward-shift channel at frame 1
        // equals its value at frame 0 of the input
        let moved = tape.time_shift(x, shifted_n, shifted_n).unwrap();
        let v_in = tape.value(x).clone();
        let v_out = tape.value(moved).clone();
        for p in 0..4 {
            for c in shifted_n..2 * shifted_n {
                assert_eq!(v_out.at(&[1, p / 2, p % 2, c]), v_in.at(&[0, p / 2, p % 2, c]));
            }
        }
        // and the full module keeps parameters learnable (mix conv exists)
        let full = temporal_shift(&mut tape, x, shifted_n, &bound, "backbone.tsm0").unwrap();
        assert_eq!(tape.shape(full), &[3, 2, 2, 16]);
    }

    #[test]
    fn zero_frames_and_bad_variant_rejected() {
        let cfg = BackboneConfig::default();
        let params = build_params(&cfg, 1);
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, false);
        let v = tape.constant(Tensor::zeros(&[0, 16, 16, 1]));
        assert!(extract_pyramid(&mut tape, v, &cfg, &bound).is_err());
        assert!(BackboneVariant::parse("temporal-conv").is_err());
        assert_eq!(BackboneVariant::parse("fuse-cat").unwrap(), BackboneVariant::FuseCat);
    }

    #[test]
    fn param_count_is_a_pure_function_of_config() {
        for variant in BackboneVariant::ALL {
            let cfg = BackboneConfig {
                variant,
                ..Default::default()
            };
            let a = build_params(&cfg, 1);
            let b = build_params(&cfg, 2);
            assert_eq!(a.len(), b.len());
            assert_eq!(a.total_values(), b.total_values());
            let names_a: Vec<_> = a.iter().map(|(n, _)| n.to_string()).collect();
            let names_b: Vec<_> = b.iter().map(|(n, _)| n.to_string()).collect();
            assert_eq!(names_a, names_b);
        }
    }
}
