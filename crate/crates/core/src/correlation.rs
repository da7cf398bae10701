//! Local 4D correlation volumes and multi-scale token encoding.
//!
//! For each of the three correlation levels, an r x r window of normalized
//! features is sampled around the query point on the query frame and around
//! the current trajectory estimate on every frame. All-pair cosine similarity
//! between the two windows yields an r^4 volume per point-frame, which a
//! two-layer perceptron compresses to `token_dim` values; the three levels
//! concatenate into one token stream.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, CORR_LEVELS};
use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamSpecs};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrConfig {
    /// Correlation window side r (odd, >= 3).
    pub window: usize,
    /// Token width D produced per level; the concatenated stream is 3D wide.
    pub token_dim: usize,
}

impl Default for CorrConfig {
    fn default() -> Self {
        Self {
            window: 9,
            token_dim: 32,
        }
    }
}

impl CorrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "correlation window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.token_dim == 0 {
            return Err(Error::InvalidConfig("token_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the concatenated multi-scale token stream.
    pub fn token_width(&self) -> usize {
        3 * self.token_dim
    }

    pub fn declare_params(&self, specs: &mut ParamSpecs) {
        let r2 = self.window * self.window;
        let flat = r2 * r2;
        let hidden = 4 * self.token_dim;
        for level in CORR_LEVELS {
            let p = format!("corr.l{level}");
            specs.declare(
                format!("{p}.enc1.w"),
                &[flat, hidden],
                Init::HeUniform { fan_in: flat },
            );
            specs.declare(format!("{p}.enc1.b"), &[hidden], Init::Zeros);
            specs.declare(
                format!("{p}.enc2.w"),
                &[hidden, self.token_dim],
                Init::HeUniform { fan_in: hidden },
            );
            specs.declare(format!("{p}.enc2.b"), &[self.token_dim], Init::Zeros);
        }
    }
}

/// (x, y) positions [T,N,2] in input pixels -> sampling coordinates
/// [T, N*r^2, 2] in level cells, (row, col) per window tap.
fn window_coords<S: Scalar>(
    tape: &mut Tape<S>,
    positions: Var,
    r: usize,
    stride: usize,
) -> Result<Var> {
    let shape = tape.shape(positions).to_vec();
    let (t_len, n) = (shape[0], shape[1]);
    let r2 = r * r;
    // (x, y) -> (row, col) = (y, x)
    let x = tape.slice_lastdim(positions, 0, 1)?;
    let y = tape.slice_lastdim(positions, 1, 1)?;
    let rowcol = tape.concat_lastdim(&[y, x])?;
    let cells = tape.scale(rowcol, S::from_f64(1.0 / stride as f64));
    // replicate per window tap, then add the integer tap offsets
    let rep_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, r2)).collect();
    let rep = tape.gather_points(cells, Arc::new(rep_idx), r2)?;
    let half = (r as isize - 1) / 2;
    let offsets = Tensor::from_fn(&[t_len, n, r2, 2], |i| {
        let tap = (i / 2) % r2;
        let coord = i % 2;
        let off = if coord == 0 {
            tap / r // row offset
        } else {
            tap % r
        };
        S::from_f64((off as isize - half) as f64)
    });
    let offsets = tape.constant(offsets);
    let grid = tape.add(rep, offsets)?;
    tape.reshape(grid, &[t_len, n * r2, 2])
}

/// Sample r x r windows (1 feature-cell spacing, zero outside the map) around
/// per-frame centers. `level_map` is [T,h,w,d]; `centers` is [T,N,2] holding
/// (x, y) input-pixel coordinates; `stride` converts pixels to level cells.
pub fn sample_windows<S: Scalar>(
    tape: &mut Tape<S>,
    level_map: Var,
    centers: Var,
    r: usize,
    stride: usize,
) -> Result<Var> {
    let sm = tape.shape(level_map).to_vec();
    let sc = tape.shape(centers).to_vec();
    if sm.len() != 4 || sc.len() != 3 || sc[2] != 2 || sm[0] != sc[0] {
        return Err(Error::ShapeMismatch {
            op: "sample_windows",
            lhs: sm,
            rhs: sc,
        });
    }
    let (t_len, h, w, d) = (sm[0], sm[1], sm[2], sm[3]);
    let n = sc[1];
    let r2 = r * r;
    let coords = window_coords(tape, centers, r, stride)?;
    let mut per_frame = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let frame = tape.slice_axis0(level_map, t, 1)?;
        let frame = tape.reshape(frame, &[h, w, d])?;
        let fc = tape.slice_axis0(coords, t, 1)?;
        let fc = tape.reshape(fc, &[n * r2, 2])?;
        per_frame.push(tape.bilinear_sample(frame, fc)?);
    }
    let stacked = tape.concat_axis0(&per_frame)?;
    tape.reshape(stacked, &[t_len, n, r, r, d])
}

/// Two-layer perceptron from the flattened r^4 volume to D token values.
pub fn encode_corr<S: Scalar>(
    tape: &mut Tape<S>,
    corr: Var,
    params: &BoundParams,
    level: usize,
    token_dim: usize,
) -> Result<Var> {
    let sc = tape.shape(corr).to_vec();
    if sc.len() != 6 {
        return Err(Error::BadOperand {
            op: "encode_corr",
            shape: sc,
            reason: "expected [T,N,r,r,r,r]".into(),
        });
    }
    let (t_len, n) = (sc[0], sc[1]);
    let flat: usize = sc[2..].iter().product();
    let p = format!("corr.l{level}");
    let x = tape.reshape(corr, &[t_len * n, flat])?;
    let h = tape.matmul(x, params.var(&format!("{p}.enc1.w")))?;
    let h = tape.add_lastdim(h, params.var(&format!("{p}.enc1.b")))?;
    let h = tape.relu(h);
    let out = tape.matmul(h, params.var(&format!("{p}.enc2.w")))?;
    let out = tape.add_lastdim(out, params.var(&format!("{p}.enc2.b")))?;
    tape.reshape(out, &[t_len, n, token_dim])
}

/// Build the multi-scale correlation token stream [T,N,3D] for the current
/// trajectory estimate.
pub fn build_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    pyramid: &FeaturePyramid,
    queries: Var,
    query_frame: usize,
    positions: Var,
    cfg: &CorrConfig,
    params: &BoundParams,
) -> Result<Var> {
    cfg.validate()?;
    let sq = tape.shape(queries).to_vec();
    let sp = tape.shape(positions).to_vec();
    if sq.len() != 2 || sq[1] != 2 || sp.len() != 3 || sp[2] != 2 || sp[1] != sq[0] {
        return Err(Error::ShapeMismatch {
            op: "build_tokens",
            lhs: sq,
            rhs: sp,
        });
    }
    let n = sq[0];
    let r = cfg.window;
    let mut level_tokens = Vec::with_capacity(CORR_LEVELS.len());
    for level in CORR_LEVELS {
        let stride = pyramid.strides[level];
        let feat = tape.standardize_channels(pyramid.levels[level])?;
        // query windows come from the query frame only
        let qframe = tape.slice_axis0(feat, query_frame, 1)?;
        let qcenters = tape.reshape(queries, &[1, n, 2])?;
        let qwin = sample_windows(tape, qframe, qcenters, r, stride)?;
        let qwin = tape.reshape(qwin, &[n, r, r, pyramid.widths[level]])?;
        // track windows follow the per-frame trajectory estimate
        let fwin = sample_windows(tape, feat, positions, r, stride)?;
        let corr = tape.cosine_corr4d(qwin, fwin)?;
        level_tokens.push(encode_corr(tape, corr, params, level, cfg.token_dim)?);
    }
    tape.concat_lastdim(&level_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSpecs;

    fn ramp_map(t: usize, h: usize, w: usize, d: usize) -> Tensor<f32> {
        Tensor::from_fn(&[t, h, w, d], |i| {
            let c = i % d;
            let x = (i / d) % w;
            let y = (i / (d * w)) % h;
            (x as f32 * 0.31 + y as f32 * 0.17 + c as f32 * 0.05).sin()
        })
    }

    fn centers(t: usize, pts: &[(f32, f32)]) -> Tensor<f32> {
        Tensor::from_fn(&[t, pts.len(), 2], |i| {
            let p = (i / 2) % pts.len();
            if i % 2 == 0 {
                pts[p].0
            } else {
                pts[p].1
            }
        })
    }

    #[test]
    fn integer_center_window_equals_raw_patch() {
        let mut tape = Tape::<f32>::new();
        let map = tape.constant(ramp_map(1, 8, 8, 3));
        // stride 1, center (x=4, y=3): window cells are exact grid cells
        let c = tape.constant(centers(1, &[(4.0, 3.0)]));
        let win = sample_windows(&mut tape, map, c, 3, 1).unwrap();
        let wv = tape.value(win).clone();
        let mv = tape.value(map).clone();
        for i in 0..3 {
            for j in 0..3 {
                for ch in 0..3 {
                    assert_eq!(
                        wv.at(&[0, 0, i, j, ch]),
                        mv.at(&[0, 3 + i - 1, 4 + j - 1, ch]),
                        "cell ({i},{j},{ch})"
                    );
                }
            }
        }
    }

    #[test]
    fn corner_center_zeroes_three_quadrants() {
        let mut tape = Tape::<f32>::new();
        let map = tape.constant(Tensor::full(&[1, 6, 6, 1], 1.0));
        let c = tape.constant(centers(1, &[(0.0, 0.0)]));
        let win = sample_windows(&mut tape, map, c, 5, 1).unwrap();
        let wv = tape.value(win).clone();
        for i in 0..5 {
            for j in 0..5 {
                let v = wv.at(&[0, 0, i, j, 0]);
                if i < 2 || j < 2 {
                    assert_eq!(v, 0.0, "({i},{j}) should be outside");
                } else {
                    assert_eq!(v, 1.0, "({i},{j}) should be inside");
                }
            }
        }
    }

    #[test]
    fn fractional_center_is_linear_between_cells() {
        // a feature map linear in x: window at x+0.5 = average of windows at x, x+1
        let mut tape = Tape::<f32>::new();
        let map = tape.constant(Tensor::from_fn(&[1, 8, 8, 2], |i| {
            let x = (i / 2) % 8;
            x as f32 * 0.25 + (i % 2) as f32
        }));
        let c = tape.constant(centers(1, &[(3.0, 4.0), (4.0, 4.0), (3.5, 4.0)]));
        let win = sample_windows(&mut tape, map, c, 3, 1).unwrap();
        let wv = tape.value(win).clone();
        for i in 0..3 {
            for j in 0..3 {
                for ch in 0..2 {
                    let a = wv.at(&[0, 0, i, j, ch]);
                    let b = wv.at(&[0, 1, i, j, ch]);
                    let mid = wv.at(&[0, 2, i, j, ch]);
                    assert!(
                        (mid - 0.5 * (a + b)).abs() < 1e-5,
                        "({i},{j},{ch}): {mid} vs avg {}",
                        0.5 * (a + b)
                    );
                }
            }
        }
    }

    /// Six-nested-loop reference for the 4D cosine correlation.
    fn brute_force_corr(q: &Tensor<f64>, f: &Tensor<f64>) -> Tensor<f64> {
        let (n, r, d) = (q.shape()[0], q.shape()[1], q.shape()[3]);
        let t_len = f.shape()[0];
        Tensor::from_fn(&[t_len, n, r, r, r, r], |flat| {
            let v = flat % r;
            let u = (flat / r) % r;
            let j = (flat / (r * r)) % r;
            let i = (flat / (r * r * r)) % r;
            let nn = (flat / (r * r * r * r)) % n;
            let t = flat / (r * r * r * r * n);
            let mut dot = 0.0;
            let mut qn = 0.0;
            let mut fnn = 0.0;
            for c in 0..d {
                let qv = q.at(&[nn, i, j, c]);
                let fv = f.at(&[t, nn, u, v, c]);
                dot += qv * fv;
                qn += qv * qv;
                fnn += fv * fv;
            }
            dot / (qn.sqrt() * fnn.sqrt() + 1e-8)
        })
    }

    #[test]
    fn cosine_matches_six_loop_reference() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let q = Tensor::<f64>::from_fn(&[2, 3, 3, 4], |_| rng.random_range(-1.0..1.0));
            let f = Tensor::<f64>::from_fn(&[3, 2, 3, 3, 4], |_| rng.random_range(-1.0..1.0));
            let expect = brute_force_corr(&q, &f);
            let mut tape = Tape::new();
            let qv = tape.constant(q);
            let fv = tape.constant(f);
            let c = tape.cosine_corr4d(qv, fv).unwrap();
            let got = tape.value(c);
            for (a, b) in got.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn correlation_bounded_and_translation_consistent() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // translating the content of both windows by the same integer offset
        // moves correlation entries to the correspondingly shifted indices
        let r = 4usize;
        let big = Tensor::<f32>::from_fn(&[10, 10, 3], |_| rng.random_range(-1.0..1.0));
        let crop = |oy: usize, ox: usize| {
            Tensor::<f32>::from_fn(&[r, r, 3], |i| {
                let c = i % 3;
                let x = (i / 3) % r;
                let y = i / (3 * r);
                big.at(&[oy + y, ox + x, c])
            })
        };
        let run = |q: Tensor<f32>, f: Tensor<f32>| {
            let mut tape = Tape::new();
            let qv = tape.constant(q.reshape(&[1, r, r, 3]).unwrap());
            let fv = tape.constant(f.reshape(&[1, 1, r, r, 3]).unwrap());
            let c = tape.cosine_corr4d(qv, fv).unwrap();
            tape.value(c).clone()
        };
        let base = run(crop(1, 1), crop(2, 3));
        let moved = run(crop(2, 2), crop(3, 4)); // both contents shifted by (1,1)
        for i in 0..r - 1 {
            for j in 0..r - 1 {
                for u in 0..r - 1 {
                    for v in 0..r - 1 {
                        let a = moved.at(&[0, 0, i, j, u, v]);
                        let b = base.at(&[0, 0, i + 1, j + 1, u + 1, v + 1]);
                        assert!((a - b).abs() < 1e-5, "({i},{j},{u},{v}): {a} vs {b}");
                        assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&a));
                    }
                }
            }
        }
    }

    #[test]
    fn perfect_match_localizes_at_integer_offsets() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        for r in [5usize, 9] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(r as u64);
            let half = (r - 1) / 2;
            let max_d = half as isize - 1;
            let pad = 2 * half;
            let side = r + 2 * pad;
            let big = Tensor::<f32>::from_fn(&[side, side, 4], |_| rng.random_range(-1.0..1.0));
            let crop = |oy: isize, ox: isize| {
                Tensor::<f32>::from_fn(&[r, r, 4], |i| {
                    let c = i % 4;
                    let x = ((i / 4) % r) as isize;
                    let y = (i / (4 * r)) as isize;
                    big.at(&[(pad as isize + oy + y) as usize, (pad as isize + ox + x) as usize, c])
                })
            };
            for dy in -max_d..=max_d {
                for dx in -max_d..=max_d {
                    // track window = query window translated by (dy, dx)
                    let q = crop(0, 0).reshape(&[1, r, r, 4]).unwrap();
                    let f = crop(dy, dx).reshape(&[1, 1, r, r, 4]).unwrap();
                    let mut tape = Tape::new();
                    let qv = tape.constant(q);
                    let fv = tape.constant(f);
                    let c = tape.cosine_corr4d(qv, fv).unwrap();
                    let corr = tape.value(c);
                    // argmax over (u,v) at the center cell (i,j) = (half,half)
                    let mut best = (0usize, 0usize);
                    let mut best_v = f32::NEG_INFINITY;
                    for u in 0..r {
                        for v in 0..r {
                            let val = corr.at(&[0, 0, half, half, u, v]);
                            if val > best_v {
                                best_v = val;
                                best = (u, v);
                            }
                        }
                    }
                    // the content at center (i,j) sits at center-(dy,dx) in the track window
                    let expect = (
                        (half as isize - dy) as usize,
                        (half as isize - dx) as usize,
                    );
                    assert_eq!(best, expect, "r={r} offset ({dy},{dx})");
                }
            }
        }
    }

    fn enc_params(cfg: &CorrConfig, seed: u64) -> crate::params::ModelParams<f32> {
        let mut specs = ParamSpecs::default();
        cfg.declare_params(&mut specs);
        specs.build(seed)
    }

    #[test]
    fn zero_volume_encodes_to_constant_bias_image() {
        let cfg = CorrConfig {
            window: 3,
            token_dim: 8,
        };
        let params = enc_params(&cfg, 3);
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, false);
        let corr = tape.constant(Tensor::zeros(&[2, 3, 3, 3, 3, 3]));
        let tok = encode_corr(&mut tape, corr, &bound, 0, cfg.token_dim).unwrap();
        assert_eq!(tape.shape(tok), &[2, 3, 8]);
        let v = tape.value(tok);
        let first = &v.data()[..8];
        for row in v.data().chunks(8) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn static_video_with_query_trajectories_gives_constant_tokens() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let cfg = CorrConfig {
            window: 3,
            token_dim: 4,
        };
        let params = enc_params(&cfg, 11);
        let t_len = 4;
        let n = 3;
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, false);
        // pyramid of static frames (identical across t)
        let widths = [6, 8, 10, 12];
        let strides = [2, 4, 8, 16];
        let mut levels = Vec::new();
        for l in 0..4 {
            let side = 32 / strides[l];
            let frame: Vec<f32> = (0..side * side * widths[l])
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mut data = Vec::new();
            for _ in 0..t_len {
                data.extend_from_slice(&frame);
            }
            levels.push(tape.constant(
                Tensor::new(vec![t_len, side, side, widths[l]], data).unwrap(),
            ));
        }
        let pyramid = FeaturePyramid {
            levels,
            strides,
            widths,
        };
        let queries = tape.constant(Tensor::new(
            vec![n, 2],
            vec![10.0, 12.0, 16.5, 15.0, 20.0, 18.25],
        ).unwrap());
        let qv = tape.value(queries).clone();
        let positions = tape.constant(Tensor::from_fn(&[t_len, n, 2], |i| qv.data()[i % (n * 2)]));
        let tokens = build_tokens(&mut tape, &pyramid, queries, 0, positions, &cfg, &bound).unwrap();
        assert_eq!(tape.shape(tokens), &[t_len, n, 3 * cfg.token_dim]);
        let v = tape.value(tokens);
        let per_frame = n * 3 * cfg.token_dim;
        let first = &v.data()[..per_frame];
        for t in 1..t_len {
            assert_eq!(&v.data()[t * per_frame..(t + 1) * per_frame], first, "frame {t}");
        }
    }

    #[test]
    fn normalized_cosine_ignores_per_channel_rescaling() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let d = 5;
        let map = Tensor::<f32>::from_fn(&[2, 12, 12, d], |_| rng.random_range(-1.0..1.0));
        let lambda: Vec<f32> = (0..d).map(|_| rng.random_range(0.3..3.0)).collect();
        let scaled = Tensor::from_fn(&[2, 12, 12, d], |i| map.data()[i] * lambda[i % d]);
        let run = |m: Tensor<f32>| {
            let mut tape = Tape::new();
            let mv = tape.constant(m);
            let norm = tape.standardize_channels(mv).unwrap();
            // query center differs from both track centers so no window pair
            // is an exact copy (copies give tied argmaxes at 1.0)
            let qcenters = tape.constant(Tensor::new(vec![1, 1, 2], vec![5.0, 6.0]).unwrap());
            let qframe = tape.slice_axis0(norm, 0, 1).unwrap();
            let qwin = sample_windows(&mut tape, qframe, qcenters, 3, 1).unwrap();
            let q = tape.reshape(qwin, &[1, 3, 3, d]).unwrap();
            let centers = tape.constant(Tensor::new(
                vec![2, 1, 2],
                vec![6.5, 5.25, 4.25, 7.5],
            ).unwrap());
            let win = sample_windows(&mut tape, norm, centers, 3, 1).unwrap();
            let c = tape.cosine_corr4d(q, win).unwrap();
            tape.value(c).data().to_vec()
        };
        let a = run(map);
        let b = run(scaled);
        let argmax = |v: &[f32]| {
            v.iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&a), argmax(&b));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn encoder_has_no_cross_point_mixing() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let cfg = CorrConfig {
            window: 3,
            token_dim: 4,
        };
        let params = enc_params(&cfg, 5);
        let corr = Tensor::<f32>::from_fn(&[2, 4, 3, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        // permute the N axis
        let perm = [2usize, 0, 3, 1];
        let volume = 81;
        let permuted = Tensor::from_fn(&[2, 4, 3, 3, 3, 3], |i| {
            let v = i % volume;
            let n = (i / volume) % 4;
            let t = i / (volume * 4);
            corr.data()[(t * 4 + perm[n]) * volume + v]
        });
        let encode = |c: Tensor<f32>| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let cv = tape.constant(c);
            let tok = encode_corr(&mut tape, cv, &bound, 0, cfg.token_dim).unwrap();
            tape.value(tok).data().to_vec()
        };
        let base = encode(corr);
        let got = encode(permuted);
        for t in 0..2 {
            for n in 0..4 {
                let a = &got[(t * 4 + n) * 4..(t * 4 + n + 1) * 4];
                let b = &base[(t * 4 + perm[n]) * 4..(t * 4 + perm[n] + 1) * 4];
                assert_eq!(a, b);
            }
        }
    }
}
