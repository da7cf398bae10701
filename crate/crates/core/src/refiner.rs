//! Iterative joint temporal refinement of trajectories.
//!
//! Correlation tokens are embedded together with trajectory offsets and a
//! sinusoidal time code, then run through blocks of multi-head attention along
//! each trajectory followed by attention across each point's K nearest
//! neighbors and a per-token MLP. The output head predicts residual updates
//! (dx, dy) which accumulate over `iterations` rounds.
//!
//! Neighbor attention draws keys and values from the embedded tokens rather
//! than the evolving stream: a point's update therefore depends on exactly
//! its own trajectory plus the tokens of its K neighbors, for any number of
//! blocks. Queries always come from the evolving per-point stream.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamSpecs};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReasoningMode {
    /// Attention over the K nearest neighboring trajectories.
    Knp,
    /// Attention over all points at each frame.
    FullJoint,
    /// Queries attend to a small learned latent token set (comparison hook).
    CrossAttention,
}

impl ReasoningMode {
    pub const ALL: [ReasoningMode; 3] = [
        ReasoningMode::Knp,
        ReasoningMode::FullJoint,
        ReasoningMode::CrossAttention,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ReasoningMode::Knp => "knp",
            ReasoningMode::FullJoint => "full-joint",
            ReasoningMode::CrossAttention => "cross-attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.token() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown reasoning mode `{s}`")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    /// K nearest neighboring trajectories each point reasons over.
    pub neighbors: usize,
    /// Refinement iterations m.
    pub iterations: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Model width; 0 resolves to the token width (3D).
    pub width: usize,
    pub mode: ReasoningMode,
    /// Latent set size for cross-attention mode.
    pub latent_tokens: usize,
    /// Recompute neighbor sets from the current estimate each iteration.
    pub refresh_neighbors: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            neighbors: 10,
            iterations: 4,
            blocks: 3,
            heads: 4,
            width: 0,
            mode: ReasoningMode::Knp,
            latent_tokens: 16,
            refresh_neighbors: false,
        }
    }
}

impl RefinerConfig {
    pub fn resolved_width(&self, token_width: usize) -> usize {
        if self.width == 0 {
            token_width
        } else {
            self.width
        }
    }

    pub fn validate(&self, token_width: usize) -> Result<()> {
        let w = self.resolved_width(token_width);
        if self.neighbors < 1 {
            return Err(Error::InvalidConfig("refiner: K must be >= 1".into()));
        }
        if self.blocks < 1 || self.heads < 1 {
            return Err(Error::InvalidConfig(
                "refiner: blocks and heads must be >= 1".into(),
            ));
        }
        if !w.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "refiner: width {} not divisible by heads {}",
                w, self.heads
            )));
        }
        if self.mode == ReasoningMode::CrossAttention && self.latent_tokens < 1 {
            return Err(Error::InvalidConfig(
                "refiner: cross-attention needs latent_tokens >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn declare_params(&self, token_width: usize, specs: &mut ParamSpecs) {
        let w = self.resolved_width(token_width);
        let linear = |specs: &mut ParamSpecs, name: String, cin: usize, cout: usize| {
            specs.declare(format!("{name}.w"), &[cin, cout], Init::HeUniform { fan_in: cin });
            specs.declare(format!("{name}.b"), &[cout], Init::Zeros);
        };
        let norm = |specs: &mut ParamSpecs, name: String| {
            specs.declare(format!("{name}.g"), &[w], Init::Ones);
            specs.declare(format!("{name}.b"), &[w], Init::Zeros);
        };
        linear(specs, "refiner.embed.token".into(), token_width, w);
        linear(specs, "refiner.embed.pos".into(), 2, w);
        if self.mode == ReasoningMode::CrossAttention {
            specs.declare(
                "refiner.latent",
                &[self.latent_tokens, w],
                Init::Uniform { lo: -0.5, hi: 0.5 },
            );
        }
        for b in 0..self.blocks {
            let p = format!("refiner.block{b}");
            norm(specs, format!("{p}.time.ln"));
            for proj in ["wq", "wk", "wv", "wo"] {
                linear(specs, format!("{p}.time.{proj}"), w, w);
            }
            norm(specs, format!("{p}.nbr.ln"));
            norm(specs, format!("{p}.nbr.kv_ln"));
            for proj in ["wq", "wk", "wv", "wo"] {
                linear(specs, format!("{p}.nbr.{proj}"), w, w);
            }
            norm(specs, format!("{p}.mlp.ln"));
            linear(specs, format!("{p}.mlp.fc1"), w, 4 * w);
            linear(specs, format!("{p}.mlp.fc2"), 4 * w, w);
        }
        norm(specs, "refiner.final.ln".into());
        // zero head: the first iteration starts from the broadcast state
        specs.declare("refiner.head.w", &[w, 2], Init::Zeros);
        specs.declare("refiner.head.b", &[2], Init::Zeros);
    }
}

/// Per-point neighbor table: row i holds the point itself plus its K-1
/// nearest others at the query frame, padded with self when N <= K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    pub indices: Arc<Vec<usize>>,
    pub n: usize,
    pub k: usize,
}

impl NeighborIndex {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Brute-force K-nearest-neighbor table from query positions [N,2].
/// Distance ties break by ascending point index.
pub fn knn<S: Scalar>(queries: &Tensor<S>, k: usize) -> Result<NeighborIndex> {
    if queries.rank() != 2 || queries.shape()[1] != 2 {
        return Err(Error::BadOperand {
            op: "knn",
            shape: queries.shape().to_vec(),
            reason: "queries must be [N,2]".into(),
        });
    }
    let n = queries.shape()[0];
    if n == 0 || k == 0 {
        return Err(Error::InvalidInput("knn needs N >= 1 and K >= 1".into()));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut others: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let (xi, yi) = (queries.at(&[i, 0]).to_f64(), queries.at(&[i, 1]).to_f64());
        others.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let dx = queries.at(&[j, 0]).to_f64() - xi;
            let dy = queries.at(&[j, 1]).to_f64() - yi;
            others.push((dx * dx + dy * dy, j));
        }
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        indices.push(i);
        indices.extend(others.iter().take(k - 1).map(|&(_, j)| j));
        while indices.len() % k != 0 {
            indices.push(i); // multiset padding when N <= K
        }
    }
    Ok(NeighborIndex {
        indices: Arc::new(indices),
        n,
        k,
    })
}

fn sinusoidal_time_encoding<S: Scalar>(t_len: usize, n: usize, width: usize) -> Tensor<S> {
    Tensor::from_fn(&[t_len, n, width], |i| {
        let c = i % width;
        let t = i / (width * n);
        let freq = (10000f64).powf(-((c / 2 * 2) as f64) / width as f64);
        let angle = t as f64 * freq;
        S::from_f64(if c.is_multiple_of(2) { angle.sin() } else { angle.cos() })
    })
}

fn linear2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &BoundParams,
    name: &str,
) -> Result<Var> {
    let h = tape.matmul(x, params.var(&format!("{name}.w")))?;
    tape.add_lastdim(h, params.var(&format!("{name}.b")))
}

fn layer_norm<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &BoundParams,
    name: &str,
) -> Result<Var> {
    tape.layer_norm_lastdim(
        x,
        params.var(&format!("{name}.g")),
        params.var(&format!("{name}.b")),
    )
}

/// Embed correlation tokens with trajectory offsets and the time code.
/// `queries_tiled` must broadcast the query positions to [T,N,2].
fn embed_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: Var,
    positions: Var,
    queries_tiled: Var,
    width: usize,
    params: &BoundParams,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let (t_len, n, token_w) = (shape[0], shape[1], shape[2]);
    let tok = tape.reshape(tokens, &[t_len * n, token_w])?;
    let tok = linear2d(tape, tok, params, "refiner.embed.token")?;
    let rel = tape.sub(positions, queries_tiled)?;
    let rel = tape.reshape(rel, &[t_len * n, 2])?;
    let pos = linear2d(tape, rel, params, "refiner.embed.pos")?;
    let sum = tape.add(tok, pos)?;
    let sum = tape.reshape(sum, &[t_len, n, width])?;
    let enc = tape.constant(sinusoidal_time_encoding(t_len, n, width));
    tape.add(sum, enc)
}

/// Multi-head attention along each trajectory (sequences of length T).
fn time_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    cfg: &RefinerConfig,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (t_len, n, w) = (shape[0], shape[1], shape[2]);
    let ln = layer_norm(tape, x, params, &format!("{prefix}.ln"))?;
    let seq = tape.transpose01(ln)?; // [N,T,W]
    let flat = tape.reshape(seq, &[n * t_len, w])?;
    let q = linear2d(tape, flat, params, &format!("{prefix}.wq"))?;
    let k = linear2d(tape, flat, params, &format!("{prefix}.wk"))?;
    let v = linear2d(tape, flat, params, &format!("{prefix}.wv"))?;
    let q = tape.reshape(q, &[n, t_len, w])?;
    let k = tape.reshape(k, &[n, t_len, w])?;
    let v = tape.reshape(v, &[n, t_len, w])?;
    let attn = tape.mha(q, k, v, cfg.heads)?;
    let flat = tape.reshape(attn, &[n * t_len, w])?;
    let out = linear2d(tape, flat, params, &format!("{prefix}.wo"))?;
    let out = tape.reshape(out, &[n, t_len, w])?;
    let out = tape.transpose01(out)?;
    tape.add(x, out)
}

/// Attention across points: queries from the stream, keys/values from the
/// static embedded context (neighbors, all points, or learned latents).
fn point_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    context: Var,
    nbr: &NeighborIndex,
    cfg: &RefinerConfig,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (t_len, n, w) = (shape[0], shape[1], shape[2]);
    let ln = layer_norm(tape, x, params, &format!("{prefix}.ln"))?;
    let flat = tape.reshape(ln, &[t_len * n, w])?;
    let q = linear2d(tape, flat, params, &format!("{prefix}.wq"))?;

    let attn = match cfg.mode {
        ReasoningMode::Knp => {
            let ctx = layer_norm(tape, context, params, &format!("{prefix}.kv_ln"))?;
            let cflat = tape.reshape(ctx, &[t_len * n, w])?;
            let k = linear2d(tape, cflat, params, &format!("{prefix}.wk"))?;
            let v = linear2d(tape, cflat, params, &format!("{prefix}.wv"))?;
            let k = tape.reshape(k, &[t_len, n, w])?;
            let v = tape.reshape(v, &[t_len, n, w])?;
            let kk = tape.gather_points(k, Arc::clone(&nbr.indices), nbr.k)?;
            let vv = tape.gather_points(v, Arc::clone(&nbr.indices), nbr.k)?;
            let kk = tape.reshape(kk, &[t_len * n, nbr.k, w])?;
            let vv = tape.reshape(vv, &[t_len * n, nbr.k, w])?;
            let q1 = tape.reshape(q, &[t_len * n, 1, w])?;
            let out = tape.mha(q1, kk, vv, cfg.heads)?;
            tape.reshape(out, &[t_len * n, w])?
        }
        ReasoningMode::FullJoint => {
            let ctx = layer_norm(tape, context, params, &format!("{prefix}.kv_ln"))?;
            let cflat = tape.reshape(ctx, &[t_len * n, w])?;
            let k = linear2d(tape, cflat, params, &format!("{prefix}.wk"))?;
            let v = linear2d(tape, cflat, params, &format!("{prefix}.wv"))?;
            let k = tape.reshape(k, &[t_len, n, w])?;
            let v = tape.reshape(v, &[t_len, n, w])?;
            let q3 = tape.reshape(q, &[t_len, n, w])?;
            let out = tape.mha(q3, k, v, cfg.heads)?;
            tape.reshape(out, &[t_len * n, w])?
        }
        ReasoningMode::CrossAttention => {
            let latent = params.var("refiner.latent");
            let k = linear2d(tape, latent, params, &format!("{prefix}.wk"))?;
            let v = linear2d(tape, latent, params, &format!("{prefix}.wv"))?;
            let k = tape.reshape(k, &[1, cfg.latent_tokens, w])?;
            let v = tape.reshape(v, &[1, cfg.latent_tokens, w])?;
            let q1 = tape.reshape(q, &[1, t_len * n, w])?;
            let out = tape.mha(q1, k, v, cfg.heads)?;
            tape.reshape(out, &[t_len * n, w])?
        }
    };
    let out = linear2d(tape, attn, params, &format!("{prefix}.wo"))?;
    let out = tape.reshape(out, &[t_len, n, w])?;
    tape.add(x, out)
}

fn mlp_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (t_len, n, w) = (shape[0], shape[1], shape[2]);
    let ln = layer_norm(tape, x, params, &format!("{prefix}.ln"))?;
    let flat = tape.reshape(ln, &[t_len * n, w])?;
    let h = linear2d(tape, flat, params, &format!("{prefix}.fc1"))?;
    let h = tape.relu(h);
    let h = linear2d(tape, h, params, &format!("{prefix}.fc2"))?;
    let h = tape.reshape(h, &[t_len, n, w])?;
    tape.add(x, h)
}

/// One refinement round: tokens [T,N,3D] and the current trajectory estimate
/// produce residual updates [T,N,2].
pub fn refine_iteration<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: Var,
    positions: Var,
    queries: &Tensor<S>,
    nbr: &NeighborIndex,
    cfg: &RefinerConfig,
    params: &BoundParams,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(Error::BadOperand {
            op: "refine_iteration",
            shape,
            reason: "tokens must be [T,N,width]".into(),
        });
    }
    let (t_len, n, token_w) = (shape[0], shape[1], shape[2]);
    cfg.validate(token_w)?;
    let w = cfg.resolved_width(token_w);
    if nbr.n != n {
        return Err(Error::InvalidInput(format!(
            "neighbor table covers {} points, tokens have {}",
            nbr.n, n
        )));
    }

    let tiled = Tensor::from_fn(&[t_len, n, 2], |i| queries.data()[i % (n * 2)]);
    let queries_tiled = tape.constant(tiled);
    let embedded = embed_tokens(tape, tokens, positions, queries_tiled, w, params)?;

    let mut stream = embedded;
    for b in 0..cfg.blocks {
        let p = format!("refiner.block{b}");
        stream = time_attention(tape, stream, cfg, params, &format!("{p}.time"))?;
        stream = point_attention(tape, stream, embedded, nbr, cfg, params, &format!("{p}.nbr"))?;
        stream = mlp_block(tape, stream, params, &format!("{p}.mlp"))?;
    }
    let ln = layer_norm(tape, stream, params, "refiner.final.ln")?;
    let flat = tape.reshape(ln, &[t_len * n, w])?;
    let delta = linear2d(tape, flat, params, "refiner.head")?;
    tape.reshape(delta, &[t_len, n, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSpecs;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn points(v: &[(f64, f64)]) -> Tensor<f64> {
        Tensor::from_fn(&[v.len(), 2], |i| {
            if i % 2 == 0 {
                v[i / 2].0
            } else {
                v[i / 2].1
            }
        })
    }

    #[test]
    fn knn_collinear_case() {
        let q = points(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
        let nbr = knn(&q, 2).unwrap();
        assert_eq!(nbr.row(0), &[0, 1]);
        assert_eq!(nbr.row(1), &[1, 0]); // ties (0 and 2 equidistant) break by index
        assert_eq!(nbr.row(3), &[3, 2]);
    }

    #[test]
    fn knn_k1_is_self_only() {
        let q = points(&[(0.0, 0.0), (5.0, 5.0), (9.0, 1.0)]);
        let nbr = knn(&q, 1).unwrap();
        for i in 0..3 {
            assert_eq!(nbr.row(i), &[i]);
        }
    }

    #[test]
    fn knn_duplicates_and_padding_are_deterministic() {
        let q = points(&[(1.0, 1.0), (1.0, 1.0), (1.0, 1.0)]);
        let nbr = knn(&q, 2).unwrap();
        assert_eq!(nbr.row(2), &[2, 0]); // closest other: lowest index
        let padded = knn(&q, 5).unwrap();
        assert_eq!(padded.row(0), &[0, 1, 2, 0, 0]); // self-padding beyond N
        let again = knn(&q, 5).unwrap();
        assert_eq!(padded.indices, again.indices);
    }

    struct Setup {
        cfg: RefinerConfig,
        params: crate::params::ModelParams<f32>,
        queries: Tensor<f32>,
        token_width: usize,
        t_len: usize,
        n: usize,
    }

    fn setup(mode: ReasoningMode, n: usize, k: usize, seed: u64) -> Setup {
        let cfg = RefinerConfig {
            neighbors: k,
            blocks: 2,
            heads: 2,
            mode,
            ..Default::default()
        };
        let token_width = 12;
        let mut specs = ParamSpecs::default();
        cfg.declare_params(token_width, &mut specs);
        let mut params = specs.build::<f32>(seed);
        // the head is zero-initialized; give it life for probing
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        let w = cfg.resolved_width(token_width);
        params
            .set(
                "refiner.head.w",
                Tensor::from_fn(&[w, 2], |_| rng.random_range(-0.3..0.3)),
            )
            .unwrap();
        let queries = Tensor::from_fn(&[n, 2], |_| rng.random_range(4.0..28.0));
        Setup {
            cfg,
            params,
            queries,
            token_width,
            t_len: 5,
            n,
        }
    }

    fn run_delta(s: &Setup, tokens: &Tensor<f32>, positions: &Tensor<f32>, nbr: &NeighborIndex) -> Tensor<f32> {
        let mut tape = Tape::new();
        let bound = s.params.bind(&mut tape, false);
        let tok = tape.constant(tokens.clone());
        let pos = tape.constant(positions.clone());
        let delta = refine_iteration(&mut tape, tok, pos, &s.queries, nbr, &s.cfg, &bound).unwrap();
        tape.value(delta).clone()
    }

    fn rand_tokens(s: &Setup, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = Tensor::from_fn(&[s.t_len, s.n, s.token_width], |_| rng.random_range(-1.0..1.0));
        let positions = Tensor::from_fn(&[s.t_len, s.n, 2], |i| {
            s.queries.data()[i % (s.n * 2)] + rng.random_range(-2.0..2.0)
        });
        (tokens, positions)
    }

    #[test]
    fn delta_has_trajectory_shape() {
        let s = setup(ReasoningMode::Knp, 6, 3, 1);
        let (tokens, positions) = rand_tokens(&s, 2);
        let nbr = knn(&s.queries, 3).unwrap();
        let delta = run_delta(&s, &tokens, &positions, &nbr);
        assert_eq!(delta.shape(), &[5, 6, 2]);
        assert!(delta.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zeroing_non_neighbor_tokens_leaves_update_unchanged() {
        for seed in 0..4 {
            let s = setup(ReasoningMode::Knp, 7, 3, 10 + seed);
            let (tokens, positions) = rand_tokens(&s, 20 + seed);
            let nbr = knn(&s.queries, 3).unwrap();
            let target = (seed as usize) % s.n;
            let keep: Vec<usize> = nbr.row(target).to_vec();
            let masked = Tensor::from_fn(&[s.t_len, s.n, s.token_width], |i| {
                let n = (i / s.token_width) % s.n;
                if keep.contains(&n) {
                    tokens.data()[i]
                } else {
                    0.0
                }
            });
            let full = run_delta(&s, &tokens, &positions, &nbr);
            let part = run_delta(&s, &masked, &positions, &nbr);
            for t in 0..s.t_len {
                for c in 0..2 {
                    let a = full.at(&[t, target, c]);
                    let b = part.at(&[t, target, c]);
                    assert!(
                        (a - b).abs() <= 1e-6,
                        "seed {seed} t={t} c={c}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn knp_with_k_equal_n_matches_full_joint() {
        let n = 5;
        let s_knp = setup(ReasoningMode::Knp, n, n, 33);
        let mut s_full = setup(ReasoningMode::FullJoint, n, n, 33);
        // identical parameters: cross-mode configs declare the same names
        s_full.params = s_knp.params.clone();
        s_full.queries = s_knp.queries.clone();
        let (tokens, positions) = rand_tokens(&s_knp, 44);
        let nbr = knn(&s_knp.queries, n).unwrap();
        let a = run_delta(&s_knp, &tokens, &positions, &nbr);
        let b = run_delta(&s_full, &tokens, &positions, &nbr);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn cross_attention_mode_is_shape_compatible() {
        let s = setup(ReasoningMode::CrossAttention, 4, 2, 5);
        let (tokens, positions) = rand_tokens(&s, 6);
        let nbr = knn(&s.queries, 2).unwrap();
        let delta = run_delta(&s, &tokens, &positions, &nbr);
        assert_eq!(delta.shape(), &[5, 4, 2]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn relabeling_points_permutes_updates() {
        let s = setup(ReasoningMode::Knp, 5, 3, 8);
        let (tokens, positions) = rand_tokens(&s, 9);
        let nbr = knn(&s.queries, 3).unwrap();
        let base = run_delta(&s, &tokens, &positions, &nbr);

        // permute points everywhere, including the neighbor table
        let perm = [3usize, 0, 4, 1, 2]; // new index -> old index
        let mut s2 = setup(ReasoningMode::Knp, 5, 3, 8);
        s2.params = s.params.clone();
        s2.queries = Tensor::from_fn(&[5, 2], |i| s.queries.data()[perm[i / 2] * 2 + i % 2]);
        let tokens2 = Tensor::from_fn(&[s.t_len, 5, s.token_width], |i| {
            let w = s.token_width;
            let n = (i / w) % 5;
            let t = i / (w * 5);
            tokens.data()[(t * 5 + perm[n]) * w + i % w]
        });
        let positions2 = Tensor::from_fn(&[s.t_len, 5, 2], |i| {
            let n = (i / 2) % 5;
            let t = i / (2 * 5);
            positions.data()[(t * 5 + perm[n]) * 2 + i % 2]
        });
        let nbr2 = knn(&s2.queries, 3).unwrap();
        let got = run_delta(&s2, &tokens2, &positions2, &nbr2);
        for t in 0..s.t_len {
            for new_i in 0..5 {
                for c in 0..2 {
                    let a = got.at(&[t, new_i, c]);
                    let b = base.at(&[t, perm[new_i], c]);
                    assert!((a - b).abs() < 1e-6, "t={t} i={new_i}: {a} vs {b}");
                }
            }
        }
    }
}
