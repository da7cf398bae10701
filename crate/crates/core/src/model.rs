//! Full tracking model: feature pyramid, correlation tokens, iterative
//! refinement.

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_pyramid, BackboneConfig};
use crate::correlation::{build_tokens, CorrConfig};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelParams, ParamSpecs};
use crate::refiner::{knn, refine_iteration, RefinerConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::trajectory::TrajectoryState;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub correlation: CorrConfig,
    pub refiner: RefinerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.correlation.validate()?;
        self.refiner.validate(self.correlation.token_width())
    }

    pub fn declare_params(&self, input_channels: usize) -> ParamSpecs {
        let mut specs = ParamSpecs::default();
        self.backbone.declare_params(input_channels, &mut specs);
        self.correlation.declare_params(&mut specs);
        self.refiner
            .declare_params(self.correlation.token_width(), &mut specs);
        specs
    }

    pub fn init_params<S: Scalar>(&self, input_channels: usize, seed: u64) -> ModelParams<S> {
        self.declare_params(input_channels).build(seed)
    }
}

/// All trajectory estimates of one tracking pass, on the tape.
/// `states[0]` is the broadcast initialization; `states[i]` for i >= 1 is the
/// estimate after iteration i, with `states[i] = states[i-1] + deltas[i-1]`.
pub struct TrackStates {
    pub states: Vec<Var>,
    pub deltas: Vec<Var>,
}

impl TrackStates {
    pub fn final_state(&self) -> Var {
        *self.states.last().unwrap()
    }

    pub fn iterations(&self) -> usize {
        self.deltas.len()
    }
}

/// Run the tracking pipeline on a tape. The video is [T,H,W,C], queries are
/// [N,2] (x, y) pixel positions on `query_frame`.
pub fn track_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    video: Var,
    queries: &Tensor<S>,
    query_frame: usize,
    cfg: &ModelConfig,
    params: &BoundParams,
) -> Result<TrackStates> {
    cfg.validate()?;
    let vshape = tape.shape(video).to_vec();
    if vshape.len() != 4 {
        return Err(Error::BadOperand {
            op: "track",
            shape: vshape,
            reason: "video must be [T,H,W,C]".into(),
        });
    }
    let (t_len, h, w) = (vshape[0], vshape[1], vshape[2]);
    if t_len < 1 {
        return Err(Error::InvalidInput("video has no frames".into()));
    }
    if query_frame >= t_len {
        return Err(Error::InvalidInput(format!(
            "query frame {query_frame} outside 0..{t_len}"
        )));
    }
    if queries.rank() != 2 || queries.shape()[1] != 2 {
        return Err(Error::BadOperand {
            op: "track",
            shape: queries.shape().to_vec(),
            reason: "queries must be [N,2]".into(),
        });
    }
    let n = queries.shape()[0];
    if n == 0 {
        return Err(Error::InvalidInput("empty query set".into()));
    }
    for i in 0..n {
        let x = queries.at(&[i, 0]).to_f64();
        let y = queries.at(&[i, 1]).to_f64();
        if !(x.is_finite() && y.is_finite())
            || !(0.0..=(w as f64 - 1.0)).contains(&x)
            || !(0.0..=(h as f64 - 1.0)).contains(&y)
        {
            return Err(Error::InvalidInput(format!(
                "query {i} at ({x}, {y}) outside the {w}x{h} frame"
            )));
        }
    }

    let pyramid = extract_pyramid(tape, video, &cfg.backbone, params)?;
    let queries_var = tape.constant(queries.clone());
    let mut neighbors = knn(queries, cfg.refiner.neighbors)?;

    let init = Tensor::from_fn(&[t_len, n, 2], |i| queries.data()[i % (n * 2)]);
    let mut states = vec![tape.constant(init)];
    let mut deltas = Vec::with_capacity(cfg.refiner.iterations);
    for iter in 0..cfg.refiner.iterations {
        let current = *states.last().unwrap();
        if cfg.refiner.refresh_neighbors && iter > 0 {
            // re-derive neighborhoods from the current query-frame estimate
            let frame = tape.value(current).clone();
            let now = Tensor::from_fn(&[n, 2], |i| frame.at(&[query_frame, i / 2, i % 2]));
            neighbors = knn(&now, cfg.refiner.neighbors)?;
        }
        let tokens = build_tokens(
            tape,
            &pyramid,
            queries_var,
            query_frame,
            current,
            &cfg.correlation,
            params,
        )?;
        let delta = refine_iteration(
            tape,
            tokens,
            current,
            queries,
            &neighbors,
            &cfg.refiner,
            params,
        )?;
        let next = tape.add(current, delta)?;
        deltas.push(delta);
        states.push(next);
    }
    Ok(TrackStates { states, deltas })
}

/// A config + parameter bundle with a plain inference entry point.
#[derive(Debug, Clone)]
pub struct Tracker<S: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
    pub input_channels: usize,
}

impl<S: Scalar> Tracker<S> {
    pub fn new(config: ModelConfig, input_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config.init_params(input_channels, seed);
        Ok(Self {
            config,
            params,
            input_channels,
        })
    }

    /// Track queries through a video; returns one state per refinement
    /// iteration (the broadcast initialization first).
    pub fn track(
        &self,
        video: &Tensor<S>,
        queries: &Tensor<S>,
        query_frame: usize,
    ) -> Result<Vec<TrajectoryState<S>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let v = tape.constant(video.clone());
        let out = track_on_tape(&mut tape, v, queries, query_frame, &self.config, &bound)?;
        Ok(out
            .states
            .iter()
            .map(|&s| TrajectoryState {
                positions: tape.value(s).clone(),
                query_frame,
                queries: queries.clone(),
            })
            .collect())
    }

    /// Final trajectory estimate only.
    pub fn track_final(
        &self,
        video: &Tensor<S>,
        queries: &Tensor<S>,
        query_frame: usize,
    ) -> Result<TrajectoryState<S>> {
        Ok(self.track(video, queries, query_frame)?.pop().unwrap())
    }
}

/// A compact configuration for tests and micro benchmarks.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: [4, 6, 8, 8],
            strides: [2, 4, 8, 8],
            ..Default::default()
        },
        correlation: CorrConfig {
            window: 3,
            token_dim: 4,
        },
        refiner: RefinerConfig {
            neighbors: 2,
            iterations: 2,
            blocks: 1,
            heads: 2,
            ..Default::default()
        },
    }
}
