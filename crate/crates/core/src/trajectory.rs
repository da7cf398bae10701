//! Point trajectories over a cine sequence.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Estimated or reference point positions: `positions` is [T,N,2] with the
/// last axis holding (x, y) in input-pixel coordinates.
#[derive(Debug, Clone)]
pub struct TrajectoryState<S: Scalar> {
    pub positions: Tensor<S>,
    /// Frame the query points were selected on.
    pub query_frame: usize,
    /// The query points themselves, [N,2] (x, y).
    pub queries: Tensor<S>,
}

impl<S: Scalar> TrajectoryState<S> {
    /// Iteration-0 state: query positions broadcast to every frame.
    pub fn broadcast(queries: &Tensor<S>, frames: usize, query_frame: usize) -> Result<Self> {
        if queries.rank() != 2 || queries.shape()[1] != 2 {
            return Err(Error::BadOperand {
                op: "trajectory",
                shape: queries.shape().to_vec(),
                reason: "queries must be [N,2]".into(),
            });
        }
        if query_frame >= frames {
            return Err(Error::InvalidInput(format!(
                "query frame {query_frame} outside 0..{frames}"
            )));
        }
        let n = queries.shape()[0];
        let positions = Tensor::from_fn(&[frames, n, 2], |i| queries.data()[i % (n * 2)]);
        Ok(Self {
            positions,
            query_frame,
            queries: queries.clone(),
        })
    }

    pub fn frames(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn x(&self, t: usize, i: usize) -> S {
        self.positions.at(&[t, i, 0])
    }

    pub fn y(&self, t: usize, i: usize) -> S {
        self.positions.at(&[t, i, 1])
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|v| v.is_finite())
    }

    /// Mean L1 distance between the query-frame row and the query points.
    /// The refiner does not pin the query frame, so this measures how far the
    /// refinement drifted from the anchor (a diagnostic, not an error).
    pub fn query_frame_drift(&self) -> f64 {
        let n = self.points();
        let t = self.query_frame;
        let mut total = 0.0;
        for i in 0..n {
            total += (self.x(t, i) - self.queries.at(&[i, 0])).to_f64().abs()
                + (self.y(t, i) - self.queries.at(&[i, 1])).to_f64().abs();
        }
        total / n as f64
    }

    pub fn cast<T: Scalar>(&self) -> TrajectoryState<T> {
        TrajectoryState {
            positions: self.positions.cast(),
            query_frame: self.query_frame,
            queries: self.queries.cast(),
        }
    }
}
