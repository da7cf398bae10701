//! Reverse-mode differentiation tape.
//!
//! Operations append nodes in execution order; [`Tape::backward`] walks them
//! in exact reverse order, so gradients are deterministic. Gradient buffers
//! are only materialized for nodes that can reach a `requires_grad` leaf.
//!
//! A [`Var`] indexes into the tape that created it; mixing vars across tapes
//! is a logic error and is caught by shape/bounds checks at best.

use std::sync::Arc;

use super::kernels::{self, ConvDims, CorrDims, MhaDims};
use super::{into_tensor, numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Abs(Var),
    AddLastDim(Var, Var),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    SoftmaxLast(Var),
    LayerNormLast {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    StandardizeChannels {
        x: Var,
        inv_std: Vec<S>,
    },
    BilinearSample {
        map: Var,
        coords: Var,
    },
    TimeShift {
        x: Var,
        back: usize,
        fwd: usize,
    },
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatAxis0(Vec<Var>),
    SliceAxis0 {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Transpose01(Var),
    GatherPoints {
        x: Var,
        idx: Arc<Vec<usize>>,
        k: usize,
    },
    Mha {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    CosineCorr4d {
        q: Var,
        f: Var,
        qn: Vec<S>,
        fnn: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], addressable by the recorded vars.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `v`; zeros if the var was unreachable.
    pub fn get(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record an input. `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ------------------------------------------------------------ elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let needs = self.needs(a) || self.needs(b);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![S::ZERO; da.len()];
        exec::fill_indexed(&mut out, |i| da[i] + db[i]);
        let t = into_tensor(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let needs = self.needs(a) || self.needs(b);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![S::ZERO; da.len()];
        exec::fill_indexed(&mut out, |i| da[i] - db[i]);
        let t = into_tensor(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let needs = self.needs(a) || self.needs(b);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![S::ZERO; da.len()];
        exec::fill_indexed(&mut out, |i| da[i] * db[i]);
        let t = into_tensor(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let needs = self.needs(a);
        let t = self.nodes[a.0].value.map(|v| v * factor);
        self.push(t, Op::Scale(a, factor), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let needs = self.needs(a);
        let t = self.nodes[a.0].value.map(|v| v.maximum(S::ZERO));
        self.push(t, Op::Relu(a), needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let needs = self.needs(a);
        let t = self.nodes[a.0].value.map(|v| v.abs());
        self.push(t, Op::Abs(a), needs)
    }

    /// Broadcast-add a vector over the last dimension (bias add).
    pub fn add_lastdim(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_lastdim",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let needs = self.needs(a) || self.needs(bias);
        let (da, db) = (self.data(a), self.data(bias));
        let mut out = vec![S::ZERO; da.len()];
        exec::fill_indexed(&mut out, |i| da[i] + db[i % d]);
        let t = into_tensor(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::AddLastDim(a, bias), needs))
    }

    // ------------------------------------------------------------ linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::InnerExtentMismatch {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let needs = self.needs(a) || self.needs(b);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, p);
        let t = into_tensor(vec![m, p], out);
        Ok(self.push(t, Op::Matmul(a, b), needs))
    }

    /// Zero-padded "same" convolution; input [T,H,W,Cin] (or [H,W,Cin]),
    /// kernel [kh,kw,Cin,Cout] with odd kh, kw.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 4 || sw[0].is_multiple_of(2) || sw[1].is_multiple_of(2) {
            return Err(Error::BadOperand {
                op: "conv2d",
                shape: sw,
                reason: "kernel must be [kh,kw,cin,cout] with odd kh, kw".into(),
            });
        }
        let sx = self.shape(x).to_vec();
        let (rank3, t, h, wd, cin) = match sx.len() {
            3 => (true, 1, sx[0], sx[1], sx[2]),
            4 => (false, sx[0], sx[1], sx[2], sx[3]),
            _ => {
                return Err(Error::BadOperand {
                    op: "conv2d",
                    shape: sx,
                    reason: "input must be [H,W,Cin] or [T,H,W,Cin]".into(),
                })
            }
        };
        if cin != sw[2] {
            return Err(Error::BadOperand {
                op: "conv2d",
                shape: sx,
                reason: format!("input channels {} != kernel channels {}", cin, sw[2]),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
        }
        let dims = ConvDims {
            t,
            h,
            w: wd,
            cin,
            kh: sw[0],
            kw: sw[1],
            cout: sw[3],
            stride,
        };
        let needs = self.needs(x) || self.needs(w);
        let out = kernels::conv2d(self.data(x), self.data(w), &dims);
        let shape = if rank3 {
            vec![dims.out_h(), dims.out_w(), dims.cout]
        } else {
            vec![t, dims.out_h(), dims.out_w(), dims.cout]
        };
        let t = into_tensor(shape, out);
        Ok(self.push(t, Op::Conv2d { x, w, stride }, needs))
    }

    // ------------------------------------------------------------ normalization

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::BadOperand {
                op: "softmax_lastdim",
                shape: self.shape(a).to_vec(),
                reason: "last extent must be >= 1".into(),
            });
        }
        let needs = self.needs(a);
        let out = kernels::softmax_lastdim(self.data(a), d);
        let t = into_tensor(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::SoftmaxLast(a), needs))
    }

    pub fn layer_norm_lastdim(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::BadOperand {
                op: "layer_norm_lastdim",
                shape: self.shape(x).to_vec(),
                reason: format!(
                    "gain {:?} and bias {:?} must both be [{}]",
                    self.shape(gain),
                    self.shape(bias),
                    d
                ),
            });
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let (out, xhat, inv_std) =
            kernels::layer_norm_lastdim(self.data(x), self.data(gain), self.data(bias), d);
        let t = into_tensor(self.shape(x).to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNormLast {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Standardize each channel (last axis) over all leading positions.
    pub fn standardize_channels(&mut self, x: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::BadOperand {
                op: "standardize_channels",
                shape: self.shape(x).to_vec(),
                reason: "last extent must be >= 1".into(),
            });
        }
        let needs = self.needs(x);
        let (out, inv_std) = kernels::standardize_channels(self.data(x), c);
        let t = into_tensor(self.shape(x).to_vec(), out);
        Ok(self.push(t, Op::StandardizeChannels { x, inv_std }, needs))
    }

    // ------------------------------------------------------------ sampling

    /// Bilinear sampling of `map` [H,W,D] at `coords` [P,2] (row, col);
    /// cells outside the grid contribute zero. Differentiable in both inputs.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let sm = self.shape(map).to_vec();
        let sc = self.shape(coords).to_vec();
        if sm.len() != 3 {
            return Err(Error::BadOperand {
                op: "bilinear_sample",
                shape: sm,
                reason: "map must be [H,W,D]".into(),
            });
        }
        if sc.len() != 2 || sc[1] != 2 {
            return Err(Error::BadOperand {
                op: "bilinear_sample",
                shape: sc,
                reason: "coords must be [P,2]".into(),
            });
        }
        let needs = self.needs(map) || self.needs(coords);
        let out = kernels::bilinear_sample(self.data(map), self.data(coords), sm[0], sm[1], sm[2]);
        let t = into_tensor(vec![sc[0], sm[2]], out);
        Ok(self.push(t, Op::BilinearSample { map, coords }, needs))
    }

    // ------------------------------------------------------------ temporal

    /// Shift the first `back` channels one frame back in time (out[t] = x[t+1])
    /// and the next `fwd` channels one frame forward (out[t] = x[t-1]);
    /// vacated boundary frames are zero-filled. Input [T,H,W,C].
    pub fn time_shift(&mut self, x: Var, back: usize, fwd: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::BadOperand {
                op: "time_shift",
                shape: sx,
                reason: "input must be [T,H,W,C]".into(),
            });
        }
        let c = sx[3];
        if back + fwd > c {
            return Err(Error::BadOperand {
                op: "time_shift",
                shape: sx,
                reason: format!("shifted channels {} exceed C={}", back + fwd, c),
            });
        }
        let needs = self.needs(x);
        let (t_len, plane) = (sx[0], sx[1] * sx[2]);
        let data = self.data(x);
        let mut out = vec![S::ZERO; data.len()];
        exec::for_each_chunk_mut_cheap(&mut out, plane * c, |t, frame| {
            for p in 0..plane {
                let dst = &mut frame[p * c..(p + 1) * c];
                for (ch, o) in dst.iter_mut().enumerate() {
                    let src_t = if ch < back {
                        t as isize + 1
                    } else if ch < back + fwd {
                        t as isize - 1
                    } else {
                        t as isize
                    };
                    *o = if src_t < 0 || src_t >= t_len as isize {
                        S::ZERO
                    } else {
                        data[(src_t as usize * plane + p) * c + ch]
                    };
                }
            }
        });
        let t = into_tensor(sx, out);
        Ok(self.push(t, Op::TimeShift { x, back, fwd }, needs))
    }

    // ------------------------------------------------------------ structure

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidConfig("concat of zero tensors".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp[..sp.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            widths.push(*sp.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = vec![S::ZERO; rows * total];
        {
            let datas: Vec<&[S]> = parts.iter().map(|&p| self.data(p)).collect();
            exec::for_each_chunk_mut_cheap(&mut out, total, |r, row| {
                let mut off = 0;
                for (src, &wd) in datas.iter().zip(&widths) {
                    row[off..off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
                    off += wd;
                }
            });
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let mut shape = lead;
        shape.push(total);
        let t = into_tensor(shape, out);
        Ok(self.push(t, Op::ConcatLast(parts.to_vec()), needs))
    }

    pub fn slice_lastdim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if start + len > d {
            return Err(Error::BadOperand {
                op: "slice_lastdim",
                shape: sx,
                reason: format!("slice {}..{} out of width {}", start, start + len, d),
            });
        }
        let needs = self.needs(x);
        let rows = numel(&sx) / d;
        let data = self.data(x);
        let mut out = vec![S::ZERO; rows * len];
        exec::for_each_chunk_mut_cheap(&mut out, len, |r, row| {
            row.copy_from_slice(&data[r * d + start..r * d + start + len]);
        });
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        let t = into_tensor(shape, out);
        Ok(self.push(t, Op::SliceLast { x, start, len }, needs))
    }

    /// Concatenate along axis 0; trailing shapes must agree.
    pub fn concat_axis0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidConfig("concat of zero tensors".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_axis0",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            lead += sp[0];
        }
        let mut out = Vec::with_capacity(lead * numel(&tail));
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = into_tensor(shape, out);
        Ok(self.push(t, Op::ConcatAxis0(parts.to_vec()), needs))
    }

    /// Contiguous slice along axis 0.
    pub fn slice_axis0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || start + len > sx[0] {
            return Err(Error::BadOperand {
                op: "slice_axis0",
                shape: sx,
                reason: format!("slice {}..{} out of extent", start, start + len),
            });
        }
        let tail: usize = sx[1..].iter().product();
        let out = self.data(x)[start * tail..(start + len) * tail].to_vec();
        let mut shape = sx;
        shape[0] = len;
        let needs = self.needs(x);
        let t = into_tensor(shape, out);
        Ok(self.push(t, Op::SliceAxis0 { x, start, len }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Swap the first two axes of a rank >= 2 tensor.
    pub fn transpose01(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::BadOperand {
                op: "transpose01",
                shape: sx,
                reason: "needs rank >= 2".into(),
            });
        }
        let (a, b) = (sx[0], sx[1]);
        let rest: usize = sx[2..].iter().product();
        let data = self.data(x);
        let mut out = vec![S::ZERO; data.len()];
        exec::for_each_chunk_mut_cheap(&mut out, rest, |ba, chunk| {
            let (bi, ai) = (ba / a, ba % a);
            let src = (ai * b + bi) * rest;
            chunk.copy_from_slice(&data[src..src + rest]);
        });
        let mut shape = sx;
        shape.swap(0, 1);
        let needs = self.needs(x);
        let t = into_tensor(shape, out);
        Ok(self.push(t, Op::Transpose01(x), needs))
    }

    /// Gather rows along axis 1: x [T,N,W], idx row-major [N,K] of point
    /// indices, producing [T,N,K,W].
    pub fn gather_points(&mut self, x: Var, idx: Arc<Vec<usize>>, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::BadOperand {
                op: "gather_points",
                shape: sx,
                reason: "input must be [T,N,W]".into(),
            });
        }
        let (t_len, n, w) = (sx[0], sx[1], sx[2]);
        if idx.len() != n * k || idx.iter().any(|&i| i >= n) {
            return Err(Error::BadOperand {
                op: "gather_points",
                shape: sx,
                reason: format!("index table must be [{}x{}] with entries < {}", n, k, n),
            });
        }
        let needs = self.needs(x);
        let data = self.data(x);
        let mut out = vec![S::ZERO; t_len * n * k * w];
        exec::for_each_chunk_mut_cheap(&mut out, n * k * w, |t, frame| {
            for nn in 0..n {
                for kk in 0..k {
                    let src = (t * n + idx[nn * k + kk]) * w;
                    let dst = (nn * k + kk) * w;
                    frame[dst..dst + w].copy_from_slice(&data[src..src + w]);
                }
            }
        });
        let tshape = vec![t_len, n, k, w];
        let t = into_tensor(tshape, out);
        Ok(self.push(t, Op::GatherPoints { x, idx, k }, needs))
    }

    // ------------------------------------------------------------ attention

    /// Multi-head attention: q [B,Lq,W], k/v [B,Lk,W] -> [B,Lq,W].
    pub fn mha(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::ShapeMismatch {
                op: "mha",
                lhs: sq,
                rhs: sk,
            });
        }
        if heads == 0 || sq[2] % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "mha width {} not divisible by heads {}",
                sq[2], heads
            )));
        }
        let dims = MhaDims {
            batch: sq[0],
            lq: sq[1],
            lk: sk[1],
            width: sq[2],
            heads,
        };
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let (out, probs) = kernels::mha_forward(self.data(q), self.data(k), self.data(v), &dims);
        let probs = if needs { probs } else { Vec::new() };
        let t = into_tensor(sq, out);
        Ok(self.push(
            t,
            Op::Mha {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    // ------------------------------------------------------------ correlation

    /// All-pair cosine similarity between query windows [N,r,r,d] and track
    /// windows [T,N,r,r,d], producing [T,N,r,r,r,r].
    pub fn cosine_corr4d(&mut self, q: Var, f: Var) -> Result<Var> {
        let (sq, sf) = (self.shape(q).to_vec(), self.shape(f).to_vec());
        if sq.len() != 4 || sf.len() != 5 || sf[1..] != sq[..] || sq[1] != sq[2] {
            return Err(Error::ShapeMismatch {
                op: "cosine_corr4d",
                lhs: sq,
                rhs: sf,
            });
        }
        let (n, r, d) = (sq[0], sq[1], sq[3]);
        let dims = CorrDims {
            t: sf[0],
            n,
            r2: r * r,
            d,
        };
        let needs = self.needs(q) || self.needs(f);
        let (out, qn, fnn) = kernels::cosine_corr4d(self.data(q), self.data(f), &dims);
        let t = into_tensor(vec![sf[0], n, r, r, r, r], out);
        Ok(self.push(t, Op::CosineCorr4d { q, f, qn, fnn }, needs))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let needs = self.needs(a);
        let mut acc = S::ZERO;
        for &v in self.data(a) {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let needs = self.needs(a);
        let n = self.data(a).len();
        let mut acc = S::ZERO;
        for &v in self.data(a) {
            acc += v;
        }
        let t = Tensor::scalar(acc * S::from_f64(1.0 / n as f64));
        self.push(t, Op::Mean(a), needs)
    }

    // ------------------------------------------------------------ backward

    /// Run the reverse pass from a scalar loss. Consumes the tape's ability
    /// to run again; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidInput("backward on an empty tape".into()));
        }
        if !self.shape(loss).is_empty() {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g); // keep leaf gradients for the caller
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|v| into_tensor(self.nodes[i].value.shape().to_vec(), v)))
            .collect();
        Ok(Gradients { grads })
    }

    fn add_into(grads: &mut [Option<Vec<S>>], target: usize, len: usize, f: impl Fn(&mut [S])) {
        let slot = grads[target].get_or_insert_with(|| vec![S::ZERO; len]);
        f(slot);
    }

    fn accumulate_inputs(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        Self::add_into(grads, v.0, g.len(), |s| {
                            for (o, &gv) in s.iter_mut().zip(g) {
                                *o += gv;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::add_into(grads, a.0, g.len(), |s| {
                        for (o, &gv) in s.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::add_into(grads, b.0, g.len(), |s| {
                        for (o, &gv) in s.iter_mut().zip(g) {
                            *o -= gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    Self::add_into(grads, a.0, g.len(), |s| {
                        for ((o, &gv), &bv) in s.iter_mut().zip(g).zip(db) {
                            *o += gv * bv;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::add_into(grads, b.0, g.len(), |s| {
                        for ((o, &gv), &av) in s.iter_mut().zip(g).zip(da) {
                            *o += gv * av;
                        }
                    });
                }
            }
            Op::Scale(a, factor) => {
                if self.needs(*a) {
                    let f = *factor;
                    Self::add_into(grads, a.0, g.len(), |s| {
                        for (o, &gv) in s.iter_mut().zip(g) {
                            *o += gv * f;
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let da = self.data(*a);
                    Self::add_into(grads, a.0, g.len(), |s| {
                        for ((o, &gv), &av) in s.iter_mut().zip(g).zip(da) {
                            if av > S::ZERO {
                                *o += gv;
                            }
                        }
                    });
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let da = self.data(*a);
                    Self::add_into(grads, a.0, g.len(), |s| {
                        for ((o, &gv), &av) in s.iter_mut().zip(g).zip(da) {
                            if av > S::ZERO {
                                *o += gv;
                            } else if av < S::ZERO {
                                *o -= gv;
                            }
                        }
                    });
                }
            }
            Op::AddLastDim(a, bias) => {
                if self.needs(*a) {
                    Self::add_into(grads, a.0, g.len(), |s| {
                        for (o, &gv) in s.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
                if self.needs(*bias) {
                    let d = self.data(*bias).len();
                    Self::add_into(grads, bias.0, d, |s| {
                        for (i, &gv) in g.iter().enumerate() {
                            s[i % d] += gv;
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let da = kernels::matmul_nt(g, self.data(*b), m, p, k);
                    Self::add_into(grads, a.0, m * k, |s| {
                        for (o, &v) in s.iter_mut().zip(&da) {
                            *o += v;
                        }
                    });
                }
                if self.needs(*b) {
                    let db = kernels::matmul_tn(self.data(*a), g, m, k, p);
                    Self::add_into(grads, b.0, k * p, |s| {
                        for (o, &v) in s.iter_mut().zip(&db) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Conv2d { x, w, stride } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (t, h, wd, cin) = if sx.len() == 3 {
                    (1, sx[0], sx[1], sx[2])
                } else {
                    (sx[0], sx[1], sx[2], sx[3])
                };
                let dims = ConvDims {
                    t,
                    h,
                    w: wd,
                    cin,
                    kh: sw[0],
                    kw: sw[1],
                    cout: sw[3],
                    stride: *stride,
                };
                if self.needs(*x) {
                    let dx = kernels::conv2d_backward_x(g, self.data(*w), &dims);
                    Self::add_into(grads, x.0, dx.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(&dx) {
                            *o += v;
                        }
                    });
                }
                if self.needs(*w) {
                    let dw = kernels::conv2d_backward_w(self.data(*x), g, &dims);
                    Self::add_into(grads, w.0, dw.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(&dw) {
                            *o += v;
                        }
                    });
                }
            }
            Op::SoftmaxLast(a) => {
                if self.needs(*a) {
                    let d = *self.shape(i_var(i)).last().unwrap();
                    let dx = kernels::softmax_backward(g, self.data(i_var(i)), d);
                    Self::add_into(grads, a.0, dx.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(&dx) {
                            *o += v;
                        }
                    });
                }
            }
            Op::LayerNormLast {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.data(*gain).len();
                let (dx, dgain, dbias) =
                    kernels::layer_norm_backward(g, xhat, inv_std, self.data(*gain), d);
                if self.needs(*x) {
                    Self::add_into(grads, x.0, dx.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(&dx) {
                            *o += v;
                        }
                    });
                }
                if self.needs(*gain) {
                    Self::add_into(grads, gain.0, d, |s| {
                        for (o, &v) in s.iter_mut().zip(&dgain) {
                            *o += v;
                        }
                    });
                }
                if self.needs(*bias) {
                    Self::add_into(grads, bias.0, d, |s| {
                        for (o, &v) in s.iter_mut().zip(&dbias) {
                            *o += v;
                        }
                    });
                }
            }
            Op::StandardizeChannels { x, inv_std } => {
                if self.needs(*x) {
                    let c = inv_std.len();
                    let dx = kernels::standardize_backward(g, self.data(i_var(i)), inv_std, c);
                    Self::add_into(grads, x.0, dx.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(&dx) {
                            *o += v;
                        }
                    });
                }
            }
            Op::BilinearSample { map, coords } => {
                let sm = self.shape(*map);
                let (h, w, d) = (sm[0], sm[1], sm[2]);
                let (dmap, dcoords) = kernels::bilinear_backward(
                    g,
                    self.data(*map),
                    self.data(*coords),
                    h,
                    w,
                    d,
                    self.needs(*map),
                    self.needs(*coords),
                );
                if self.needs(*map) {
                    Self::add_into(grads, map.0, dmap.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(&dmap) {
                            *o += v;
                        }
                    });
                }
                if self.needs(*coords) {
                    Self::add_into(grads, coords.0, dcoords.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(&dcoords) {
                            *o += v;
                        }
                    });
                }
            }
            Op::TimeShift { x, back, fwd } => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let (t_len, plane, c) = (sx[0], sx[1] * sx[2], sx[3]);
                    let (back, fwd) = (*back, *fwd);
                    Self::add_into(grads, x.0, g.len(), |s| {
                        // inverse shift: gradient of out[t]=x[t+1] scatters to x[t+1]
                        for t in 0..t_len {
                            for p in 0..plane {
                                for ch in 0..c {
                                    let src_t = if ch < back {
                                        t as isize + 1
                                    } else if ch < back + fwd {
                                        t as isize - 1
                                    } else {
                                        t as isize
                                    };
                                    if src_t < 0 || src_t >= t_len as isize {
                                        continue;
                                    }
                                    s[(src_t as usize * plane + p) * c + ch] +=
                                        g[(t * plane + p) * c + ch];
                                }
                            }
                        }
                    });
                }
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.shape(p).last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    if self.needs(p) {
                        let start = off;
                        Self::add_into(grads, p.0, rows * wd, |s| {
                            for r in 0..rows {
                                for j in 0..wd {
                                    s[r * wd + j] += g[r * total + start + j];
                                }
                            }
                        });
                    }
                    off += wd;
                }
            }
            Op::ConcatAxis0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    if self.needs(p) {
                        let start = off;
                        Self::add_into(grads, p.0, len, |s| {
                            for (o, &gv) in s.iter_mut().zip(&g[start..start + len]) {
                                *o += gv;
                            }
                        });
                    }
                    off += len;
                }
            }
            Op::SliceAxis0 { x, start, len } => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let tail: usize = sx[1..].iter().product();
                    let total = sx[0] * tail;
                    let off = start * tail;
                    let _ = len;
                    Self::add_into(grads, x.0, total, |s| {
                        for (o, &gv) in s[off..off + g.len()].iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
            }
            Op::SliceLast { x, start, len } => {
                if self.needs(*x) {
                    let d = *self.shape(*x).last().unwrap();
                    let rows = g.len() / len;
                    let (start, len) = (*start, *len);
                    Self::add_into(grads, x.0, rows * d, |s| {
                        for r in 0..rows {
                            for j in 0..len {
                                s[r * d + start + j] += g[r * len + j];
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    Self::add_into(grads, x.0, g.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(g) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Transpose01(x) => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let (a, b) = (sx[0], sx[1]);
                    let rest: usize = sx[2..].iter().product();
                    Self::add_into(grads, x.0, g.len(), |s| {
                        for ai in 0..a {
                            for bi in 0..b {
                                let src = (bi * a + ai) * rest;
                                let dst = (ai * b + bi) * rest;
                                for j in 0..rest {
                                    s[dst + j] += g[src + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::GatherPoints { x, idx, k } => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let (t_len, n, w) = (sx[0], sx[1], sx[2]);
                    let k = *k;
                    let idx = Arc::clone(idx);
                    Self::add_into(grads, x.0, t_len * n * w, |s| {
                        for t in 0..t_len {
                            for nn in 0..n {
                                for kk in 0..k {
                                    let dst = (t * n + idx[nn * k + kk]) * w;
                                    let src = ((t * n + nn) * k + kk) * w;
                                    for j in 0..w {
                                        s[dst + j] += g[src + j];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Mha {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (sq, sk) = (self.shape(*q), self.shape(*k));
                let dims = MhaDims {
                    batch: sq[0],
                    lq: sq[1],
                    lk: sk[1],
                    width: sq[2],
                    heads: *heads,
                };
                let (dq, dk, dv) = kernels::mha_backward(
                    g,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    &dims,
                );
                for (var, dg) in [(q, dq), (k, dk), (v, dv)] {
                    if self.needs(*var) {
                        Self::add_into(grads, var.0, dg.len(), |s| {
                            for (o, &gv) in s.iter_mut().zip(&dg) {
                                *o += gv;
                            }
                        });
                    }
                }
            }
            Op::CosineCorr4d { q, f, qn, fnn } => {
                let sq = self.shape(*q);
                let sf = self.shape(*f);
                let dims = CorrDims {
                    t: sf[0],
                    n: sq[0],
                    r2: sq[1] * sq[2],
                    d: sq[3],
                };
                let (dq, df) = kernels::cosine_corr4d_backward(
                    g,
                    self.data(*q),
                    self.data(*f),
                    qn,
                    fnn,
                    self.data(i_var(i)),
                    &dims,
                    self.needs(*q),
                    self.needs(*f),
                );
                if self.needs(*q) {
                    Self::add_into(grads, q.0, dq.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(&dq) {
                            *o += v;
                        }
                    });
                }
                if self.needs(*f) {
                    Self::add_into(grads, f.0, df.len(), |s| {
                        for (o, &v) in s.iter_mut().zip(&df) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let n = self.data(*a).len();
                    let gv = g[0];
                    Self::add_into(grads, a.0, n, |s| {
                        for o in s.iter_mut() {
                            *o += gv;
                        }
                    });
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let n = self.data(*a).len();
                    let gv = g[0] * S::from_f64(1.0 / n as f64);
                    Self::add_into(grads, a.0, n, |s| {
                        for o in s.iter_mut() {
                            *o += gv;
                        }
                    });
                }
            }
        }
    }
}

#[inline]
fn i_var(i: usize) -> Var {
    Var(i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5));
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let ai = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(ai).data(), tape.value(a).data());
        let ones = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let prod = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(prod).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_extent_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[4, 4, 2], |i| i as f32 * 0.1));
        // 1x1 kernel = identity matrix over channels
        let w = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv2d(x, w, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_stride_halves_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[8, 8, 1]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 1, 4]));
        let y = tape.conv2d(x, w, 2).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 4]);
    }

    #[test]
    fn conv2d_channel_mismatch_is_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[4, 4, 3]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 2, 4]));
        assert!(tape.conv2d(x, w, 1).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let z = tape.softmax_lastdim(big).unwrap();
        let d = tape.value(z).data().to_vec();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-9 && d[1].abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[5, 9], |i| ((i * 37) % 11) as f64 - 5.0));
        let y = tape.softmax_lastdim(x).unwrap();
        for row in tape.value(y).data().chunks(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance_before_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 8], |i| (i as f64).sin() * 4.0 + 1.0));
        let gain = tape.constant(Tensor::full(&[8], 1.0));
        let bias = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm_lastdim(x, gain, bias).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn bilinear_grid_point_and_midpoint() {
        let mut tape = Tape::<f32>::new();
        let map = tape.constant(Tensor::from_fn(&[5, 6, 2], |i| i as f32));
        let coords = tape.constant(Tensor::new(vec![2, 2], vec![2.0, 3.0, 2.0, 3.5]).unwrap());
        let out = tape.bilinear_sample(map, coords).unwrap();
        let exact = tape.value(map).at(&[2, 3, 0]);
        assert_eq!(tape.value(out).at(&[0, 0]), exact);
        // midpoint between (2,3) and (2,4) is their average
        let avg = 0.5 * (tape.value(map).at(&[2, 3, 1]) + tape.value(map).at(&[2, 4, 1]));
        assert!((tape.value(out).at(&[1, 1]) - avg).abs() < 1e-6);
    }

    #[test]
    fn bilinear_outside_grid_is_zero() {
        let mut tape = Tape::<f32>::new();
        let map = tape.constant(Tensor::full(&[4, 4, 1], 1.0));
        let coords =
            tape.constant(Tensor::new(vec![3, 2], vec![-5.0, 2.0, 2.0, 9.0, -0.5, -0.5]).unwrap());
        let out = tape.bilinear_sample(map, coords).unwrap();
        assert_eq!(tape.value(out).at(&[0, 0]), 0.0);
        assert_eq!(tape.value(out).at(&[1, 0]), 0.0);
        // quarter-weight corner fade
        assert!((tape.value(out).at(&[2, 0]) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn time_shift_boundary_semantics() {
        let mut tape = Tape::<f32>::new();
        // T=3, 1x1 plane, 3 channels: [back, fwd, stay]
        let x = tape.constant(Tensor::from_fn(&[3, 1, 1, 3], |i| i as f32));
        let y = tape.time_shift(x, 1, 1).unwrap();
        let v = tape.value(y);
        // back channel: out[t] = x[t+1]
        assert_eq!(v.at(&[0, 0, 0, 0]), 3.0);
        assert_eq!(v.at(&[2, 0, 0, 0]), 0.0);
        // fwd channel: out[1] = x[0]
        assert_eq!(v.at(&[1, 0, 0, 1]), 1.0);
        assert_eq!(v.at(&[0, 0, 0, 1]), 0.0);
        // stay channel untouched
        assert_eq!(v.at(&[1, 0, 0, 2]), 5.0);
    }

    #[test]
    fn time_shift_single_frame_zeroes_shifted_channels() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 2, 4], |i| 1.0 + i as f32));
        let y = tape.time_shift(x, 1, 1).unwrap();
        let v = tape.value(y);
        for p in 0..4 {
            assert_eq!(v.data()[p * 4], 0.0);
            assert_eq!(v.data()[p * 4 + 1], 0.0);
            assert!(v.data()[p * 4 + 2] > 0.0);
            assert!(v.data()[p * 4 + 3] > 0.0);
        }
    }

    #[test]
    fn cosine_self_similarity_and_orthogonality() {
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::from_fn(&[1, 2, 2, 3], |i| (i as f32).cos() + 1.5));
        // f == q broadcast over t
        let qv = tape.value(q).data().to_vec();
        let mut fdata = qv.clone();
        fdata.extend_from_slice(&qv);
        let f = tape.constant(Tensor::new(vec![2, 1, 2, 2, 3], fdata).unwrap());
        let c = tape.cosine_corr4d(q, f).unwrap();
        let v = tape.value(c);
        for t in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let diag = v.at(&[t, 0, i, j, i, j]);
                    assert!((diag - 1.0).abs() < 1e-5, "diag {diag}");
                }
            }
        }

        let mut tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
        let f = tape.constant(Tensor::new(vec![1, 1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let c = tape.cosine_corr4d(q, f).unwrap();
        assert_eq!(tape.value(c).data()[0], 0.0);
    }

    #[test]
    fn cosine_zero_windows_give_zero_not_nan() {
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::zeros(&[2, 3, 3, 4]));
        let f = tape.constant(Tensor::zeros(&[2, 2, 3, 3, 4]));
        let c = tape.cosine_corr4d(q, f).unwrap();
        assert!(tape.value(c).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_deterministic_across_parallel_and_sequential() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::from_fn(&[4, 16, 16, 3], |i| ((i * 31) % 17) as f32 * 0.1), true);
            let w = tape.leaf(Tensor::from_fn(&[3, 3, 3, 8], |i| ((i * 13) % 7) as f32 * 0.05), true);
            let c = tape.conv2d(x, w, 2).unwrap();
            let r = tape.relu(c);
            let loss = tape.mean(r);
            let grads = tape.backward(loss).unwrap();
            (
                grads.get(x, &[4, 16, 16, 3]).data().to_vec(),
                grads.get(w, &[3, 3, 3, 8]).data().to_vec(),
            )
        };
        let (gx1, gw1) = run();
        crate::exec::set_sequential(true);
        let (gx2, gw2) = run();
        crate::exec::set_sequential(false);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
