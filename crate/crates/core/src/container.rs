//! Binary tensor container and the named-archive checkpoint format.
//!
//! One container = magic "EMT2", format version (u16 LE), dtype code (u8,
//! 1 = f32, 2 = f64), rank (u8), extents (rank x u64 LE), then the row-major
//! payload in little-endian order. Checkpoints are a text index of named
//! entries followed by the concatenated blobs, so a byte-identical round trip
//! is trivial to audit.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Scalar, Tensor};
use crate::training::OptimState;
use crate::trajectory::TrajectoryState;

pub const MAGIC: &[u8; 4] = b"EMT2";
pub const FORMAT_VERSION: u16 = 1;
const ARCHIVE_HEADER: &str = "EMT2-ARCHIVE v1";

pub fn write_container<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + t.rank() * 8 + t.len() * S::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(S::DTYPE_CODE);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

struct Header {
    dtype: u8,
    shape: Vec<usize>,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 8 {
        return Err(Error::Format("container truncated before header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let dtype = bytes[6];
    if dtype != 1 && dtype != 2 {
        return Err(Error::Format(format!("unknown dtype code {dtype}")));
    }
    let rank = bytes[7] as usize;
    let mut off = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if off + 8 > bytes.len() {
            return Err(Error::Format("container truncated in extents".into()));
        }
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    Ok(Header {
        dtype,
        shape,
        payload_offset: off,
    })
}

pub fn read_container<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let h = parse_header(bytes)?;
    if h.dtype != S::DTYPE_CODE {
        return Err(Error::Format(format!(
            "dtype code {} does not match the requested element type",
            h.dtype
        )));
    }
    let count: usize = h.shape.iter().product();
    let expect = h.payload_offset + count * S::BYTES;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "payload length {} does not match extents {:?} (expected {expect} bytes)",
            bytes.len() - h.payload_offset,
            h.shape
        )));
    }
    let data: Vec<S> = bytes[h.payload_offset..]
        .chunks_exact(S::BYTES)
        .map(S::read_le)
        .collect();
    Tensor::new(h.shape, data)
}

/// Containers of either element type.
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

pub fn read_container_any(bytes: &[u8]) -> Result<AnyTensor> {
    let h = parse_header(bytes)?;
    match h.dtype {
        1 => Ok(AnyTensor::F32(read_container::<f32>(bytes)?)),
        _ => Ok(AnyTensor::F64(read_container::<f64>(bytes)?)),
    }
}

pub fn write_tensor_file<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    Ok(std::fs::write(path, write_container(t))?)
}

pub fn read_tensor_file<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    read_container(&std::fs::read(path)?)
}

// ---------------------------------------------------------------- archive

/// Ordered, named sequence of binary entries with a text index.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    entries: Vec<(String, Vec<u8>)>,
}

impl Archive {
    pub fn push(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        let name = name.into();
        debug_assert!(!name.contains(char::is_whitespace));
        self.entries.push((name, bytes));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "{ARCHIVE_HEADER}").unwrap();
        writeln!(out, "count {}", self.entries.len()).unwrap();
        for (name, bytes) in &self.entries {
            writeln!(out, "{} {}", name, bytes.len()).unwrap();
        }
        writeln!(out, "end").unwrap();
        for (_, bytes) in &self.entries {
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("archive: {msg}"));
        // the index is ASCII lines up to and including "end"
        let mut pos = 0usize;
        let mut next_line = |bytes: &[u8]| -> Result<String> {
            let start = pos;
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            if pos >= bytes.len() {
                return Err(bad("truncated index"));
            }
            let line = std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("index is not utf-8"))?
                .to_string();
            pos += 1;
            Ok(line)
        };
        if next_line(bytes)? != ARCHIVE_HEADER {
            return Err(bad("bad header"));
        }
        let count_line = next_line(bytes)?;
        let count: usize = count_line
            .strip_prefix("count ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad count line"))?;
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line(bytes)?;
            let (name, size) = line.rsplit_once(' ').ok_or_else(|| bad("bad entry line"))?;
            let size: usize = size.parse().map_err(|_| bad("bad entry size"))?;
            sizes.push((name.to_string(), size));
        }
        if next_line(bytes)? != "end" {
            return Err(bad("missing index terminator"));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, size) in sizes {
            if pos + size > bytes.len() {
                return Err(bad("truncated payload"));
            }
            entries.push((name, bytes[pos..pos + size].to_vec()));
            pos += size;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { entries })
    }
}

// ---------------------------------------------------------------- checkpoints

/// Serialize parameters (and optionally optimizer state) with the resolved
/// configuration document embedded as `config`.
pub fn checkpoint_to_bytes(
    config_toml: &str,
    params: &ModelParams<f32>,
    opt: Option<&OptimState<f32>>,
) -> Vec<u8> {
    let mut ar = Archive::default();
    ar.push("config", config_toml.as_bytes().to_vec());
    for (name, tensor) in params.iter() {
        ar.push(format!("param/{name}"), write_container(tensor));
    }
    if let Some(opt) = opt {
        ar.push("opt/step", opt.step.to_le_bytes().to_vec());
        for i in 0..params.len() {
            let name = params.name_at(i);
            ar.push(format!("opt/m/{name}"), write_container(&opt.m[i]));
            ar.push(format!("opt/v/{name}"), write_container(&opt.v[i]));
        }
    }
    ar.to_bytes()
}

pub struct Checkpoint {
    pub config_toml: String,
    pub params: ModelParams<f32>,
    pub opt: Option<OptimState<f32>>,
}

/// Load a checkpoint against the parameter declaration derived from its own
/// embedded config. `template` is that declaration's freshly built parameter
/// set; every declared tensor must be present with matching extents.
pub fn checkpoint_from_bytes(bytes: &[u8], template: ModelParams<f32>) -> Result<Checkpoint> {
    let ar = Archive::from_bytes(bytes)?;
    let config_toml = String::from_utf8(
        ar.get("config")
            .ok_or_else(|| Error::Format("checkpoint has no config entry".into()))?
            .to_vec(),
    )
    .map_err(|_| Error::Format("checkpoint config is not utf-8".into()))?;

    let mut params = template;
    let mut seen: HashMap<String, ()> = HashMap::new();
    for name in ar.names() {
        if let Some(p) = name.strip_prefix("param/") {
            seen.insert(p.to_string(), ());
        }
    }
    for i in 0..params.len() {
        let name = params.name_at(i).to_string();
        let bytes = ar
            .get(&format!("param/{name}"))
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint missing parameter `{name}`")))?;
        let tensor = read_container::<f32>(bytes)?;
        params.set(&name, tensor)?;
        seen.remove(&name);
    }
    if let Some(extra) = seen.keys().next() {
        return Err(Error::InvalidInput(format!(
            "checkpoint has parameter `{extra}` unknown to the configuration"
        )));
    }

    let opt = if let Some(step_bytes) = ar.get("opt/step") {
        let step = u64::from_le_bytes(
            step_bytes
                .try_into()
                .map_err(|_| Error::Format("bad opt/step entry".into()))?,
        );
        let mut opt = OptimState::new(&params);
        opt.step = step;
        for i in 0..params.len() {
            let name = params.name_at(i).to_string();
            let m = ar
                .get(&format!("opt/m/{name}"))
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint missing opt/m/{name}")))?;
            let v = ar
                .get(&format!("opt/v/{name}"))
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint missing opt/v/{name}")))?;
            opt.m[i] = read_container::<f32>(m)?;
            opt.v[i] = read_container::<f32>(v)?;
            if opt.m[i].shape() != params.tensor_at(i).shape() {
                return Err(Error::InvalidInput(format!(
                    "optimizer moment shape mismatch for `{name}`"
                )));
            }
        }
        Some(opt)
    } else {
        None
    };

    Ok(Checkpoint {
        config_toml,
        params,
        opt,
    })
}

// ---------------------------------------------------------------- CSV interchange

/// Trajectory CSV: header `t,i,x,y`, one row per (frame, point), coordinates
/// with 6-decimal fixed formatting.
pub fn trajectory_to_csv<S: Scalar>(traj: &TrajectoryState<S>) -> String {
    let mut out = String::from("t,i,x,y\n");
    for t in 0..traj.frames() {
        for i in 0..traj.points() {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                t,
                i,
                traj.x(t, i).to_f64(),
                traj.y(t, i).to_f64()
            ));
        }
    }
    out
}

/// Parse a trajectory CSV written by [`trajectory_to_csv`] back into [T,N,2]
/// positions. Rows must cover every (t, i) pair in row-major order.
pub fn trajectory_from_csv(text: &str) -> Result<TrajectoryState<f32>> {
    let mut rows: Vec<(usize, usize, f32, f32)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("t,i,x,y")) {
            continue;
        }
        let mut parts = line.split(',');
        let bad = || Error::InvalidInput(format!("bad trajectory line {}: `{line}`", lineno + 1));
        let t: usize = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let i: usize = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let x: f32 = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let y: f32 = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        rows.push((t, i, x, y));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("trajectory CSV has no rows".into()));
    }
    let frames = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let points = rows.iter().map(|r| r.1).max().unwrap() + 1;
    if rows.len() != frames * points {
        return Err(Error::InvalidInput(format!(
            "trajectory CSV has {} rows, expected {} for {}x{} (t, i) pairs",
            rows.len(),
            frames * points,
            frames,
            points
        )));
    }
    let mut data = vec![f32::NAN; frames * points * 2];
    for (t, i, x, y) in rows {
        if t >= frames || i >= points {
            return Err(Error::InvalidInput("trajectory CSV indices out of range".into()));
        }
        data[(t * points + i) * 2] = x;
        data[(t * points + i) * 2 + 1] = y;
    }
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput(
            "trajectory CSV is missing (t, i) pairs".into(),
        ));
    }
    let positions = Tensor::new(vec![frames, points, 2], data)?;
    let queries = Tensor::from_fn(&[points, 2], |j| positions.data()[j]);
    Ok(TrajectoryState {
        positions,
        query_frame: 0,
        queries,
    })
}

/// Query-point CSV: optional `x,y` header, one `x,y` row per point.
pub fn queries_from_csv(text: &str) -> Result<Tensor<f32>> {
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("x,y")) {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<f32> {
            s.and_then(|v| v.trim().parse::<f32>().ok())
                .ok_or_else(|| Error::InvalidInput(format!("bad query line {}: `{line}`", lineno + 1)))
        };
        values.push(parse(parts.next())?);
        values.push(parse(parts.next())?);
        if parts.next().is_some() {
            return Err(Error::InvalidInput(format!(
                "query line {} has more than two columns",
                lineno + 1
            )));
        }
    }
    if values.is_empty() {
        return Err(Error::InvalidInput("query CSV has no points".into()));
    }
    let n = values.len() / 2;
    Tensor::new(vec![n, 2], values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_byte_identical() {
        let t = Tensor::<f32>::from_fn(&[3, 4, 2], |i| (i as f32).sin());
        let bytes = write_container(&t);
        let back = read_container::<f32>(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(write_container(&back), bytes);
    }

    #[test]
    fn scalar_and_f64_containers_round_trip() {
        let t = Tensor::<f64>::scalar(std::f64::consts::PI);
        let bytes = write_container(&t);
        assert_eq!(read_container::<f64>(&bytes).unwrap().item(), t.item());
        match read_container_any(&bytes).unwrap() {
            AnyTensor::F64(x) => assert_eq!(x.item(), t.item()),
            AnyTensor::F32(_) => panic!("wrong dtype branch"),
        }
    }

    #[test]
    fn bad_magic_version_dtype_are_hard_errors() {
        let t = Tensor::<f32>::zeros(&[2]);
        let good = write_container(&t);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(read_container::<f32>(&bad).is_err());

        let mut bad = good.clone();
        bad[4] = 99;
        assert!(read_container::<f32>(&bad).is_err());

        let mut bad = good.clone();
        bad[6] = 7;
        assert!(read_container::<f32>(&bad).is_err());

        // dtype mismatch against the requested type
        assert!(read_container::<f64>(&good).is_err());

        // truncated payload
        let bad = &good[..good.len() - 1];
        assert!(read_container::<f32>(bad).is_err());
    }

    #[test]
    fn archive_round_trip_and_errors() {
        let mut ar = Archive::default();
        ar.push("alpha", vec![1, 2, 3]);
        ar.push("beta/gamma", vec![]);
        ar.push("delta", vec![255; 9]);
        let bytes = ar.to_bytes();
        let back = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.get("alpha"), Some(&[1u8, 2, 3][..]));
        assert_eq!(back.get("beta/gamma"), Some(&[][..]));
        assert_eq!(back.to_bytes(), bytes);

        assert!(Archive::from_bytes(b"nonsense").is_err());
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(Archive::from_bytes(&truncated).is_err());
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        use crate::params::{Init, ParamSpecs};
        let mut specs = ParamSpecs::default();
        specs.declare("a.w", &[3, 2], Init::HeUniform { fan_in: 3 });
        specs.declare("a.b", &[2], Init::Zeros);
        let params = specs.build::<f32>(4);
        let mut opt = crate::training::OptimState::new(&params);
        opt.step = 17;
        let bytes = checkpoint_to_bytes("seed = 4\n", &params, Some(&opt));

        let template = {
            let mut specs = ParamSpecs::default();
            specs.declare("a.w", &[3, 2], Init::Zeros);
            specs.declare("a.b", &[2], Init::Zeros);
            specs.build::<f32>(0)
        };
        let ckpt = checkpoint_from_bytes(&bytes, template).unwrap();
        assert_eq!(ckpt.opt.as_ref().unwrap().step, 17);
        let again = checkpoint_to_bytes(&ckpt.config_toml, &ckpt.params, ckpt.opt.as_ref());
        assert_eq!(again, bytes);
    }

    #[test]
    fn checkpoint_rejects_mismatched_declarations() {
        use crate::params::{Init, ParamSpecs};
        let mut specs = ParamSpecs::default();
        specs.declare("a.w", &[3, 2], Init::Zeros);
        let params = specs.build::<f32>(0);
        let bytes = checkpoint_to_bytes("", &params, None);

        // template declares an extra tensor -> missing in checkpoint
        let mut specs = ParamSpecs::default();
        specs.declare("a.w", &[3, 2], Init::Zeros);
        specs.declare("a.b", &[2], Init::Zeros);
        assert!(checkpoint_from_bytes(&bytes, specs.build::<f32>(0)).is_err());

        // template declares a different extent -> shape mismatch
        let mut specs = ParamSpecs::default();
        specs.declare("a.w", &[2, 3], Init::Zeros);
        assert!(checkpoint_from_bytes(&bytes, specs.build::<f32>(0)).is_err());

        // template missing a stored tensor -> unknown parameter
        let empty = ParamSpecs::default().build::<f32>(0);
        assert!(checkpoint_from_bytes(&bytes, empty).is_err());
    }

    #[test]
    fn trajectory_csv_has_fixed_formatting() {
        let traj = TrajectoryState {
            positions: Tensor::<f32>::new(vec![1, 2, 2], vec![1.0, 2.5, 3.25, 4.0]).unwrap(),
            query_frame: 0,
            queries: Tensor::new(vec![2, 2], vec![1.0, 2.5, 3.25, 4.0]).unwrap(),
        };
        let csv = trajectory_to_csv(&traj);
        assert_eq!(csv, "t,i,x,y\n0,0,1.000000,2.500000\n0,1,3.250000,4.000000\n");
    }

    #[test]
    fn trajectory_csv_round_trips() {
        let traj = TrajectoryState {
            positions: Tensor::<f32>::from_fn(&[3, 2, 2], |i| i as f32 * 0.5),
            query_frame: 0,
            queries: Tensor::from_fn(&[2, 2], |i| i as f32 * 0.5),
        };
        let back = trajectory_from_csv(&trajectory_to_csv(&traj)).unwrap();
        assert_eq!(back.positions, traj.positions);
        assert!(trajectory_from_csv("t,i,x,y\n0,0,1,2\n0,2,3,4\n").is_err()); // gap at i=1
        assert!(trajectory_from_csv("").is_err());
    }

    #[test]
    fn query_csv_parses_with_and_without_header() {
        let q = queries_from_csv("x,y\n1.5,2\n3,4.25\n").unwrap();
        assert_eq!(q.shape(), &[2, 2]);
        assert_eq!(q.data(), &[1.5, 2.0, 3.0, 4.25]);
        let q = queries_from_csv("7,8\n").unwrap();
        assert_eq!(q.data(), &[7.0, 8.0]);
        assert!(queries_from_csv("a,b\nc,d\n").is_err());
        assert!(queries_from_csv("1,2,3\n").is_err());
    }
}
