//! Gradient compressors with per-layer error feedback.
//!
//! Every compressor works on `a = g + e`, the incoming gradient plus the
//! residual left over from earlier rounds, and stores `a − decompress(msg)`
//! as the new residual. Layers with a unit dimension are always sent dense.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, derive_seed, matmul, matmul_tn, orthonormalize, seeded_rng, Tensor};

/// A communication level: compression strength, or batch size in
/// adaptive-batch runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Level {
    Dense,
    PowerSgd { rank: usize },
    TopK { fraction: f64 },
    BatchSize { batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Dense,
    PowerSgd,
    TopK,
    BatchSize,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Dense => "dense",
            Scheme::PowerSgd => "powersgd",
            Scheme::TopK => "topk",
            Scheme::BatchSize => "batchsize",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Scheme::Dense),
            "powersgd" => Ok(Scheme::PowerSgd),
            "topk" => Ok(Scheme::TopK),
            "batchsize" => Ok(Scheme::BatchSize),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

impl Level {
    pub fn scheme(&self) -> Scheme {
        match self {
            Level::Dense => Scheme::Dense,
            Level::PowerSgd { .. } => Scheme::PowerSgd,
            Level::TopK { .. } => Scheme::TopK,
            Level::BatchSize { .. } => Scheme::BatchSize,
        }
    }

    /// Whether `self` sends strictly more than `other`. Only meaningful for
    /// two levels of the same scheme.
    pub fn communicates_more_than(&self, other: &Level) -> bool {
        match (self, other) {
            (Level::PowerSgd { rank: a }, Level::PowerSgd { rank: b }) => a > b,
            (Level::TopK { fraction: a }, Level::TopK { fraction: b }) => a > b,
            (Level::BatchSize { batch: a }, Level::BatchSize { batch: b }) => a < b,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Level::PowerSgd { rank: 0 } => Err(Error::Config("powersgd rank must be at least 1".into())),
            Level::TopK { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                Err(Error::Config(format!("topk fraction {fraction} outside (0, 1]")))
            }
            Level::BatchSize { batch: 0 } => Err(Error::Config("batch size must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Dense => write!(f, "dense"),
            Level::PowerSgd { rank } => write!(f, "powersgd:{rank}"),
            Level::TopK { fraction } => write!(f, "topk:{fraction}"),
            Level::BatchSize { batch } => write!(f, "batch:{batch}"),
        }
    }
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse level `{s}`"));
        let level = match s.split_once(':') {
            None if s == "dense" => Level::Dense,
            Some(("powersgd", v)) => Level::PowerSgd {
                rank: v.parse().map_err(|_| bad())?,
            },
            Some(("topk", v)) => Level::TopK {
                fraction: v.parse().map_err(|_| bad())?,
            },
            Some(("batch", v)) => Level::BatchSize {
                batch: v.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        level.validate()?;
        Ok(level)
    }
}

impl From<Level> for String {
    fn from(l: Level) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for Level {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Layers with a unit dimension (biases, scalar heads) are never compressed.
pub fn is_one_dimensional(shape: (usize, usize)) -> bool {
    shape.0 <= 1 || shape.1 <= 1
}

/// The level actually applied to a layer of `shape`.
pub fn effective_level(level: &Level, shape: (usize, usize)) -> Level {
    match level {
        Level::BatchSize { .. } => Level::Dense,
        _ if is_one_dimensional(shape) => Level::Dense,
        other => *other,
    }
}

/// `⌈K·d⌉`, at least one entry.
pub fn topk_count(fraction: f64, d: usize) -> usize {
    let raw = fraction * d as f64;
    // guard against 0.7 * 10 = 7.000000000000001
    let k = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    k.clamp(1, d.max(1))
}

/// Scalars sent for one layer under `level` (indices count as one each).
pub fn float_count(level: &Level, shape: (usize, usize)) -> usize {
    let d = shape.0 * shape.1;
    match effective_level(level, shape) {
        Level::Dense | Level::BatchSize { .. } => d,
        Level::TopK { fraction } => 2 * topk_count(fraction, d),
        Level::PowerSgd { rank } => rank * (shape.0 + shape.1),
    }
}

/// Startup check: every compressible layer can carry `level`.
pub fn validate_level(level: &Level, shapes: &[(usize, usize)]) -> Result<()> {
    level.validate()?;
    if let Level::PowerSgd { rank } = *level {
        for (i, &(m, n)) in shapes.iter().enumerate() {
            if !is_one_dimensional((m, n)) && rank > m.min(n) {
                return Err(Error::Config(format!(
                    "powersgd rank {rank} exceeds min dimension of layer {i} ({m}x{n})"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Vec<f64>),
    Sparse { indices: Vec<u32>, values: Vec<f64> },
    LowRank { p: Tensor, q: Tensor },
}

impl Payload {
    pub fn scheme(&self) -> Scheme {
        match self {
            Payload::Dense(_) => Scheme::Dense,
            Payload::Sparse { .. } => Scheme::TopK,
            Payload::LowRank { .. } => Scheme::PowerSgd,
        }
    }

    /// Scalars actually carried.
    pub fn scalar_count(&self) -> usize {
        match self {
            Payload::Dense(v) => v.len(),
            Payload::Sparse { indices, values } => indices.len() + values.len(),
            Payload::LowRank { p, q } => p.len() + q.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub layer_id: usize,
    pub payload: Payload,
    pub float_count: usize,
}

const TAG_DENSE: u8 = 0;
const TAG_TOPK: u8 = 1;
const TAG_POWERSGD: u8 = 2;

impl CompressedMessage {
    fn new(layer_id: usize, payload: Payload) -> Self {
        let float_count = payload.scalar_count();
        Self {
            layer_id,
            payload,
            float_count,
        }
    }

    /// Canonical little-endian encoding: tag byte, `u32` layer id, then the
    /// payload (`u32` lengths/indices, `f64` values).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let put_f64s = |out: &mut Vec<u8>, vs: &[f64]| {
            for v in vs {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        match &self.payload {
            Payload::Dense(v) => {
                out.push(TAG_DENSE);
                put_u32(&mut out, self.layer_id);
                put_u32(&mut out, v.len());
                put_f64s(&mut out, v);
            }
            Payload::Sparse { indices, values } => {
                out.push(TAG_TOPK);
                put_u32(&mut out, self.layer_id);
                put_u32(&mut out, indices.len());
                for i in indices {
                    out.extend_from_slice(&i.to_le_bytes());
                }
                put_f64s(&mut out, values);
            }
            Payload::LowRank { p, q } => {
                out.push(TAG_POWERSGD);
                put_u32(&mut out, self.layer_id);
                put_u32(&mut out, p.rows());
                put_u32(&mut out, q.rows());
                put_u32(&mut out, p.cols());
                put_f64s(&mut out, p.data());
                put_f64s(&mut out, q.data());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let tag = r.u8()?;
        let layer_id = r.u32()? as usize;
        let payload = match tag {
            TAG_DENSE => {
                let n = r.u32()? as usize;
                Payload::Dense(r.f64s(n)?)
            }
            TAG_TOPK => {
                let k = r.u32()? as usize;
                let indices = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let values = r.f64s(k)?;
                Payload::Sparse { indices, values }
            }
            TAG_POWERSGD => {
                let m = r.u32()? as usize;
                let n = r.u32()? as usize;
                let rank = r.u32()? as usize;
                let p = Tensor::from_vec(m, rank, r.f64s(m * rank)?)?;
                let q = Tensor::from_vec(n, rank, r.f64s(n * rank)?)?;
                Payload::LowRank { p, q }
            }
            other => return Err(Error::Corruption(format!("unknown tag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Corruption("trailing bytes".into()));
        }
        Ok(Self::new(layer_id, payload))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption("truncated message".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Corruption("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Error-feedback memory and warm start for one layer on one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub residual: Tensor,
    pub q_prev: Option<Tensor>,
    seed: u64,
    calls: u64,
}

impl LayerState {
    pub fn new(shape: (usize, usize), seed: u64) -> Self {
        Self {
            residual: Tensor::zeros(shape.0, shape.1),
            q_prev: None,
            seed,
            calls: 0,
        }
    }

    fn fresh_seed(&mut self) -> u64 {
        self.calls += 1;
        derive_seed(self.seed, self.calls)
    }

    /// Warm-start factor with exactly `rank` columns. Extra columns are
    /// dropped; missing ones are filled with seeded random directions.
    fn warm_start(&mut self, n: usize, rank: usize) -> Result<Tensor> {
        let seed = self.fresh_seed();
        match self.q_prev.take() {
            Some(q) if q.cols() == rank && q.rows() == n => Ok(q),
            Some(q) if q.cols() > rank && q.rows() == n => {
                let mut out = Tensor::zeros(n, rank);
                for c in 0..rank {
                    out.set_column(c, &q.column(c));
                }
                Ok(out)
            }
            Some(q) if q.rows() == n => {
                let mut rng = seeded_rng(seed);
                let mut out = Tensor::zeros(n, rank);
                for c in 0..rank {
                    let col: Vec<f64> = if c < q.cols() {
                        q.column(c)
                    } else {
                        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
                    };
                    out.set_column(c, &col);
                }
                Ok(orthonormalize(&out, derive_seed(seed, 1))?.q)
            }
            _ => Ok(Tensor::random_normal(n, rank, seed)),
        }
    }
}

/// Per-layer states owned by one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorState {
    pub layers: Vec<LayerState>,
}

impl CompressorState {
    pub fn new(shapes: &[(usize, usize)], seed: u64) -> Self {
        Self {
            layers: shapes
                .iter()
                .enumerate()
                .map(|(i, &s)| LayerState::new(s, derive_seed(seed, i as u64)))
                .collect(),
        }
    }
}

/// Indices of the `k` largest-magnitude entries, ties to the lower index,
/// returned in increasing order.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| values[*b].abs().total_cmp(&values[*a].abs()).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Compress `grad` for `layer_id`, updating the layer's residual (and warm
/// start for PowerSGD).
pub fn compress(grad: &Tensor, level: &Level, state: &mut LayerState, layer_id: usize) -> Result<CompressedMessage> {
    if grad.shape() != state.residual.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} vs residual {:?} for layer {layer_id}",
            grad.shape(),
            state.residual.shape()
        )));
    }
    let a = grad.add(&state.residual)?;
    let level = effective_level(level, a.shape());
    level.validate()?;
    if level.scheme() != Scheme::PowerSgd {
        state.q_prev = None;
    }

    let msg = match level {
        Level::Dense | Level::BatchSize { .. } => {
            state.residual.fill(0.0);
            CompressedMessage::new(layer_id, Payload::Dense(a.into_data()))
        }
        Level::TopK { fraction } => {
            let d = a.len();
            if fraction * (d as f64) < 1.0 {
                log::warn!("layer {layer_id}: topk fraction {fraction} selects < 1 of {d} entries; sending 1");
            }
            let keep = topk_indices(a.data(), topk_count(fraction, d));
            let values: Vec<f64> = keep.iter().map(|&i| a.data()[i]).collect();
            let mut residual = a;
            for &i in &keep {
                residual.data_mut()[i] = 0.0;
            }
            state.residual = residual;
            CompressedMessage::new(
                layer_id,
                Payload::Sparse {
                    indices: keep.into_iter().map(|i| i as u32).collect(),
                    values,
                },
            )
        }
        Level::PowerSgd { rank } => {
            let (m, n) = a.shape();
            if rank > m.min(n) {
                return Err(Error::Config(format!(
                    "powersgd rank {rank} exceeds min dimension of layer {layer_id} ({m}x{n})"
                )));
            }
            let q_start = state.warm_start(n, rank)?;
            let p = matmul(&a, &q_start)?;
            let p_hat = orthonormalize(&p, state.fresh_seed())?.q;
            let q = matmul_tn(&a, &p_hat)?;
            let approx = matmul(&p_hat, &q.transpose())?;
            state.residual = a.sub(&approx)?;
            state.q_prev = Some(q.clone());
            CompressedMessage::new(layer_id, Payload::LowRank { p: p_hat, q })
        }
    };
    Ok(msg)
}

/// Dense reconstruction of `msg` for a layer of `shape`.
pub fn decompress(msg: &CompressedMessage, shape: (usize, usize)) -> Result<Tensor> {
    let (rows, cols) = shape;
    let d = rows * cols;
    match &msg.payload {
        Payload::Dense(v) => Tensor::from_vec(rows, cols, v.clone())
            .map_err(|_| Error::Corruption(format!("dense payload of {} for {d} entries", v.len()))),
        Payload::Sparse { indices, values } => {
            if indices.len() != values.len() {
                return Err(Error::Corruption("index/value length mismatch".into()));
            }
            let mut out = Tensor::zeros(rows, cols);
            let mut last: Option<u32> = None;
            for (&i, &v) in indices.iter().zip(values) {
                if i as usize >= d {
                    return Err(Error::Corruption(format!("index {i} out of range {d}")));
                }
                if last.is_some_and(|l| i <= l) {
                    return Err(Error::Corruption("indices not strictly increasing".into()));
                }
                last = Some(i);
                out.data_mut()[i as usize] = v;
            }
            Ok(out)
        }
        Payload::LowRank { p, q } => {
            if p.rows() != rows || q.rows() != cols || p.cols() != q.cols() {
                return Err(Error::Corruption(format!(
                    "factors {:?}/{:?} do not fit {rows}x{cols}",
                    p.shape(),
                    q.shape()
                )));
            }
            matmul(p, &q.transpose())
        }
    }
}

/// `max |decompress(msg) + e' − (g + e)| / max(1, ‖g + e‖∞)` for one call.
pub fn conservation_error(before: &Tensor, grad: &Tensor, msg: &CompressedMessage, after: &Tensor) -> Result<f64> {
    let target = grad.add(before)?;
    let rebuilt = decompress(msg, grad.shape())?.add(after)?;
    let scale = target.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    Ok(rebuilt
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale)
}

/// Reconstruction error helper used by diagnostics.
pub fn frobenius_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(linalg::norm2(a.sub(b)?.data()))
}
