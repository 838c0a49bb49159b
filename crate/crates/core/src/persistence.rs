//! Binary checkpoints for meta-training state and fitted parameters.
//!
//! Every file is `magic "FMC1" | version u32 | body | length u64 | crc32 u32`,
//! little-endian throughout. `length` counts the bytes before it and the CRC
//! covers the same bytes. The body layout is documented in
//! `docs/checkpoint.md`.

use std::path::Path;

use thiserror::Error;

use crate::graph::Precision;
use crate::metatrain::{AdamState, MetaState};
use crate::nf::{Activation, Head, ModelSpec, ParamVector};

pub const MAGIC: [u8; 4] = *b"FMC1";
pub const VERSION: u32 = 1;
const TRAILER: usize = 12;

const KIND_META: u8 = 1;
const KIND_PARAMS: u8 = 2;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:02x?}, not a checkpoint")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("length mismatch: trailer declares {declared} bytes, file holds {actual}")]
    LengthMismatch { declared: u64, actual: u64 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("non-finite value in {field}")]
    NonFinite { field: &'static str },
    #[error("checkpoint holds {found}, expected {expected}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("malformed body: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, PersistError>;

/// Meta-training state together with the architecture it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Precision the state was produced in. Values are stored as `f64`, so
    /// `f32` checkpoints load into `f64` sessions exactly.
    pub precision: Precision,
    pub state: MetaState,
}

/// Parameters fitted to a single signal.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedParams {
    pub spec: ModelSpec,
    pub precision: Precision,
    pub params: ParamVector,
}

fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_META => "meta-training state",
        KIND_PARAMS => "fitted parameters",
        _ => "unknown content",
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn dim(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension fits in u32"));
    }
    fn array(&mut self, values: &[f64]) {
        self.u64(values.len() as u64);
        values.iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PersistError::Malformed(format!("body ends before byte {}", self.pos + n)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self, field: &'static str) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(PersistError::NonFinite { field })
        }
    }
    fn dim(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn array(&mut self, field: &'static str, expected: usize) -> Result<Vec<f64>> {
        let n = self.u64()?;
        if n != expected as u64 {
            return Err(PersistError::Malformed(format!("{field} holds {n} values, expected {expected}")));
        }
        (0..expected).map(|_| self.f64(field)).collect()
    }
}

fn write_spec(w: &mut Writer, spec: &ModelSpec) {
    w.dim(spec.input_dim);
    w.dim(spec.output_dim);
    w.dim(spec.hidden_dim);
    w.dim(spec.depth);
    match spec.activation {
        Activation::Sine { omega0 } => {
            w.u8(0);
            w.f64(omega0);
        }
        Activation::ReluFourier { sigma, features, seed } => {
            w.u8(1);
            w.f64(sigma);
            w.dim(features);
            w.u64(seed);
        }
        Activation::Identity => w.u8(2),
    }
    w.u8(match spec.head {
        Head::Linear => 0,
        Head::Sigmoid => 1,
    });
}

fn read_spec(r: &mut Reader<'_>) -> Result<ModelSpec> {
    let input_dim = r.dim()?;
    let output_dim = r.dim()?;
    let hidden_dim = r.dim()?;
    let depth = r.dim()?;
    let activation = match r.u8()? {
        0 => Activation::Sine {
            omega0: r.f64("omega0")?,
        },
        1 => Activation::ReluFourier {
            sigma: r.f64("sigma")?,
            features: r.dim()?,
            seed: r.u64()?,
        },
        2 => Activation::Identity,
        t => return Err(PersistError::Malformed(format!("unknown activation tag {t}"))),
    };
    let head = match r.u8()? {
        0 => Head::Linear,
        1 => Head::Sigmoid,
        t => return Err(PersistError::Malformed(format!("unknown head tag {t}"))),
    };
    let spec = ModelSpec {
        input_dim,
        output_dim,
        hidden_dim,
        depth,
        activation,
        head,
    };
    spec.validate().map_err(|e| PersistError::Malformed(e.to_string()))?;
    Ok(spec)
}

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F64 => 0,
        Precision::F32 => 1,
    }
}

fn read_params(r: &mut Reader<'_>, spec: &ModelSpec, field: &'static str) -> Result<ParamVector> {
    let layout: Vec<_> = spec.layer_dims().into_iter().map(|(i, o)| (i, o, true)).collect();
    let flat = r.array(field, spec.param_count())?;
    ParamVector::zeros(&layout)
        .with_flat(&flat)
        .map_err(|e| PersistError::Malformed(e.to_string()))
}

fn check_params(spec: &ModelSpec, params: &ParamVector) {
    let layout: Vec<_> = spec.layer_dims().into_iter().map(|(i, o)| (i, o, true)).collect();
    assert_eq!(params.layout(), layout, "parameters do not match the model spec");
}

fn frame(kind: u8, precision: Precision, body: impl FnOnce(&mut Writer)) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.u8(kind);
    w.u8(precision_tag(precision));
    body(&mut w);
    let len = w.0.len() as u64;
    let crc = crc32fast::hash(&w.0);
    w.u64(len);
    w.u32(crc);
    w.0
}

/// Validates the envelope and returns a reader over the body plus the
/// content kind and precision.
fn unframe(bytes: &[u8]) -> Result<(Reader<'_>, u8, Precision)> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(PersistError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    if bytes.len() < 8 {
        return Err(PersistError::LengthMismatch {
            declared: 0,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(PersistError::UnsupportedVersion { found: version });
    }
    if bytes.len() < 10 + TRAILER {
        return Err(PersistError::LengthMismatch {
            declared: 0,
            actual: bytes.len() as u64,
        });
    }
    let split = bytes.len() - TRAILER;
    let declared = u64::from_le_bytes(bytes[split..split + 8].try_into().unwrap());
    if declared != split as u64 {
        return Err(PersistError::LengthMismatch {
            declared,
            actual: split as u64,
        });
    }
    let stored = u32::from_le_bytes(bytes[split + 8..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..split]);
    if stored != computed {
        return Err(PersistError::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: &bytes[..split],
        pos: 8,
    };
    let kind = r.u8()?;
    let precision = match r.u8()? {
        0 => Precision::F64,
        1 => Precision::F32,
        t => return Err(PersistError::Malformed(format!("unknown precision tag {t}"))),
    };
    Ok((r, kind, precision))
}

fn expect_kind(found: u8, expected: u8) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(PersistError::WrongKind {
            expected: kind_name(expected),
            found: kind_name(found),
        })
    }
}

fn finish(r: Reader<'_>) -> Result<()> {
    if r.pos == r.bytes.len() {
        Ok(())
    } else {
        Err(PersistError::Malformed(format!("{} unread bytes after body", r.bytes.len() - r.pos)))
    }
}

impl Checkpoint {
    /// # Panics
    /// If `state.theta0` does not have the layout of `spec`.
    pub fn to_bytes(&self) -> Vec<u8> {
        check_params(&self.spec, &self.state.theta0);
        let s = &self.state;
        frame(KIND_META, self.precision, |w| {
            write_spec(w, &self.spec);
            w.dim(s.k);
            w.dim(s.l);
            w.f64(s.gamma);
            w.f64(s.lambda);
            w.f64(s.beta);
            w.array(&s.inner_lrs);
            w.array(&s.theta0.flat());
            w.array(&s.adam.m);
            w.array(&s.adam.v);
            w.u64(s.adam.t);
            w.u64(s.seed);
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, kind, precision) = unframe(bytes)?;
        expect_kind(kind, KIND_META)?;
        let spec = read_spec(&mut r)?;
        let k = r.dim()?;
        let l = r.dim()?;
        let gamma = r.f64("gamma")?;
        let lambda = r.f64("lambda")?;
        let beta = r.f64("beta")?;
        let inner_lrs = r.array("inner_lrs", k)?;
        let theta0 = read_params(&mut r, &spec, "theta0")?;
        let n = theta0.len() + k;
        let m = r.array("adam_m", n)?;
        let v = r.array("adam_v", n)?;
        let t = r.u64()?;
        let seed = r.u64()?;
        finish(r)?;
        let state = MetaState {
            theta0,
            inner_lrs,
            k,
            l,
            gamma,
            lambda,
            beta,
            adam: AdamState { m, v, t },
            seed,
        };
        state.validate().map_err(|e| PersistError::Malformed(e.to_string()))?;
        Ok(Checkpoint { spec, precision, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

impl FittedParams {
    /// # Panics
    /// If `params` does not have the layout of `spec`.
    pub fn to_bytes(&self) -> Vec<u8> {
        check_params(&self.spec, &self.params);
        frame(KIND_PARAMS, self.precision, |w| {
            write_spec(w, &self.spec);
            w.array(&self.params.flat());
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, kind, precision) = unframe(bytes)?;
        expect_kind(kind, KIND_PARAMS)?;
        let spec = read_spec(&mut r)?;
        let params = read_params(&mut r, &spec, "params")?;
        finish(r)?;
        Ok(FittedParams { spec, precision, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })
}
