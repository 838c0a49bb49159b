//! Signal ingestion into coordinate/value context sets.
//!
//! Context order is row-major over the signal's resolution axes: index
//! `i` maps to grid position `(i / W, i % W)` for an `H × W` image, and the
//! same scheme extends to any number of axes. Selection masks and
//! visualizations rely on this bijection.

pub mod codec;
pub mod dataset;

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use codec::DecodeError;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("signal has no samples")]
    Empty,
    #[error("{0:?} signals are not grid-structured; use sphere_context")]
    NotGrid(Modality),
    #[error("invalid sphere grid: {0}")]
    SphereGrid(String),
    #[error("unsupported file type: {0}")]
    UnsupportedFile(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("split file line {line}: {message}")]
    Split { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, SignalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image2d,
    Series1d,
    Grid3d,
    Sphere2d,
    Synthetic,
}

/// Raw signal with values already normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub modality: Modality,
    /// `[M, D]`, rows in row-major grid order.
    pub values: Array2<f64>,
    pub resolution: Vec<usize>,
    /// Range of the raw encoding that was mapped onto `[0, 1]`.
    pub value_range: (f64, f64),
}

impl Signal {
    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

/// Coordinate/value pairs of one signal.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSet {
    pub coords: Array2<f64>,
    pub values: Array2<f64>,
    pub modality: Modality,
    pub resolution: Vec<usize>,
}

impl ContextSet {
    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn coord_dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn value_dim(&self) -> usize {
        self.values.ncols()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> ContextSet {
        ContextSet {
            coords: self.coords.select(Axis(0), indices),
            values: self.values.select(Axis(0), indices),
            modality: self.modality,
            resolution: self.resolution.clone(),
        }
    }
}

/// Row-major grid position of a flat context index.
pub fn index_to_grid(mut index: usize, resolution: &[usize]) -> Vec<usize> {
    let mut pos = vec![0; resolution.len()];
    for (p, &n) in pos.iter_mut().zip(resolution).rev() {
        *p = index % n;
        index /= n;
    }
    pos
}

pub fn grid_to_index(pos: &[usize], resolution: &[usize]) -> usize {
    pos.iter().zip(resolution).fold(0, |acc, (&p, &n)| acc * n + p)
}

fn lattice(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Endpoint-inclusive coordinate lattice: `[-1, 1]` per axis for grids,
/// `[-50, 50]` for 1-d series.
pub fn grid_context(signal: &Signal) -> Result<ContextSet> {
    if signal.is_empty() || signal.resolution.iter().any(|&n| n == 0) {
        return Err(SignalError::Empty);
    }
    let (lo, hi) = match signal.modality {
        Modality::Series1d => (-50.0, 50.0),
        Modality::Sphere2d => return Err(SignalError::NotGrid(signal.modality)),
        _ => (-1.0, 1.0),
    };
    let axes: Vec<Vec<f64>> = signal.resolution.iter().map(|&n| lattice(n, lo, hi)).collect();
    let m: usize = signal.resolution.iter().product();
    let c = axes.len();
    let mut coords = Array2::zeros((m, c));
    for (i, mut row) in coords.rows_mut().into_iter().enumerate() {
        for (a, p) in index_to_grid(i, &signal.resolution).into_iter().enumerate() {
            row[a] = axes[a][p];
        }
    }
    Ok(ContextSet {
        coords,
        values: signal.values.clone(),
        modality: signal.modality,
        resolution: signal.resolution.clone(),
    })
}

/// Unit-sphere coordinates `(cos ρ cos φ, cos ρ sin φ, sin ρ)` for a
/// latitude-major `lat_count × lon_count` grid. Latitudes span `[-π/2, π/2]`
/// and longitudes `[0, 2π(n-1)/n]`.
pub fn sphere_context(lat_count: usize, lon_count: usize, values: Array2<f64>) -> Result<ContextSet> {
    if lat_count < 2 || lon_count < 1 {
        return Err(SignalError::SphereGrid(format!(
            "need at least 2 latitudes and 1 longitude, got {lat_count}x{lon_count}"
        )));
    }
    let m = lat_count * lon_count;
    if values.nrows() != m {
        return Err(SignalError::SphereGrid(format!(
            "expected {m} value rows, got {}",
            values.nrows()
        )));
    }
    let mut coords = Array2::zeros((m, 3));
    for (i, mut row) in coords.rows_mut().into_iter().enumerate() {
        let (li, lj) = (i / lon_count, i % lon_count);
        let rho = -PI / 2.0 + PI * li as f64 / (lat_count - 1) as f64;
        let phi = 2.0 * PI * lj as f64 / lon_count as f64;
        row[0] = rho.cos() * phi.cos();
        row[1] = rho.cos() * phi.sin();
        row[2] = rho.sin();
    }
    Ok(ContextSet {
        coords,
        values,
        modality: Modality::Sphere2d,
        resolution: vec![lat_count, lon_count],
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| SignalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Loads a PPM/PGM (8-bit) or PNG (8-bit gray/RGB) image.
pub fn load_image(path: &Path) -> Result<Signal> {
    let bytes = read(path)?;
    let img = match extension(path).as_str() {
        "ppm" | "pgm" | "pnm" => codec::decode_pnm(&bytes)?,
        "png" => codec::decode_png(&bytes)?,
        other => return Err(SignalError::UnsupportedFile(other.to_string())),
    };
    Ok(img.into_signal())
}

/// Loads a 16-bit mono WAV file or raw little-endian `f32` samples with a
/// `<file>.len` sidecar holding the sample count.
pub fn load_series(path: &Path) -> Result<Signal> {
    let bytes = read(path)?;
    let samples = match extension(path).as_str() {
        "wav" => codec::decode_wav(&bytes)?,
        "f32" | "raw" => {
            let mut side = path.as_os_str().to_owned();
            side.push(".len");
            let side = read(Path::new(&side))?;
            let count = codec::parse_length_sidecar(&side)?;
            codec::decode_raw_f32(&bytes, count)?
        }
        other => return Err(SignalError::UnsupportedFile(other.to_string())),
    };
    Ok(samples.into_signal())
}

/// Loads any supported file by extension.
pub fn load_signal(path: &Path) -> Result<Signal> {
    match extension(path).as_str() {
        "wav" | "f32" | "raw" => load_series(path),
        _ => load_image(path),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Band-limited mixture of random plane waves per channel.
    SinMix { channels: usize },
}

/// Number of plane waves per channel in a `SinMix` signal.
pub const SINMIX_WAVES: usize = 12;

/// Generates a reproducible synthetic signal on a `[-1, 1]` grid.
///
/// `SinMix` draws, per channel, [`SINMIX_WAVES`] plane waves
/// `a · sin(2π ⟨k, x⟩ + p)` with direction uniform on the sphere, frequency
/// `|k|` uniform in `[0.25, max(res)/8]` cycles per unit, amplitude `1/|k|`
/// and phase uniform in `[0, 2π)`. Each channel is then min-max scaled to
/// `[0, 1]`.
pub fn synth(kind: SynthKind, seed: u64, resolution: &[usize]) -> Result<Signal> {
    let SynthKind::SinMix { channels } = kind;
    if resolution.is_empty() || resolution.iter().any(|&n| n == 0) || channels == 0 {
        return Err(SignalError::Empty);
    }
    let dims = resolution.len();
    let m: usize = resolution.iter().product();
    let fmax = (*resolution.iter().max().expect("non-empty") as f64 / 8.0).max(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = Uniform::new_inclusive(0.25, fmax);
    let phase = Uniform::new(0.0, 2.0 * PI);
    let gauss = rand_distr::StandardNormal;

    let probe = Signal {
        modality: Modality::Synthetic,
        values: Array2::zeros((m, channels)),
        resolution: resolution.to_vec(),
        value_range: (0.0, 1.0),
    };
    let coords = grid_context(&probe)?.coords;

    let mut values = Array2::zeros((m, channels));
    for ch in 0..channels {
        for _ in 0..SINMIX_WAVES {
            let mut dir: Vec<f64> = (0..dims).map(|_| gauss.sample(&mut rng)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
            dir.iter_mut().for_each(|d| *d /= norm);
            let f = freq.sample(&mut rng);
            let p = phase.sample(&mut rng);
            let amp = 1.0 / f;
            for (i, x) in coords.rows().into_iter().enumerate() {
                let dot: f64 = x.iter().zip(&dir).map(|(a, b)| a * b).sum();
                values[[i, ch]] += amp * (2.0 * PI * f * dot + p).sin();
            }
        }
        let col = values.column(ch);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        values.column_mut(ch).mapv_inplace(|v| if span > 0.0 { (v - lo) / span } else { 0.5 });
    }
    Ok(Signal {
        modality: Modality::Synthetic,
        values,
        resolution: resolution.to_vec(),
        value_range: (0.0, 1.0),
    })
}
