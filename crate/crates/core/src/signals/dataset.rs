//! Directory-of-files datasets with an explicit train/test split file.
//!
//! The split file `split.txt` lists one `train <file>` or `test <file>` entry
//! per line; blank lines and `#` comments are ignored. When a directory has
//! no split file, [`ensure_split`] writes one: supported files are sorted
//! lexicographically and the last `⌈n·f⌉` go to the test part.

use std::path::Path;

use super::{codec, load_signal, synth, Result, Signal, SignalError, SynthKind};
use crate::seeds;

pub const SPLIT_FILE: &str = "split.txt";

const EXTENSIONS: &[&str] = &["ppm", "pgm", "pnm", "png", "wav", "f32", "raw"];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for name in &self.train {
            out.push_str("train ");
            out.push_str(name);
            out.push('\n');
        }
        for name in &self.test {
            out.push_str("test ");
            out.push_str(name);
            out.push('\n');
        }
        out
    }
}

pub fn parse_split(text: &str) -> Result<Split> {
    let mut split = Split::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| SignalError::Split { line: i + 1, message };
        let (part, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| err(format!("expected `<train|test> <file>`, got `{line}`")))?;
        let name = name.trim();
        if name.contains('/') || name.contains('\\') || name == ".." || name == "." {
            return Err(err(format!("`{name}` must be a plain file name")));
        }
        match part {
            "train" => split.train.push(name.to_string()),
            "test" => split.test.push(name.to_string()),
            other => return Err(err(format!("unknown part `{other}`"))),
        }
    }
    Ok(split)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SignalError + '_ {
    move |source| SignalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Supported signal files in `dir`, sorted lexicographically.
pub fn list_signal_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext = Path::new(&name)
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if EXTENSIONS.contains(&ext.as_str()) && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn default_split(files: &[String], test_fraction: f64) -> Split {
    let n = files.len();
    let mut n_test = (n as f64 * test_fraction.clamp(0.0, 1.0)).ceil() as usize;
    if n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    } else {
        n_test = 0;
    }
    Split {
        train: files[..n - n_test].to_vec(),
        test: files[n - n_test..].to_vec(),
    }
}

/// Reads `dir/split.txt`, writing a default one first if it does not exist.
pub fn ensure_split(dir: &Path, test_fraction: f64) -> Result<Split> {
    let path = dir.join(SPLIT_FILE);
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        return parse_split(&text);
    }
    let split = default_split(&list_signal_files(dir)?, test_fraction);
    std::fs::write(&path, split.to_text()).map_err(io_err(&path))?;
    Ok(split)
}

#[derive(Clone, Debug)]
pub struct NamedSignal {
    pub name: String,
    pub signal: Signal,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<NamedSignal>,
    pub test: Vec<NamedSignal>,
}

fn load_all(dir: &Path, names: &[String]) -> Result<Vec<NamedSignal>> {
    names
        .iter()
        .map(|name| {
            Ok(NamedSignal {
                name: name.clone(),
                signal: load_signal(&dir.join(name))?,
            })
        })
        .collect()
}

pub fn load_dataset(dir: &Path, test_fraction: f64) -> Result<Dataset> {
    let split = ensure_split(dir, test_fraction)?;
    Ok(Dataset {
        train: load_all(dir, &split.train)?,
        test: load_all(dir, &split.test)?,
    })
}

/// Writes `count` synthetic 8-bit images `synth_0000.ppm`, ... plus a
/// split file. Signal `i` uses seed `seeds::derive(seed, seeds::SYNTH, i)`.
pub fn write_synth_dataset(
    dir: &Path,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<Split> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let s = synth(
            SynthKind::SinMix { channels },
            seeds::derive(seed, seeds::SYNTH, i as u64),
            &[height, width],
        )?;
        let img = codec::Image {
            width,
            height,
            channels,
            data: s.values.iter().map(|v| (v * 255.0).round() as u8).collect(),
        };
        let name = format!("synth_{i:04}.ppm");
        let path = dir.join(&name);
        std::fs::write(&path, codec::encode_pnm(&img)).map_err(io_err(&path))?;
        names.push(name);
    }
    let split = default_split(&names, test_fraction);
    let path = dir.join(SPLIT_FILE);
    std::fs::write(&path, split.to_text()).map_err(io_err(&path))?;
    Ok(split)
}
