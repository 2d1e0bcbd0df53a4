//! Files a run writes: PPM frames, JSON lines, checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mvd_core::train::{read_checkpoint, write_checkpoint, Trainer};
use mvd_core::video::VideoClip;
use serde::Serialize;

use crate::error::{CliError, Result};

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Binary PPM (`P6`, maxval 255) of frame `t`, view `c`.
pub fn ppm_bytes(clip: &VideoClip, t: usize, c: usize) -> Vec<u8> {
    let (h, w) = (clip.height(), clip.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for v in clip.pixel(t, c, y, x) {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Header fields and pixel bytes of a `P6` file.
pub fn parse_ppm(bytes: &[u8]) -> Option<(usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes.get(i)?.is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while !bytes.get(i)?.is_ascii_whitespace() {
            i += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).ok()?);
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let pixels = bytes.get(i + 1..)?;
    (fields[0] == "P6" && fields[3] == "255" && pixels.len() == w * h * 3).then_some((w, h, pixels))
}

/// Appends one JSON object per line.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            create_dir(dir)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn save_checkpoint(tr: &Trainer, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(tr, &mut buf)?;
    write_file(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    read_checkpoint(bytes.as_slice()).map_err(|e| CliError::Incompatible(format!("{}: {e}", path.display())))
}
