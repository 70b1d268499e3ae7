//! Multi-channel real-valued images and their file formats.
//!
//! `AttributeImage` holds rendered color, depth, opacity, confidence maps and
//! diffusion latents. Pixels are stored row-major with interleaved channels.
//! In-memory values are `f64`; the PFM codec stores them as little-endian `f32`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl AttributeImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{}x{}x{} = {}", width, height, channels, width * height * channels),
                data.len(),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite image value at index {i}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &AttributeImage) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_shape(&self, other: &AttributeImage) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ))
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &AttributeImage, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_shape(other)?;
        Ok(self.with_data(
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Channel `c` as a single-channel image.
    pub fn channel(&self, c: usize) -> Self {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    /// Same shape, new buffer. Panics if the length does not match.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "image buffer length");
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    /// Writes a little-endian PFM (`PF` for 3 channels, `Pf` for 1). Rows are stored bottom-up.
    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_pfm_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_pfm_bytes(&self) -> Result<Vec<u8>> {
        let tag = match self.channels {
            3 => "PF",
            1 => "Pf",
            c => {
                return Err(Error::InvalidArgument(format!(
                    "PFM supports 1 or 3 channels, got {c}"
                )))
            }
        };
        let mut out = Vec::with_capacity(self.data.len() * 4 + 32);
        write!(out, "{tag}\n{} {}\n-1.0\n", self.width, self.height).expect("vec write");
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        Self::read_pfm_from(&mut reader).map_err(|e| match e {
            PfmError::Io(err) => Error::io(path, err),
            PfmError::Format(msg) => Error::parse(path, msg),
        })
    }

    fn read_pfm_from<R: BufRead>(reader: &mut R) -> Result<Self, PfmError> {
        let mut tokens = Vec::new();
        // header: tag, width, height, scale; whitespace separated, one whitespace byte after scale
        while tokens.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(PfmError::Format("truncated header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        let channels = match tokens[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(PfmError::Format(format!("bad tag {other:?}"))),
        };
        let width: usize = tokens[1]
            .parse()
            .map_err(|_| PfmError::Format(format!("bad width {:?}", tokens[1])))?;
        let height: usize = tokens[2]
            .parse()
            .map_err(|_| PfmError::Format(format!("bad height {:?}", tokens[2])))?;
        let scale: f64 = tokens[3]
            .parse()
            .map_err(|_| PfmError::Format(format!("bad scale {:?}", tokens[3])))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(PfmError::Format("scale must be nonzero".into()));
        }
        let little = scale < 0.0;
        let n = width * height * channels;
        let mut buf = vec![0u8; n * 4];
        reader.read_exact(&mut buf)?;
        let mut data = vec![0.0; n];
        let row = width * channels;
        for (k, chunk) in buf.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            if !v.is_finite() {
                return Err(PfmError::Format(format!("non-finite sample at {k}")));
            }
            let file_row = k / row;
            let y = height - 1 - file_row;
            data[y * row + k % row] = v as f64;
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Writes an 8-bit PNG for viewing; values are clamped to [0, 1].
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.iter().map(|&v| to_u8(v)).collect())
                .expect("buffer size")
                .save(path),
            3 => image::RgbImage::from_raw(w, h, self.data.iter().map(|&v| to_u8(v)).collect())
                .expect("buffer size")
                .save(path),
            c => {
                return Err(Error::InvalidArgument(format!(
                    "PNG export supports 1 or 3 channels, got {c}"
                )))
            }
        };
        res.map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }
}

enum PfmError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for PfmError {
    fn from(e: std::io::Error) -> Self {
        PfmError::Io(e)
    }
}
