use std::fs;
use std::path::Path;

use super::series::{window_series, NormStats, SeriesSet, SeriesWindow};
use crate::exec::{self, Execution};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// Min-max scales a whole window to gray levels:
/// `round(255 · (p - min) / (max - min))`, rounding half away from zero.
/// A constant window maps to all zeros.
pub fn window_to_pixels(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&p| (255.0 * ((p - lo) / range)).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// One gray image with its class index (`fault label - 1`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageWindow {
    pub pixels: Vec<u8>,
    pub label: usize,
    /// `(run id, window index)` when the image was cut from a series.
    pub provenance: Option<(String, usize)>,
}

impl ImageWindow {
    /// Network input: pixels scaled to `[0, 1]`, shape `[n, w]`.
    pub fn to_tensor<T: Real>(&self, n: usize, w: usize) -> Result<Tensor<T>> {
        let scale = 1.0 / 255.0;
        Tensor::new([n, w], self.pixels.iter().map(|&p| T::from_f64(p as f64 * scale)).collect())
    }
}

pub fn window_to_image(window: &SeriesWindow) -> ImageWindow {
    ImageWindow {
        pixels: window_to_pixels(&window.values),
        label: window.label - 1,
        provenance: Some((window.run_id.clone(), window.index)),
    }
}

/// Labelled `n × w` images for `classes` classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowedDataset {
    pub n: usize,
    pub w: usize,
    pub classes: usize,
    pub images: Vec<ImageWindow>,
}

const GFIM_MAGIC: &[u8; 4] = b"GFIM";
const GFIM_VERSION: u32 = 1;

impl WindowedDataset {
    pub fn new(n: usize, w: usize, classes: usize, images: Vec<ImageWindow>) -> Result<Self> {
        if n == 0 || w == 0 || classes == 0 {
            return Err(Error::invalid("dataset extents must be positive"));
        }
        if classes > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!("{classes} classes do not fit a u16 label")));
        }
        for (i, img) in images.iter().enumerate() {
            if img.pixels.len() != n * w {
                return Err(Error::invalid(format!("image {i} has {} pixels, expected {}", img.pixels.len(), n * w)));
            }
            if img.label >= classes {
                return Err(Error::LabelOutOfRange {
                    label: img.label,
                    classes,
                });
            }
        }
        Ok(WindowedDataset { n, w, classes, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for img in &self.images {
            counts[img.label] += 1;
        }
        counts
    }

    /// Encodes as `GFIM`: magic, then little-endian u32 version, n, w,
    /// classes and count, then per image a u16 label and `n·w` pixel bytes
    /// in row-major (variable, time) order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.images.len() * (2 + self.n * self.w));
        out.extend_from_slice(GFIM_MAGIC);
        for v in [GFIM_VERSION, self.n as u32, self.w as u32, self.classes as u32, self.images.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for img in &self.images {
            out.extend_from_slice(&(img.label as u16).to_le_bytes());
            out.extend_from_slice(&img.pixels);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format("GFIM image set", r);
        if bytes.len() < 24 || &bytes[..4] != GFIM_MAGIC {
            return Err(bad("missing GFIM header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (version, n, w, classes, count) = (word(0), word(1), word(2), word(3), word(4));
        if version != GFIM_VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let record = 2 + n * w;
        let expected = 24 + count * record;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes for {count} images, got {}", bytes.len())));
        }
        let images = bytes[24..]
            .chunks_exact(record)
            .map(|r| ImageWindow {
                label: u16::from_le_bytes([r[0], r[1]]) as usize,
                pixels: r[2..].to_vec(),
                provenance: None,
            })
            .collect();
        Self::new(n, w, classes, images)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Plain-text summary written next to an image set.
    pub fn manifest(&self, extra: &[(&str, String)]) -> String {
        let mut s = String::from("gfim-dataset 1\n");
        s.push_str(&format!("variables {}\nwindow {}\nclasses {}\nimages {}\n", self.n, self.w, self.classes, self.len()));
        s.push_str(&format!("crc32 {:08x}\n", crc32fast::hash(&self.to_bytes())));
        for (c, k) in self.class_counts().iter().enumerate() {
            s.push_str(&format!("class {} {k}\n", c + 1));
        }
        for (k, v) in extra {
            s.push_str(&format!("{k} {v}\n"));
        }
        s
    }
}

/// Normalise with `stats`, cut width-`w` windows and convert them to
/// images. Output is ordered by label, then run order, then window index,
/// whatever `exec`.
pub fn build_dataset(series: &SeriesSet, stats: &NormStats, w: usize, classes: usize, exec: Execution) -> Result<WindowedDataset> {
    let max = series.max_label();
    if max > classes {
        return Err(Error::LabelOutOfRange { label: max, classes });
    }
    let normalized = stats.normalize(series)?;
    let mut windows = window_series(&normalized, w)?;
    windows.sort_by_key(|win| win.label);
    let images = exec::map(exec, &windows, window_to_image);
    WindowedDataset::new(series.variables(), w, classes, images)
}
