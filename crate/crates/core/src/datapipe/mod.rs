//! Series ingestion, normalisation, windowing and gray-image conversion.

mod csv;
mod image;
mod series;
mod synth;

pub use self::csv::{load_csv, write_csv, CsvSchema};
pub use image::{build_dataset, window_to_image, window_to_pixels, ImageWindow, WindowedDataset};
pub use series::{window_series, NormStats, Run, SeriesSet, SeriesWindow};
pub use synth::{gen_synthetic, ClassPattern, SynthConfig};
