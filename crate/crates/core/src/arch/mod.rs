//! Architecture strings, shape tracing, parameter accounting and the
//! model file format.

mod io;
mod model;
mod parse;

pub use io::{load_model, save_model, MODEL_MAGIC};
pub use model::{ArchSpec, Model, Network, ParamCount, ParamGroup, ShapeTrace, StepShape, DEFAULT_DROPOUT};
pub use parse::{layers_to_string, parse_layers, LayerSpec};

/// The six CNN / GF-CNN architecture pairs studied for 50×20 images and 20
/// fault classes, as `(cnn, gf_cnn)` strings.
pub const REFERENCE_ARCHS: [(&str, &str); 6] = [
    ("C(16)-P(2)-F(100)*", "C(16)-P(2)-G(10)-F(100)*"),
    ("C(16)-P(2)-C(32)-P(2,1)-F(300)*", "C(16)-P(2)-C(32)-P(2,1)-G(10)-F(300)*"),
    ("C(32)-P(2)-C(64)-P(2,1)-F(300)*", "C(32)-P(2)-C(64)-P(2,1)-G(10)-F(300)*"),
    ("C(64)-P(2)-C(64)-C(128)-P(2,1)-F(300)*", "C(64)-P(2)-C(64)-C(128)-P(2,1)-G(10)-F(300)*"),
    ("C(32)-C(64)-P(2)-C(128)-P(2,1)-F(300)*", "C(32)-C(64)-P(2)-C(128)-P(2,1)-G(10)-F(300)*"),
    ("C(64)-C(64)-P(2)-C(128)-C(256)-P(2,1)-F(300)*", "C(64)-C(64)-P(2)-C(128)-C(256)-P(2,1)-G(10)-F(300)*"),
];
