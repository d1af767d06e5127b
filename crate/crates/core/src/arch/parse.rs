use std::fmt;

use crate::{Error, Result};

/// One entry of an architecture string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// `C(n)`: `n` 3×3 kernels, valid padding, stride 1, ReLU.
    Conv { kernels: usize },
    /// `P(n)` or `P(n,m)`. `rows` pools the variable axis, `cols` the time
    /// axis; `P(n,m)` reads as factor `n` on time and `m` on variables.
    Pool { rows: usize, cols: usize },
    /// `G(n)`: single dense layer from the vectorised image to `n` features.
    GlobalFeature { dim: usize },
    /// `F(n)` / `F(n)*`: hidden dense layer, `*` adds dropout after it.
    FullyConnected { neurons: usize, dropout: bool },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv { kernels } => write!(f, "C({kernels})"),
            LayerSpec::Pool { rows, cols } if rows == cols => write!(f, "P({rows})"),
            LayerSpec::Pool { rows, cols } => write!(f, "P({cols},{rows})"),
            LayerSpec::GlobalFeature { dim } => write!(f, "G({dim})"),
            LayerSpec::FullyConnected { neurons, dropout } => {
                write!(f, "F({neurons}){}", if dropout { "*" } else { "" })
            }
        }
    }
}

/// Parses dash-separated layer tokens such as `C(16)-P(2)-G(10)-F(100)*`.
/// The classification layer is implicit and never written. Errors carry
/// the 1-based token position.
pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
    let mut layers = Vec::new();
    let mut seen_global = false;
    let mut seen_fc = false;
    for (i, raw) in text.split('-').enumerate() {
        let position = i + 1;
        let token = raw.trim();
        let fail = |reason: &str| Error::Parse {
            position,
            token: token.to_string(),
            reason: reason.to_string(),
        };
        let layer = parse_token(token).map_err(|r| fail(&r))?;
        match layer {
            LayerSpec::GlobalFeature { .. } if seen_global => return Err(fail("more than one G(n)")),
            LayerSpec::GlobalFeature { .. } if seen_fc => return Err(fail("G(n) must precede every F(n)")),
            LayerSpec::Conv { .. } | LayerSpec::Pool { .. } if seen_fc => {
                return Err(fail("convolution and pooling must precede every F(n)"))
            }
            LayerSpec::GlobalFeature { .. } => seen_global = true,
            LayerSpec::FullyConnected { .. } => seen_fc = true,
            _ => {}
        }
        layers.push(layer);
    }
    if !seen_fc {
        return Err(Error::Parse {
            position: layers.len(),
            token: text.trim().to_string(),
            reason: "at least one F(n) is required".into(),
        });
    }
    Ok(layers)
}

fn parse_token(token: &str) -> std::result::Result<LayerSpec, String> {
    let (body, star) = match token.strip_suffix('*') {
        Some(b) => (b.trim_end(), true),
        None => (token, false),
    };
    let open = body.find('(').ok_or("expected KIND(args)")?;
    let args = body[open + 1..]
        .strip_suffix(')')
        .ok_or("missing closing parenthesis")?;
    let kind = body[..open].trim();
    let nums = args
        .split(',')
        .map(|a| match a.trim().parse::<usize>() {
            Ok(0) => Err("extents must be >= 1".to_string()),
            Ok(n) => Ok(n),
            Err(_) => Err(format!("{:?} is not a positive integer", a.trim())),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if star && kind != "F" {
        return Err("only F(n) takes a dropout marker".into());
    }
    match (kind, nums.as_slice()) {
        ("C", &[n]) => Ok(LayerSpec::Conv { kernels: n }),
        ("P", &[n]) => Ok(LayerSpec::Pool { rows: n, cols: n }),
        ("P", &[time, vars]) => Ok(LayerSpec::Pool { rows: vars, cols: time }),
        ("G", &[n]) => Ok(LayerSpec::GlobalFeature { dim: n }),
        ("F", &[n]) => Ok(LayerSpec::FullyConnected { neurons: n, dropout: star }),
        ("C" | "G" | "F", _) => Err(format!("{kind} takes exactly one argument")),
        ("P", _) => Err("P takes one or two arguments".into()),
        _ => Err(format!("unknown layer kind {kind:?}")),
    }
}

pub fn layers_to_string(layers: &[LayerSpec]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join("-")
}
