//! Layer types of the network, expressed as compositions of tape
//! primitives. Layers hold parameter handles, not data; the data lives in
//! the model's parameter slice that the tape borrows.

use rand::RngExt;

use crate::seed::SeedRng;
use crate::tensor::{ParamId, Tape, Var};
use crate::{Error, Real, Result};

/// Spatial size of every convolution kernel.
pub const KERNEL_SIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// 3×3 valid convolution, stride 1, followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// Position in the architecture, for error messages.
    pub index: usize,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvLayer {
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, KERNEL_SIZE, KERNEL_SIZE]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < KERNEL_SIZE || w < KERNEL_SIZE {
            return Err(Error::Layer {
                layer: self.index,
                reason: format!("conv needs a map of at least 3x3, got {h}x{w}"),
            });
        }
        Ok((h - KERNEL_SIZE + 1, w - KERNEL_SIZE + 1))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?.to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::Layer {
                layer: self.index,
                reason: format!("conv expects [{}, H, W], got {shape:?}", self.in_channels),
            });
        }
        self.output_hw(shape[1], shape[2])?;
        let k = tape.param(self.kernel)?;
        let b = tape.param(self.bias)?;
        let z = tape.conv2d(x, k, b)?;
        tape.relu(z)
    }
}

/// Non-overlapping max pooling over (variable axis, time axis).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolLayer {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PoolLayer {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Layer {
                layer: self.index,
                reason: "pooling window extents must be >= 1".into(),
            });
        }
        if h < self.rows || w < self.cols {
            return Err(Error::Layer {
                layer: self.index,
                reason: format!("{}x{} pooling window larger than the {h}x{w} map", self.rows, self.cols),
            });
        }
        Ok((h / self.rows, w / self.cols))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?.to_vec();
        if shape.len() != 3 {
            return Err(Error::Layer {
                layer: self.index,
                reason: format!("pooling expects [C, H, W], got {shape:?}"),
            });
        }
        self.output_hw(shape[1], shape[2])?;
        tape.max_pool(x, self.rows, self.cols)
    }
}

/// `f(xᵀW + b)` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub index: usize,
    pub weights: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?.to_vec();
        if shape != [self.fan_in] {
            return Err(Error::Layer {
                layer: self.index,
                reason: format!("dense layer expects a length-{} vector, got {shape:?}", self.fan_in),
            });
        }
        let row = tape.reshape(x, &[1, self.fan_in])?;
        let w = tape.param(self.weights)?;
        let xw = tape.matmul(row, w)?;
        let xw = tape.reshape(xw, &[self.fan_out])?;
        let b = tape.param(self.bias)?;
        let z = tape.add(xw, b)?;
        match self.activation {
            Activation::Relu => tape.relu(z),
            Activation::Identity => Ok(z),
        }
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-rate)` at train time,
/// and evaluation is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    rate: f64,
    pub mode: Mode,
}

impl DropoutSpec {
    pub fn new(rate: f64, mode: Mode) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(DropoutSpec { rate, mode })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Draws a multiplicative mask of zeros and `1/(1-rate)`.
    pub fn mask<T: Real>(&self, len: usize, rng: &mut SeedRng) -> Vec<T> {
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, rng: &mut SeedRng) -> Result<Var> {
        if self.mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let shape = tape.shape(x)?.to_vec();
        let mask = self.mask::<T>(tape.value(x)?.len(), rng);
        let m = tape.constant(crate::tensor::Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

/// Loss `-log softmax(logits)[label]` and the class probabilities.
pub fn softmax_cross_entropy<T: Real>(tape: &mut Tape<'_, T>, logits: Var, label: usize) -> Result<(Var, Vec<T>)> {
    tape.softmax_cross_entropy(logits, label)
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    crate::tensor::softmax_with_log_norm(logits).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, Coord};
    use crate::seed;
    use crate::tensor::Tensor;
    use rand::RngExt;

    fn random(shape: &[usize], rng: &mut SeedRng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv(cin: usize, cout: usize) -> ConvLayer {
        ConvLayer {
            index: 0,
            kernel: ParamId(0),
            bias: ParamId(1),
            in_channels: cin,
            out_channels: cout,
        }
    }

    fn all_coords(params: &[Tensor<f64>]) -> Vec<Coord> {
        params
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.len()).map(move |i| (ParamId(p), i)))
            .collect()
    }

    /// Independent 6-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = k.shape()[0];
        let (oh, ow) = (h - 2, w - 2);
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += k.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[(ci * h + oy + ky) * w + ox + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_gives_nines() {
        let params = vec![
            Tensor::<f64>::new([1, 1, 3, 3], vec![1.0; 9]).unwrap(),
            Tensor::zeros([1]).unwrap(),
        ];
        let mut tape = Tape::with_params(&params);
        let x = tape.constant(Tensor::new([1, 5, 5], vec![1.0; 25]).unwrap());
        let y = conv(1, 1).forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[1, 3, 3]);
        assert_eq!(tape.value(y).unwrap(), &[9.0; 9]);
    }

    #[test]
    fn conv_output_extents_for_image() {
        let params = vec![Tensor::<f64>::zeros([16, 1, 3, 3]).unwrap(), Tensor::zeros([16]).unwrap()];
        let mut tape = Tape::with_params(&params);
        let x = tape.constant(Tensor::zeros([1, 50, 20]).unwrap());
        let y = conv(1, 16).forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[16, 48, 18]);
    }

    #[test]
    fn conv_rejects_small_maps_with_layer_index() {
        let params = vec![Tensor::<f64>::zeros([1, 1, 3, 3]).unwrap(), Tensor::zeros([1]).unwrap()];
        let mut tape = Tape::with_params(&params);
        let x = tape.constant(Tensor::zeros([1, 2, 9]).unwrap());
        let mut layer = conv(1, 1);
        layer.index = 4;
        match layer.forward(&mut tape, x) {
            Err(Error::Layer { layer, .. }) => assert_eq!(layer, 4),
            other => panic!("expected layer error, got {other:?}"),
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = seed::rng(11);
        for trial in 0..30 {
            let cin = 1 + trial % 4;
            let cout = 1 + (trial / 4) % 4;
            let h = 3 + rng.random_range(0..6);
            let w = 3 + rng.random_range(0..6);
            let x = random(&[cin, h, w], &mut rng);
            let params = vec![random(&[cout, cin, 3, 3], &mut rng), random(&[cout], &mut rng)];
            let expect = naive_conv(&x, &params[0], &params[1]);
            let mut tape = Tape::with_params(&params);
            let xv = tape.constant(x);
            let y = conv(cin, cout).forward(&mut tape, xv).unwrap();
            for (a, b) in tape.value(y).unwrap().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = seed::rng(3);
        let x = random(&[2, 6, 5], &mut rng);
        let w = random(&[7, 2, 3, 3], &mut rng);
        let mut params = vec![random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng), x.clone()];
        let layer = conv(2, 3);
        let coords = all_coords(&params);
        let report = check_params(
            &mut params,
            |tape| {
                // The input is a parameter here so its gradient is checked too.
                let xv = tape.param(ParamId(2))?;
                let y = layer.forward(tape, xv)?;
                let f = tape.flatten(y)?;
                let wv = tape.constant(Tensor::new([1, 36], w.data()[..36].to_vec())?);
                let fr = tape.reshape(f, &[1, 36])?;
                let p = tape.mul(fr, wv)?;
                tape.sum(p)
            },
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert!(report.checked > 0);
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let p = PoolLayer { index: 0, rows: 2, cols: 2 };
        let y = p.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[4.]);

        let x = tape.constant(Tensor::zeros([32, 22, 7]).unwrap());
        let time_only = PoolLayer { index: 0, rows: 1, cols: 2 };
        let y = time_only.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[32, 22, 3]);

        let x = tape.constant(Tensor::zeros([16, 48, 18]).unwrap());
        let y = p.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[16, 24, 9]);

        let x = tape.constant(Tensor::zeros([1, 1, 3]).unwrap());
        assert!(matches!(p.forward(&mut tape, x), Err(Error::Layer { .. })));
    }

    #[test]
    fn unit_pool_is_identity() {
        let mut rng = seed::rng(5);
        let data = random(&[3, 4, 5], &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(data.clone());
        let unit = PoolLayer { index: 0, rows: 1, cols: 1 };
        let y = unit.forward(&mut tape, x).unwrap();
        let y = unit.forward(&mut tape, y).unwrap();
        assert_eq!(tape.value(y).unwrap(), data.data());
    }

    #[test]
    fn pool_gradient_goes_to_first_maximum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_f64([1, 2, 2], &[5., 5., 1., 5.]).unwrap());
        let y = tape.max_pool(x, 2, 2).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn pool_gradients_match_finite_differences() {
        let mut rng = seed::rng(8);
        let mut params = vec![random(&[2, 5, 7], &mut rng)];
        let w = random(&[2, 2, 3], &mut rng);
        let coords = all_coords(&params);
        let report = check_params(
            &mut params,
            |tape| {
                let x = tape.param(ParamId(0))?;
                let y = PoolLayer { index: 0, rows: 2, cols: 2 }.forward(tape, x)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(y, wv)?;
                tape.sum(p)
            },
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    fn dense(fan_in: usize, fan_out: usize, activation: Activation) -> DenseLayer {
        DenseLayer {
            index: 0,
            weights: ParamId(0),
            bias: ParamId(1),
            fan_in,
            fan_out,
            activation,
        }
    }

    #[test]
    fn dense_examples() {
        let params = vec![
            Tensor::<f64>::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
            Tensor::zeros([3]).unwrap(),
        ];
        let mut tape = Tape::with_params(&params);
        let x = tape.constant(Tensor::from_f64([3], &[0.5, -2., 7.]).unwrap());
        let y = dense(3, 3, Activation::Identity).forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[0.5, -2., 7.]);

        let params = vec![
            Tensor::<f64>::from_f64([2, 1], &[1., -3.]).unwrap(),
            Tensor::from_f64([1], &[1.]).unwrap(),
        ];
        let mut tape = Tape::with_params(&params);
        let x = tape.constant(Tensor::from_f64([2], &[1., 1.]).unwrap());
        let y = dense(2, 1, Activation::Relu).forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[0.]);

        let x = tape.constant(Tensor::zeros([3]).unwrap());
        assert!(matches!(
            dense(2, 1, Activation::Relu).forward(&mut tape, x),
            Err(Error::Layer { .. })
        ));
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = seed::rng(21);
        let x = random(&[6], &mut rng);
        let mut params = vec![random(&[6, 4], &mut rng), random(&[4], &mut rng)];
        let coords = all_coords(&params);
        for act in [Activation::Relu, Activation::Identity] {
            let layer = dense(6, 4, act);
            let report = check_params(
                &mut params,
                |tape| {
                    let xv = tape.constant(x.clone());
                    let y = layer.forward(tape, xv)?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &coords,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{act:?}: {report:?}");
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = seed::rng(1);
        let data = Tensor::<f64>::from_f64([4], &[1., -2., 3., 4.]).unwrap();
        for spec in [
            DropoutSpec::new(0.0, Mode::Train).unwrap(),
            DropoutSpec::new(0.5, Mode::Eval).unwrap(),
            DropoutSpec::new(0.9, Mode::Eval).unwrap(),
        ] {
            let mut tape = Tape::new();
            let x = tape.constant(data.clone());
            let y = spec.forward(&mut tape, x, &mut rng).unwrap();
            assert_eq!(tape.value(y).unwrap(), data.data());
        }
        assert!(DropoutSpec::new(1.0, Mode::Train).is_err());
        assert!(DropoutSpec::new(-0.1, Mode::Train).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let spec = DropoutSpec::new(0.5, Mode::Train).unwrap();
        let mut rng = seed::rng(99);
        let mask: Vec<f64> = spec.mask(100_000, &mut rng);
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
    }

    #[test]
    fn dropout_gradient_with_frozen_mask() {
        let spec = DropoutSpec::new(0.5, Mode::Train).unwrap();
        let mut rng = seed::rng(4);
        let mut params = vec![random(&[10], &mut rng)];
        let coords = all_coords(&params);
        let report = check_params(
            &mut params,
            |tape| {
                let x = tape.param(ParamId(0))?;
                // Same seed every evaluation: the mask is frozen.
                let y = spec.forward(tape, x, &mut seed::rng(1234))?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros([20]).unwrap());
        let (loss, probs) = softmax_cross_entropy(&mut tape, z, 3).unwrap();
        assert!((tape.value(loss).unwrap()[0] - 20f64.ln()).abs() < 1e-12);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(softmax_cross_entropy(&mut tape, z, 20).is_err());
    }

    #[test]
    fn softmax_cross_entropy_matches_direct_formula() {
        let mut rng = seed::rng(17);
        for _ in 0..200 {
            let c = rng.random_range(2..25);
            let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-8.0..8.0)).collect();
            let label = rng.random_range(0..c);
            // Direct evaluation without max shifting.
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            let expect = -(logits[label].exp() / denom).ln();
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::new([c], logits.clone()).unwrap());
            let (loss, probs) = softmax_cross_entropy(&mut tape, z, label).unwrap();
            assert!((tape.value(loss).unwrap()[0] - expect).abs() < 1e-10);
            assert!(probs.iter().all(|&p| p > 0.0));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let mut rng = seed::rng(2);
        let mut params = vec![random(&[7], &mut rng)];
        let coords = all_coords(&params);
        let report = check_params(
            &mut params,
            |tape| {
                let z = tape.param(ParamId(0))?;
                Ok(softmax_cross_entropy(tape, z, 4)?.0)
            },
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
