//! Dense and dot-product layers.

use rand::Rng;

use super::tape::{Activation, Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Fully connected layer `act(W x + b)` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Option<Tensor>, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 {
            return shape_err("DenseLayer::new", format!("weight {:?} is not a matrix", weight.shape()));
        }
        if let Some(b) = &bias {
            if b.numel() != weight.shape()[0] {
                return shape_err(
                    "DenseLayer::new",
                    format!("bias of {} for {} outputs", b.numel(), weight.shape()[0]),
                );
            }
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Weights uniform in ±√(1/fan_in), bias zero.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        with_bias: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: uniform_fan_in(&[outputs, inputs], inputs, rng),
            bias: with_bias.then(|| Tensor::zeros(&[outputs])),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    /// Forward pass on a `[rows, in]` batch (or a single length-`in` vector).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let single = x.rank() == 1;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let xv = if single {
            tape.reshape(xv, &[1, x.numel()])?
        } else {
            xv
        };
        let w = tape.constant(self.weight.clone());
        let b = self.bias.clone().map(|b| tape.constant(b));
        let y = dense(&mut tape, xv, w, b, self.activation)?;
        let out = tape.value(y).clone();
        if single {
            out.reshape(&[self.outputs()])
        } else {
            Ok(out)
        }
    }
}

/// Dense layer on a tape.
pub fn dense(tape: &mut Tape, x: Var, w: Var, b: Option<Var>, act: Activation) -> Result<Var> {
    let mut y = tape.linear(x, w)?;
    if let Some(b) = b {
        y = tape.add_bias(y, b)?;
    }
    Ok(tape.activation(y, act))
}

/// Pairs column `k` of a reshaped `l × d` feature matrix with weight column
/// `ω_k`, emitting `d` scalars.
///
/// The feature vector is filled column by column, so `e_k` is the `k`-th
/// contiguous run of `l` values. Weights are stored the same way, as a
/// `[d, l]` row-major tensor whose row `k` is `ω_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DotProductLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl DotProductLayer {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (d, _) = weight.dims2();
        if weight.rank() != 2 {
            return shape_err("DotProductLayer::new", "weight must be [d, l]");
        }
        if let Some(b) = &bias {
            if b.numel() != d {
                return shape_err("DotProductLayer::new", format!("bias of {} for d = {d}", b.numel()));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn block(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, feature: &Tensor) -> Result<Tensor> {
        let d = self.outputs();
        if !feature.numel().is_multiple_of(d) {
            return shape_err(
                "dot_product",
                format!("feature length {} is not a multiple of d = {d}", feature.numel()),
            );
        }
        if feature.numel() != self.weight.numel() {
            return shape_err(
                "dot_product",
                format!(
                    "feature length {} does not match weight {:?}",
                    feature.numel(),
                    self.weight.shape()
                ),
            );
        }
        let mut tape = Tape::new();
        let f = tape.constant(feature.clone().reshape(&[1, feature.numel()])?);
        let w = tape.constant(self.weight.clone().reshape(&[1, feature.numel()])?);
        let b = match &self.bias {
            Some(b) => Some(tape.constant(b.clone().reshape(&[1, d])?)),
            None => None,
        };
        let y = dot_product(&mut tape, f, w, b, self.block())?;
        tape.value(y).clone().reshape(&[d])
    }
}

/// Row-wise dot-product layer on a tape: `features` and `weights` are both
/// `[rows, l·d]`, `bias` (if any) is `[rows, d]`.
pub fn dot_product(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    bias: Option<Var>,
    block: usize,
) -> Result<Var> {
    let prod = tape.mul(features, weights)?;
    let y = tape.block_sum(prod, block)?;
    match bias {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}


pub(crate) fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_relu() {
        let w = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let layer = DenseLayer::new(w, Some(Tensor::zeros(&[2])), Activation::Relu).unwrap();
        let y = layer.forward(&Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = DenseLayer::init(2, 2, true, Activation::Identity, &mut rng);
        layer.bias = Some(Tensor::vector(vec![0.3, -0.2]));
        let y = layer.forward(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.3, -0.2]);
    }

    #[test]
    fn matches_direct_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = DenseLayer::init(2, 3, false, Activation::Identity, &mut rng);
        let x = [0.7, -1.3];
        let y = layer.forward(&Tensor::vector(x.to_vec())).unwrap();
        for o in 0..3 {
            let expect = layer.weight.get2(o, 0) * x[0] + layer.weight.get2(o, 1) * x[1];
            assert!((y.data()[o] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_rejects_wrong_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = DenseLayer::init(3, 2, true, Activation::Relu, &mut rng);
        let err = layer.forward(&Tensor::vector(vec![1.0, 2.0])).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn dot_product_column_sums() {
        let layer = DotProductLayer::new(Tensor::full(&[2, 4], 1.0), None).unwrap();
        let y = layer.forward(&Tensor::vector(vec![1.0; 8])).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0]);
    }

    #[test]
    fn dot_product_zero_weights() {
        let layer = DotProductLayer::new(Tensor::zeros(&[2, 4]), Some(Tensor::zeros(&[2]))).unwrap();
        let y = layer.forward(&Tensor::vector(vec![0.3, 1.0, -2.0, 4.0, 5.0, 6.0, 7.0, 8.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn dot_product_direct_evaluation() {
        // e1 = (1,2,3,4), e2 = (0,1,0,1); ω1 = (1,0,0,0), ω2 = (1,1,1,1)
        let w = Tensor::matrix(2, 4, vec![1., 0., 0., 0., 1., 1., 1., 1.]).unwrap();
        let layer = DotProductLayer::new(w, None).unwrap();
        let y = layer
            .forward(&Tensor::vector(vec![1., 2., 3., 4., 0., 1., 0., 1.]))
            .unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dot_product_rejects_indivisible_length() {
        let layer = DotProductLayer::new(Tensor::zeros(&[2, 4]), None).unwrap();
        assert!(layer.forward(&Tensor::vector(vec![1.0; 7])).is_err());
    }

    #[test]
    fn dot_product_equals_block_diagonal_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (d, l) in [(2, 4), (1, 8), (3, 2)] {
            let weight = uniform_fan_in(&[d, l], l, &mut rng);
            let bias = uniform_fan_in(&[d], 1, &mut rng);
            let feature = uniform_fan_in(&[l * d], 1, &mut rng);
            let dot = DotProductLayer::new(weight.clone(), Some(bias.clone())).unwrap();

            let mut block = vec![0.0; d * l * d];
            for k in 0..d {
                for r in 0..l {
                    block[k * (l * d) + k * l + r] = weight.get2(k, r);
                }
            }
            let dense = DenseLayer::new(
                Tensor::matrix(d, l * d, block).unwrap(),
                Some(bias),
                Activation::Identity,
            )
            .unwrap();
            let a = dot.forward(&feature).unwrap();
            let b = dense.forward(&feature).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-14);
            }
        }
    }
}
