//! Parameterised layers. Each layer holds handles into a [`ParamSet`] and
//! takes the set explicitly so whole models stay pure functions of their
//! parameters.

use rand::Rng;

use crate::error::Result;

use super::ops;
use super::params::{he_normal, ParamId, ParamSet};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: ps.add(format!("{name}.w"), he_normal(&[out_c, in_c, k, k], in_c * k * k, rng)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[out_c])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, ps.get(self.w), ps.get(self.b), self.stride, self.pad)
    }

    /// Accumulates weight/bias gradients, returns the input gradient.
    pub fn backward(&self, ps: &ParamSet, x: &Tensor, dy: &Tensor, grads: &mut ParamSet) -> Result<Tensor> {
        let g = ops::conv2d_backward(x, ps.get(self.w), dy, self.stride, self.pad)?;
        grads.accumulate(self.w, &g.dw)?;
        grads.accumulate(self.b, &g.db)?;
        Ok(g.dx)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: ps.add(format!("{name}.w"), he_normal(&[out_c, in_c, k, k, k], in_c * k * k * k, rng)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[out_c])),
            pad,
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        ops::conv3d(x, ps.get(self.w), ps.get(self.b), 1, self.pad)
    }

    pub fn backward(&self, ps: &ParamSet, x: &Tensor, dy: &Tensor, grads: &mut ParamSet) -> Result<Tensor> {
        let g = ops::conv3d_backward(x, ps.get(self.w), dy, 1, self.pad)?;
        grads.accumulate(self.w, &g.dw)?;
        grads.accumulate(self.b, &g.db)?;
        Ok(g.dx)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: ps.add(format!("{name}.w"), he_normal(&[output, input], input, rng)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[output])),
        }
    }

    /// Both weight and bias start at zero.
    pub fn zeros(ps: &mut ParamSet, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: ps.add(format!("{name}.w"), Tensor::zeros(&[output, input])),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[output])),
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        ops::dense(x, ps.get(self.w), ps.get(self.b))
    }

    pub fn backward(&self, ps: &ParamSet, x: &Tensor, dy: &Tensor, grads: &mut ParamSet) -> Result<Tensor> {
        let g = ops::dense_backward(x, ps.get(self.w), dy)?;
        grads.accumulate(self.w, &g.dw)?;
        grads.accumulate(self.b, &g.db)?;
        Ok(g.dx)
    }
}
