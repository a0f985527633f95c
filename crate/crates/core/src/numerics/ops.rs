//! Differentiable primitives recorded on a [`Tape`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{axpy, dot, matmul_nn, matmul_nt, matmul_tn};
use crate::numerics::{SeedRng, Tape, Tensor, Var};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Tape {
    /// Affine map along the trailing dimension: `x · weightᵀ + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return Err(Error::Shape(format!("linear weight must be rank 2, got {ws:?}")));
        }
        let (out, inner) = (ws[0], ws[1]);
        if *xs.last().unwrap() != inner {
            return Err(Error::Shape(format!(
                "linear: input trailing dim {} does not match weight {ws:?}",
                xs.last().unwrap()
            )));
        }
        if let Some(b) = bias {
            self.value(b).expect_shape(&[out], "linear bias")?;
        }
        let rows = self.value(x).rows();
        let mut y = matmul_nt(self.value(x).data(), self.value(weight).data(), rows, inner, out);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for yr in y.chunks_exact_mut(out) {
                for (yv, bv) in yr.iter_mut().zip(bv) {
                    *yv += bv;
                }
            }
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = out;
        let value = Tensor::new(&out_shape, y)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push_op("linear", value, &parents, move |ctx| {
            let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
            let g = ctx.grad.data();
            let dx = if ctx.needs[0] {
                Some(Tensor::new(x.shape(), matmul_nn(g, w.data(), rows, out, inner))?)
            } else {
                None
            };
            let dw = if ctx.needs[1] {
                Some(Tensor::new(w.shape(), matmul_tn(g, x.data(), rows, out, inner))?)
            } else {
                None
            };
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                let mut db = vec![0.0; out];
                for gr in g.chunks_exact(out) {
                    axpy(1.0, gr, &mut db);
                }
                grads.push(Some(Tensor::new(&[out], db)?));
            }
            Ok(grads)
        })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(silu_scalar);
        self.push_op("silu", value, &[x], |ctx| {
            let d = ctx.inputs[0].zip_map(ctx.grad, |x, g| {
                let s = sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            })?;
            Ok(vec![Some(d)])
        })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(softplus_scalar);
        self.push_op("softplus", value, &[x], |ctx| {
            Ok(vec![Some(ctx.inputs[0].zip_map(ctx.grad, |x, g| g * sigmoid(x))?)])
        })
    }

    /// `-exp(x)`, used to keep the state matrix strictly negative.
    pub fn neg_exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| -v.exp());
        self.push_op("neg_exp", value, &[x], |ctx| {
            Ok(vec![Some(ctx.output.zip_map(ctx.grad, |y, g| g * y)?)])
        })
    }

    /// Inverted dropout. Eval mode and `rate == 0` return `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut SeedRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        let mask = Rc::new(mask);
        self.push_op("dropout", value, &[x], move |ctx| {
            let d: Vec<f64> = ctx.grad.data().iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
            Ok(vec![Some(Tensor::new(ctx.grad.shape(), d)?)])
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push_op("add", value, &[a, b], |ctx| {
            Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push_op("mul", value, &[a, b], |ctx| {
            let da = if ctx.needs[0] {
                Some(ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)?)
            } else {
                None
            };
            let db = if ctx.needs[1] {
                Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)?)
            } else {
                None
            };
            Ok(vec![da, db])
        })
    }

    /// `x ⊙ scale + shift` with constant tensors of the same shape as `x`.
    pub fn affine_const(&mut self, x: Var, scale: Tensor, shift: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_same_shape(&scale)?;
        xv.expect_same_shape(shift)?;
        let value = Tensor::new(
            xv.shape(),
            xv.data()
                .iter()
                .zip(scale.data())
                .zip(shift.data())
                .map(|((x, s), b)| x * s + b)
                .collect(),
        )?;
        self.push_op("affine_const", value, &[x], move |ctx| {
            Ok(vec![Some(ctx.grad.zip_map(&scale, |g, s| g * s)?)])
        })
    }

    /// Layer normalization over the trailing dimension with learned scale and bias.
    pub fn layer_norm(&mut self, x: Var, scale: Var, bias: Var, eps: f64) -> Result<Var> {
        let width = self.value(x).last_dim();
        self.value(scale).expect_shape(&[width], "layer_norm scale")?;
        self.value(bias).expect_shape(&[width], "layer_norm bias")?;
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (xr, hr)) in xv
            .data()
            .chunks_exact(width)
            .zip(xhat.chunks_exact_mut(width))
            .enumerate()
        {
            let mean = xr.iter().sum::<f64>() / width as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(scale).data(), self.value(bias).data());
        let mut y = xhat.clone();
        for yr in y.chunks_exact_mut(width) {
            for i in 0..width {
                yr[i] = yr[i] * g[i] + b[i];
            }
        }
        let value = Tensor::new(xv.shape(), y)?;
        let xhat = Rc::new(xhat);
        self.push_op("layer_norm", value, &[x, scale, bias], move |ctx| {
            let gamma = ctx.inputs[1].data();
            let gy = ctx.grad.data();
            let mut dx = vec![0.0; gy.len()];
            let mut dg = vec![0.0; width];
            let mut db = vec![0.0; width];
            let mut dxhat = vec![0.0; width];
            for (r, ((gr, hr), dr)) in gy
                .chunks_exact(width)
                .zip(xhat.chunks_exact(width))
                .zip(dx.chunks_exact_mut(width))
                .enumerate()
            {
                for i in 0..width {
                    dg[i] += gr[i] * hr[i];
                    db[i] += gr[i];
                    dxhat[i] = gr[i] * gamma[i];
                }
                let mean_d = dxhat.iter().sum::<f64>() / width as f64;
                let mean_dh = dot(&dxhat, hr) / width as f64;
                for i in 0..width {
                    dr[i] = inv_std[r] * (dxhat[i] - mean_d - hr[i] * mean_dh);
                }
            }
            Ok(vec![
                Some(Tensor::new(ctx.inputs[0].shape(), dx)?),
                Some(Tensor::new(&[width], dg)?),
                Some(Tensor::new(&[width], db)?),
            ])
        })
    }

    /// Row gather: output row `r` is input row `index[r]`, rows having `width` elements.
    /// Backward scatters (adds) into the source rows.
    pub fn gather_rows(&mut self, x: Var, width: usize, index: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if width == 0 || xv.len() % width != 0 {
            return Err(Error::Shape(format!("row width {width} does not divide {:?}", xv.shape())));
        }
        let in_rows = xv.len() / width;
        if let Some(&bad) = index.iter().find(|&&i| i >= in_rows) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {in_rows} rows")));
        }
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in &index {
            out.extend_from_slice(&xv.data()[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(out_shape, out)?;
        let index = Rc::new(index);
        self.push_op("gather_rows", value, &[x], move |ctx| {
            let mut dx = vec![0.0; ctx.inputs[0].len()];
            for (r, gr) in ctx.grad.data().chunks_exact(width).enumerate() {
                let i = index[r];
                axpy(1.0, gr, &mut dx[i * width..(i + 1) * width]);
            }
            Ok(vec![Some(Tensor::new(ctx.inputs[0].shape(), dx)?)])
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_op("reshape", value, &[x], |ctx| {
            Ok(vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape())?)])
        })
    }

    /// Depthwise causal convolution over `x: [batch, seq, channels]` with
    /// `kernel: [channels, width]`; `kernel[c, j]` weights lag `j`.
    pub fn causal_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("causal_conv input must be rank 3, got {xs:?}")));
        }
        let (batch, seq, ch) = (xs[0], xs[1], xs[2]);
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 2 || ks[0] != ch {
            return Err(Error::Shape(format!("causal_conv kernel {ks:?} does not match {ch} channels")));
        }
        let width = ks[1];
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        let mut y = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..seq {
                let yo = (b * seq + t) * ch;
                for lag in 0..width.min(t + 1) {
                    let xo = (b * seq + t - lag) * ch;
                    for c in 0..ch {
                        y[yo + c] += kd[c * width + lag] * xd[xo + c];
                    }
                }
            }
        }
        let value = Tensor::new(&xs, y)?;
        self.push_op("causal_conv", value, &[x, kernel], move |ctx| {
            let (xd, kd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut dx = vec![0.0; xd.len()];
            let mut dk = vec![0.0; kd.len()];
            for b in 0..batch {
                for t in 0..seq {
                    let yo = (b * seq + t) * ch;
                    for lag in 0..width.min(t + 1) {
                        let xo = (b * seq + t - lag) * ch;
                        for c in 0..ch {
                            dx[xo + c] += kd[c * width + lag] * g[yo + c];
                            dk[c * width + lag] += xd[xo + c] * g[yo + c];
                        }
                    }
                }
            }
            Ok(vec![
                Some(Tensor::new(ctx.inputs[0].shape(), dx)?),
                Some(Tensor::new(ctx.inputs[1].shape(), dk)?),
            ])
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op("sum", value, &[x], |ctx| {
            let g = ctx.grad.data()[0];
            Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push_op("mean", value, &[x], move |ctx| {
            let g = ctx.grad.data()[0] / n;
            Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
        })
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.push_op("sum_squares", value, &[x], |ctx| {
            let g = ctx.grad.data()[0];
            Ok(vec![Some(ctx.inputs[0].map(|v| 2.0 * g * v))])
        })
    }

    /// `sum(x ⊙ weights)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(&weights)?;
        let value = Tensor::scalar(dot(self.value(x).data(), weights.data()));
        self.push_op("weighted_sum", value, &[x], move |ctx| {
            let g = ctx.grad.data()[0];
            Ok(vec![Some(weights.scale(g))])
        })
    }
}
