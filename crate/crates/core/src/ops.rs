//! Forward kernels and their reverse-mode gradients.
//!
//! Every public op is a method on [`Graph`]: it validates shapes, computes
//! the forward values, and records a tape node holding the saved state its
//! backward needs. All kernels iterate in a fixed row-major order, so
//! repeated runs of the same graph are bitwise identical.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TapeOp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch-norm mode: batch statistics (train) or running statistics (eval).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Eval,
}

/// Affine batch-norm parameters plus running statistics. The running
/// buffers are state, not trainable parameters; train-mode forward updates
/// them in place.
#[derive(Clone)]
pub struct BatchNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: Tensor::filled(&[channels], S::one())?.requires_grad(true),
            beta: Tensor::zeros(&[channels])?.requires_grad(true),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::filled(&[channels], S::one())?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

fn finish<S: Scalar>(name: &str, dims: &[usize], data: Vec<S>, needs: bool) -> Result<Tensor<S>> {
    let out = Tensor::from_vec(data, dims)?.requires_grad(needs);
    debug_assert!(out.all_finite(), "{name}: non-finite value in output");
    let _ = name;
    Ok(out)
}

/// Channel layout of a batch-norm input: either row matrices `[N, C]` or
/// feature maps `[B, C, H, W]`.
fn bn_layout(dims: &[usize]) -> Result<(usize, usize, usize)> {
    // returns (channels, per-channel count M, spatial block HW)
    match dims.len() {
        2 => Ok((dims[1], dims[0], 1)),
        4 => Ok((dims[1], dims[0] * dims[2] * dims[3], dims[2] * dims[3])),
        r => Err(CoreError::shape(format!(
            "batch_norm expects rank 2 or 4 input, got rank {r}"
        ))),
    }
}

fn for_each_channel_index(dims: &[usize], c: usize, mut f: impl FnMut(usize)) {
    if dims.len() == 2 {
        let (n, ch) = (dims[0], dims[1]);
        for row in 0..n {
            f(row * ch + c);
        }
    } else {
        let (b, ch, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        for bi in 0..b {
            let base = (bi * ch + c) * hw;
            for i in 0..hw {
                f(base + i);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

struct AddOp<S: Scalar> {
    a: Tensor<S>,
    b: Tensor<S>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for AddOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if self.a.needs_grad() {
            self.a.accumulate_grad(&g);
        }
        if self.b.needs_grad() {
            self.b.accumulate_grad(&g);
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "add"
    }
}

struct MulOp<S: Scalar> {
    a: Tensor<S>,
    b: Tensor<S>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for MulOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if self.a.needs_grad() {
            let bv = self.b.data();
            let da: Vec<S> = g.iter().zip(bv.iter()).map(|(&g, &b)| g * b).collect();
            drop(bv);
            self.a.accumulate_grad(&da);
        }
        if self.b.needs_grad() {
            let av = self.a.data();
            let db: Vec<S> = g.iter().zip(av.iter()).map(|(&g, &a)| g * a).collect();
            drop(av);
            self.b.accumulate_grad(&db);
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "mul"
    }
}

struct ReluOp<S: Scalar> {
    input: Tensor<S>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for ReluOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if self.input.needs_grad() {
            let x = self.input.data();
            let dx: Vec<S> = g
                .iter()
                .zip(x.iter())
                .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                .collect();
            drop(x);
            self.input.accumulate_grad(&dx);
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "relu"
    }
}

struct ScaleOp<S: Scalar> {
    input: Tensor<S>,
    factor: S,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for ScaleOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if self.input.needs_grad() {
            let dx: Vec<S> = g.iter().map(|&g| g * self.factor).collect();
            self.input.accumulate_grad(&dx);
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "scale"
    }
}

struct SumAllOp<S: Scalar> {
    input: Tensor<S>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for SumAllOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if self.input.needs_grad() {
            let dx = vec![g[0]; self.input.numel()];
            self.input.accumulate_grad(&dx);
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "sum_all"
    }
}

// ---------------------------------------------------------------------------
// linear maps
// ---------------------------------------------------------------------------

struct LinearOp<S: Scalar> {
    input: Tensor<S>,
    weight: Tensor<S>,
    bias: Tensor<S>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for LinearOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        let n = self.input.dims()[0];
        let c_in = self.input.dims()[1];
        let c_out = self.weight.dims()[0];
        let x = self.input.data();
        let w = self.weight.data();
        if self.input.needs_grad() {
            let mut dx = vec![S::zero(); n * c_in];
            for row in 0..n {
                for o in 0..c_out {
                    let go = g[row * c_out + o];
                    for i in 0..c_in {
                        dx[row * c_in + i] = dx[row * c_in + i] + go * w[o * c_in + i];
                    }
                }
            }
            drop(x);
            drop(w);
            self.input.accumulate_grad(&dx);
            return self.backward_params(&g);
        }
        drop(x);
        drop(w);
        self.backward_params(&g)
    }

    fn name(&self) -> &'static str {
        "linear"
    }
}

impl<S: Scalar> LinearOp<S> {
    fn backward_params(&self, g: &[S]) -> Result<()> {
        let n = self.input.dims()[0];
        let c_in = self.input.dims()[1];
        let c_out = self.weight.dims()[0];
        if self.weight.needs_grad() {
            let x = self.input.data();
            let mut dw = vec![S::zero(); c_out * c_in];
            for row in 0..n {
                for o in 0..c_out {
                    let go = g[row * c_out + o];
                    for i in 0..c_in {
                        dw[o * c_in + i] = dw[o * c_in + i] + go * x[row * c_in + i];
                    }
                }
            }
            drop(x);
            self.weight.accumulate_grad(&dw);
        }
        if self.bias.needs_grad() {
            let mut db = vec![S::zero(); c_out];
            for row in 0..n {
                for o in 0..c_out {
                    db[o] = db[o] + g[row * c_out + o];
                }
            }
            self.bias.accumulate_grad(&db);
        }
        Ok(())
    }
}

struct PointwiseLinearOp<S: Scalar> {
    input: Tensor<S>,
    weight: Tensor<S>,
    bias: Tensor<S>,
    out: Tensor<S>,
}

impl<S: Scalar> PointwiseLinearOp<S> {
    fn geometry(&self) -> (usize, usize, usize, usize) {
        let d = self.input.dims();
        if d.len() == 3 {
            (1, d[0], d[1], d[2])
        } else {
            (d[0], d[1], d[2], d[3])
        }
    }
}

impl<S: Scalar> TapeOp<S> for PointwiseLinearOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        let (b, c_in, h, w) = self.geometry();
        let c_out = self.weight.dims()[0];
        let hw = h * w;
        let x = self.input.data();
        let wt = self.weight.data();
        let mut dx = vec![S::zero(); self.input.numel()];
        let mut dw = vec![S::zero(); c_out * c_in];
        let mut db = vec![S::zero(); c_out];
        for bi in 0..b {
            for o in 0..c_out {
                let g_base = (bi * c_out + o) * hw;
                for p in 0..hw {
                    let go = g[g_base + p];
                    db[o] = db[o] + go;
                    for i in 0..c_in {
                        let x_idx = (bi * c_in + i) * hw + p;
                        dx[x_idx] = dx[x_idx] + go * wt[o * c_in + i];
                        dw[o * c_in + i] = dw[o * c_in + i] + go * x[x_idx];
                    }
                }
            }
        }
        drop(x);
        drop(wt);
        if self.input.needs_grad() {
            self.input.accumulate_grad(&dx);
        }
        if self.weight.needs_grad() {
            self.weight.accumulate_grad(&dw);
        }
        if self.bias.needs_grad() {
            self.bias.accumulate_grad(&db);
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "pointwise_linear"
    }
}

struct Conv2dOp<S: Scalar> {
    input: Tensor<S>,
    weight: Tensor<S>,
    out: Tensor<S>,
    stride: usize,
    pad: usize,
}

impl<S: Scalar> Conv2dOp<S> {
    fn geometry(&self) -> (usize, usize, usize, usize) {
        let d = self.input.dims();
        if d.len() == 3 {
            (1, d[0], d[1], d[2])
        } else {
            (d[0], d[1], d[2], d[3])
        }
    }
}

impl<S: Scalar> TapeOp<S> for Conv2dOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        let (b, c_in, h, w) = self.geometry();
        let c_out = self.weight.dims()[0];
        let k = self.weight.dims()[2];
        let od = self.out.dims();
        let (oh, ow) = (od[od.len() - 2], od[od.len() - 1]);
        let x = self.input.data();
        let wt = self.weight.data();
        let mut dx = vec![S::zero(); self.input.numel()];
        let mut dw = vec![S::zero(); self.weight.numel()];
        for bi in 0..b {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[((bi * c_out + co) * oh + oy) * ow + ox];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let x_idx = ((bi * c_in + ci) * h + iy as usize) * w
                                        + ix as usize;
                                    let w_idx = ((co * c_in + ci) * k + ky) * k + kx;
                                    dx[x_idx] = dx[x_idx] + go * wt[w_idx];
                                    dw[w_idx] = dw[w_idx] + go * x[x_idx];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(wt);
        if self.input.needs_grad() {
            self.input.accumulate_grad(&dx);
        }
        if self.weight.needs_grad() {
            self.weight.accumulate_grad(&dw);
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }
}

struct MatmulOp<S: Scalar> {
    a: Tensor<S>,
    b: Tensor<S>,
    out: Tensor<S>,
    // true: out = a * b^T with b of shape [M, K]
    transpose_b: bool,
}

impl<S: Scalar> TapeOp<S> for MatmulOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        let n = self.a.dims()[0];
        let k = self.a.dims()[1];
        let m = self.out.dims()[1];
        let av = self.a.data();
        let bv = self.b.data();
        if self.a.needs_grad() {
            let mut da = vec![S::zero(); n * k];
            for i in 0..n {
                for j in 0..m {
                    let gij = g[i * m + j];
                    for p in 0..k {
                        let b_val = if self.transpose_b {
                            bv[j * k + p]
                        } else {
                            bv[p * m + j]
                        };
                        da[i * k + p] = da[i * k + p] + gij * b_val;
                    }
                }
            }
            drop(av);
            let a = &self.a;
            a.accumulate_grad(&da);
            if self.b.needs_grad() {
                let av = self.a.data();
                let db = self.grad_b(&g, &av, n, k, m);
                drop(av);
                drop(bv);
                self.b.accumulate_grad(&db);
            }
            return Ok(());
        }
        if self.b.needs_grad() {
            let db = self.grad_b(&g, &av, n, k, m);
            drop(av);
            drop(bv);
            self.b.accumulate_grad(&db);
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "matmul"
    }
}

impl<S: Scalar> MatmulOp<S> {
    fn grad_b(&self, g: &[S], av: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
        let mut db = vec![S::zero(); self.b.numel()];
        for i in 0..n {
            for j in 0..m {
                let gij = g[i * m + j];
                for p in 0..k {
                    let idx = if self.transpose_b { j * k + p } else { p * m + j };
                    db[idx] = db[idx] + gij * av[i * k + p];
                }
            }
        }
        db
    }
}

// ---------------------------------------------------------------------------
// normalization and reductions
// ---------------------------------------------------------------------------

struct BatchNormOp<S: Scalar> {
    input: Tensor<S>,
    gamma: Tensor<S>,
    beta: Tensor<S>,
    out: Tensor<S>,
    xhat: Vec<S>,
    inv_std: Vec<S>,
    mode: BnMode,
}

impl<S: Scalar> TapeOp<S> for BatchNormOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        let dims = self.input.dims();
        let (channels, m, _) = bn_layout(dims)?;
        let gamma = self.gamma.data();
        let m_s = S::from_f64(m as f64);
        let mut dgamma = vec![S::zero(); channels];
        let mut dbeta = vec![S::zero(); channels];
        let mut dx = vec![S::zero(); self.input.numel()];
        for c in 0..channels {
            let mut sum_g = S::zero();
            let mut sum_gx = S::zero();
            for_each_channel_index(dims, c, |i| {
                sum_g = sum_g + g[i];
                sum_gx = sum_gx + g[i] * self.xhat[i];
            });
            dgamma[c] = sum_gx;
            dbeta[c] = sum_g;
            let scale = gamma[c] * self.inv_std[c];
            match self.mode {
                BnMode::Train => {
                    let mean_g = sum_g / m_s;
                    let mean_gx = sum_gx / m_s;
                    for_each_channel_index(dims, c, |i| {
                        dx[i] = scale * (g[i] - mean_g - self.xhat[i] * mean_gx);
                    });
                }
                BnMode::Eval => {
                    for_each_channel_index(dims, c, |i| {
                        dx[i] = scale * g[i];
                    });
                }
            }
        }
        drop(gamma);
        if self.input.needs_grad() {
            self.input.accumulate_grad(&dx);
        }
        if self.gamma.needs_grad() {
            self.gamma.accumulate_grad(&dgamma);
        }
        if self.beta.needs_grad() {
            self.beta.accumulate_grad(&dbeta);
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "batch_norm"
    }
}

struct SoftmaxRowsOp<S: Scalar> {
    input: Tensor<S>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for SoftmaxRowsOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if !self.input.needs_grad() {
            return Ok(());
        }
        let (n, m) = (self.input.dims()[0], self.input.dims()[1]);
        let y = self.out.data();
        let mut dz = vec![S::zero(); n * m];
        for i in 0..n {
            let row = i * m;
            let mut dot = S::zero();
            for j in 0..m {
                dot = dot + g[row + j] * y[row + j];
            }
            for j in 0..m {
                dz[row + j] = y[row + j] * (g[row + j] - dot);
            }
        }
        drop(y);
        self.input.accumulate_grad(&dz);
        Ok(())
    }

    fn name(&self) -> &'static str {
        "softmax_rows"
    }
}

struct GlobalAvgPoolOp<S: Scalar> {
    input: Tensor<S>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for GlobalAvgPoolOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if !self.input.needs_grad() {
            return Ok(());
        }
        let d = self.input.dims();
        let (b, c, hw) = if d.len() == 3 {
            (1, d[0], d[1] * d[2])
        } else {
            (d[0], d[1], d[2] * d[3])
        };
        let inv = S::one() / S::from_f64(hw as f64);
        let mut dx = vec![S::zero(); self.input.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let go = g[bi * c + ci] * inv;
                let base = (bi * c + ci) * hw;
                for p in 0..hw {
                    dx[base + p] = go;
                }
            }
        }
        self.input.accumulate_grad(&dx);
        Ok(())
    }

    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
}

// ---------------------------------------------------------------------------
// layout and indexing
// ---------------------------------------------------------------------------

struct PermutePixelsOp<S: Scalar> {
    input: Tensor<S>,
    out: Tensor<S>,
    // true: [C,H,W] -> [N,C]; false: [N,C] -> [C,H,W]
    to_rows: bool,
}

impl<S: Scalar> TapeOp<S> for PermutePixelsOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if !self.input.needs_grad() {
            return Ok(());
        }
        let (n, c) = if self.to_rows {
            let d = self.out.dims();
            (d[0], d[1])
        } else {
            let d = self.input.dims();
            (d[0], d[1])
        };
        let mut dx = vec![S::zero(); self.input.numel()];
        for p in 0..n {
            for ch in 0..c {
                if self.to_rows {
                    // out[p, ch] came from in[ch, p]
                    dx[ch * n + p] = g[p * c + ch];
                } else {
                    // out[ch, p] came from in[p, ch]
                    dx[p * c + ch] = g[ch * n + p];
                }
            }
        }
        self.input.accumulate_grad(&dx);
        Ok(())
    }

    fn name(&self) -> &'static str {
        "permute_pixels"
    }
}

struct BatchIndexOp<S: Scalar> {
    input: Tensor<S>,
    out: Tensor<S>,
    index: usize,
}

impl<S: Scalar> TapeOp<S> for BatchIndexOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if !self.input.needs_grad() {
            return Ok(());
        }
        let block = self.out.numel();
        let mut dx = vec![S::zero(); self.input.numel()];
        dx[self.index * block..(self.index + 1) * block].copy_from_slice(&g);
        self.input.accumulate_grad(&dx);
        Ok(())
    }

    fn name(&self) -> &'static str {
        "batch_index"
    }
}

struct BatchStackOp<S: Scalar> {
    parts: Vec<Tensor<S>>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for BatchStackOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        let block = self.parts[0].numel();
        for (i, part) in self.parts.iter().enumerate() {
            if part.needs_grad() {
                part.accumulate_grad(&g[i * block..(i + 1) * block]);
            }
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "batch_stack"
    }
}

struct ScatterRowsOp<S: Scalar> {
    rows: Tensor<S>,
    labels: Vec<usize>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for ScatterRowsOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if !self.rows.needs_grad() {
            return Ok(());
        }
        let c = self.rows.dims()[1];
        let mut dr = vec![S::zero(); self.rows.numel()];
        for (i, &label) in self.labels.iter().enumerate() {
            for ch in 0..c {
                dr[label * c + ch] = dr[label * c + ch] + g[i * c + ch];
            }
        }
        self.rows.accumulate_grad(&dr);
        Ok(())
    }

    fn name(&self) -> &'static str {
        "scatter_rows"
    }
}

struct ScaleRowsOp<S: Scalar> {
    input: Tensor<S>,
    factors: Vec<S>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for ScaleRowsOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if !self.input.needs_grad() {
            return Ok(());
        }
        let c = self.input.dims()[1];
        let mut dx = vec![S::zero(); self.input.numel()];
        for (i, &f) in self.factors.iter().enumerate() {
            for ch in 0..c {
                dx[i * c + ch] = g[i * c + ch] * f;
            }
        }
        self.input.accumulate_grad(&dx);
        Ok(())
    }

    fn name(&self) -> &'static str {
        "scale_rows"
    }
}

struct L2NormalizeRowsOp<S: Scalar> {
    input: Tensor<S>,
    out: Tensor<S>,
    norms: Vec<S>,
}

impl<S: Scalar> TapeOp<S> for L2NormalizeRowsOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if !self.input.needs_grad() {
            return Ok(());
        }
        let (n, c) = (self.input.dims()[0], self.input.dims()[1]);
        let y = self.out.data();
        let mut dx = vec![S::zero(); n * c];
        for i in 0..n {
            let row = i * c;
            let mut dot = S::zero();
            for j in 0..c {
                dot = dot + g[row + j] * y[row + j];
            }
            let inv_r = S::one() / self.norms[i];
            for j in 0..c {
                dx[row + j] = (g[row + j] - y[row + j] * dot) * inv_r;
            }
        }
        drop(y);
        self.input.accumulate_grad(&dx);
        Ok(())
    }

    fn name(&self) -> &'static str {
        "l2_normalize_rows"
    }
}

// ---------------------------------------------------------------------------
// graph methods
// ---------------------------------------------------------------------------

impl<S: Scalar> Graph<S> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.dims() != b.dims() {
            return Err(CoreError::shape(format!(
                "add: shape {} vs {}",
                a.shape(),
                b.shape()
            )));
        }
        let data: Vec<S> = {
            let av = a.data();
            let bv = b.data();
            av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect()
        };
        let needs = a.needs_grad() || b.needs_grad();
        let out = finish("add", a.dims(), data, needs)?;
        self.record(needs, || {
            Box::new(AddOp {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.dims() != b.dims() {
            return Err(CoreError::shape(format!(
                "mul: shape {} vs {}",
                a.shape(),
                b.shape()
            )));
        }
        let data: Vec<S> = {
            let av = a.data();
            let bv = b.data();
            av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect()
        };
        let needs = a.needs_grad() || b.needs_grad();
        let out = finish("mul", a.dims(), data, needs)?;
        self.record(needs, || {
            Box::new(MulOp {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    pub fn relu(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let data: Vec<S> = x
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let needs = x.needs_grad();
        let out = finish("relu", x.dims(), data, needs)?;
        self.record(needs, || {
            Box::new(ReluOp {
                input: x.clone(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Multiply every element by a fixed scalar.
    pub fn scale(&mut self, x: &Tensor<S>, factor: S) -> Result<Tensor<S>> {
        let data: Vec<S> = x.data().iter().map(|&v| v * factor).collect();
        let needs = x.needs_grad();
        let out = finish("scale", x.dims(), data, needs)?;
        self.record(needs, || {
            Box::new(ScaleOp {
                input: x.clone(),
                factor,
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let total: S = x.data().iter().copied().sum();
        let needs = x.needs_grad();
        let out = Tensor::scalar(total).requires_grad(needs);
        self.record(needs, || {
            Box::new(SumAllOp {
                input: x.clone(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Row-matrix linear map: `[N, C_in] -> [N, C_out]` with bias.
    pub fn linear(
        &mut self,
        x: &Tensor<S>,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        if x.rank() != 2 || weight.rank() != 2 {
            return Err(CoreError::shape(format!(
                "linear expects rank-2 input and weight, got {} and {}",
                x.shape(),
                weight.shape()
            )));
        }
        let (n, c_in) = (x.dims()[0], x.dims()[1]);
        let (c_out, w_in) = (weight.dims()[0], weight.dims()[1]);
        if w_in != c_in || bias.dims() != [c_out] {
            return Err(CoreError::shape(format!(
                "linear: input {} weight {} bias {}",
                x.shape(),
                weight.shape(),
                bias.shape()
            )));
        }
        let mut data = vec![S::zero(); n * c_out];
        {
            let xv = x.data();
            let wv = weight.data();
            let bv = bias.data();
            for row in 0..n {
                for o in 0..c_out {
                    let mut acc = bv[o];
                    for i in 0..c_in {
                        acc = acc + xv[row * c_in + i] * wv[o * c_in + i];
                    }
                    data[row * c_out + o] = acc;
                }
            }
        }
        let needs = x.needs_grad() || weight.needs_grad() || bias.needs_grad();
        let out = finish("linear", &[n, c_out], data, needs)?;
        self.record(needs, || {
            Box::new(LinearOp {
                input: x.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Per-pixel linear map over a feature map: `y_i = W x_i + b` for every
    /// spatial position. Accepts `[C,H,W]` or `[B,C,H,W]`.
    pub fn pointwise_linear(
        &mut self,
        x: &Tensor<S>,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let d = x.dims();
        let (b, c_in, h, w) = match d.len() {
            3 => (1, d[0], d[1], d[2]),
            4 => (d[0], d[1], d[2], d[3]),
            r => {
                return Err(CoreError::shape(format!(
                    "pointwise_linear expects rank 3 or 4 input, got rank {r}"
                )))
            }
        };
        if weight.rank() != 2 || weight.dims()[1] != c_in {
            return Err(CoreError::shape(format!(
                "pointwise_linear: weight {} does not match {} input channels",
                weight.shape(),
                c_in
            )));
        }
        let c_out = weight.dims()[0];
        if bias.dims() != [c_out] {
            return Err(CoreError::shape(format!(
                "pointwise_linear: bias {} does not match {} output channels",
                bias.shape(),
                c_out
            )));
        }
        let hw = h * w;
        let mut data = vec![S::zero(); b * c_out * hw];
        {
            let xv = x.data();
            let wv = weight.data();
            let bv = bias.data();
            for bi in 0..b {
                for o in 0..c_out {
                    let out_base = (bi * c_out + o) * hw;
                    for p in 0..hw {
                        let mut acc = bv[o];
                        for i in 0..c_in {
                            acc = acc + xv[(bi * c_in + i) * hw + p] * wv[o * c_in + i];
                        }
                        data[out_base + p] = acc;
                    }
                }
            }
        }
        let out_dims: Vec<usize> = if d.len() == 3 {
            vec![c_out, h, w]
        } else {
            vec![b, c_out, h, w]
        };
        let needs = x.needs_grad() || weight.needs_grad() || bias.needs_grad();
        let out = finish("pointwise_linear", &out_dims, data, needs)?;
        self.record(needs, || {
            Box::new(PointwiseLinearOp {
                input: x.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// 2-D cross-correlation with square kernel, zero padding, no bias.
    /// Accepts `[C,H,W]` or `[B,C,H,W]`; weight is `[C_out,C_in,k,k]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<S>,
        weight: &Tensor<S>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<S>> {
        let d = x.dims();
        let (b, c_in, h, w) = match d.len() {
            3 => (1, d[0], d[1], d[2]),
            4 => (d[0], d[1], d[2], d[3]),
            r => {
                return Err(CoreError::shape(format!(
                    "conv2d expects rank 3 or 4 input, got rank {r}"
                )))
            }
        };
        if weight.rank() != 4 {
            return Err(CoreError::shape(format!(
                "conv2d: weight must be [C_out,C_in,k,k], got {}",
                weight.shape()
            )));
        }
        let wd = weight.dims();
        let (c_out, k) = (wd[0], wd[2]);
        if wd[1] != c_in {
            return Err(CoreError::shape(format!(
                "conv2d: weight expects {} input channels, input has {}",
                wd[1], c_in
            )));
        }
        if wd[3] != k {
            return Err(CoreError::shape("conv2d: kernel must be square"));
        }
        if k != 1 && k != 3 {
            return Err(CoreError::invalid(format!(
                "conv2d: kernel size {k} not supported (1 or 3)"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(CoreError::invalid(format!(
                "conv2d: stride {stride} not supported (1 or 2)"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(CoreError::shape(format!(
                "conv2d: kernel {k} does not fit {h}x{w} input with pad {pad}"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut data = vec![S::zero(); b * c_out * oh * ow];
        {
            let xv = x.data();
            let wv = weight.data();
            for bi in 0..b {
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = S::zero();
                            for ci in 0..c_in {
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc = acc
                                            + xv[((bi * c_in + ci) * h + iy as usize) * w
                                                + ix as usize]
                                                * wv[((co * c_in + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                            data[((bi * c_out + co) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        let out_dims: Vec<usize> = if d.len() == 3 {
            vec![c_out, oh, ow]
        } else {
            vec![b, c_out, oh, ow]
        };
        let needs = x.needs_grad() || weight.needs_grad();
        let out = finish("conv2d", &out_dims, data, needs)?;
        self.record(needs, || {
            Box::new(Conv2dOp {
                input: x.clone(),
                weight: weight.clone(),
                out: out.clone(),
                stride,
                pad,
            })
        });
        Ok(out)
    }

    /// `[N,K] x [K,M] -> [N,M]`.
    pub fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul_impl(a, b, false)
    }

    /// `[N,K] x [M,K]^T -> [N,M]`.
    pub fn matmul_nt(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: &Tensor<S>, b: &Tensor<S>, transpose_b: bool) -> Result<Tensor<S>> {
        if a.rank() != 2 || b.rank() != 2 {
            return Err(CoreError::shape(format!(
                "matmul expects rank-2 operands, got {} and {}",
                a.shape(),
                b.shape()
            )));
        }
        let (n, k) = (a.dims()[0], a.dims()[1]);
        let (m, bk) = if transpose_b {
            (b.dims()[0], b.dims()[1])
        } else {
            (b.dims()[1], b.dims()[0])
        };
        if bk != k {
            return Err(CoreError::shape(format!(
                "matmul: inner dimensions {} vs {} (shapes {} x {})",
                k,
                bk,
                a.shape(),
                b.shape()
            )));
        }
        let mut data = vec![S::zero(); n * m];
        {
            let av = a.data();
            let bv = b.data();
            if transpose_b {
                for i in 0..n {
                    for j in 0..m {
                        let mut acc = S::zero();
                        for p in 0..k {
                            acc = acc + av[i * k + p] * bv[j * k + p];
                        }
                        data[i * m + j] = acc;
                    }
                }
            } else {
                for i in 0..n {
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        for j in 0..m {
                            data[i * m + j] = data[i * m + j] + a_ip * bv[p * m + j];
                        }
                    }
                }
            }
        }
        let needs = a.needs_grad() || b.needs_grad();
        let out = finish("matmul", &[n, m], data, needs)?;
        self.record(needs, || {
            Box::new(MatmulOp {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
                transpose_b,
            })
        });
        Ok(out)
    }

    /// Batch normalization over `[N,C]` rows or `[B,C,H,W]` maps.
    /// Train mode uses batch statistics and updates the running buffers;
    /// eval mode normalizes with the running statistics.
    pub fn batch_norm(
        &mut self,
        x: &Tensor<S>,
        bn: &BatchNorm<S>,
        mode: BnMode,
    ) -> Result<Tensor<S>> {
        let dims = x.dims().to_vec();
        let (channels, m, _) = bn_layout(&dims)?;
        if bn.channels() != channels {
            return Err(CoreError::shape(format!(
                "batch_norm: {} affine channels vs {} input channels",
                bn.channels(),
                channels
            )));
        }
        if mode == BnMode::Train && m < 2 {
            return Err(CoreError::invalid(format!(
                "batch_norm: train mode needs at least 2 values per channel, got {m}"
            )));
        }
        let numel = x.numel();
        let mut xhat = vec![S::zero(); numel];
        let mut inv_std = vec![S::zero(); channels];
        let mut data = vec![S::zero(); numel];
        let eps = S::from_f64(bn.eps);
        {
            let xv = x.data();
            let gamma = bn.gamma.data();
            let beta = bn.beta.data();
            match mode {
                BnMode::Train => {
                    let m_s = S::from_f64(m as f64);
                    let mut new_mean = vec![S::zero(); channels];
                    let mut new_var = vec![S::zero(); channels];
                    for c in 0..channels {
                        let mut sum = S::zero();
                        for_each_channel_index(&dims, c, |i| sum = sum + xv[i]);
                        let mean = sum / m_s;
                        let mut var_sum = S::zero();
                        for_each_channel_index(&dims, c, |i| {
                            let d = xv[i] - mean;
                            var_sum = var_sum + d * d;
                        });
                        let var = var_sum / m_s;
                        let istd = S::one() / (var + eps).sqrt();
                        inv_std[c] = istd;
                        for_each_channel_index(&dims, c, |i| {
                            let h = (xv[i] - mean) * istd;
                            xhat[i] = h;
                            data[i] = gamma[c] * h + beta[c];
                        });
                        new_mean[c] = mean;
                        // unbiased variance for the running buffer
                        new_var[c] = var * m_s / S::from_f64((m - 1) as f64);
                    }
                    drop(xv);
                    let mom = S::from_f64(bn.momentum);
                    let keep = S::one() - mom;
                    {
                        let mut rm = bn.running_mean.data_mut();
                        let mut rv = bn.running_var.data_mut();
                        for c in 0..channels {
                            rm[c] = keep * rm[c] + mom * new_mean[c];
                            rv[c] = keep * rv[c] + mom * new_var[c];
                        }
                    }
                }
                BnMode::Eval => {
                    let rm = bn.running_mean.data();
                    let rv = bn.running_var.data();
                    for c in 0..channels {
                        let istd = S::one() / (rv[c] + eps).sqrt();
                        inv_std[c] = istd;
                        for_each_channel_index(&dims, c, |i| {
                            let h = (xv[i] - rm[c]) * istd;
                            xhat[i] = h;
                            data[i] = gamma[c] * h + beta[c];
                        });
                    }
                }
            }
        }
        let needs = x.needs_grad() || bn.gamma.needs_grad() || bn.beta.needs_grad();
        let out = finish("batch_norm", &dims, data, needs)?;
        self.record(needs, || {
            Box::new(BatchNormOp {
                input: x.clone(),
                gamma: bn.gamma.clone(),
                beta: bn.beta.clone(),
                out: out.clone(),
                xhat,
                inv_std,
                mode,
            })
        });
        Ok(out)
    }

    /// Row-wise softmax of a `[N,M]` matrix with max subtraction.
    pub fn softmax_rows(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 2 {
            return Err(CoreError::shape(format!(
                "softmax_rows expects a rank-2 tensor, got {}",
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(CoreError::invalid(
                "softmax_rows: non-finite logits rejected",
            ));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        let mut data = vec![S::zero(); n * m];
        {
            let xv = x.data();
            for i in 0..n {
                let row = i * m;
                let mut max = xv[row];
                for j in 1..m {
                    if xv[row + j] > max {
                        max = xv[row + j];
                    }
                }
                let mut sum = S::zero();
                for j in 0..m {
                    let e = (xv[row + j] - max).exp();
                    data[row + j] = e;
                    sum = sum + e;
                }
                let inv = S::one() / sum;
                for j in 0..m {
                    data[row + j] = data[row + j] * inv;
                }
            }
        }
        let needs = x.needs_grad();
        let out = finish("softmax_rows", &[n, m], data, needs)?;
        self.record(needs, || {
            Box::new(SoftmaxRowsOp {
                input: x.clone(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Row-wise softmax restricted to unmasked keys. Masked keys get weight
    /// exactly zero (the additive large-negative-logit rule taken to its
    /// limit); rows disabled by `query_mask`, or with no surviving key,
    /// come out exactly zero.
    pub fn masked_softmax_rows(
        &mut self,
        x: &Tensor<S>,
        key_mask: &[bool],
        query_mask: Option<&[bool]>,
    ) -> Result<Tensor<S>> {
        if x.rank() != 2 {
            return Err(CoreError::shape(format!(
                "masked_softmax_rows expects a rank-2 tensor, got {}",
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(CoreError::invalid(
                "masked_softmax_rows: non-finite logits rejected",
            ));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        if key_mask.len() != m {
            return Err(CoreError::shape(format!(
                "masked_softmax_rows: key mask length {} vs {} columns",
                key_mask.len(),
                m
            )));
        }
        if let Some(qm) = query_mask {
            if qm.len() != n {
                return Err(CoreError::shape(format!(
                    "masked_softmax_rows: query mask length {} vs {} rows",
                    qm.len(),
                    n
                )));
            }
        }
        let any_key = key_mask.iter().any(|&k| k);
        let mut data = vec![S::zero(); n * m];
        {
            let xv = x.data();
            for i in 0..n {
                let active = query_mask.map_or(true, |qm| qm[i]) && any_key;
                if !active {
                    continue;
                }
                let row = i * m;
                let mut max = S::neg_infinity();
                for j in 0..m {
                    if key_mask[j] && xv[row + j] > max {
                        max = xv[row + j];
                    }
                }
                let mut sum = S::zero();
                for j in 0..m {
                    if key_mask[j] {
                        let e = (xv[row + j] - max).exp();
                        data[row + j] = e;
                        sum = sum + e;
                    }
                }
                let inv = S::one() / sum;
                for j in 0..m {
                    if key_mask[j] {
                        data[row + j] = data[row + j] * inv;
                    }
                }
            }
        }
        let needs = x.needs_grad();
        let out = finish("masked_softmax_rows", &[n, m], data, needs)?;
        // Zero rows have all-zero saved outputs, so the shared softmax
        // jacobian sends them exactly zero gradient.
        self.record(needs, || {
            Box::new(SoftmaxRowsOp {
                input: x.clone(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Per-channel mean over all spatial positions: `[C,H,W] -> [C]` or
    /// `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let d = x.dims();
        let (b, c, hw, batched) = match d.len() {
            3 => (1, d[0], d[1] * d[2], false),
            4 => (d[0], d[1], d[2] * d[3], true),
            r => {
                return Err(CoreError::shape(format!(
                    "global_avg_pool expects rank 3 or 4 input, got rank {r}"
                )))
            }
        };
        let inv = S::one() / S::from_f64(hw as f64);
        let mut data = vec![S::zero(); b * c];
        {
            let xv = x.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let mut sum = S::zero();
                    for p in 0..hw {
                        sum = sum + xv[base + p];
                    }
                    data[bi * c + ci] = sum * inv;
                }
            }
        }
        let out_dims: Vec<usize> = if batched { vec![b, c] } else { vec![c] };
        let needs = x.needs_grad();
        let out = finish("global_avg_pool", &out_dims, data, needs)?;
        self.record(needs, || {
            Box::new(GlobalAvgPoolOp {
                input: x.clone(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// View a `[C,H,W]` map as its `[N,C]` pixel-row matrix, N = H*W.
    pub fn pixels_to_rows(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 3 {
            return Err(CoreError::shape(format!(
                "pixels_to_rows expects [C,H,W], got {}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let n = h * w;
        let mut data = vec![S::zero(); n * c];
        {
            let xv = x.data();
            for ch in 0..c {
                for p in 0..n {
                    data[p * c + ch] = xv[ch * n + p];
                }
            }
        }
        let needs = x.needs_grad();
        let out = finish("pixels_to_rows", &[n, c], data, needs)?;
        self.record(needs, || {
            Box::new(PermutePixelsOp {
                input: x.clone(),
                out: out.clone(),
                to_rows: true,
            })
        });
        Ok(out)
    }

    /// Inverse of [`Graph::pixels_to_rows`].
    pub fn rows_to_pixels(&mut self, x: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
        if x.rank() != 2 {
            return Err(CoreError::shape(format!(
                "rows_to_pixels expects [N,C], got {}",
                x.shape()
            )));
        }
        let (n, c) = (x.dims()[0], x.dims()[1]);
        if n != h * w {
            return Err(CoreError::shape(format!(
                "rows_to_pixels: {n} rows cannot form a {h}x{w} map"
            )));
        }
        let mut data = vec![S::zero(); c * n];
        {
            let xv = x.data();
            for ch in 0..c {
                for p in 0..n {
                    data[ch * n + p] = xv[p * c + ch];
                }
            }
        }
        let needs = x.needs_grad();
        let out = finish("rows_to_pixels", &[c, h, w], data, needs)?;
        self.record(needs, || {
            Box::new(PermutePixelsOp {
                input: x.clone(),
                out: out.clone(),
                to_rows: false,
            })
        });
        Ok(out)
    }

    /// Slice one element off the leading (batch) axis.
    pub fn batch_index(&mut self, x: &Tensor<S>, index: usize) -> Result<Tensor<S>> {
        if x.rank() < 2 {
            return Err(CoreError::shape(format!(
                "batch_index expects rank >= 2, got {}",
                x.shape()
            )));
        }
        let b = x.dims()[0];
        if index >= b {
            return Err(CoreError::invalid(format!(
                "batch_index: index {index} out of range for batch {b}"
            )));
        }
        let rest: Vec<usize> = x.dims()[1..].to_vec();
        let block = rest.iter().product::<usize>();
        let data = x.data()[index * block..(index + 1) * block].to_vec();
        let needs = x.needs_grad();
        let out = finish("batch_index", &rest, data, needs)?;
        self.record(needs, || {
            Box::new(BatchIndexOp {
                input: x.clone(),
                out: out.clone(),
                index,
            })
        });
        Ok(out)
    }

    /// Stack same-shape tensors along a new leading batch axis.
    pub fn batch_stack(&mut self, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| CoreError::invalid("batch_stack: empty input list"))?;
        let mut out_dims = vec![parts.len()];
        out_dims.extend_from_slice(first.dims());
        let block = first.numel();
        let mut data = Vec::with_capacity(parts.len() * block);
        for part in parts {
            if part.dims() != first.dims() {
                return Err(CoreError::shape(format!(
                    "batch_stack: mixed shapes {} vs {}",
                    first.shape(),
                    part.shape()
                )));
            }
            data.extend_from_slice(&part.data());
        }
        let needs = parts.iter().any(|p| p.needs_grad());
        let out = finish("batch_stack", &out_dims, data, needs)?;
        self.record(needs, || {
            Box::new(BatchStackOp {
                parts: parts.to_vec(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Gather rows by label: `out[i] = rows[labels[i]]`.
    pub fn scatter_rows(&mut self, rows: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
        if rows.rank() != 2 {
            return Err(CoreError::shape(format!(
                "scatter_rows expects [K,C] rows, got {}",
                rows.shape()
            )));
        }
        let (k, c) = (rows.dims()[0], rows.dims()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(CoreError::invalid(format!(
                "scatter_rows: label {bad} out of range for {k} rows"
            )));
        }
        let mut data = vec![S::zero(); labels.len() * c];
        {
            let rv = rows.data();
            for (i, &label) in labels.iter().enumerate() {
                data[i * c..(i + 1) * c].copy_from_slice(&rv[label * c..(label + 1) * c]);
            }
        }
        let needs = rows.needs_grad();
        let out = finish("scatter_rows", &[labels.len(), c], data, needs)?;
        self.record(needs, || {
            Box::new(ScatterRowsOp {
                rows: rows.clone(),
                labels: labels.to_vec(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Multiply each row of `[N,C]` by a fixed per-row factor.
    pub fn scale_rows(&mut self, x: &Tensor<S>, factors: &[S]) -> Result<Tensor<S>> {
        if x.rank() != 2 || x.dims()[0] != factors.len() {
            return Err(CoreError::shape(format!(
                "scale_rows: {} factors for input {}",
                factors.len(),
                x.shape()
            )));
        }
        let c = x.dims()[1];
        let mut data = vec![S::zero(); x.numel()];
        {
            let xv = x.data();
            for (i, &f) in factors.iter().enumerate() {
                for ch in 0..c {
                    data[i * c + ch] = xv[i * c + ch] * f;
                }
            }
        }
        let needs = x.needs_grad();
        let out = finish("scale_rows", x.dims(), data, needs)?;
        self.record(needs, || {
            Box::new(ScaleRowsOp {
                input: x.clone(),
                factors: factors.to_vec(),
                out: out.clone(),
            })
        });
        Ok(out)
    }

    /// Normalize each row of `[N,C]` to unit Euclidean length, with an
    /// epsilon inside the square root so zero rows stay differentiable.
    pub fn l2_normalize_rows(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 2 {
            return Err(CoreError::shape(format!(
                "l2_normalize_rows expects [N,C], got {}",
                x.shape()
            )));
        }
        let (n, c) = (x.dims()[0], x.dims()[1]);
        let eps = S::from_f64(1e-12);
        let mut norms = vec![S::zero(); n];
        let mut data = vec![S::zero(); n * c];
        {
            let xv = x.data();
            for i in 0..n {
                let row = i * c;
                let mut sq = S::zero();
                for j in 0..c {
                    sq = sq + xv[row + j] * xv[row + j];
                }
                let r = (sq + eps).sqrt();
                norms[i] = r;
                let inv = S::one() / r;
                for j in 0..c {
                    data[row + j] = xv[row + j] * inv;
                }
            }
        }
        let needs = x.needs_grad();
        let out = finish("l2_normalize_rows", &[n, c], data, needs)?;
        self.record(needs, || {
            Box::new(L2NormalizeRowsOp {
                input: x.clone(),
                out: out.clone(),
                norms,
            })
        });
        Ok(out)
    }
}
