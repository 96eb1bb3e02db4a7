//! Layer primitives with hand-written backward passes. Per-sample tensors are
//! channel-major `[channels × length]` flat vectors.

use rand::Rng;

use super::params::{BufferId, Grads, ModelParams, ParamBuilder, ParamId};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// 1-D convolution, stride 1, "same" padding (extra pad on the right for even
/// kernels).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Conv1d {
            weight: b.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel], bound),
            bias: b.uniform(&format!("{name}.bias"), &[out_ch], bound),
            in_ch,
            out_ch,
            kernel,
        }
    }

    #[inline]
    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn forward(&self, p: &ModelParams, x: &[f64], len: usize) -> Vec<f64> {
        let w = p.get(self.weight);
        let bias = p.get(self.bias);
        let pad = self.pad_left() as isize;
        let mut y = vec![0.0; self.out_ch * len];
        for o in 0..self.out_ch {
            let row = &mut y[o * len..(o + 1) * len];
            row.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..self.in_ch {
                let xi = &x[i * len..(i + 1) * len];
                for j in 0..self.kernel {
                    let wv = w[(o * self.in_ch + i) * self.kernel + j];
                    let shift = j as isize - pad;
                    let t0 = (-shift).max(0) as usize;
                    let t1 = ((len as isize) - shift).min(len as isize).max(0) as usize;
                    for t in t0..t1 {
                        row[t] += wv * xi[(t as isize + shift) as usize];
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        x: &[f64],
        len: usize,
        dy: &[f64],
        g: &mut Grads,
        want_dx: bool,
    ) -> Vec<f64> {
        let w = p.get(self.weight);
        let pad = self.pad_left() as isize;
        let mut dx = if want_dx {
            vec![0.0; self.in_ch * len]
        } else {
            Vec::new()
        };
        {
            let db = g.slot(self.bias, self.out_ch);
            for o in 0..self.out_ch {
                db[o] += dy[o * len..(o + 1) * len].iter().sum::<f64>();
            }
        }
        let dw = g.slot(self.weight, w.len());
        for o in 0..self.out_ch {
            let dyo = &dy[o * len..(o + 1) * len];
            for i in 0..self.in_ch {
                let xi = &x[i * len..(i + 1) * len];
                for j in 0..self.kernel {
                    let k = (o * self.in_ch + i) * self.kernel + j;
                    let shift = j as isize - pad;
                    let t0 = (-shift).max(0) as usize;
                    let t1 = ((len as isize) - shift).min(len as isize).max(0) as usize;
                    let mut acc = 0.0;
                    for t in t0..t1 {
                        let src = (t as isize + shift) as usize;
                        acc += dyo[t] * xi[src];
                    }
                    dw[k] += acc;
                    if want_dx {
                        let wv = w[k];
                        let dxi = &mut dx[i * len..(i + 1) * len];
                        for t in t0..t1 {
                            dxi[(t as isize + shift) as usize] += wv * dyo[t];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Batch normalisation over the batch and length axes, per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

/// Batch statistics to fold into the running buffers after a train step.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

impl RunningUpdate {
    pub fn apply(&self, p: &mut ModelParams) {
        for (r, m) in p.buffer_mut(self.mean_buf).iter_mut().zip(&self.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in p
            .buffer_mut(self.var_buf)
            .iter_mut()
            .zip(&self.unbiased_var)
        {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Vec<Vec<f64>>,
    pub inv_std: Vec<f64>,
    pub len: usize,
}

impl BatchNorm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: b.constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: b.constant(&format!("{name}.beta"), &[channels], 0.0),
            running_mean: b.buffer(&format!("{name}.running_mean"), channels, 0.0),
            running_var: b.buffer(&format!("{name}.running_var"), channels, 1.0),
            channels,
        }
    }

    pub fn forward_train(
        &self,
        p: &ModelParams,
        xs: &[Vec<f64>],
        len: usize,
    ) -> (Vec<Vec<f64>>, BatchNormCache, RunningUpdate) {
        let c = self.channels;
        let m = (xs.len() * len) as f64;
        let mut mean = vec![0.0; c];
        for x in xs {
            for ch in 0..c {
                mean[ch] += x[ch * len..(ch + 1) * len].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; c];
        for x in xs {
            for ch in 0..c {
                var[ch] += x[ch * len..(ch + 1) * len]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        let unbiased_var = var
            .iter()
            .map(|v| if m > 1.0 { v / (m - 1.0) } else { *v })
            .collect();
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let mut xhat = Vec::with_capacity(xs.len());
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let mut h = vec![0.0; c * len];
            let mut y = vec![0.0; c * len];
            for ch in 0..c {
                for t in 0..len {
                    let k = ch * len + t;
                    h[k] = (x[k] - mean[ch]) * inv_std[ch];
                    y[k] = gamma[ch] * h[k] + beta[ch];
                }
            }
            xhat.push(h);
            ys.push(y);
        }
        (
            ys,
            BatchNormCache { xhat, inv_std, len },
            RunningUpdate {
                mean_buf: self.running_mean,
                var_buf: self.running_var,
                mean,
                unbiased_var,
            },
        )
    }

    pub fn forward_eval(&self, p: &ModelParams, x: &[f64], len: usize) -> Vec<f64> {
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let rm = p.buffer(self.running_mean);
        let rv = p.buffer(self.running_var);
        let mut y = vec![0.0; x.len()];
        for ch in 0..self.channels {
            let s = gamma[ch] / (rv[ch] + BN_EPS).sqrt();
            for t in 0..len {
                let k = ch * len + t;
                y[k] = (x[k] - rm[ch]) * s + beta[ch];
            }
        }
        y
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        cache: &BatchNormCache,
        dys: &[Vec<f64>],
        g: &mut Grads,
    ) -> Vec<Vec<f64>> {
        let c = self.channels;
        let len = cache.len;
        let m = (dys.len() * len) as f64;
        let gamma = p.get(self.gamma);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (dy, h) in dys.iter().zip(&cache.xhat) {
            for ch in 0..c {
                for t in 0..len {
                    let k = ch * len + t;
                    dgamma[ch] += dy[k] * h[k];
                    dbeta[ch] += dy[k];
                }
            }
        }
        g.slot(self.gamma, c)
            .iter_mut()
            .zip(&dgamma)
            .for_each(|(a, b)| *a += b);
        g.slot(self.beta, c)
            .iter_mut()
            .zip(&dbeta)
            .for_each(|(a, b)| *a += b);
        // dxhat = dy * gamma; sum(dxhat) = gamma * dbeta; sum(dxhat * xhat) = gamma * dgamma
        dys.iter()
            .zip(&cache.xhat)
            .map(|(dy, h)| {
                let mut dx = vec![0.0; c * len];
                for ch in 0..c {
                    let scale = gamma[ch] * cache.inv_std[ch] / m;
                    for t in 0..len {
                        let k = ch * len + t;
                        dx[k] = scale * (m * dy[k] - dbeta[ch] - h[k] * dgamma[ch]);
                    }
                }
                dx
            })
            .collect()
    }
}

/// ReLU followed by max-pool (kernel 2, stride 2). Returns the pooled output
/// and, per output element, the source index or `usize::MAX` when clipped.
pub fn relu_maxpool(x: &[f64], channels: usize, len: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / 2;
    let mut y = vec![0.0; channels * out_len];
    let mut arg = vec![usize::MAX; channels * out_len];
    for ch in 0..channels {
        for t in 0..out_len {
            let a = ch * len + 2 * t;
            let (src, v) = if x[a + 1] > x[a] {
                (a + 1, x[a + 1])
            } else {
                (a, x[a])
            };
            let k = ch * out_len + t;
            if v > 0.0 {
                y[k] = v;
                arg[k] = src;
            }
        }
    }
    (y, arg)
}

pub fn relu_maxpool_backward(dy: &[f64], arg: &[usize], in_size: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_size];
    for (d, &a) in dy.iter().zip(arg) {
        if a != usize::MAX {
            dx[a] += d;
        }
    }
    dx
}

/// Inverted-dropout mask: each entry is 0 or 1/(1-rate).
pub fn dropout_mask<R: Rng>(rng: &mut R, n: usize, rate: f64) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: b.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound),
            bias: b.uniform(&format!("{name}.bias"), &[out_dim], bound),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &ModelParams, x: &[f64]) -> Vec<f64> {
        let w = p.get(self.weight);
        let b = p.get(self.bias);
        (0..self.out_dim)
            .map(|o| {
                b[o] + w[o * self.in_dim..(o + 1) * self.in_dim]
                    .iter()
                    .zip(x)
                    .map(|(a, c)| a * c)
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, p: &ModelParams, x: &[f64], dy: &[f64], g: &mut Grads) -> Vec<f64> {
        let w = p.get(self.weight);
        g.slot(self.bias, self.out_dim)
            .iter_mut()
            .zip(dy)
            .for_each(|(a, d)| *a += d);
        let dw = g.slot(self.weight, w.len());
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let d = dy[o];
            if d == 0.0 {
                continue;
            }
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                dw[row + i] += d * x[i];
                dx[i] += d * w[row + i];
            }
        }
        dx
    }
}

/// One LSTM layer (gate order i, f, g, o; single bias vector).
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Activated gates `[i, f, g, o]`, each `hidden` long.
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

impl LstmLayer {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmLayer {
            w_ih: b.uniform(&format!("{name}.w_ih"), &[4 * hidden, in_dim], bound),
            w_hh: b.uniform(&format!("{name}.w_hh"), &[4 * hidden, hidden], bound),
            bias: b.uniform(&format!("{name}.bias"), &[4 * hidden], bound),
            in_dim,
            hidden,
        }
    }

    pub fn step(
        &self,
        p: &ModelParams,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>, LstmStepCache) {
        let h = self.hidden;
        let w_ih = p.get(self.w_ih);
        let w_hh = p.get(self.w_hh);
        let mut z = p.get(self.bias).to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let a = &w_ih[r * self.in_dim..(r + 1) * self.in_dim];
            let b = &w_hh[r * h..(r + 1) * h];
            *zr += a.iter().zip(x).map(|(u, v)| u * v).sum::<f64>()
                + b.iter().zip(h_prev).map(|(u, v)| u * v).sum::<f64>();
        }
        for k in 0..h {
            z[k] = sigmoid(z[k]);
            z[h + k] = sigmoid(z[h + k]);
            z[2 * h + k] = z[2 * h + k].tanh();
            z[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        let mut c = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut h_out = vec![0.0; h];
        for k in 0..h {
            c[k] = z[h + k] * c_prev[k] + z[k] * z[2 * h + k];
            tanh_c[k] = c[k].tanh();
            h_out[k] = z[3 * h + k] * tanh_c[k];
        }
        let cache = LstmStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates: z,
            tanh_c,
        };
        (h_out, c, cache)
    }

    /// Returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        p: &ModelParams,
        cache: &LstmStepCache,
        dh: &[f64],
        dc: &[f64],
        g: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let gt = &cache.gates;
        let mut dz = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let (i, f, gg, o) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
            let tc = cache.tanh_c[k];
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            dz[k] = dct * gg * i * (1.0 - i);
            dz[h + k] = dct * cache.c_prev[k] * f * (1.0 - f);
            dz[2 * h + k] = dct * i * (1.0 - gg * gg);
            dz[3 * h + k] = dh[k] * tc * o * (1.0 - o);
            dc_prev[k] = dct * f;
        }
        g.slot(self.bias, 4 * h)
            .iter_mut()
            .zip(&dz)
            .for_each(|(a, d)| *a += d);
        let w_ih = p.get(self.w_ih);
        let w_hh = p.get(self.w_hh);
        let mut dx = vec![0.0; self.in_dim];
        let mut dh_prev = vec![0.0; h];
        {
            let dw = g.slot(self.w_ih, w_ih.len());
            for (r, &d) in dz.iter().enumerate() {
                let row = r * self.in_dim;
                for i in 0..self.in_dim {
                    dw[row + i] += d * cache.x[i];
                    dx[i] += d * w_ih[row + i];
                }
            }
        }
        let dw = g.slot(self.w_hh, w_hh.len());
        for (r, &d) in dz.iter().enumerate() {
            let row = r * h;
            for i in 0..h {
                dw[row + i] += d * cache.h_prev[i];
                dh_prev[i] += d * w_hh[row + i];
            }
        }
        (dx, dh_prev, dc_prev)
    }
}
