//! Temporal-convolution encoder, recurrent Seq2Seq and projector, with a
//! hand-derived backward pass over whole batches.

pub mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{CocaError, Result};
use crate::parallel;
use layers::{
    dropout_mask, relu_maxpool, relu_maxpool_backward, BatchNorm, BatchNormCache, Conv1d, Linear,
    LstmLayer, LstmStepCache, RunningUpdate,
};
pub use params::{Grads, ModelParams, ParamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of the three conv blocks; the last entry is the
    /// representation width K.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dropout: f64,
    pub hidden_size: usize,
    pub seq_layers: usize,
    pub project_hidden: usize,
    pub project_channels: usize,
    pub window_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            conv_channels: vec![32, 64, 64],
            kernel_size: 4,
            dropout: 0.45,
            hidden_size: 128,
            seq_layers: 3,
            project_hidden: 32,
            project_channels: 400,
            window_length: 32,
        }
    }
}

pub const POOL_BLOCKS: usize = 3;

impl ModelConfig {
    pub fn repre_channels(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&0)
    }

    /// Latent sequence length `T / 8`.
    pub fn latent_len(&self) -> usize {
        self.window_length >> POOL_BLOCKS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CocaError::Config(m));
        if self.conv_channels.len() != POOL_BLOCKS {
            return bad(format!(
                "conv_channels needs {POOL_BLOCKS} entries, got {}",
                self.conv_channels.len()
            ));
        }
        if self.window_length % (1 << POOL_BLOCKS) != 0 || self.window_length == 0 {
            return bad(format!(
                "window length {} must be a positive multiple of 8",
                self.window_length
            ));
        }
        if self.in_channels == 0
            || self.kernel_size == 0
            || self.hidden_size == 0
            || self.seq_layers == 0
            || self.project_hidden == 0
            || self.project_channels == 0
            || self.conv_channels.contains(&0)
        {
            return bad("all widths and counts must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Encoder output for one window, time-major `[len × width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub len: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl LatentSeq {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.width..(t + 1) * self.width]
    }
}

/// Projector output for one window (not normalised).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedVec(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

const SITE_CONV: u64 = 0;
const SITE_SEQ_ENC: u64 = 1;
const SITE_SEQ_DEC: u64 = 2;
const VIEW_B_OFFSET: u64 = 8;

/// Dropout stream for one (sample, site): a pure function of its inputs so
/// samples can be processed in any order.
fn site_rng(seed: u64, sample: usize, site: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((sample as u64) << 8) | site);
    r
}

#[derive(Debug, Clone)]
struct Arch {
    convs: Vec<Conv1d>,
    conv_bns: Vec<BatchNorm>,
    seq_enc: Vec<LstmLayer>,
    seq_dec: Vec<LstmLayer>,
    seq_fc: Linear,
    proj_in: Linear,
    proj_bn: BatchNorm,
    proj_out: Linear,
}

#[derive(Debug, Clone)]
pub struct CocaModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    arch: Arch,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    /// Conv input per block, per sample, channel-major.
    inputs: Vec<Vec<Vec<f64>>>,
    bn: Vec<BatchNormCache>,
    pool_arg: Vec<Vec<Vec<usize>>>,
    dropout: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Seq2SeqCache {
    enc: Vec<Vec<LstmStepCache>>,
    dec: Vec<Vec<LstmStepCache>>,
    enc_masks: Vec<Vec<Vec<f64>>>,
    dec_masks: Vec<Vec<Vec<f64>>>,
    dec_top: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct ProjectorCache {
    pooled: Vec<Vec<f64>>,
    bn: BatchNormCache,
    hidden: Vec<Vec<f64>>,
    latent_len: usize,
}

/// Where the second element of each projection pair comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairRoute {
    /// `q' = p(h(g(f(X))))`: Seq2Seq reconstruction of the same window.
    Sequence,
    /// `q' = p(f(X_b))`: a second augmented view, no Seq2Seq.
    Views,
}

#[derive(Debug, Clone)]
pub struct PairOutput {
    pub q: Vec<Vec<f64>>,
    pub q_prime: Vec<Vec<f64>>,
    pub route: PairRoute,
}

/// Everything the backward pass needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct PairCache {
    route: PairRoute,
    enc_a: EncoderCache,
    enc_b: Option<EncoderCache>,
    seq: Vec<Seq2SeqCache>,
    proj_a: ProjectorCache,
    proj_b: ProjectorCache,
    running: Vec<RunningUpdate>,
    n: usize,
}

fn to_channel_major(w: &[f64], len: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for t in 0..len {
        for c in 0..channels {
            out[c * len + t] = w[t * channels + c];
        }
    }
    out
}

fn to_time_major(x: &[f64], channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for t in 0..len {
            out[t * channels + c] = x[c * len + t];
        }
    }
    out
}

fn merge(parts: Vec<Grads>, into: &mut Grads) {
    into.merge_all(&parts);
}

impl CocaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = params::ParamBuilder::new(&mut rng);
        let mut convs = Vec::new();
        let mut conv_bns = Vec::new();
        let mut in_ch = config.in_channels;
        for (i, &out) in config.conv_channels.iter().enumerate() {
            convs.push(Conv1d::new(
                &mut b,
                &format!("encoder.conv{i}"),
                in_ch,
                out,
                config.kernel_size,
            ));
            conv_bns.push(BatchNorm::new(&mut b, &format!("encoder.bn{i}"), out));
            in_ch = out;
        }
        let k = config.repre_channels();
        let h = config.hidden_size;
        let seq_enc = (0..config.seq_layers)
            .map(|l| {
                LstmLayer::new(
                    &mut b,
                    &format!("seq2seq.enc{l}"),
                    if l == 0 { k } else { h },
                    h,
                )
            })
            .collect();
        let seq_dec = (0..config.seq_layers)
            .map(|l| {
                LstmLayer::new(
                    &mut b,
                    &format!("seq2seq.dec{l}"),
                    if l == 0 { k } else { h },
                    h,
                )
            })
            .collect();
        let seq_fc = Linear::new(&mut b, "seq2seq.fc", h, k);
        let proj_in = Linear::new(&mut b, "projector.fc0", k, config.project_hidden);
        let proj_bn = BatchNorm::new(&mut b, "projector.bn", config.project_hidden);
        let proj_out = Linear::new(
            &mut b,
            "projector.fc1",
            config.project_hidden,
            config.project_channels,
        );
        let params = b.params;
        Ok(CocaModel {
            config,
            params,
            arch: Arch {
                convs,
                conv_bns,
                seq_enc,
                seq_dec,
                seq_fc,
                proj_in,
                proj_bn,
                proj_out,
            },
        })
    }

    /// Rebuild from a config and a parameter set (e.g. a checkpoint).
    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let mut model = CocaModel::new(config, 0)?;
        if params.tensors.len() != model.params.tensors.len()
            || params.buffers.len() != model.params.buffers.len()
        {
            return Err(CocaError::Checkpoint(
                "tensor count does not match config".into(),
            ));
        }
        for (a, b) in model
            .params
            .tensors
            .iter()
            .chain(model.params.buffers.iter())
            .zip(params.tensors.iter().chain(params.buffers.iter()))
        {
            if a.name != b.name || a.shape != b.shape || b.data.len() != b.numel() {
                return Err(CocaError::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        if batch.window_len != self.config.window_length {
            return Err(CocaError::DimensionMismatch {
                expected: self.config.window_length,
                actual: batch.window_len,
            });
        }
        if batch.channels != self.config.in_channels {
            return Err(CocaError::DimensionMismatch {
                expected: self.config.in_channels,
                actual: batch.channels,
            });
        }
        Ok(())
    }

    // ---- encoder ---------------------------------------------------------

    fn encoder_forward(
        &self,
        batch: &WindowBatch,
        mode: Mode,
        view_offset: u64,
    ) -> (Vec<Vec<f64>>, Option<EncoderCache>, Vec<RunningUpdate>) {
        let p = &self.params;
        let n = batch.len();
        let t_len = self.config.window_length;
        let d = self.config.in_channels;
        let mut x: Vec<Vec<f64>> =
            parallel::map(n, |i| to_channel_major(batch.window(i), t_len, d));
        let mut len = t_len;
        let mut cache = EncoderCache {
            inputs: Vec::new(),
            bn: Vec::new(),
            pool_arg: Vec::new(),
            dropout: Vec::new(),
        };
        let mut updates = Vec::new();
        let train = matches!(mode, Mode::Train { .. });
        for b in 0..POOL_BLOCKS {
            let conv = &self.arch.convs[b];
            let bn = &self.arch.conv_bns[b];
            let pre: Vec<Vec<f64>> = parallel::map(n, |i| conv.forward(p, &x[i], len));
            let normed = if train {
                let (y, c, u) = bn.forward_train(p, &pre, len);
                cache.bn.push(c);
                updates.push(u);
                y
            } else {
                parallel::map(n, |i| bn.forward_eval(p, &pre[i], len))
            };
            let pooled: Vec<(Vec<f64>, Vec<usize>)> =
                parallel::map(n, |i| relu_maxpool(&normed[i], conv.out_ch, len));
            let (mut out, args): (Vec<_>, Vec<_>) = pooled.into_iter().unzip();
            len /= 2;
            if b == 0 {
                if let Mode::Train { dropout_seed } = mode {
                    let rate = self.config.dropout;
                    let masks: Vec<Vec<f64>> = parallel::map(n, |i| {
                        let mut r = site_rng(dropout_seed, i, SITE_CONV + view_offset);
                        dropout_mask(&mut r, conv.out_ch * len, rate)
                    });
                    for (o, m) in out.iter_mut().zip(&masks) {
                        o.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                    }
                    cache.dropout = masks;
                }
            }
            if train {
                cache.inputs.push(std::mem::take(&mut x));
                cache.pool_arg.push(args);
            }
            x = out;
        }
        let k = self.config.repre_channels();
        let z = parallel::map(n, |i| to_time_major(&x[i], k, len));
        (z, train.then_some(cache), updates)
    }

    fn encoder_backward(&self, cache: &EncoderCache, dz: &[Vec<f64>], grads: &mut Grads) {
        let p = &self.params;
        let n = dz.len();
        let k = self.config.repre_channels();
        let mut len = self.config.latent_len();
        let mut dout: Vec<Vec<f64>> = parallel::map(n, |i| to_channel_major(&dz[i], len, k));
        let np = p.tensors.len();
        for b in (0..POOL_BLOCKS).rev() {
            let conv = &self.arch.convs[b];
            let bn = &self.arch.conv_bns[b];
            if b == 0 && !cache.dropout.is_empty() {
                for (d, m) in dout.iter_mut().zip(&cache.dropout) {
                    d.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                }
            }
            let in_len = len * 2;
            let size = conv.out_ch * in_len;
            let dnormed: Vec<Vec<f64>> = parallel::map(n, |i| {
                relu_maxpool_backward(&dout[i], &cache.pool_arg[b][i], size)
            });
            let dpre = bn.backward(p, &cache.bn[b], &dnormed, grads);
            let want_dx = b > 0;
            let (dx, parts) = parallel::map_with_accumulators(
                n,
                || Grads::for_len(np),
                |g, i| conv.backward(p, &cache.inputs[b][i], in_len, &dpre[i], g, want_dx),
            );
            merge(parts, grads);
            dout = dx;
            len = in_len;
        }
    }

    // ---- seq2seq ---------------------------------------------------------

    fn seq2seq_forward_one(
        &self,
        z: &[f64],
        dropout: Option<(u64, usize)>,
    ) -> (Vec<f64>, Seq2SeqCache) {
        let p = &self.params;
        let l_len = self.config.latent_len();
        let k = self.config.repre_channels();
        let h = self.config.hidden_size;
        let layers = self.config.seq_layers;
        let rate = self.config.dropout;
        let mut enc_rng = dropout.map(|(s, i)| site_rng(s, i, SITE_SEQ_ENC));
        let mut dec_rng = dropout.map(|(s, i)| site_rng(s, i, SITE_SEQ_DEC));
        let mut hs = vec![vec![0.0; h]; layers];
        let mut cs = vec![vec![0.0; h]; layers];
        let mut cache = Seq2SeqCache {
            enc: Vec::with_capacity(l_len),
            dec: Vec::with_capacity(l_len),
            enc_masks: Vec::new(),
            dec_masks: Vec::new(),
            dec_top: Vec::with_capacity(l_len),
        };
        for t in 0..l_len {
            let mut inp = z[t * k..(t + 1) * k].to_vec();
            let mut steps = Vec::with_capacity(layers);
            let mut masks = Vec::new();
            for (l, layer) in self.arch.seq_enc.iter().enumerate() {
                let (hn, cn, c) = layer.step(p, &inp, &hs[l], &cs[l]);
                steps.push(c);
                inp = hn.clone();
                hs[l] = hn;
                cs[l] = cn;
                if l + 1 < layers {
                    if let Some(r) = enc_rng.as_mut() {
                        let m = dropout_mask(r, h, rate);
                        inp.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                        masks.push(m);
                    }
                }
            }
            cache.enc.push(steps);
            cache.enc_masks.push(masks);
        }
        // Decoder starts from the encoder's final states, emits the sequence
        // back to front and feeds each output in as the next input.
        let mut emitted = Vec::with_capacity(l_len);
        let mut u = vec![0.0; k];
        for _ in 0..l_len {
            let mut inp = u;
            let mut steps = Vec::with_capacity(layers);
            let mut masks = Vec::new();
            for (l, layer) in self.arch.seq_dec.iter().enumerate() {
                let (hn, cn, c) = layer.step(p, &inp, &hs[l], &cs[l]);
                steps.push(c);
                inp = hn.clone();
                hs[l] = hn;
                cs[l] = cn;
                if l + 1 < layers {
                    if let Some(r) = dec_rng.as_mut() {
                        let m = dropout_mask(r, h, rate);
                        inp.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                        masks.push(m);
                    }
                }
            }
            let y = self.arch.seq_fc.forward(p, &inp);
            cache.dec_top.push(inp);
            cache.dec.push(steps);
            cache.dec_masks.push(masks);
            emitted.push(y.clone());
            u = y;
        }
        let mut out = Vec::with_capacity(l_len * k);
        for y in emitted.iter().rev() {
            out.extend_from_slice(y);
        }
        (out, cache)
    }

    fn seq2seq_backward_one(
        &self,
        cache: &Seq2SeqCache,
        dz_prime: &[f64],
        g: &mut Grads,
    ) -> Vec<f64> {
        let p = &self.params;
        let l_len = self.config.latent_len();
        let k = self.config.repre_channels();
        let h = self.config.hidden_size;
        let layers = self.config.seq_layers;
        let mut dh = vec![vec![0.0; h]; layers];
        let mut dc = vec![vec![0.0; h]; layers];
        let mut du_next = vec![0.0; k];
        for s in (0..l_len).rev() {
            let t = l_len - 1 - s;
            let dy: Vec<f64> = dz_prime[t * k..(t + 1) * k]
                .iter()
                .zip(&du_next)
                .map(|(a, b)| a + b)
                .collect();
            let mut d_above = self.arch.seq_fc.backward(p, &cache.dec_top[s], &dy, g);
            for l in (0..layers).rev() {
                let dh_in: Vec<f64> = dh[l].iter().zip(&d_above).map(|(a, b)| a + b).collect();
                let (dx, dhp, dcp) =
                    self.arch.seq_dec[l].step_backward(p, &cache.dec[s][l], &dh_in, &dc[l], g);
                dh[l] = dhp;
                dc[l] = dcp;
                d_above = if l > 0 {
                    match cache.dec_masks[s].get(l - 1) {
                        Some(m) => dx.iter().zip(m).map(|(a, b)| a * b).collect(),
                        None => dx,
                    }
                } else {
                    dx
                };
            }
            du_next = d_above;
        }
        let mut dz = vec![0.0; l_len * k];
        for t in (0..l_len).rev() {
            let mut d_above = vec![0.0; h];
            for l in (0..layers).rev() {
                let dh_in: Vec<f64> = dh[l].iter().zip(&d_above).map(|(a, b)| a + b).collect();
                let (dx, dhp, dcp) =
                    self.arch.seq_enc[l].step_backward(p, &cache.enc[t][l], &dh_in, &dc[l], g);
                dh[l] = dhp;
                dc[l] = dcp;
                d_above = if l > 0 {
                    match cache.enc_masks[t].get(l - 1) {
                        Some(m) => dx.iter().zip(m).map(|(a, b)| a * b).collect(),
                        None => dx,
                    }
                } else {
                    dx
                };
            }
            dz[t * k..(t + 1) * k].copy_from_slice(&d_above);
        }
        dz
    }

    // ---- projector -------------------------------------------------------

    fn projector_forward(
        &self,
        zs: &[Vec<f64>],
        train: bool,
    ) -> (Vec<Vec<f64>>, Option<ProjectorCache>, Option<RunningUpdate>) {
        let p = &self.params;
        let n = zs.len();
        let k = self.config.repre_channels();
        let l_len = self.config.latent_len();
        let hid = self.config.project_hidden;
        let pooled: Vec<Vec<f64>> = parallel::map(n, |i| {
            let mut m = vec![0.0; k];
            for t in 0..l_len {
                for (a, b) in m.iter_mut().zip(&zs[i][t * k..(t + 1) * k]) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|v| *v /= l_len as f64);
            m
        });
        let pre: Vec<Vec<f64>> = parallel::map(n, |i| self.arch.proj_in.forward(p, &pooled[i]));
        let (normed, bn_cache, update) = if train {
            let (y, c, u) = self.arch.proj_bn.forward_train(p, &pre, 1);
            (y, Some(c), Some(u))
        } else {
            let y = parallel::map(n, |i| self.arch.proj_bn.forward_eval(p, &pre[i], 1));
            (y, None, None)
        };
        let hidden: Vec<Vec<f64>> = normed
            .into_iter()
            .map(|v| v.into_iter().map(|x| x.max(0.0)).collect())
            .collect();
        let q = parallel::map(n, |i| self.arch.proj_out.forward(p, &hidden[i]));
        debug_assert!(hidden.iter().all(|h| h.len() == hid));
        let cache = bn_cache.map(|bn| ProjectorCache {
            pooled,
            bn,
            hidden,
            latent_len: l_len,
        });
        (q, cache, update)
    }

    fn projector_backward(
        &self,
        cache: &ProjectorCache,
        dq: &[Vec<f64>],
        grads: &mut Grads,
    ) -> Vec<Vec<f64>> {
        let p = &self.params;
        let n = dq.len();
        let np = p.tensors.len();
        let k = self.config.repre_channels();
        let (dhidden, parts) = parallel::map_with_accumulators(
            n,
            || Grads::for_len(np),
            |g, i| {
                let mut dh = self.arch.proj_out.backward(p, &cache.hidden[i], &dq[i], g);
                for (d, h) in dh.iter_mut().zip(&cache.hidden[i]) {
                    if *h <= 0.0 {
                        *d = 0.0;
                    }
                }
                dh
            },
        );
        merge(parts, grads);
        let dpre = self.arch.proj_bn.backward(p, &cache.bn, &dhidden, grads);
        let (dpooled, parts) = parallel::map_with_accumulators(
            n,
            || Grads::for_len(np),
            |g, i| self.arch.proj_in.backward(p, &cache.pooled[i], &dpre[i], g),
        );
        merge(parts, grads);
        let l_len = cache.latent_len;
        dpooled
            .into_iter()
            .map(|dp| {
                let mut dz = Vec::with_capacity(l_len * k);
                for _ in 0..l_len {
                    dz.extend(dp.iter().map(|v| v / l_len as f64));
                }
                dz
            })
            .collect()
    }

    // ---- public operations -----------------------------------------------

    /// Feature encoder `f` over a batch of windows.
    pub fn encode(&self, batch: &WindowBatch, mode: Mode) -> Result<Vec<LatentSeq>> {
        self.check_batch(batch)?;
        let (z, _, _) = self.encoder_forward(batch, mode, 0);
        Ok(self.wrap_latent(z))
    }

    /// Seq2Seq reconstruction `h(g(Z))`, aligned with `Z` in time.
    pub fn reconstruct(&self, zs: &[LatentSeq], mode: Mode) -> Result<Vec<LatentSeq>> {
        self.check_latent(zs)?;
        let out = parallel::map(zs.len(), |i| {
            let dropout = match mode {
                Mode::Train { dropout_seed } => Some((dropout_seed, i)),
                Mode::Eval => None,
            };
            self.seq2seq_forward_one(&zs[i].values, dropout).0
        });
        Ok(self.wrap_latent(out))
    }

    /// Projector `p`: temporal mean pool, linear, batch norm, ReLU, linear.
    pub fn project(&self, zs: &[LatentSeq], mode: Mode) -> Result<Vec<ProjectedVec>> {
        self.check_latent(zs)?;
        let raw: Vec<Vec<f64>> = zs.iter().map(|z| z.values.clone()).collect();
        let (q, _, _) = self.projector_forward(&raw, matches!(mode, Mode::Train { .. }));
        Ok(q.into_iter().map(ProjectedVec).collect())
    }

    /// `(q, q')` per window with `q = p(f(X))`, `q' = p(h(g(f(X))))`.
    pub fn forward(
        &self,
        batch: &WindowBatch,
        mode: Mode,
    ) -> Result<Vec<(ProjectedVec, ProjectedVec)>> {
        let out = match mode {
            Mode::Eval => self.forward_eval(batch, PairRoute::Sequence)?,
            Mode::Train { dropout_seed } => self.forward_train(batch, None, dropout_seed)?.0,
        };
        Ok(out
            .q
            .into_iter()
            .zip(out.q_prime)
            .map(|(a, b)| (ProjectedVec(a), ProjectedVec(b)))
            .collect())
    }

    /// Inference pass. With [`PairRoute::Views`] only the direct branch is
    /// evaluated and `q'` is a copy of `q`.
    pub fn forward_eval(&self, batch: &WindowBatch, route: PairRoute) -> Result<PairOutput> {
        self.check_batch(batch)?;
        let (z, _, _) = self.encoder_forward(batch, Mode::Eval, 0);
        let (q, _, _) = self.projector_forward(&z, false);
        let q_prime = match route {
            PairRoute::Sequence => {
                let zp: Vec<Vec<f64>> =
                    parallel::map(z.len(), |i| self.seq2seq_forward_one(&z[i], None).0);
                self.projector_forward(&zp, false).0
            }
            PairRoute::Views => q.clone(),
        };
        Ok(PairOutput { q, q_prime, route })
    }

    /// Training pass. With `views = Some(b)` the pair is `(p(f(a)), p(f(b)))`,
    /// otherwise the Seq2Seq route is used.
    pub fn forward_train(
        &self,
        batch: &WindowBatch,
        views: Option<&WindowBatch>,
        dropout_seed: u64,
    ) -> Result<(PairOutput, PairCache)> {
        self.check_batch(batch)?;
        let mode = Mode::Train { dropout_seed };
        let n = batch.len();
        let (z, enc_a, mut running) = self.encoder_forward(batch, mode, 0);
        let (q, proj_a, ua) = self.projector_forward(&z, true);
        running.extend(ua);
        let (route, zb, enc_b, seq) = match views {
            None => {
                let outs: Vec<(Vec<f64>, Seq2SeqCache)> = parallel::map(n, |i| {
                    self.seq2seq_forward_one(&z[i], Some((dropout_seed, i)))
                });
                let (zp, seq): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
                (PairRoute::Sequence, zp, None, seq)
            }
            Some(b) => {
                self.check_batch(b)?;
                if b.len() != n {
                    return Err(CocaError::LengthMismatch {
                        left: n,
                        right: b.len(),
                    });
                }
                let (zb, enc_b, ub) = self.encoder_forward(b, mode, VIEW_B_OFFSET);
                running.extend(ub);
                (PairRoute::Views, zb, enc_b, Vec::new())
            }
        };
        let (q_prime, proj_b, ub) = self.projector_forward(&zb, true);
        running.extend(ub);
        let cache = PairCache {
            route,
            enc_a: enc_a.expect("train mode cache"),
            enc_b,
            seq,
            proj_a: proj_a.expect("train mode cache"),
            proj_b: proj_b.expect("train mode cache"),
            running,
            n,
        };
        Ok((PairOutput { q, q_prime, route }, cache))
    }

    /// Gradients of a scalar loss given `dL/dq` and `dL/dq'` per sample.
    pub fn backward(&self, cache: &PairCache, dq: &[Vec<f64>], dq_prime: &[Vec<f64>]) -> Grads {
        assert_eq!(dq.len(), cache.n);
        assert_eq!(dq_prime.len(), cache.n);
        let mut grads = Grads::new(&self.params);
        let np = self.params.tensors.len();
        let mut dz = self.projector_backward(&cache.proj_a, dq, &mut grads);
        let dzb = self.projector_backward(&cache.proj_b, dq_prime, &mut grads);
        match cache.route {
            PairRoute::Sequence => {
                let (dz_seq, parts) = parallel::map_with_accumulators(
                    cache.n,
                    || Grads::for_len(np),
                    |g, i| self.seq2seq_backward_one(&cache.seq[i], &dzb[i], g),
                );
                merge(parts, &mut grads);
                for (a, b) in dz.iter_mut().zip(&dz_seq) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                self.encoder_backward(&cache.enc_a, &dz, &mut grads);
            }
            PairRoute::Views => {
                self.encoder_backward(&cache.enc_a, &dz, &mut grads);
                let enc_b = cache.enc_b.as_ref().expect("views route caches view b");
                self.encoder_backward(enc_b, &dzb, &mut grads);
            }
        }
        grads
    }

    /// Fold the batch statistics of a training pass into the running buffers.
    pub fn apply_running_updates(&mut self, cache: &PairCache) {
        for u in &cache.running {
            u.apply(&mut self.params);
        }
    }

    fn wrap_latent(&self, z: Vec<Vec<f64>>) -> Vec<LatentSeq> {
        let len = self.config.latent_len();
        let width = self.config.repre_channels();
        z.into_iter()
            .map(|values| LatentSeq { len, width, values })
            .collect()
    }

    fn check_latent(&self, zs: &[LatentSeq]) -> Result<()> {
        let (len, width) = (self.config.latent_len(), self.config.repre_channels());
        for z in zs {
            if z.len != len || z.width != width || z.values.len() != len * width {
                return Err(CocaError::DimensionMismatch {
                    expected: len * width,
                    actual: z.values.len(),
                });
            }
        }
        Ok(())
    }
}
