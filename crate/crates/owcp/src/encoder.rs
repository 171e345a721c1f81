//! Token embedding, sinusoidal positions, and the stacked multi-head
//! self-attention encoder that turns a token sequence into one flow
//! embedding.
//!
//! Each layer is multi-headed self-attention followed by a two-linear-layer
//! feedforward block with a ReLU between, both wrapped in residual
//! connections and layer normalization. The pooled flow representation is the
//! output at the CLS position. PAD positions are masked out of attention as
//! keys, so padding never influences the representation.
//!
//! Backpropagation is written out by hand layer by layer and is validated
//! against central finite differences in the test suite.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::TensorContainer;
use crate::tokenizer::TokenSequence;

const LN_EPS: f64 = 1e-5;
/// Chunk width for deterministic parallel gradient reduction. Gradients are
/// summed within fixed index ranges and then across ranges in order, so the
/// result is bit-identical for any thread count.
const GRAD_CHUNK: usize = 4;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub max_seq: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Full-scale configuration: 8 heads of dimension 64, 1024-wide
    /// feedforward, 6 layers, sequence length 322.
    pub fn paper() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            head_dim: 64,
            ffn_dim: 1024,
            layers: 6,
            max_seq: 322,
            dropout: 0.1,
        }
    }

    /// CPU-scale configuration for experiments that must run in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            head_dim: 16,
            ffn_dim: 128,
            layers: 2,
            max_seq: 96,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".to_string()));
        }
        if self.d_model != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model ({}) must equal heads ({}) * head_dim ({})",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if self.d_model == 0 || self.ffn_dim == 0 || self.max_seq == 0 {
            return Err(Error::Config("dimensions must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// One attention + feedforward block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// All trainable encoder state plus the fixed positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    /// Token embedding matrix, `vocab_size x d_model`.
    pub embedding: Array2<f64>,
    /// Fixed sinusoidal positional table, `max_seq x d_model`; not trained.
    pub positional: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

/// Per-flow encoder output.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Per-token states after the last layer, `L x d_model`.
    pub states: Array2<f64>,
    /// Output at the CLS position; the flow embedding.
    pub pooled: Array1<f64>,
}

/// Sinusoidal positional table.
fn positional_table(max_seq: usize, d_model: usize) -> Array2<f64> {
    let mut table = Array2::zeros((max_seq, d_model));
    for pos in 0..max_seq {
        for i in 0..d_model {
            let exponent = (2 * (i / 2)) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            table[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Deterministically initialize encoder parameters from a seed.
///
/// Weights are small-scale Gaussian (std 0.02), biases zero, layer norms at
/// identity.
pub fn init_encoder(config: &EncoderConfig, vocab_size: usize, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    if vocab_size < 5 {
        return Err(Error::Config(format!(
            "vocab_size must be at least 5, got {vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let std = 0.02;
    let embedding = randn(&mut rng, vocab_size, d, std);
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        layers.push(LayerParams {
            wq: randn(&mut rng, d, d, std),
            bq: Array1::zeros(d),
            wk: randn(&mut rng, d, d, std),
            bk: Array1::zeros(d),
            wv: randn(&mut rng, d, d, std),
            bv: Array1::zeros(d),
            wo: randn(&mut rng, d, d, std),
            bo: Array1::zeros(d),
            ln1_gamma: Array1::ones(d),
            ln1_beta: Array1::zeros(d),
            w1: randn(&mut rng, d, config.ffn_dim, std),
            b1: Array1::zeros(config.ffn_dim),
            w2: randn(&mut rng, config.ffn_dim, d, std),
            b2: Array1::zeros(d),
            ln2_gamma: Array1::ones(d),
            ln2_beta: Array1::zeros(d),
        });
    }
    Ok(EncoderParams {
        config: *config,
        vocab_size,
        embedding,
        positional: positional_table(config.max_seq, d),
        layers,
    })
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm_fwd(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (rows, cols) = x.dim();
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Array1::zeros(rows);
    let mut y = Array2::zeros((rows, cols));
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let xh = (x[[r, c]] - mean) * is;
            xhat[[r, c]] = xh;
            y[[r, c]] = xh * gamma[c] + beta[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns d_input; accumulates dgamma/dbeta.
fn layer_norm_bwd(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, cols) = dy.dim();
    let mut dx = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..cols {
            let dxh = dy[[r, c]] * gamma[c];
            m1 += dxh;
            m2 += dxh * cache.xhat[[r, c]];
            dgamma[c] += dy[[r, c]] * cache.xhat[[r, c]];
            dbeta[c] += dy[[r, c]];
        }
        m1 /= cols as f64;
        m2 /= cols as f64;
        let is = cache.inv_std[r];
        for c in 0..cols {
            let dxh = dy[[r, c]] * gamma[c];
            dx[[r, c]] = is * (dxh - m1 - cache.xhat[[r, c]] * m2);
        }
    }
    dx
}

fn softmax_rows_inplace(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

struct LayerCache {
    x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention probabilities, each `L x L`.
    attn: Vec<Array2<f64>>,
    /// Concatenated head contexts before the output projection.
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln1: LnCache,
    /// Layer-normalized attention block output; feedforward input.
    x_mid: Array2<f64>,
    /// Feedforward hidden activations after ReLU.
    h1: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ln2: LnCache,
}

/// Everything backward needs; produced per sequence by the cached forward.
pub struct ForwardCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    use rand::Rng;
    let keep = 1.0 - p;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

fn forward_cached(
    params: &EncoderParams,
    seq: &TokenSequence,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(ForwardCache, EncoderOutput)> {
    let cfg = &params.config;
    let l = seq.ids.len();
    if l == 0 {
        return Err(Error::InvalidInput("empty token sequence".to_string()));
    }
    if l > cfg.max_seq {
        return Err(Error::InvalidInput(format!(
            "sequence length {l} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let mask = seq.pad_mask();
    let d = cfg.d_model;
    let dh = cfg.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Array2::zeros((l, d));
    for (pos, &id) in seq.ids.iter().enumerate() {
        if id as usize >= params.vocab_size {
            return Err(Error::InvalidInput(format!(
                "token id {id} out of range for vocabulary of {}",
                params.vocab_size
            )));
        }
        let emb = params.embedding.row(id as usize);
        let pe = params.positional.row(pos);
        for c in 0..d {
            x[[pos, c]] = emb[c] + pe[c];
        }
    }

    let mut layer_caches = Vec::with_capacity(cfg.layers);
    for lp in &params.layers {
        let x_in = x.clone();
        let q = x.dot(&lp.wq) + &lp.bq;
        let k = x.dot(&lp.wk) + &lp.bk;
        let v = x.dot(&lp.wv) + &lp.bv;

        let mut ctx = Array2::zeros((l, d));
        let mut attn = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            for (j, &real) in mask.iter().enumerate() {
                if !real {
                    scores.column_mut(j).fill(f64::NEG_INFINITY);
                }
            }
            softmax_rows_inplace(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&vh));
            attn.push(scores);
        }
        let mut attn_out = ctx.dot(&lp.wo) + &lp.bo;
        let attn_drop = match dropout_rng.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => {
                let m = dropout_mask(rng, l, d, cfg.dropout);
                attn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        let res1 = &x_in + &attn_out;
        let (x_mid, ln1) = layer_norm_fwd(&res1, &lp.ln1_gamma, &lp.ln1_beta);

        let mut h1 = x_mid.dot(&lp.w1) + &lp.b1;
        h1.mapv_inplace(|v| v.max(0.0));
        let mut ffn_out = h1.dot(&lp.w2) + &lp.b2;
        let ffn_drop = match dropout_rng.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => {
                let m = dropout_mask(rng, l, d, cfg.dropout);
                ffn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        let res2 = &x_mid + &ffn_out;
        let (x_out, ln2) = layer_norm_fwd(&res2, &lp.ln2_gamma, &lp.ln2_beta);

        layer_caches.push(LayerCache {
            x_in,
            q,
            k,
            v,
            attn,
            ctx,
            attn_drop,
            ln1,
            x_mid,
            h1,
            ffn_drop,
            ln2,
        });
        x = x_out;
    }

    let pooled = x.row(0).to_owned();
    Ok((
        ForwardCache {
            ids: seq.ids.clone(),
            layers: layer_caches,
        },
        EncoderOutput { states: x, pooled },
    ))
}

/// Inference-mode forward over a batch; pure, order-preserving, parallel.
pub fn forward(params: &EncoderParams, batch: &[TokenSequence]) -> Result<Vec<EncoderOutput>> {
    batch
        .par_iter()
        .map(|seq| forward_cached(params, seq, None).map(|(_, out)| out))
        .collect()
}

/// Convenience: embed a batch and keep only the pooled vectors.
pub fn embed(params: &EncoderParams, batch: &[TokenSequence]) -> Result<Vec<Array1<f64>>> {
    Ok(forward(params, batch)?.into_iter().map(|o| o.pooled).collect())
}

/// Gradients for every trainable tensor, in the shape of [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams) -> Self {
        let d = params.config.d_model;
        let f = params.config.ffn_dim;
        Self {
            embedding: Array2::zeros((params.vocab_size, d)),
            layers: (0..params.config.layers)
                .map(|_| LayerGrads {
                    wq: Array2::zeros((d, d)),
                    bq: Array1::zeros(d),
                    wk: Array2::zeros((d, d)),
                    bk: Array1::zeros(d),
                    wv: Array2::zeros((d, d)),
                    bv: Array1::zeros(d),
                    wo: Array2::zeros((d, d)),
                    bo: Array1::zeros(d),
                    ln1_gamma: Array1::zeros(d),
                    ln1_beta: Array1::zeros(d),
                    w1: Array2::zeros((d, f)),
                    b1: Array1::zeros(f),
                    w2: Array2::zeros((f, d)),
                    b2: Array1::zeros(d),
                    ln2_gamma: Array1::zeros(d),
                    ln2_beta: Array1::zeros(d),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        self.embedding += &other.embedding;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.wq += &b.wq;
            a.bq += &b.bq;
            a.wk += &b.wk;
            a.bk += &b.bk;
            a.wv += &b.wv;
            a.bv += &b.bv;
            a.wo += &b.wo;
            a.bo += &b.bo;
            a.ln1_gamma += &b.ln1_gamma;
            a.ln1_beta += &b.ln1_beta;
            a.w1 += &b.w1;
            a.b1 += &b.b1;
            a.w2 += &b.w2;
            a.b2 += &b.b2;
            a.ln2_gamma += &b.ln2_gamma;
            a.ln2_beta += &b.ln2_beta;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.flat_tensors_mut() {
            for v in g {
                *v *= factor;
            }
        }
    }

    /// Flat views in the canonical tensor order (matches
    /// [`EncoderParams::flat_tensors_mut`]).
    pub fn flat_tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embedding.as_slice().unwrap()];
        for l in &self.layers {
            out.extend([
                l.wq.as_slice().unwrap(),
                l.bq.as_slice().unwrap(),
                l.wk.as_slice().unwrap(),
                l.bk.as_slice().unwrap(),
                l.wv.as_slice().unwrap(),
                l.bv.as_slice().unwrap(),
                l.wo.as_slice().unwrap(),
                l.bo.as_slice().unwrap(),
                l.ln1_gamma.as_slice().unwrap(),
                l.ln1_beta.as_slice().unwrap(),
                l.w1.as_slice().unwrap(),
                l.b1.as_slice().unwrap(),
                l.w2.as_slice().unwrap(),
                l.b2.as_slice().unwrap(),
                l.ln2_gamma.as_slice().unwrap(),
                l.ln2_beta.as_slice().unwrap(),
            ]);
        }
        out
    }

    pub fn flat_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embedding.as_slice_mut().unwrap()];
        for l in &mut self.layers {
            out.extend([
                l.wq.as_slice_mut().unwrap(),
                l.bq.as_slice_mut().unwrap(),
                l.wk.as_slice_mut().unwrap(),
                l.bk.as_slice_mut().unwrap(),
                l.wv.as_slice_mut().unwrap(),
                l.bv.as_slice_mut().unwrap(),
                l.wo.as_slice_mut().unwrap(),
                l.bo.as_slice_mut().unwrap(),
                l.ln1_gamma.as_slice_mut().unwrap(),
                l.ln1_beta.as_slice_mut().unwrap(),
                l.w1.as_slice_mut().unwrap(),
                l.b1.as_slice_mut().unwrap(),
                l.w2.as_slice_mut().unwrap(),
                l.b2.as_slice_mut().unwrap(),
                l.ln2_gamma.as_slice_mut().unwrap(),
                l.ln2_beta.as_slice_mut().unwrap(),
            ]);
        }
        out
    }
}

impl EncoderParams {
    /// Flat mutable views over trainable tensors in canonical order; the
    /// positional table is fixed and excluded.
    pub fn flat_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embedding.as_slice_mut().unwrap()];
        for l in &mut self.layers {
            out.extend([
                l.wq.as_slice_mut().unwrap(),
                l.bq.as_slice_mut().unwrap(),
                l.wk.as_slice_mut().unwrap(),
                l.bk.as_slice_mut().unwrap(),
                l.wv.as_slice_mut().unwrap(),
                l.bv.as_slice_mut().unwrap(),
                l.wo.as_slice_mut().unwrap(),
                l.bo.as_slice_mut().unwrap(),
                l.ln1_gamma.as_slice_mut().unwrap(),
                l.ln1_beta.as_slice_mut().unwrap(),
                l.w1.as_slice_mut().unwrap(),
                l.b1.as_slice_mut().unwrap(),
                l.w2.as_slice_mut().unwrap(),
                l.b2.as_slice_mut().unwrap(),
                l.ln2_gamma.as_slice_mut().unwrap(),
                l.ln2_beta.as_slice_mut().unwrap(),
            ]);
        }
        out
    }
}

/// Backpropagate a gradient at the final per-token states through one cached
/// forward pass, accumulating into `grads`.
fn backward_one(
    params: &EncoderParams,
    cache: &ForwardCache,
    d_states: Array2<f64>,
    grads: &mut EncoderGrads,
) {
    let cfg = &params.config;
    let dh = cfg.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d = d_states;

    for (idx, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &params.layers[idx];
        let lg = &mut grads.layers[idx];

        // x_out = LN2(x_mid + ffn_out)
        let d_res2 = layer_norm_bwd(&d, &lc.ln2, &lp.ln2_gamma, &mut lg.ln2_gamma, &mut lg.ln2_beta);
        let mut d_x_mid = d_res2.clone();
        let mut d_ffn_out = d_res2;
        if let Some(m) = &lc.ffn_drop {
            d_ffn_out *= m;
        }

        // ffn_out = relu(x_mid w1 + b1) w2 + b2
        lg.w2 += &lc.h1.t().dot(&d_ffn_out);
        lg.b2 += &d_ffn_out.sum_axis(Axis(0));
        let mut d_h1 = d_ffn_out.dot(&lp.w2.t());
        d_h1.zip_mut_with(&lc.h1, |g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        lg.w1 += &lc.x_mid.t().dot(&d_h1);
        lg.b1 += &d_h1.sum_axis(Axis(0));
        d_x_mid += &d_h1.dot(&lp.w1.t());

        // x_mid = LN1(x_in + attn_out)
        let d_res1 =
            layer_norm_bwd(&d_x_mid, &lc.ln1, &lp.ln1_gamma, &mut lg.ln1_gamma, &mut lg.ln1_beta);
        let mut d_x_in = d_res1.clone();
        let mut d_attn_out = d_res1;
        if let Some(m) = &lc.attn_drop {
            d_attn_out *= m;
        }

        // attn_out = ctx wo + bo
        lg.wo += &lc.ctx.t().dot(&d_attn_out);
        lg.bo += &d_attn_out.sum_axis(Axis(0));
        let d_ctx = d_attn_out.dot(&lp.wo.t());

        let l = d_ctx.nrows();
        let mut d_q = Array2::zeros((l, cfg.d_model));
        let mut d_k = Array2::zeros((l, cfg.d_model));
        let mut d_v = Array2::zeros((l, cfg.d_model));
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &lc.attn[h];
            let d_ctxh = d_ctx.slice(cols);
            let vh = lc.v.slice(cols);
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);

            let d_a = d_ctxh.dot(&vh.t());
            d_v.slice_mut(cols).assign(&a.t().dot(&d_ctxh));

            // softmax backward per row: ds = a * (d_a - rowsum(d_a * a))
            let mut ds = Array2::zeros((l, l));
            for r in 0..l {
                let mut dot = 0.0;
                for c in 0..l {
                    dot += d_a[[r, c]] * a[[r, c]];
                }
                for c in 0..l {
                    ds[[r, c]] = a[[r, c]] * (d_a[[r, c]] - dot) * scale;
                }
            }
            d_q.slice_mut(cols).assign(&ds.dot(&kh));
            d_k.slice_mut(cols).assign(&ds.t().dot(&qh));
        }

        // q = x_in wq + bq, etc.
        lg.wq += &lc.x_in.t().dot(&d_q);
        lg.bq += &d_q.sum_axis(Axis(0));
        d_x_in += &d_q.dot(&lp.wq.t());
        lg.wk += &lc.x_in.t().dot(&d_k);
        lg.bk += &d_k.sum_axis(Axis(0));
        d_x_in += &d_k.dot(&lp.wk.t());
        lg.wv += &lc.x_in.t().dot(&d_v);
        lg.bv += &d_v.sum_axis(Axis(0));
        d_x_in += &d_v.dot(&lp.wv.t());

        d = d_x_in;
    }

    for (pos, &id) in cache.ids.iter().enumerate() {
        let mut row = grads.embedding.row_mut(id as usize);
        row += &d.row(pos);
    }
}

/// One backward work item: a cached forward plus the loss gradient at the
/// pooled (CLS) output.
pub struct PooledGradTask {
    pub cache: ForwardCache,
    pub d_pooled: Array1<f64>,
}

/// Forward a batch keeping caches for backward. When `dropout_seed` is set
/// and the config has dropout, each sequence gets an independent
/// seed-derived mask stream.
pub fn forward_batch_cached(
    params: &EncoderParams,
    batch: &[TokenSequence],
    dropout_seed: Option<u64>,
) -> Result<Vec<(ForwardCache, EncoderOutput)>> {
    batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| match dropout_seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                forward_cached(params, seq, Some(&mut rng))
            }
            None => forward_cached(params, seq, None),
        })
        .collect()
}

/// Backpropagate a batch of pooled-gradient tasks and sum the gradients.
///
/// Work is parallel across fixed-size chunks; the chunk sums are reduced in
/// index order, keeping the result independent of thread scheduling.
pub fn backward_batch(params: &EncoderParams, tasks: Vec<PooledGradTask>) -> EncoderGrads {
    let d = params.config.d_model;
    let chunk_grads: Vec<EncoderGrads> = tasks
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = EncoderGrads::zeros(params);
            for task in chunk {
                let l = task.cache.ids.len();
                let mut d_states = Array2::zeros((l, d));
                d_states.row_mut(0).assign(&task.d_pooled);
                backward_one(params, &task.cache, d_states, &mut grads);
            }
            grads
        })
        .collect();
    let mut total = EncoderGrads::zeros(params);
    for g in &chunk_grads {
        total.add_assign(g);
    }
    total
}

/// Checkpoint container kind tag.
pub const ENCODER_CHECKPOINT_KIND: &str = "encoder";

/// Append every encoder tensor (embedding, positional table, all layer
/// weights) to a container under the canonical names.
pub(crate) fn push_param_tensors(c: &mut TensorContainer, params: &EncoderParams) {
    let d = params.config.d_model;
    let (v, _) = params.embedding.dim();
    c.push("embedding", vec![v, d], params.embedding.iter().copied().collect());
    let (ms, _) = params.positional.dim();
    c.push("positional", vec![ms, d], params.positional.iter().copied().collect());
    for (i, l) in params.layers.iter().enumerate() {
        let pre = format!("layer{i}");
        let push2 = |c: &mut TensorContainer, name: &str, a: &Array2<f64>| {
            let (r, co) = a.dim();
            c.push(format!("{pre}.{name}"), vec![r, co], a.iter().copied().collect());
        };
        let push1 = |c: &mut TensorContainer, name: &str, a: &Array1<f64>| {
            c.push(format!("{pre}.{name}"), vec![a.len()], a.iter().copied().collect());
        };
        push2(&mut c, "wq", &l.wq);
        push1(&mut c, "bq", &l.bq);
        push2(&mut c, "wk", &l.wk);
        push1(&mut c, "bk", &l.bk);
        push2(&mut c, "wv", &l.wv);
        push1(&mut c, "bv", &l.bv);
        push2(&mut c, "wo", &l.wo);
        push1(&mut c, "bo", &l.bo);
        push1(&mut c, "ln1_gamma", &l.ln1_gamma);
        push1(&mut c, "ln1_beta", &l.ln1_beta);
        push2(&mut c, "w1", &l.w1);
        push1(&mut c, "b1", &l.b1);
        push2(&mut c, "w2", &l.w2);
        push1(&mut c, "b2", &l.b2);
        push1(&mut c, "ln2_gamma", &l.ln2_gamma);
        push1(&mut c, "ln2_beta", &l.ln2_beta);
    }
}

/// Serialize parameters (with config and the vocabulary hash they were
/// trained against) into a tensor container.
pub fn to_container(params: &EncoderParams, vocab_hash: &str) -> TensorContainer {
    let mut c = TensorContainer::new(ENCODER_CHECKPOINT_KIND);
    c.meta = serde_json::json!({
        "config": params.config,
        "vocab_size": params.vocab_size,
        "vocab_hash": vocab_hash,
    });
    push_param_tensors(&mut c, params);
    c
}

/// Read the canonical encoder tensors back out of a container.
pub(crate) fn read_param_tensors(
    c: &TensorContainer,
    config: EncoderConfig,
    vocab_size: usize,
) -> Result<EncoderParams> {
    let take2 = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
        let (shape, data) = c.get(name)?;
        if shape != [rows, cols] {
            return Err(Error::ShapeMismatch {
                what: name.to_string(),
                expected: format!("[{rows}, {cols}]"),
                got: format!("{shape:?}"),
            });
        }
        Ok(Array2::from_shape_vec((rows, cols), data.to_vec()).expect("checked shape"))
    };
    let take1 = |name: &str, len: usize| -> Result<Array1<f64>> {
        let (shape, data) = c.get(name)?;
        if shape != [len] {
            return Err(Error::ShapeMismatch {
                what: name.to_string(),
                expected: format!("[{len}]"),
                got: format!("{shape:?}"),
            });
        }
        Ok(Array1::from_vec(data.to_vec()))
    };

    let d = config.d_model;
    let embedding = take2("embedding", vocab_size, d)?;
    let positional = take2("positional", config.max_seq, d)?;
    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let p = format!("layer{i}");
        layers.push(LayerParams {
            wq: take2(&format!("{p}.wq"), d, d)?,
            bq: take1(&format!("{p}.bq"), d)?,
            wk: take2(&format!("{p}.wk"), d, d)?,
            bk: take1(&format!("{p}.bk"), d)?,
            wv: take2(&format!("{p}.wv"), d, d)?,
            bv: take1(&format!("{p}.bv"), d)?,
            wo: take2(&format!("{p}.wo"), d, d)?,
            bo: take1(&format!("{p}.bo"), d)?,
            ln1_gamma: take1(&format!("{p}.ln1_gamma"), d)?,
            ln1_beta: take1(&format!("{p}.ln1_beta"), d)?,
            w1: take2(&format!("{p}.w1"), d, config.ffn_dim)?,
            b1: take1(&format!("{p}.b1"), config.ffn_dim)?,
            w2: take2(&format!("{p}.w2"), config.ffn_dim, d)?,
            b2: take1(&format!("{p}.b2"), d)?,
            ln2_gamma: take1(&format!("{p}.ln2_gamma"), d)?,
            ln2_beta: take1(&format!("{p}.ln2_beta"), d)?,
        });
    }
    Ok(EncoderParams {
        config,
        vocab_size,
        embedding,
        positional,
        layers,
    })
}

/// Rebuild parameters from a checkpoint container; returns the stored
/// vocabulary hash alongside.
pub fn from_container(c: &TensorContainer) -> Result<(EncoderParams, String)> {
    if c.kind != ENCODER_CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!(
            "expected {ENCODER_CHECKPOINT_KIND} container, got {:?}",
            c.kind
        )));
    }
    let config: EncoderConfig = serde_json::from_value(
        c.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing config".to_string()))?,
    )?;
    config.validate()?;
    let vocab_size = c
        .meta
        .get("vocab_size")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("missing vocab_size".to_string()))? as usize;
    let vocab_hash = c
        .meta
        .get("vocab_hash")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    let params = read_param_tensors(c, config, vocab_size)?;
    Ok((params, vocab_hash))
}
