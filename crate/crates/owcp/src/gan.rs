//! Adversarial synthesis of simulated-unknown embeddings.
//!
//! A generator maps Gaussian latent vectors into the flow-embedding space; a
//! discriminator learns to tell generated embeddings from the filtered
//! marginal-flow embeddings. The two train in alternation under the min-max
//! objective (the generator uses the non-saturating form of its loss). After
//! training, sampling the generator yields embeddings that resemble the
//! margins of the known classes without belonging to any of them — the
//! classifier's unknown node trains on these.
//!
//! Training happens in a whitened copy of the embedding space (per-dimension
//! mean/std fitted on the training set); generated samples are mapped back
//! before they leave this module.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opt::Adam;
use crate::tensorio::TensorContainer;

const LEAKY_SLOPE: f64 = 0.2;
/// Discriminator probabilities are clamped strictly inside (0, 1).
const PROB_EPS: f64 = 1e-12;
const LOG_EVERY: usize = 10;

/// GAN hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    /// Dimension of the latent prior z.
    pub latent_dim: usize,
    pub gen_hidden: usize,
    pub dis_hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub gen_lr: f64,
    pub dis_lr: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            gen_hidden: 32,
            dis_hidden: 32,
            steps: 800,
            batch_size: 32,
            gen_lr: 1e-3,
            dis_lr: 1e-3,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.gen_hidden == 0 || self.dis_hidden == 0 {
            return Err(Error::Config("hidden widths must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Two-hidden-layer fully connected stack with leaky-rectifier activations.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

struct MlpCache {
    x: Array2<f64>,
    pre1: Array2<f64>,
    a1: Array2<f64>,
    pre2: Array2<f64>,
    a2: Array2<f64>,
}

#[derive(Debug, Clone)]
struct MlpGrads {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

impl Mlp {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        let he = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let std = (2.0 / rows as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid normal");
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };
        Self {
            w1: he(rng, input, hidden),
            b1: Array1::zeros(hidden),
            w2: he(rng, hidden, hidden),
            b2: Array1::zeros(hidden),
            w3: he(rng, hidden, output),
            b3: Array1::zeros(output),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (MlpCache, Array2<f64>) {
        let pre1 = x.dot(&self.w1) + &self.b1;
        let a1 = pre1.mapv(leaky);
        let pre2 = a1.dot(&self.w2) + &self.b2;
        let a2 = pre2.mapv(leaky);
        let out = a2.dot(&self.w3) + &self.b3;
        (
            MlpCache {
                x: x.clone(),
                pre1,
                a1,
                pre2,
                a2,
            },
            out,
        )
    }

    fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> (MlpGrads, Array2<f64>) {
        // Transposed matmul results may come back in reversed layout; the
        // optimizer needs contiguous slices.
        let standard = |a: Array2<f64>| {
            if a.is_standard_layout() {
                a
            } else {
                a.as_standard_layout().into_owned()
            }
        };
        let w3 = standard(cache.a2.t().dot(d_out));
        let b3 = d_out.sum_axis(Axis(0));
        let mut d_a2 = d_out.dot(&self.w3.t());
        d_a2.zip_mut_with(&cache.pre2, |g, &p| *g *= leaky_grad(p));
        let w2 = standard(cache.a1.t().dot(&d_a2));
        let b2 = d_a2.sum_axis(Axis(0));
        let mut d_a1 = d_a2.dot(&self.w2.t());
        d_a1.zip_mut_with(&cache.pre1, |g, &p| *g *= leaky_grad(p));
        let w1 = standard(cache.x.t().dot(&d_a1));
        let b1 = d_a1.sum_axis(Axis(0));
        let d_x = d_a1.dot(&self.w1.t());
        (
            MlpGrads {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            },
            d_x,
        )
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }
}

impl MlpGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }
}

/// Trained generator/discriminator state plus the whitening transform.
#[derive(Debug, Clone, PartialEq)]
pub struct GanParams {
    pub config: GanConfig,
    /// Dimension of the embeddings the pair was trained on.
    pub data_dim: usize,
    gen: Mlp,
    dis: Mlp,
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl GanParams {
    fn init(config: GanConfig, data_dim: usize, mean: Array1<f64>, std: Array1<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gen = Mlp::init(&mut rng, config.latent_dim, config.gen_hidden, data_dim);
        let dis = Mlp::init(&mut rng, data_dim, config.dis_hidden, 1);
        Self {
            config,
            data_dim,
            gen,
            dis,
            mean,
            std,
        }
    }

    fn whiten(&self, x: &Array1<f64>) -> Array1<f64> {
        (x - &self.mean) / &self.std
    }

    fn unwhiten_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        x * &self.std + &self.mean
    }

    /// Generate `count` whitened-space samples from latent draws.
    fn generate_whitened(&self, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let z = Array2::from_shape_fn((count, self.config.latent_dim), |_| {
            StandardNormal.sample(rng)
        });
        let (_, out) = self.gen.forward(&z);
        out
    }

    /// Discriminator probability that a raw-space embedding is real;
    /// strictly inside (0, 1) for any finite input.
    pub fn discriminate(&self, embedding: &Array1<f64>) -> f64 {
        let row = self.whiten(embedding);
        let x = row.insert_axis(Axis(0));
        let (_, logit) = self.dis.forward(&x);
        sigmoid(logit[[0, 0]]).clamp(PROB_EPS, 1.0 - PROB_EPS)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One logged step of adversarial training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanLogEntry {
    pub step: usize,
    pub dis_loss: f64,
    pub gen_loss: f64,
    /// Balanced accuracy of the discriminator on this step's batches.
    pub dis_accuracy: f64,
}

/// Training log, recorded every ten steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GanTrainingLog {
    pub entries: Vec<GanLogEntry>,
    /// Step at which a non-finite loss stopped training early, if any.
    pub diverged_at: Option<usize>,
}

impl GanTrainingLog {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        for e in &self.entries {
            writeln!(out, "{}", serde_json::to_string(e)?)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn fit_whitening(embeddings: &[Array1<f64>]) -> (Array1<f64>, Array1<f64>) {
    let dim = embeddings[0].len();
    let n = embeddings.len() as f64;
    let mut mean = Array1::<f64>::zeros(dim);
    for e in embeddings {
        mean += e;
    }
    mean /= n;
    let mut var = Array1::<f64>::zeros(dim);
    for e in embeddings {
        let d = e - &mean;
        var += &(&d * &d);
    }
    var /= n;
    let std = var.mapv(|v| v.sqrt().max(1e-8));
    (mean, std)
}

/// Train the pair on marginal-flow embeddings with alternating updates
/// (one discriminator step, one generator step per iteration).
///
/// With `steps == 0` the initialized parameters come back untouched with an
/// empty log. A non-finite loss stops training early and returns the
/// parameters from the last healthy logged step, with `diverged_at` set.
pub fn train_gan(
    embeddings: &[Array1<f64>],
    config: &GanConfig,
) -> Result<(GanParams, GanTrainingLog)> {
    config.validate()?;
    if embeddings.len() < config.batch_size {
        return Err(Error::InvalidInput(format!(
            "need at least batch_size ({}) embeddings, got {}",
            config.batch_size,
            embeddings.len()
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::ShapeMismatch {
            what: "gan training embeddings".to_string(),
            expected: format!("dim {dim}"),
            got: "mixed dimensions".to_string(),
        });
    }

    let (mean, std) = fit_whitening(embeddings);
    let mut params = GanParams::init(*config, dim, mean, std);
    let mut log = GanTrainingLog::default();
    if config.steps == 0 {
        return Ok((params, log));
    }

    // Whitened real data matrix.
    let real: Vec<Array1<f64>> = embeddings.iter().map(|e| params.whiten(e)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut gen_adam = Adam::new(0.5, 0.999, 1e-8);
    let mut dis_adam = Adam::new(0.5, 0.999, 1e-8);
    let mut last_good = params.clone();

    for step in 0..config.steps {
        let b = config.batch_size;
        // --- Discriminator step ---
        let mut real_batch = Array2::zeros((b, dim));
        for r in 0..b {
            let idx = rng.random_range(0..real.len());
            real_batch.row_mut(r).assign(&real[idx]);
        }
        let fake_batch = params.generate_whitened(b, &mut rng);

        let (real_cache, real_logit) = params.dis.forward(&real_batch);
        let (fake_cache, fake_logit) = params.dis.forward(&fake_batch);
        let mut dis_loss = 0.0;
        let mut d_real = Array2::zeros((b, 1));
        let mut d_fake = Array2::zeros((b, 1));
        let mut correct = 0.0;
        for r in 0..b {
            let lr_ = real_logit[[r, 0]];
            let lf = fake_logit[[r, 0]];
            dis_loss += softplus(-lr_) + softplus(lf);
            d_real[[r, 0]] = (sigmoid(lr_) - 1.0) / b as f64;
            d_fake[[r, 0]] = sigmoid(lf) / b as f64;
            if lr_ >= 0.0 {
                correct += 0.5;
            }
            if lf < 0.0 {
                correct += 0.5;
            }
        }
        dis_loss /= b as f64;
        let dis_accuracy = correct / b as f64;

        let (g_real, _) = params.dis.backward(&real_cache, &d_real);
        let (g_fake, _) = params.dis.backward(&fake_cache, &d_fake);
        {
            let grads: Vec<Vec<f64>> = g_real
                .tensors()
                .iter()
                .zip(g_fake.tensors())
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect();
            let mut pairs: Vec<(&mut [f64], &[f64])> = params
                .dis
                .tensors_mut()
                .into_iter()
                .zip(grads.iter().map(|g| g.as_slice()))
                .collect();
            dis_adam.step(config.dis_lr, &mut pairs);
        }

        // --- Generator step (non-saturating loss) ---
        let z = Array2::from_shape_fn((b, config.latent_dim), |_| StandardNormal.sample(&mut rng));
        let (gen_cache, gen_out) = params.gen.forward(&z);
        let (dis_cache, logits) = params.dis.forward(&gen_out);
        let mut gen_loss = 0.0;
        let mut d_logit = Array2::zeros((b, 1));
        for r in 0..b {
            let l = logits[[r, 0]];
            gen_loss += softplus(-l);
            d_logit[[r, 0]] = (sigmoid(l) - 1.0) / b as f64;
        }
        gen_loss /= b as f64;
        let (_, d_gen_out) = params.dis.backward(&dis_cache, &d_logit);
        let (g_gen, _) = params.gen.backward(&gen_cache, &d_gen_out);
        {
            let grads = g_gen.tensors();
            let mut pairs: Vec<(&mut [f64], &[f64])> = params
                .gen
                .tensors_mut()
                .into_iter()
                .zip(grads)
                .collect();
            gen_adam.step(config.gen_lr, &mut pairs);
        }

        if !dis_loss.is_finite() || !gen_loss.is_finite() {
            log.diverged_at = Some(step);
            return Ok((last_good, log));
        }
        if step % LOG_EVERY == 0 || step + 1 == config.steps {
            log.entries.push(GanLogEntry {
                step,
                dis_loss,
                gen_loss,
                dis_accuracy,
            });
            last_good = params.clone();
        }
    }

    Ok((params, log))
}

/// Simulated-unknown embeddings sampled from a trained generator. They carry
/// no flow ids; downstream they all receive the reserved unknown label.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUnknownSet {
    pub embeddings: Vec<Array1<f64>>,
}

impl SyntheticUnknownSet {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// Serialize as a tensor container tagged with the generator checkpoint
    /// hash it came from.
    pub fn to_container(&self, generator_hash: &str) -> TensorContainer {
        let mut c = TensorContainer::new("synthetic");
        let dim = self.embeddings.first().map_or(0, |e| e.len());
        c.meta = serde_json::json!({
            "generator_hash": generator_hash,
            "count": self.embeddings.len(),
            "dim": dim,
        });
        let mut flat = Vec::with_capacity(self.embeddings.len() * dim);
        for e in &self.embeddings {
            flat.extend(e.iter().copied());
        }
        c.push("embeddings", vec![self.embeddings.len(), dim], flat);
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<(Self, String)> {
        if c.kind != "synthetic" {
            return Err(Error::Checkpoint(format!(
                "expected synthetic container, got {:?}",
                c.kind
            )));
        }
        let hash = c
            .meta
            .get("generator_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let (shape, data) = c.get("embeddings")?;
        let (count, dim) = (shape[0], shape[1]);
        let embeddings = (0..count)
            .map(|i| Array1::from_vec(data[i * dim..(i + 1) * dim].to_vec()))
            .collect();
        Ok((Self { embeddings }, hash))
    }
}

/// Sample `count` simulated-unknown embeddings, deterministic under `seed`.
pub fn synthesize(params: &GanParams, count: usize, seed: u64) -> SyntheticUnknownSet {
    if count == 0 {
        return SyntheticUnknownSet {
            embeddings: Vec::new(),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let whitened = params.generate_whitened(count, &mut rng);
    let raw = params.unwhiten_rows(&whitened);
    SyntheticUnknownSet {
        embeddings: raw.rows().into_iter().map(|r| r.to_owned()).collect(),
    }
}

/// Balanced accuracy of the discriminator over fresh real and generated
/// batches of equal size.
pub fn discriminator_balanced_accuracy(
    params: &GanParams,
    real: &[Array1<f64>],
    per_side: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut real_hits = 0usize;
    for _ in 0..per_side {
        let idx = rng.random_range(0..real.len());
        if params.discriminate(&real[idx]) >= 0.5 {
            real_hits += 1;
        }
    }
    let fakes = synthesize(params, per_side, seed.wrapping_add(7));
    let fake_hits = fakes
        .embeddings
        .iter()
        .filter(|e| params.discriminate(e) < 0.5)
        .count();
    (real_hits as f64 / per_side as f64 + fake_hits as f64 / per_side as f64) / 2.0
}

/// Serialize GAN parameters into a checkpoint container.
pub fn to_container(params: &GanParams) -> TensorContainer {
    let mut c = TensorContainer::new("gan");
    c.meta = serde_json::json!({
        "config": params.config,
        "data_dim": params.data_dim,
    });
    let push2 = |c: &mut TensorContainer, name: &str, a: &Array2<f64>| {
        let (r, co) = a.dim();
        c.push(name, vec![r, co], a.iter().copied().collect());
    };
    let push1 = |c: &mut TensorContainer, name: &str, a: &Array1<f64>| {
        c.push(name, vec![a.len()], a.iter().copied().collect());
    };
    push2(&mut c, "gen.w1", &params.gen.w1);
    push1(&mut c, "gen.b1", &params.gen.b1);
    push2(&mut c, "gen.w2", &params.gen.w2);
    push1(&mut c, "gen.b2", &params.gen.b2);
    push2(&mut c, "gen.w3", &params.gen.w3);
    push1(&mut c, "gen.b3", &params.gen.b3);
    push2(&mut c, "dis.w1", &params.dis.w1);
    push1(&mut c, "dis.b1", &params.dis.b1);
    push2(&mut c, "dis.w2", &params.dis.w2);
    push1(&mut c, "dis.b2", &params.dis.b2);
    push2(&mut c, "dis.w3", &params.dis.w3);
    push1(&mut c, "dis.b3", &params.dis.b3);
    push1(&mut c, "mean", &params.mean);
    push1(&mut c, "std", &params.std);
    c
}

/// Rebuild GAN parameters from a checkpoint container.
pub fn from_container(c: &TensorContainer) -> Result<GanParams> {
    if c.kind != "gan" {
        return Err(Error::Checkpoint(format!(
            "expected gan container, got {:?}",
            c.kind
        )));
    }
    let config: GanConfig = serde_json::from_value(
        c.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing config".to_string()))?,
    )?;
    let data_dim = c
        .meta
        .get("data_dim")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("missing data_dim".to_string()))? as usize;
    let take2 = |name: &str| -> Result<Array2<f64>> {
        let (shape, data) = c.get(name)?;
        Ok(Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?)
    };
    let take1 = |name: &str| -> Result<Array1<f64>> {
        let (_, data) = c.get(name)?;
        Ok(Array1::from_vec(data.to_vec()))
    };
    Ok(GanParams {
        config,
        data_dim,
        gen: Mlp {
            w1: take2("gen.w1")?,
            b1: take1("gen.b1")?,
            w2: take2("gen.w2")?,
            b2: take1("gen.b2")?,
            w3: take2("gen.w3")?,
            b3: take1("gen.b3")?,
        },
        dis: Mlp {
            w1: take2("dis.w1")?,
            b1: take1("dis.b1")?,
            w2: take2("dis.w2")?,
            b2: take1("dis.b2")?,
            w3: take2("dis.w3")?,
            b3: take1("dis.b3")?,
        },
        mean: take1("mean")?,
        std: take1("std")?,
    })
}
