//! Pair sampling, encoder pretraining and transporter training.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{norm_stack_mean, ssim, FeatureStack, Frame, FusionConfig, InputMode, Preprocess, NORM_STACK_STD};
use crate::model::{Checkpoint, ModelConfig, Net};
use crate::tensor::{adam_step, AdamState, Graph, Params, Tensor};
use crate::trace::{note, Trace};

/// Pair attempts allowed per requested pair when SSIM gating rejects.
pub const RETRY_FACTOR: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_interval: usize,
    pub ssim_threshold: f64,
    pub max_pair_gap: usize,
    /// Training pairs drawn once per run.
    pub pairs: usize,
    pub pretrain_epochs: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub use_tga: bool,
    pub use_ssim_gate: bool,
    pub use_cbam: bool,
    pub input_mode: InputMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr0: 0.001,
            lr_decay: 0.95,
            lr_interval: 6,
            ssim_threshold: 0.85,
            max_pair_gap: 10,
            pairs: 200,
            pretrain_epochs: 10,
            checkpoint_every: 10,
            seed: 0,
            use_tga: true,
            use_ssim_gate: true,
            use_cbam: false,
            input_mode: InputMode::Fused,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0,1], got {}", self.lr_decay));
        }
        if self.lr_interval == 0 {
            return bad("lr_interval must be >= 1".into());
        }
        if !(self.ssim_threshold > 0.0 && self.ssim_threshold <= 1.0) {
            return bad(format!("ssim_threshold must lie in (0,1], got {}", self.ssim_threshold));
        }
        if self.max_pair_gap == 0 || self.pairs == 0 {
            return bad("max_pair_gap and pairs must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        Ok(())
    }

    /// Model config with the CBAM switch applied.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            cbam_enabled: self.use_cbam,
            ..base.clone()
        }
    }

    /// Frame preprocessing with the TGA and input-mode switches applied.
    pub fn preprocess(&self, model: &ModelConfig, fusion: &FusionConfig) -> Preprocess {
        Preprocess {
            size: model.input_size,
            use_tga: self.use_tga,
            input_mode: self.input_mode,
            fusion: fusion.clone(),
        }
    }
}

/// Step-decayed learning rate `lr0 · decay^floor(epoch / interval)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_interval) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub video: usize,
    pub source: usize,
    pub target: usize,
    pub ssim: f64,
}

/// Draw `count` same-video pairs at most `max_pair_gap` frames apart,
/// rejecting pairs below the SSIM threshold when gating is on.
pub fn sample_pairs(videos: &[Vec<Frame>], cfg: &TrainConfig, count: usize) -> Result<Vec<PairSample>> {
    sample_pairs_traced(videos, cfg, count, None)
}

fn sample_pairs_traced(
    videos: &[Vec<Frame>],
    cfg: &TrainConfig,
    count: usize,
    trace: Option<&Trace>,
) -> Result<Vec<PairSample>> {
    if videos.is_empty() {
        return Err(Error::Data("no videos to sample pairs from".into()));
    }
    for (v, frames) in videos.iter().enumerate() {
        if frames.len() < 2 {
            return Err(Error::Data(format!("video {v} has {} frame(s); need >= 2", frames.len())));
        }
    }
    if cfg.use_ssim_gate {
        note(trace, "ssim_gate");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut cache: HashMap<(usize, usize, usize), f64> = HashMap::new();
    let budget = RETRY_FACTOR * count;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts == budget {
            return Err(Error::Data(format!(
                "SSIM gate accepted {} of {attempts} candidate pairs (rate {:.4}); needed {count}",
                out.len(),
                out.len() as f64 / attempts as f64
            )));
        }
        attempts += 1;
        let video = rng.gen_range(0..videos.len());
        let n = videos[video].len();
        let source = rng.gen_range(0..n);
        let lo = source.saturating_sub(cfg.max_pair_gap);
        let hi = (source + cfg.max_pair_gap).min(n - 1);
        // skip over the source index itself
        let mut target = rng.gen_range(lo..hi);
        if target >= source {
            target += 1;
        }
        let key = (video, source.min(target), source.max(target));
        let s = match cache.get(&key) {
            Some(&s) => s,
            None => {
                let s = ssim(&videos[video][source], &videos[video][target])?;
                cache.insert(key, s);
                s
            }
        };
        if cfg.use_ssim_gate && s < cfg.ssim_threshold {
            continue;
        }
        out.push(PairSample {
            video,
            source,
            target,
            ssim: s,
        });
    }
    Ok(out)
}

/// Values the network should reproduce for a stack: the stack itself for
/// fused input, the frame (undoing the per-channel shift and scale) for the
/// normalized stack.
pub fn reconstruction_target(stack: &FeatureStack, mode: InputMode) -> Tensor<f32> {
    match mode {
        InputMode::Fused => stack.to_tensor(),
        InputMode::NormStack => {
            let (c, h, w) = stack.shape();
            let data = stack
                .channels()
                .iter()
                .enumerate()
                .flat_map(|(i, ch)| {
                    let mu = norm_stack_mean(i);
                    ch.data().iter().map(move |&v| (v * NORM_STACK_STD + mu) as f32)
                })
                .collect();
            Tensor::new(&[c, h, w], data).expect("stack shape")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// `epoch,mean_loss,lr` CSV with a header row.
pub fn loss_csv(stats: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_loss,lr\n");
    for e in stats {
        writeln!(s, "{},{},{}", e.epoch, e.mean_loss, e.lr).unwrap();
    }
    s
}

/// Loss CSV path beside a checkpoint: `model.lusk` → `model.loss.csv`.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

/// Intermediate checkpoint path: `model.lusk` → `model.epoch010.lusk`.
pub fn epoch_checkpoint_path(checkpoint: &Path, epoch: usize) -> PathBuf {
    let ext = checkpoint.extension().and_then(|e| e.to_str()).unwrap_or("lusk");
    checkpoint.with_extension(format!("epoch{epoch:03}.{ext}"))
}

struct Sample {
    input: Tensor<f32>,
    target: Tensor<f32>,
}

fn prepare(stacks: &[FeatureStack], mode: InputMode) -> Vec<Sample> {
    stacks
        .iter()
        .map(|s| Sample {
            input: s.to_tensor(),
            target: reconstruction_target(s, mode),
        })
        .collect()
}

/// Mean of per-item losses and gradients, reduced in item order.
fn reduce_batch(items: Vec<Result<(f64, Params<f32>)>>) -> Result<(f64, Params<f32>)> {
    let n = items.len();
    let mut total = 0.0;
    let mut grads: Option<Params<f32>> = None;
    for item in items {
        let (loss, g) = item?;
        total += loss;
        match grads.as_mut() {
            Some(acc) => acc.accumulate(&g)?,
            None => grads = Some(g),
        }
    }
    let mut grads = grads.ok_or_else(|| Error::invalid("empty batch"))?;
    grads.scale(1.0 / n as f32);
    Ok((total / n as f64, grads))
}

fn check_loss(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {batch} ({loss})")))
    }
}

fn shuffled(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    /// Encoder weights only.
    pub encoder: Params<f32>,
    pub losses: Vec<EpochStats>,
    /// Mean reconstruction loss of the initial weights.
    pub initial_loss: f64,
}

fn autoencoder_loss(model: &ModelConfig, params: &Params<f32>, s: &Sample) -> Result<(f64, Params<f32>)> {
    let g = Graph::<f32>::new();
    let vars = params.attach(&g);
    let net = Net::new(model, &vars);
    let x = g.constant(s.input.clone());
    let loss = net.decode(net.encode(x)?)?.mse(g.constant(s.target.clone()))?;
    let grads = g.backward(loss)?;
    Ok((loss.value().item() as f64, Params::gradients(&grads, &vars)))
}

/// Train the encoder as an autoencoder with a throwaway mirror decoder.
pub fn pretrain_encoder(stacks: &[FeatureStack], cfg: &TrainConfig, model: &ModelConfig) -> Result<PretrainResult> {
    cfg.validate()?;
    let model = cfg.model_config(model);
    model.validate()?;
    if stacks.is_empty() {
        return Err(Error::Data("pretraining needs at least one feature stack".into()));
    }
    let samples = prepare(stacks, cfg.input_mode);
    let mut params = model.init_params(cfg.seed).filter_prefix("encoder.");
    params.merge(&model.init_pretrain_decoder(cfg.seed.wrapping_add(1)));
    let mean_loss = |params: &Params<f32>| -> Result<f64> {
        let losses: Vec<Result<(f64, Params<f32>)>> =
            samples.par_iter().map(|s| autoencoder_loss(&model, params, s)).collect();
        Ok(reduce_batch(losses)?.0)
    };
    let initial_loss = mean_loss(&params)?;
    let mut adam = AdamState::default();
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let lr = lr_at(epoch, cfg);
        let order = shuffled(samples.len(), cfg.seed, 3 + epoch as u64);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<_> = chunk
                .par_iter()
                .map(|&i| autoencoder_loss(&model, &params, &samples[i]))
                .collect();
            let (loss, grads) = reduce_batch(items)?;
            check_loss(loss, epoch, b)?;
            total += loss * chunk.len() as f64;
            adam_step(&mut params, &grads, &mut adam, lr)?;
        }
        losses.push(EpochStats {
            epoch,
            mean_loss: total / samples.len() as f64,
            lr,
        });
    }
    Ok(PretrainResult {
        encoder: params.filter_prefix("encoder."),
        losses,
        initial_loss,
    })
}

/// Everything [`train`] needs besides the videos.
#[derive(Clone, Debug, Default)]
pub struct TrainSpec {
    pub cfg: TrainConfig,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    /// Weights to start from (e.g. a pretrained encoder); missing tensors
    /// keep their seeded initialization.
    pub init: Option<Params<f32>>,
    /// Final checkpoint path; intermediate checkpoints and the loss CSV are
    /// written beside it.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub losses: Vec<EpochStats>,
    /// Pipeline stages in order of first execution.
    pub trace: Vec<&'static str>,
    pub pairs: Vec<PairSample>,
}

fn transporter_loss(
    model: &ModelConfig,
    params: &Params<f32>,
    src: &Sample,
    tgt: &Sample,
    trace: &Trace,
) -> Result<(f64, Params<f32>)> {
    let g = Graph::<f32>::new();
    let vars = params.attach(&g);
    let net = Net::new(model, &vars).traced(trace);
    let out = net.reconstruct(g.constant(src.input.clone()), g.constant(tgt.input.clone()))?;
    note(Some(trace), "loss");
    let loss = out.reconstruction.mse(g.constant(tgt.target.clone()))?;
    let grads = g.backward(loss)?;
    Ok((loss.value().item() as f64, Params::gradients(&grads, &vars)))
}

fn initial_params(model: &ModelConfig, seed: u64, init: Option<&Params<f32>>) -> Result<Params<f32>> {
    let mut params = model.init_params(seed);
    if let Some(init) = init {
        for (name, t) in init.iter() {
            let slot = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("initial weights contain unknown tensor {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "initial tensor {name} has shape {:?} but the model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
    }
    Ok(params)
}

fn write_outputs(out: &Path, ckpt: &Checkpoint, losses: &[EpochStats], epoch: Option<usize>) -> Result<()> {
    let path = match epoch {
        Some(e) => epoch_checkpoint_path(out, e),
        None => out.to_path_buf(),
    };
    ckpt.save(&path)?;
    let csv = loss_csv_path(out);
    fs::write(&csv, loss_csv(losses)).map_err(|e| Error::io(&csv, e))
}

/// Main transporter training loop.
pub fn train(videos: &[Vec<Frame>], spec: &TrainSpec) -> Result<TrainResult> {
    let cfg = &spec.cfg;
    cfg.validate()?;
    spec.fusion.validate()?;
    let model = cfg.model_config(&spec.model);
    model.validate()?;
    let pre = cfg.preprocess(&model, &spec.fusion);
    let trace = Trace::new();

    let mut samples = Vec::with_capacity(videos.len());
    for frames in videos {
        samples.push(prepare(&pre.apply_all_traced(frames, Some(&trace))?, cfg.input_mode));
    }
    let pairs = sample_pairs_traced(videos, cfg, cfg.pairs, Some(&trace))?;

    let mut params = initial_params(&model, cfg.seed, spec.init.as_ref())?;
    let mut adam = AdamState::default();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let order = shuffled(pairs.len(), cfg.seed, 2 + epoch as u64 * 2);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<_> = chunk
                .par_iter()
                .map(|&i| {
                    let p = &pairs[i];
                    let v = &samples[p.video];
                    transporter_loss(&model, &params, &v[p.source], &v[p.target], &trace)
                })
                .collect();
            let (loss, grads) = reduce_batch(items)?;
            check_loss(loss, epoch, b)?;
            total += loss * chunk.len() as f64;
            note(Some(&trace), "adam");
            adam_step(&mut params, &grads, &mut adam, lr)?;
        }
        losses.push(EpochStats {
            epoch,
            mean_loss: total / pairs.len() as f64,
            lr,
        });
        if let Some(out) = &spec.out {
            if (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                let ckpt = Checkpoint::new(model.clone(), pre.clone(), params.clone())?;
                write_outputs(out, &ckpt, &losses, Some(epoch + 1))?;
            }
        }
    }
    let checkpoint = Checkpoint::new(model, pre, params)?;
    if let Some(out) = &spec.out {
        write_outputs(out, &checkpoint, &losses, None)?;
    }
    Ok(TrainResult {
        checkpoint,
        losses,
        trace: trace.stages(),
        pairs,
    })
}
