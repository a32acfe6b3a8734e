//! Minibatch SGD with momentum, periodic hard mining, and the
//! finite-difference gradient check.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

mod gradcheck;

pub use gradcheck::{gradcheck, gradcheck_network, gradcheck_params, GradcheckConfig, GradcheckReport, LayerReport, Worst};

use crate::error::{Error, Result};
use crate::network::{backward, forward, NetworkParams, ParamGrads};
use crate::objective::{argmax, mixed_loss, PoseGrid};
use crate::scalar::Scalar;
use crate::synthgen::LabeledExample;
use crate::tensor::Tensor;

/// Examples per gradient chunk. Chunks are reduced in a fixed order so
/// batch gradients do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {:?} (f32 or f64)", s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub hardmine_period: usize,
    pub subset_fraction: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Epoch at which the learning rate is halved (0 disables).
    pub decay_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 50,
            lambda: 1.0,
            hardmine_period: 5,
            subset_fraction: 0.25,
            seed: 1,
            precision: Precision::F32,
            decay_epoch: 30,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "learning_rate",
        "momentum",
        "batch_size",
        "epochs",
        "lambda",
        "hardmine_period",
        "subset_fraction",
        "seed",
        "precision",
        "decay_epoch",
    ];

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and non-negative");
        }
        if self.hardmine_period == 0 {
            return fail("hardmine_period must be at least 1");
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return fail("subset_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "learning_rate" => format!("{:?}", self.learning_rate),
            "momentum" => format!("{:?}", self.momentum),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lambda" => format!("{:?}", self.lambda),
            "hardmine_period" => self.hardmine_period.to_string(),
            "subset_fraction" => format!("{:?}", self.subset_fraction),
            "seed" => self.seed.to_string(),
            "precision" => self.precision.as_str().to_string(),
            "decay_epoch" => self.decay_epoch.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value for {}: {:?}", key, value));
        macro_rules! parse {
            () => {
                value.trim().parse().map_err(|_| bad())?
            };
        }
        match key {
            "learning_rate" => self.learning_rate = parse!(),
            "momentum" => self.momentum = parse!(),
            "batch_size" => self.batch_size = parse!(),
            "epochs" => self.epochs = parse!(),
            "lambda" => self.lambda = parse!(),
            "hardmine_period" => self.hardmine_period = parse!(),
            "subset_fraction" => self.subset_fraction = parse!(),
            "seed" => self.seed = parse!(),
            "precision" => self.precision = value.trim().parse()?,
            "decay_epoch" => self.decay_epoch = parse!(),
            _ => return Err(Error::Config(format!("unknown training key {:?}", key))),
        }
        Ok(())
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{} = {}\n", k, self.get(k).expect("known key")))
            .collect()
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the batches of the epoch.
    pub loss: f64,
    pub subset_size: usize,
    pub learning_rate: f64,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.9} {} {:?}",
            self.epoch, self.loss, self.subset_size, self.learning_rate
        )
    }
}

/// Loss and gradients for one example.
pub fn example_gradients<T: Scalar>(
    params: &NetworkParams<T>,
    ex: &LabeledExample,
    lambda: T,
) -> Result<(T, ParamGrads<T>)> {
    let trace = forward(params, &ex.input.cast())?;
    let terms = mixed_loss(&trace.p_fg, &trace.p_pose, &ex.label, lambda, params.arch().head)?;
    let grads = backward(params, &trace, &terms.grad_logits_fg, &terms.grad_logits_pose)?;
    Ok((terms.loss, grads))
}

pub fn example_loss<T: Scalar>(params: &NetworkParams<T>, ex: &LabeledExample, lambda: T) -> Result<T> {
    let trace = forward(params, &ex.input.cast())?;
    Ok(mixed_loss(&trace.p_fg, &trace.p_pose, &ex.label, lambda, params.arch().head)?.loss)
}

/// Summed loss and gradients over `batch`, reduced chunk by chunk in order.
fn batch_gradients<T: Scalar>(
    params: &NetworkParams<T>,
    batch: &[&LabeledExample],
    lambda: T,
) -> Result<(T, ParamGrads<T>)> {
    let partial: Vec<(T, ParamGrads<T>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = T::zero();
            let mut acc = ParamGrads::zeros_like(params);
            for ex in chunk {
                let (l, g) = example_gradients(params, ex, lambda)?;
                loss += l;
                acc.accumulate(&g)?;
            }
            Ok((loss, acc))
        })
        .collect::<Result<_>>()?;
    let mut loss = T::zero();
    let mut acc = ParamGrads::zeros_like(params);
    for (l, g) in &partial {
        loss += *l;
        acc.accumulate(g)?;
    }
    Ok((loss, acc))
}

/// Losses of every pool example under `params`, in pool order.
pub fn pool_losses<T: Scalar>(params: &NetworkParams<T>, pool: &[LabeledExample], lambda: f64) -> Result<Vec<f64>> {
    let lambda = T::from_f64_lossy(lambda);
    pool.par_iter()
        .map(|ex| Ok(example_loss(params, ex, lambda)?.as_f64()))
        .collect()
}

/// Indices of the `ceil(fraction * |pool|)` highest-loss examples, highest
/// first; ties go to the lower index.
pub fn hard_mine<T: Scalar>(
    params: &NetworkParams<T>,
    pool: &[LabeledExample],
    fraction: f64,
    lambda: f64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("mining fraction {} outside (0, 1]", fraction)));
    }
    let losses = pool_losses(params, pool, lambda)?;
    Ok(top_loss(&losses, fraction))
}

pub(crate) fn subset_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1.min(n), n)
}

fn top_loss(losses: &[f64], fraction: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    idx.truncate(subset_size(losses.len(), fraction));
    idx
}

/// Accuracy of both heads over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadAccuracy {
    /// Fraction of examples whose fg/bg decision matches the label.
    pub fg: f64,
    /// Fraction with a correct pose-head argmax: the background class for
    /// background examples, one of the two grid poses nearest the true view
    /// otherwise.
    pub pose: f64,
    /// Fraction whose pose-head argmax equals the label argmax.
    pub pose_exact: f64,
    pub loss: f64,
}

pub fn head_accuracy<T: Scalar>(
    params: &NetworkParams<T>,
    data: &[LabeledExample],
    grid: &PoseGrid,
    lambda: f64,
) -> Result<HeadAccuracy> {
    let head = params.arch().head;
    let lam = T::from_f64_lossy(lambda);
    let rows: Vec<(bool, bool, bool, f64)> = data
        .par_iter()
        .map(|ex| {
            let trace = forward(params, &ex.input.cast())?;
            let loss = mixed_loss(&trace.p_fg, &trace.p_pose, &ex.label, lam, head)?.loss.as_f64();
            let p_fg = trace.foreground_probability(head).as_f64();
            let fg_ok = (p_fg > 0.5) == ex.is_foreground();
            let k = argmax(&trace.p_pose);
            let pose_ok = match ex.rotation() {
                Some(r) if ex.is_foreground() => grid.ranked(&r)[..2].contains(&k),
                _ => k == ex.label.pose_argmax(),
            };
            Ok((fg_ok, pose_ok, k == ex.label.pose_argmax(), loss))
        })
        .collect::<Result<_>>()?;
    let n = rows.len().max(1) as f64;
    let frac = |f: fn(&(bool, bool, bool, f64)) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(HeadAccuracy {
        fg: frac(|r| r.0),
        pose: frac(|r| r.1),
        pose_exact: frac(|r| r.2),
        loss: rows.iter().map(|r| r.3).sum::<f64>() / n,
    })
}

/// Stateful SGD loop; [`train`] runs it for `cfg.epochs` epochs.
pub struct Trainer<'a, T> {
    params: NetworkParams<T>,
    velocity: Vec<Tensor<T>>,
    data: &'a [LabeledExample],
    cfg: TrainConfig,
    subset: Vec<usize>,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<EpochStats>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(params: NetworkParams<T>, data: &'a [LabeledExample], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training data is empty".into()));
        }
        let fg = data.iter().filter(|e| e.is_foreground()).count();
        if fg == 0 || fg == data.len() {
            return Err(Error::Config("training data must contain both foreground and background".into()));
        }
        if subset_size(data.len(), cfg.subset_fraction) < cfg.batch_size.min(data.len()) {
            return Err(Error::Config(format!(
                "subset of {} examples is smaller than a batch of {}",
                subset_size(data.len(), cfg.subset_fraction),
                cfg.batch_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut all: Vec<usize> = (0..data.len()).collect();
        all.shuffle(&mut rng);
        all.truncate(subset_size(data.len(), cfg.subset_fraction));
        let velocity = params.trainable().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            params,
            velocity,
            data,
            cfg: cfg.clone(),
            subset: all,
            rng,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn params(&self) -> &NetworkParams<T> {
        &self.params
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    fn learning_rate(&self) -> f64 {
        if self.cfg.decay_epoch > 0 && self.epoch >= self.cfg.decay_epoch {
            self.cfg.learning_rate * 0.5
        } else {
            self.cfg.learning_rate
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        if self.epoch > 0 && self.epoch % self.cfg.hardmine_period == 0 && self.cfg.subset_fraction < 1.0 {
            self.subset = hard_mine(&self.params, self.data, self.cfg.subset_fraction, self.cfg.lambda)?;
        }
        let mut order = self.subset.clone();
        order.shuffle(&mut self.rng);
        let lr = self.learning_rate();
        let (lr_t, mu, lambda) = (
            T::from_f64_lossy(lr),
            T::from_f64_lossy(self.cfg.momentum),
            T::from_f64_lossy(self.cfg.lambda),
        );
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, ids) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledExample> = ids.iter().map(|&i| &self.data[i]).collect();
            let (loss, grads) = batch_gradients(&self.params, &batch, lambda)?;
            let n = T::from_usize(batch.len()).expect("batch size fits");
            let mean = (loss / n).as_f64();
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: b,
                });
            }
            total += mean;
            batches += 1;
            let scale = lr_t / n;
            for ((p, v), g) in self.params.trainable_mut().into_iter().zip(&mut self.velocity).zip(&grads.tensors) {
                for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vi = mu * *vi - scale * gi;
                    *pi += *vi;
                }
            }
        }
        let stats = EpochStats {
            epoch: self.epoch,
            loss: total / batches.max(1) as f64,
            subset_size: order.len(),
            learning_rate: lr,
        };
        log::info!("epoch {} loss {:.6} subset {}", stats.epoch, stats.loss, stats.subset_size);
        self.history.push(stats);
        self.epoch += 1;
        Ok(stats)
    }

    pub fn into_parts(self) -> (NetworkParams<T>, Vec<EpochStats>) {
        (self.params, self.history)
    }
}

/// Trains for `cfg.epochs` epochs and returns the parameters and per-epoch
/// loss history.
pub fn train<T: Scalar>(
    params: NetworkParams<T>,
    data: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<(NetworkParams<T>, Vec<EpochStats>)> {
    let mut t = Trainer::new(params, data, cfg)?;
    for _ in 0..cfg.epochs {
        t.run_epoch()?;
    }
    Ok(t.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let cfg = TrainConfig {
            learning_rate: 0.0125,
            batch_size: 10,
            precision: Precision::F64,
            subset_fraction: 1.0 / 3.0,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::from_text("bogus = 1\n").is_err());
        assert!(TrainConfig::from_text("hardmine_period = 0\n").is_err());
        assert!(TrainConfig::from_text("no equals sign\n").is_err());
        let c = TrainConfig::from_text("# comment\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(c.epochs, 3);
    }

    #[test]
    fn top_loss_selection() {
        let losses = [0.5, 2.0, 0.1, 2.0, 1.0];
        assert_eq!(top_loss(&losses, 0.4), vec![1, 3]);
        assert_eq!(top_loss(&losses, 0.5), vec![1, 3, 4]);
        let mut all = top_loss(&losses, 1.0);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }
}
