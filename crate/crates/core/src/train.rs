//! Mini-batch ADADELTA on the joint objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adcore::{AdadeltaState, GradBuffer, Graph};
use crate::corpus::Dataset;
use crate::error::{FanError, Result};
use crate::model::FanModel;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub log_every: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            steps: 2000,
            seed: 7,
            lr: 1.0,
            rho: 0.9,
            eps: 1e-6,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| FanError::Config(format!("train.{key}: cannot parse {v:?}")))
        }
        match key {
            "batch" => self.batch = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "rho" => self.rho = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "log_every" => self.log_every = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            _ => return Err(FanError::UnknownKey(format!("train.{key}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.lr.to_string()),
            ("rho", self.rho.to_string()),
            ("eps", self.eps.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(FanError::Config("train.batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FanError::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Batch means of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub attention: f64,
    pub focusing: f64,
    pub total: f64,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} l_att={:.6} l_focus={:.6} loss={:.6}",
            self.step, self.attention, self.focusing, self.total
        )
    }
}

/// Reject a dataset the model cannot consume, before any update.
pub fn check_dataset(model: &FanModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(FanError::Config("training set is empty".into()));
    }
    let want = model.input_size();
    if let Some(size) = data.image_size() {
        if size != want {
            return Err(FanError::Config(format!(
                "dataset images are {}x{} (WxH) but the encoder expects {}x{}",
                size.w, size.h, want.w, want.h
            )));
        }
    }
    for s in &data.samples {
        model.alphabet.encode(&s.text).map_err(|e| FanError::Config(e.to_string()))?;
        if s.text.is_empty() || s.text.chars().count() > model.config.attn.max_len {
            return Err(FanError::Config(format!(
                "text {:?} is empty or longer than attn.max_len",
                s.text
            )));
        }
    }
    Ok(())
}

pub struct Trainer {
    pub model: FanModel,
    pub opt: AdadeltaState,
    pub config: TrainConfig,
    /// Updates applied so far.
    pub step: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: FanModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut opt = AdadeltaState::new(&model.store, config.rho, config.eps)?;
        opt.lr = config.lr;
        Ok(Trainer {
            model,
            opt,
            config,
            step: 0,
            order: None,
        })
    }

    /// Dataset indices of batch `step`. Each pass over the data uses its own
    /// seeded permutation, so the schedule depends only on the step number.
    pub fn batch_indices(&mut self, step: u64, n: usize) -> Vec<usize> {
        let b = self.config.batch as u64;
        (step * b..(step + 1) * b)
            .map(|pos| {
                let epoch = pos / n as u64;
                if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                    rng.set_stream(epoch);
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    self.order = Some((epoch, perm));
                }
                self.order.as_ref().expect("set above").1[(pos % n as u64) as usize]
            })
            .collect()
    }

    /// Batch-mean gradient and losses without touching the parameters.
    pub fn batch_gradient(&self, data: &Dataset, indices: &[usize]) -> Result<(GradBuffer, StepLog)> {
        let mut grads = GradBuffer::zeros_like(&self.model.store);
        let (mut att, mut foc, mut tot) = (0.0, 0.0, 0.0);
        for &i in indices {
            let mut g = Graph::new();
            let parts = self.model.loss(&mut g, &data.samples[i])?;
            let total = g.value(parts.total).item();
            if !total.is_finite() {
                return Err(FanError::NonFinite("training loss"));
            }
            g.backward(parts.total)?.accumulate(&g, &mut grads);
            att += parts.attention;
            foc += parts.focusing;
            tot += total;
        }
        let n = indices.len() as f64;
        grads.scale(1.0 / n);
        Ok((
            grads,
            StepLog {
                step: self.step,
                attention: att / n,
                focusing: foc / n,
                total: tot / n,
            },
        ))
    }

    /// One update on the next batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        let idx = self.batch_indices(self.step, data.len());
        let (grads, log) = self.batch_gradient(data, &idx)?;
        self.opt.step(&mut self.model.store, &grads)?;
        self.step += 1;
        Ok(log)
    }

    /// Train until `self.step == until`, calling `hook` after every update.
    pub fn run(
        &mut self,
        data: &Dataset,
        until: u64,
        mut hook: impl FnMut(&Trainer, &StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        check_dataset(&self.model, data)?;
        let mut logs = Vec::new();
        while self.step < until {
            let log = self.train_step(data)?;
            hook(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}
