//! Paired training runs that differ only in λ: the attention-only baseline
//! against the focusing objective, on the same data, initialization and
//! batch order.

use std::time::Instant;

use crate::corpus::{make_dataset, CorpusConfig, Dataset};
use crate::error::Result;
use crate::evalkit::{evaluate, DecodeMode, EvalReport};
use crate::model::{FanConfig, FanModel};
use crate::train::{StepLog, TrainConfig, Trainer};

#[derive(Clone, Debug)]
pub struct PairedConfig {
    pub train: CorpusConfig,
    /// Held-out split; should be fully annotated for center errors.
    pub test: CorpusConfig,
    pub model: FanConfig,
    pub optim: TrainConfig,
}

impl PairedConfig {
    /// Drift corpus: widths 1×–2.5×, occlusion 0.3, 30% annotated.
    pub fn drift(steps: u64) -> Self {
        PairedConfig {
            train: CorpusConfig {
                count: 2000,
                ratio: 0.3,
                ..CorpusConfig::drift()
            },
            test: CorpusConfig {
                count: 200,
                ratio: 1.0,
                seed: 90_001,
                ..CorpusConfig::drift()
            },
            model: FanConfig::toy(),
            optim: TrainConfig {
                steps,
                ..TrainConfig::default()
            },
        }
    }

    /// Settings of run `r`: corpus, initialization and batch order all
    /// derive from `r`.
    pub fn for_run(&self, r: u64) -> PairedConfig {
        let mut c = self.clone();
        c.train.seed = self.train.seed.wrapping_add(1000 * r);
        c.test.seed = self.test.seed.wrapping_add(1000 * r);
        c.optim.seed = self.optim.seed.wrapping_add(r);
        c
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub lambda: f64,
    pub report: EvalReport,
    pub last: Option<StepLog>,
    pub seconds: f64,
}

/// Train one model at `lambda` and evaluate it on `test`.
pub fn run_arm(cfg: &PairedConfig, train: &Dataset, test: &Dataset, lambda: f64) -> Result<ArmResult> {
    let start = Instant::now();
    let mut mc = cfg.model.clone();
    mc.focus.lambda = lambda;
    let mut model = FanModel::new(mc, cfg.optim.seed)?;
    model.set_crop(train.crop);
    let mut trainer = Trainer::new(model, cfg.optim.clone())?;
    let logs = trainer.run(train, cfg.optim.steps, |_, log| {
        if log.step % 500 == 0 {
            log::info!("lambda={lambda} {log}");
        }
        Ok(())
    })?;
    let report = evaluate(&trainer.model, test, &DecodeMode::Free)?;
    Ok(ArmResult {
        lambda,
        report,
        last: logs.last().copied(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Baseline (`λ = 0`) and focusing (`λ = lambda`) results of one run.
pub fn paired_run(cfg: &PairedConfig, lambda: f64) -> Result<(ArmResult, ArmResult)> {
    let train = make_dataset(&cfg.train)?;
    let test = make_dataset(&cfg.test)?;
    let base = run_arm(cfg, &train, &test, 0.0)?;
    let focus = run_arm(cfg, &train, &test, lambda)?;
    Ok((base, focus))
}
