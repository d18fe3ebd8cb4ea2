//! `section.key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::CorpusConfig;
use crate::error::{FanError, Result};
use crate::model::FanConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalConfig {
    pub lexicon: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: FanConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            model: FanConfig::toy(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Apply one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, rest) = key
            .split_once('.')
            .ok_or_else(|| FanError::UnknownKey(key.to_string()))?;
        match section {
            "corpus" => self.corpus.set(rest, value).map_err(|e| match e {
                FanError::UnknownKey(_) => FanError::UnknownKey(key.to_string()),
                e => e,
            }),
            "train" => self.train.set(rest, value),
            "eval" => match rest {
                "lexicon" => {
                    self.eval.lexicon = (!value.is_empty()).then(|| PathBuf::from(value));
                    Ok(())
                }
                _ => Err(FanError::UnknownKey(key.to_string())),
            },
            "encoder" | "attn" | "focus" | "model" => self.model.set(key, value),
            _ => Err(FanError::UnknownKey(key.to_string())),
        }
    }

    /// Parse config text on top of the defaults. `encoder.preset` is applied
    /// before any other key, wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut items = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| FanError::Parse {
                line: n + 1,
                msg: format!("expected `section.key = value`, got {line:?}"),
            })?;
            items.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        items.sort_by_key(|(_, k, _)| k != "encoder.preset");
        let mut cfg = RunConfig::default();
        for (_, k, v) in &items {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FanError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parse `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut items: Vec<(&str, &str)> = overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| FanError::invalid(format!("override {o:?} is not key=value")))
            })
            .collect::<Result<_>>()?;
        items.sort_by_key(|(k, _)| *k != "encoder.preset");
        for (k, v) in items {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// All settings as config text; `parse` reads it back to an equal value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.corpus.entries() {
            out.push_str(&format!("corpus.{k} = {v}\n"));
        }
        for (k, v) in self.model.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in self.train.entries() {
            out.push_str(&format!("train.{k} = {v}\n"));
        }
        if let Some(l) = &self.eval.lexicon {
            out.push_str(&format!("eval.lexicon = {}\n", l.display()));
        }
        out
    }
}
