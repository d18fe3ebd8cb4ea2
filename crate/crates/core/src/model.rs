//! The assembled recognizer: encoder, attention decoder and focusing
//! network sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adcore::{Graph, ParamStore, Size2, Tensor, Var};
use crate::alphabet::{Alphabet, DEFAULT_CHARS};
use crate::attn::{self, AttnConfig, AttnParams, StepTrace};
use crate::corpus::Sample;
use crate::encoder::{Encoder, EncoderConfig, FeatureSequence};
use crate::error::{FanError, Result};
use crate::focus::{self, Annotation, FocusConfig, FocusParams, FocusSource};
use crate::netpbm::GrayImage;
use crate::rfgeom::Center;

#[derive(Clone, Debug, PartialEq)]
pub struct FanConfig {
    pub preset: String,
    pub encoder: EncoderConfig,
    pub attn: AttnConfig,
    pub focus: FocusConfig,
    pub alphabet: String,
}

impl FanConfig {
    /// Encoder and decoder sizes of a named preset (`toy` or `paper`).
    pub fn preset(name: &str) -> Result<Self> {
        let encoder = EncoderConfig::preset(name)?;
        let attn = if name == "paper" { AttnConfig::paper() } else { AttnConfig::toy() };
        Ok(FanConfig {
            preset: name.to_string(),
            encoder,
            attn,
            focus: FocusConfig::default(),
            alphabet: DEFAULT_CHARS.to_string(),
        })
    }

    pub fn toy() -> Self {
        Self::preset("toy").expect("toy preset")
    }

    /// Set one `section.key`. `encoder.preset` resets every other model key,
    /// so it must come first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| FanError::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
        };
        match key {
            "encoder.preset" => {
                let focus = self.focus.clone();
                *self = FanConfig::preset(value)?;
                self.focus = focus;
            }
            "encoder.rnn_hidden" => self.encoder.rnn_hidden = int(value)?,
            "attn.attn_hidden" => self.attn.attn_hidden = int(value)?,
            "attn.dec_hidden" => self.attn.dec_hidden = int(value)?,
            "attn.max_len" => self.attn.max_len = int(value)?,
            "focus.lambda" => {
                let l: f64 = value
                    .parse()
                    .map_err(|_| FanError::Config(format!("{key}: expected a number, got {value:?}")))?;
                focus::check_lambda(l).map_err(|e| FanError::Config(e.to_string()))?;
                self.focus.lambda = l;
            }
            "focus.source" => self.focus.source = value.parse()?,
            "focus.crop_h" | "focus.crop_w" => {
                let v = int(value)?;
                let mut c = self.focus.crop.unwrap_or(Size2::new(0, 0));
                if key == "focus.crop_h" {
                    c.h = v;
                } else {
                    c.w = v;
                }
                self.focus.crop = Some(c);
            }
            "model.alphabet" => {
                Alphabet::new(value)?;
                self.alphabet = value.to_string();
            }
            _ => return Err(FanError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("encoder.preset".to_string(), self.preset.clone()),
            ("encoder.rnn_hidden".to_string(), self.encoder.rnn_hidden.to_string()),
            ("attn.attn_hidden".to_string(), self.attn.attn_hidden.to_string()),
            ("attn.dec_hidden".to_string(), self.attn.dec_hidden.to_string()),
            ("attn.max_len".to_string(), self.attn.max_len.to_string()),
            ("focus.lambda".to_string(), self.focus.lambda.to_string()),
            ("focus.source".to_string(), self.focus.source.to_string()),
        ];
        if let Some(c) = self.focus.crop {
            out.push(("focus.crop_h".to_string(), c.h.to_string()));
            out.push(("focus.crop_w".to_string(), c.w.to_string()));
        }
        out.push(("model.alphabet".to_string(), self.alphabet.clone()));
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.check()?;
        if self.encoder.rnn_hidden == 0 || self.attn.attn_hidden == 0 || self.attn.dec_hidden == 0 {
            return Err(FanError::Config("hidden sizes must be positive".into()));
        }
        if self.attn.max_len == 0 {
            return Err(FanError::Config("attn.max_len must be positive".into()));
        }
        if let Some(c) = self.focus.crop {
            if c.h == 0 || c.w == 0 {
                return Err(FanError::Config("focus crop size must be positive".into()));
            }
        }
        focus::check_lambda(self.focus.lambda).map_err(|e| FanError::Config(e.to_string()))
    }
}

/// Loss of one sample, with both terms as plain numbers for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub attention: f64,
    pub focusing: f64,
}

/// Greedy decoding result.
#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub text: String,
    /// Attention center of each emitted character, 0-indexed pixels.
    pub centers: Vec<Center>,
}

#[derive(Clone, Debug)]
pub struct FanModel {
    pub config: FanConfig,
    pub alphabet: Alphabet,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub attn: AttnParams,
    pub focus: FocusParams,
}

impl FanModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: FanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alphabet = Alphabet::new(&config.alphabet)?;
        let mut store = ParamStore::new();
        let encoder = Encoder::build(config.encoder.clone(), &mut store, &mut rng)?;
        let attn = AttnParams::build(config.attn, alphabet.len(), encoder.feature_dim(), &mut store, &mut rng)?;
        let channels = match config.focus.source {
            FocusSource::Input => config.encoder.in_channels,
            FocusSource::FirstConv => config
                .encoder
                .first_conv_channels()
                .ok_or_else(|| FanError::Config("the first encoder layer is not a size-preserving convolution".into()))?,
        };
        let focus = FocusParams::build(
            config.focus.clone(),
            alphabet.len(),
            channels,
            encoder.feature_dim(),
            &mut store,
            &mut rng,
        )?;
        Ok(FanModel {
            config,
            alphabet,
            store,
            encoder,
            attn,
            focus,
        })
    }

    /// Fix the focusing crop size, e.g. from a dataset manifest.
    pub fn set_crop(&mut self, crop: Size2) {
        self.config.focus.crop = Some(crop);
        self.focus.config.crop = Some(crop);
    }

    pub fn input_size(&self) -> Size2 {
        self.config.encoder.input
    }

    pub fn image_tensor(&self, image: &GrayImage) -> Result<Tensor> {
        let want = self.input_size();
        if (image.height, image.width) != (want.h, want.w) {
            return Err(FanError::shape(
                "encode",
                format!(
                    "image is {}x{} (WxH), model expects {}x{}",
                    image.width, image.height, want.w, want.h
                ),
            ));
        }
        Tensor::new(vec![1, image.height, image.width], image.data.clone())
    }

    fn encode(&self, g: &mut Graph, image: &GrayImage) -> Result<(Var, FeatureSequence)> {
        let x = g.constant(self.image_tensor(image)?);
        let seq = self.encoder.encode(g, &self.store, x)?;
        Ok((x, seq))
    }

    /// Joint objective of one sample on a fresh or shared graph.
    pub fn loss(&self, g: &mut Graph, sample: &Sample) -> Result<LossParts> {
        let target = self.alphabet.encode_with_eos(&sample.text)?;
        let (image, seq) = self.encode(g, &sample.image)?;
        let bound = self.attn.bind(g, &self.store, &seq)?;
        let (l_att, traces) = bound.attention_loss(g, &target)?;
        let lambda = self.config.focus.lambda;
        let l_focus = match (&sample.boxes, lambda > 0.0) {
            (Some(boxes), true) => {
                let source = match self.config.focus.source {
                    FocusSource::Input => image,
                    FocusSource::FirstConv => seq
                        .first_conv
                        .ok_or_else(|| FanError::Config("encoder has no convolution to crop from".into()))?,
                };
                let ann = Annotation {
                    classes: &target[..target.len() - 1],
                    boxes,
                };
                let bf = self.focus.bind(g, &self.store);
                Some(bf.focusing_loss(g, &traces, source, Some(ann))?)
            }
            _ => None,
        };
        let total = focus::fan_loss(g, l_att, l_focus, lambda)?;
        Ok(LossParts {
            total,
            attention: g.value(l_att).item(),
            focusing: l_focus.map_or(0.0, |v| g.value(v).item()),
        })
    }

    fn greedy(&self, g: &mut Graph, image: &GrayImage) -> Result<(Vec<usize>, Vec<StepTrace>)> {
        let (_, seq) = self.encode(g, image)?;
        let bound = self.attn.bind(g, &self.store, &seq)?;
        bound.greedy_decode(g, self.config.attn.max_len)
    }

    /// Lexicon-free greedy decoding.
    pub fn recognize(&self, image: &GrayImage) -> Result<Recognition> {
        let mut g = Graph::inference();
        let (classes, traces) = self.greedy(&mut g, image)?;
        Ok(Recognition {
            text: self.alphabet.decode(&classes),
            centers: traces.iter().map(|t| t.center).collect(),
        })
    }

    /// Logits of every greedy step, flattened; a fingerprint of the forward pass.
    pub fn forward_logits(&self, image: &GrayImage) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let (_, traces) = self.greedy(&mut g, image)?;
        let mut out = Vec::new();
        for t in &traces {
            out.extend_from_slice(g.value(t.logits).data());
            out.extend_from_slice(g.value(t.alpha).data());
        }
        if traces.is_empty() {
            // the EOS step is not traced; fall back to the first step's logits
            let (_, seq) = self.encode(&mut g, image)?;
            let bound = self.attn.bind(&mut g, &self.store, &seq)?;
            let s0 = bound.initial_state(&mut g);
            let (tr, _) = bound.step(&mut g, self.alphabet.eos(), s0)?;
            out.extend_from_slice(g.value(tr.logits).data());
        }
        Ok(out)
    }

    /// Best word from `lexicon` by teacher-forced log-probability.
    pub fn recognize_lexicon(&self, image: &GrayImage, lexicon: &[String]) -> Result<(String, f64)> {
        let mut g = Graph::inference();
        let (_, seq) = self.encode(&mut g, image)?;
        let bound = self.attn.bind(&mut g, &self.store, &seq)?;
        attn::lexicon_decode(&bound, &mut g, &self.alphabet, lexicon)
    }

    /// Teacher-forced log-probability of `word` followed by EOS.
    pub fn score(&self, image: &GrayImage, word: &str) -> Result<f64> {
        let target = self.alphabet.encode_with_eos(word)?;
        let mut g = Graph::inference();
        let (_, seq) = self.encode(&mut g, image)?;
        let bound = self.attn.bind(&mut g, &self.store, &seq)?;
        bound.score(&mut g, &target)
    }
}
