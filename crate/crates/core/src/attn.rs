//! The attention decoder: alignment scoring, glimpses, the recurrent
//! generator, the sequence loss and both decoding modes.

use rand::Rng;

use crate::adcore::{lstm_cell, Graph, LinearParams, LstmParams, LstmVars, ParamId, ParamStore, Tensor, Var};
use crate::alphabet::Alphabet;
use crate::encoder::FeatureSequence;
use crate::error::{FanError, Result};
use crate::rfgeom::{self, Center};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnConfig {
    /// Length of the scoring vector `v`.
    pub attn_hidden: usize,
    /// Decoder LSTM memory size.
    pub dec_hidden: usize,
    pub max_len: usize,
}

impl AttnConfig {
    pub fn paper() -> Self {
        AttnConfig {
            attn_hidden: 256,
            dec_hidden: 256,
            max_len: 32,
        }
    }

    pub fn toy() -> Self {
        AttnConfig {
            attn_hidden: 32,
            dec_hidden: 64,
            max_len: 32,
        }
    }
}

/// Scoring parameters `v, W, V, b`, the decoder cell and the output layer.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub config: AttnConfig,
    pub classes: usize,
    pub feature_dim: usize,
    pub v: ParamId,
    pub w_state: ParamId,
    pub w_feat: ParamId,
    pub b: ParamId,
    pub cell: LstmParams,
    pub generate: LinearParams,
}

impl AttnParams {
    pub fn build<R: Rng + ?Sized>(
        config: AttnConfig,
        classes: usize,
        feature_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let a = config.attn_hidden;
        let s = config.dec_hidden;
        if a == 0 || s == 0 || classes < 2 || config.max_len == 0 {
            return Err(FanError::Config("attention sizes must be positive".into()));
        }
        let v = store.add(
            "attn.v",
            crate::adcore::glorot_uniform(rng, vec![a, 1], a, 1),
        )?;
        let w_state = store.add(
            "attn.w_state",
            crate::adcore::glorot_uniform(rng, vec![a, s], s, a),
        )?;
        let w_feat = store.add(
            "attn.w_feat",
            crate::adcore::glorot_uniform(rng, vec![a, feature_dim], feature_dim, a),
        )?;
        let b = store.add("attn.b", Tensor::zeros(vec![a]))?;
        let cell = LstmParams::register(store, "attn.cell", classes + feature_dim, s, rng)?;
        let generate = LinearParams::register(store, "attn.generate", s + feature_dim, classes, true, rng)?;
        Ok(AttnParams {
            config,
            classes,
            feature_dim,
            v,
            w_state,
            w_feat,
            b,
            cell,
            generate,
        })
    }
}

/// Decoder state `(s, c)` of the recurrent cell.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub s: Var,
    pub c: Var,
}

/// Attention parameters placed on a graph together with per-image
/// precomputation of `V·h_j + b`.
pub struct BoundAttn<'a> {
    params: &'a AttnParams,
    h: Var,
    feat_proj: Var,
    v: Var,
    w_state: Var,
    cell: LstmVars,
    gen_w: Var,
    gen_b: Option<Var>,
    centers: Vec<Center>,
}

/// Everything recorded at one decoding step.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub alpha: Var,
    pub glimpse: Var,
    pub logits: Var,
    /// Attention center, 0-indexed pixels.
    pub center: Center,
}

impl AttnParams {
    pub fn bind<'a>(&'a self, g: &mut Graph, store: &ParamStore, seq: &FeatureSequence) -> Result<BoundAttn<'a>> {
        if seq.len == 0 {
            return Err(FanError::invalid("attention over an empty feature sequence"));
        }
        if seq.dim != self.feature_dim {
            return Err(FanError::shape(
                "attend",
                format!("features have dimension {}, attention expects {}", seq.dim, self.feature_dim),
            ));
        }
        let w_feat = g.param(store, self.w_feat);
        let b = g.param(store, self.b);
        let proj = g.matmul_t(seq.vectors, false, w_feat, true)?;
        let feat_proj = g.add_row_broadcast(proj, b)?;
        Ok(BoundAttn {
            params: self,
            h: seq.vectors,
            feat_proj,
            v: g.param(store, self.v),
            w_state: g.param(store, self.w_state),
            cell: self.cell.bind(g, store),
            gen_w: g.param(store, self.generate.w),
            gen_b: self.generate.b.map(|b| g.param(store, b)),
            centers: seq.centers.clone(),
        })
    }
}

impl BoundAttn<'_> {
    pub fn params(&self) -> &AttnParams {
        self.params
    }

    pub fn initial_state(&self, g: &mut Graph) -> DecoderState {
        let n = self.params.config.dec_hidden;
        DecoderState {
            s: g.constant(Tensor::zeros(vec![n])),
            c: g.constant(Tensor::zeros(vec![n])),
        }
    }

    /// `e_j = vᵀ tanh(W s + V h_j + b)`, `α = softmax(e)`, `g = Σ α_j h_j`.
    pub fn attend(&self, g: &mut Graph, s_prev: Var) -> Result<(Var, Var)> {
        let t = self.centers.len();
        let ws = g.affine(s_prev, self.w_state, None)?;
        let pre = g.add_row_broadcast(self.feat_proj, ws)?;
        let act = g.tanh(pre)?;
        let scores = g.matmul(act, self.v)?;
        let scores = g.reshape(scores, vec![t])?;
        let alpha = g.softmax(scores)?;
        let row = g.reshape(alpha, vec![1, t])?;
        let glimpse = g.matmul(row, self.h)?;
        let glimpse = g.reshape(glimpse, vec![self.params.feature_dim])?;
        Ok((alpha, glimpse))
    }

    /// Recurrent update on `concat(one_hot(y_prev), g)` and the output layer
    /// over `concat(s, g)`.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        y_prev: usize,
        glimpse: Var,
        state: DecoderState,
    ) -> Result<(Var, DecoderState)> {
        let k = self.params.classes;
        if y_prev >= k {
            return Err(FanError::invalid(format!("previous class {y_prev} outside 0..{k}")));
        }
        let mut onehot = vec![0.0; k];
        onehot[y_prev] = 1.0;
        let y = g.constant(Tensor::vector(onehot));
        let input = g.concat(&[y, glimpse])?;
        let (s, c) = lstm_cell(g, input, state.s, state.c, &self.cell)?;
        let sg = g.concat(&[s, glimpse])?;
        let logits = g.affine(sg, self.gen_w, self.gen_b)?;
        Ok((logits, DecoderState { s, c }))
    }

    /// One full step: attend from the previous state, then decode.
    pub fn step(&self, g: &mut Graph, y_prev: usize, state: DecoderState) -> Result<(StepTrace, DecoderState)> {
        let (alpha, glimpse) = self.attend(g, state.s)?;
        let (logits, next) = self.decode_step(g, y_prev, glimpse, state)?;
        let center = rfgeom::attention_center(g.value(alpha).data(), &self.centers)?;
        Ok((
            StepTrace {
                alpha,
                glimpse,
                logits,
                center,
            },
            next,
        ))
    }

    /// Teacher-forced negative log-likelihood of `target`, which must end
    /// with EOS and contain it nowhere else. `y_0` is EOS, `s_0` is zero.
    pub fn attention_loss(&self, g: &mut Graph, target: &[usize]) -> Result<(Var, Vec<StepTrace>)> {
        let eos = self.params.classes - 1;
        match target.split_last() {
            Some((&last, body)) if last == eos => {
                if body.contains(&eos) {
                    return Err(FanError::invalid("target contains EOS before its final position"));
                }
            }
            Some(_) => return Err(FanError::invalid("target must end with EOS")),
            None => return Err(FanError::invalid("empty target")),
        }
        let mut state = self.initial_state(g);
        let mut prev = eos;
        let mut traces = Vec::with_capacity(target.len());
        let mut losses = Vec::with_capacity(target.len());
        for &y in target {
            let (trace, next) = self.step(g, prev, state)?;
            losses.push(g.cross_entropy(trace.logits, y)?);
            traces.push(trace);
            state = next;
            prev = y;
        }
        let all = g.concat(&losses)?;
        Ok((g.sum(all), traces))
    }

    /// Argmax decoding until EOS or `max_len` steps. The returned classes
    /// exclude EOS; traces cover the emitted characters only.
    pub fn greedy_decode(&self, g: &mut Graph, max_len: usize) -> Result<(Vec<usize>, Vec<StepTrace>)> {
        let eos = self.params.classes - 1;
        let mut state = self.initial_state(g);
        let mut prev = eos;
        let mut out = Vec::new();
        let mut traces = Vec::new();
        for _ in 0..max_len.max(1) {
            let (trace, next) = self.step(g, prev, state)?;
            let best = argmax(g.value(trace.logits).data());
            if best == eos {
                break;
            }
            out.push(best);
            traces.push(trace);
            state = next;
            prev = best;
        }
        Ok((out, traces))
    }

    /// Teacher-forced log-probability of `target` (EOS included).
    pub fn score(&self, g: &mut Graph, target: &[usize]) -> Result<f64> {
        let (loss, _) = self.attention_loss(g, target)?;
        Ok(-g.value(loss).item())
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Pick the lexicon word with the highest teacher-forced log-probability.
/// Words with characters outside the alphabet are skipped. Ties go to the
/// earlier word. Returns the word and its score.
pub fn lexicon_decode(
    bound: &BoundAttn<'_>,
    g: &mut Graph,
    alphabet: &Alphabet,
    lexicon: &[String],
) -> Result<(String, f64)> {
    if lexicon.is_empty() {
        return Err(FanError::invalid("empty lexicon"));
    }
    let mut best: Option<(String, f64)> = None;
    for word in lexicon {
        let target = match alphabet.encode_with_eos(word) {
            Ok(t) => t,
            Err(_) => {
                log::warn!("skipping lexicon word {word:?}: characters outside the alphabet");
                continue;
            }
        };
        let score = bound.score(g, &target)?;
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((alphabet.decode(&target), score));
        }
    }
    best.ok_or_else(|| FanError::invalid("no lexicon word is expressible in the alphabet"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(t: usize, d: usize, k: usize) -> (ParamStore, AttnParams, Tensor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttnConfig {
            attn_hidden: 6,
            dec_hidden: 8,
            max_len: 10,
        };
        let p = AttnParams::build(cfg, k, d, &mut store, &mut rng).unwrap();
        let h: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (store, p, Tensor::new(vec![t, d], h).unwrap())
    }

    fn seq(g: &mut Graph, h: &Tensor) -> FeatureSequence {
        let t = h.shape()[0];
        FeatureSequence {
            vectors: g.constant(h.clone()),
            len: t,
            dim: h.shape()[1],
            centers: (0..t).map(|j| Center::new(4.0 * j as f64 + 1.5, 7.5)).collect(),
            first_conv: None,
        }
    }

    #[test]
    fn identical_features_give_uniform_alpha() {
        let (store, p, _) = setup(5, 3, 5);
        let h = Tensor::new(vec![5, 3], [0.2, -0.4, 0.9].repeat(5)).unwrap();
        let mut g = Graph::new();
        let fs = seq(&mut g, &h);
        let b = p.bind(&mut g, &store, &fs).unwrap();
        let st = b.initial_state(&mut g);
        let (alpha, glimpse) = b.attend(&mut g, st.s).unwrap();
        assert!(g.value(alpha).data().iter().all(|a| (a - 0.2).abs() < 1e-12));
        for (x, y) in g.value(glimpse).data().iter().zip([0.2, -0.4, 0.9]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_v_gives_uniform_alpha() {
        let (mut store, p, h) = setup(4, 3, 5);
        store.set(p.v, Tensor::zeros(vec![6, 1])).unwrap();
        let mut g = Graph::new();
        let fs = seq(&mut g, &h);
        let b = p.bind(&mut g, &store, &fs).unwrap();
        let s = g.constant(Tensor::vector(vec![0.3; 8]));
        let (alpha, _) = b.attend(&mut g, s).unwrap();
        assert!(g.value(alpha).data().iter().all(|a| (a - 0.25).abs() < 1e-12));
    }

    #[test]
    fn zero_generate_gives_ln_k_per_step() {
        let (mut store, p, h) = setup(4, 3, 5);
        store.set(p.generate.w, Tensor::zeros(vec![5, 11])).unwrap();
        let mut g = Graph::new();
        let fs = seq(&mut g, &h);
        let b = p.bind(&mut g, &store, &fs).unwrap();
        let (loss, traces) = b.attention_loss(&mut g, &[1, 2, 4]).unwrap();
        assert_eq!(traces.len(), 3);
        assert!((g.value(loss).item() - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn target_validation() {
        let (store, p, h) = setup(4, 3, 5);
        let mut g = Graph::new();
        let fs = seq(&mut g, &h);
        let b = p.bind(&mut g, &store, &fs).unwrap();
        assert!(b.attention_loss(&mut g, &[]).is_err());
        assert!(b.attention_loss(&mut g, &[1, 2]).is_err());
        assert!(b.attention_loss(&mut g, &[1, 4, 2, 4]).is_err());
        let st = b.initial_state(&mut g);
        let glimpse = g.constant(Tensor::zeros(vec![3]));
        assert!(b.decode_step(&mut g, 5, glimpse, st).is_err());
    }

    #[test]
    fn greedy_respects_max_len_and_is_deterministic() {
        let (store, p, h) = setup(4, 3, 5);
        let run = |max_len| {
            let mut g = Graph::inference();
            let fs = seq(&mut g, &h);
            let b = p.bind(&mut g, &store, &fs).unwrap();
            b.greedy_decode(&mut g, max_len).unwrap().0
        };
        assert!(run(1).len() <= 1);
        assert_eq!(run(10), run(10));
    }

    #[test]
    fn singleton_lexicon() {
        let (store, p, h) = setup(4, 3, 37);
        let alphabet = Alphabet::default();
        let mut g = Graph::inference();
        let fs = seq(&mut g, &h);
        let b = p.bind(&mut g, &store, &fs).unwrap();
        let (w, _) = lexicon_decode(&b, &mut g, &alphabet, &["hello".into()]).unwrap();
        assert_eq!(w, "HELLO");
        assert!(lexicon_decode(&b, &mut g, &alphabet, &["a-b".into()]).is_err());
        assert!(lexicon_decode(&b, &mut g, &alphabet, &[]).is_err());
    }
}
