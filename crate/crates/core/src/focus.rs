//! Focusing network: a per-cell classifier over a window cut around each
//! step's attention center, and the joint objective it adds to training.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::adcore::{glorot_uniform, Graph, ParamId, ParamStore, Size2, Tensor, Var};
use crate::attn::StepTrace;
use crate::error::{FanError, Result};
use crate::rfgeom::{self, BBox};

/// Map the patches are cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FocusSource {
    Input,
    FirstConv,
}

impl fmt::Display for FocusSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FocusSource::Input => "input",
            FocusSource::FirstConv => "conv1",
        })
    }
}

impl FromStr for FocusSource {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(FocusSource::Input),
            "conv1" => Ok(FocusSource::FirstConv),
            _ => Err(FanError::Config(format!("focus source must be input or conv1, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FocusConfig {
    /// Patch size; `None` until taken from a dataset's largest character box.
    pub crop: Option<Size2>,
    pub source: FocusSource,
    pub lambda: f64,
}

impl Default for FocusConfig {
    fn default() -> Self {
        FocusConfig {
            crop: None,
            source: FocusSource::Input,
            lambda: 0.01,
        }
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(FanError::invalid(format!("lambda must lie in [0, 1), got {lambda}")))
    }
}

#[derive(Clone, Debug)]
pub struct FocusParams {
    pub config: FocusConfig,
    pub classes: usize,
    pub channels: usize,
    pub glimpse_dim: usize,
    /// `K × D`, applied to the glimpse.
    pub r: ParamId,
    /// `K × C`, applied to every cell's feature vector.
    pub s: ParamId,
    pub b: ParamId,
}

impl FocusParams {
    pub fn build<R: Rng + ?Sized>(
        config: FocusConfig,
        classes: usize,
        channels: usize,
        glimpse_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        check_lambda(config.lambda)?;
        let k = classes;
        let r = store.add("focus.r", glorot_uniform(rng, vec![k, glimpse_dim], glimpse_dim, k))?;
        let s = store.add("focus.s", glorot_uniform(rng, vec![k, channels], channels, k))?;
        let b = store.add("focus.b", Tensor::zeros(vec![k]))?;
        Ok(FocusParams {
            config,
            classes,
            channels,
            glimpse_dim,
            r,
            s,
            b,
        })
    }

    pub fn crop(&self) -> Result<Size2> {
        self.config
            .crop
            .ok_or_else(|| FanError::Config("focus crop size is unset".into()))
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundFocus<'_> {
        BoundFocus {
            params: self,
            r: g.param(store, self.r),
            s: g.param(store, self.s),
            b: g.param(store, self.b),
        }
    }
}

pub struct BoundFocus<'a> {
    params: &'a FocusParams,
    r: Var,
    s: Var,
    b: Var,
}

impl BoundFocus<'_> {
    pub fn params(&self) -> &FocusParams {
        self.params
    }

    /// `tanh(R g + S F_ij + b)` for every cell of a `C × N` patch, as `N × K`.
    fn energies(&self, g: &mut Graph, glimpse: Var, patch: Var) -> Result<Var> {
        let p = self.params;
        if g.shape(glimpse) != [p.glimpse_dim] {
            return Err(FanError::shape(
                "fn_predict",
                format!("glimpse {:?}, expected [{}]", g.shape(glimpse), p.glimpse_dim),
            ));
        }
        let cells = g.matmul_t(patch, true, self.s, true)?;
        let shared = g.affine(glimpse, self.r, Some(self.b))?;
        let pre = g.add_row_broadcast(cells, shared)?;
        g.tanh(pre)
    }

    fn flatten_patch(&self, g: &mut Graph, patch: Var) -> Result<Var> {
        let crop = self.params.crop()?;
        let want = [self.params.channels, crop.h, crop.w];
        if g.shape(patch) != want {
            return Err(FanError::shape(
                "fn_predict",
                format!("patch {:?}, expected {want:?}", g.shape(patch)),
            ));
        }
        g.reshape(patch, vec![want[0], crop.h * crop.w])
    }

    /// Per-cell class probabilities, `P_H × P_W × K`.
    pub fn predict(&self, g: &mut Graph, glimpse: Var, patch: Var) -> Result<Var> {
        let flat = self.flatten_patch(g, patch)?;
        let e = self.energies(g, glimpse, flat)?;
        let probs = g.softmax(e)?;
        let crop = self.params.crop()?;
        g.reshape(probs, vec![crop.h, crop.w, self.params.classes])
    }

    /// Per-cell log-probabilities, `(P_H·P_W) × K`.
    pub fn log_probs(&self, g: &mut Graph, glimpse: Var, patch: Var) -> Result<Var> {
        let flat = self.flatten_patch(g, patch)?;
        let e = self.energies(g, glimpse, flat)?;
        g.log_softmax(e)
    }

    /// Summed per-cell negative log-likelihood over the annotated steps.
    /// `source` is the `C×H×W` map patches are cut from, in the same pixel
    /// grid as the trace centers and boxes. Unannotated samples give 0.
    pub fn focusing_loss(
        &self,
        g: &mut Graph,
        traces: &[StepTrace],
        source: Var,
        labels: Option<Annotation<'_>>,
    ) -> Result<Var> {
        let Some(ann) = labels else {
            return Ok(g.constant(Tensor::scalar(0.0)));
        };
        let crop = self.params.crop()?;
        let shape = g.shape(source).to_vec();
        if shape.len() != 3 || shape[0] != self.params.channels {
            return Err(FanError::shape(
                "focusing_loss",
                format!("source {shape:?} does not have {} channels", self.params.channels),
            ));
        }
        let eos = self.params.classes - 1;
        let steps = traces.len().min(ann.boxes.len());
        let mut losses = Vec::with_capacity(steps);
        for (t, trace) in traces.iter().take(steps).enumerate() {
            let (index, ox, oy) = rfgeom::crop_window(&shape, trace.center.from_zero_based(), crop.h, crop.w)?;
            let patch = g.gather(source, index, vec![shape[0], crop.h * crop.w])?;
            let logp = self.energies(g, trace.glimpse, patch)?;
            let logp = g.log_softmax(logp)?;
            let grid = make_pixel_labels(Some(ann), t, (ox - 1, oy - 1), crop, eos)?
                .expect("annotation present");
            losses.push(g.nll_rows(logp, &grid)?);
        }
        if losses.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let all = g.concat(&losses)?;
        Ok(g.sum(all))
    }
}

/// Character classes and their boxes (0-indexed inclusive pixels).
#[derive(Clone, Copy, Debug)]
pub struct Annotation<'a> {
    pub classes: &'a [usize],
    pub boxes: &'a [BBox],
}

/// Row-major `P_H × P_W` labels for step `t`: cells whose pixel falls in
/// character `t`'s box get its class, every other cell `background`.
/// `origin` is the window's top-left pixel, 0-indexed. Returns `None` for
/// unannotated samples.
pub fn make_pixel_labels(
    ann: Option<Annotation<'_>>,
    t: usize,
    origin: (i64, i64),
    crop: Size2,
    background: usize,
) -> Result<Option<Vec<usize>>> {
    let Some(ann) = ann else { return Ok(None) };
    if ann.boxes.len() != ann.classes.len() {
        return Err(FanError::invalid(format!(
            "{} boxes for {} characters",
            ann.boxes.len(),
            ann.classes.len()
        )));
    }
    let (Some(b), Some(&class)) = (ann.boxes.get(t), ann.classes.get(t)) else {
        return Err(FanError::invalid(format!("step {t} beyond {} annotated characters", ann.boxes.len())));
    };
    let mut grid = Vec::with_capacity(crop.h * crop.w);
    for i in 0..crop.h as i64 {
        let y = origin.1 + i;
        for j in 0..crop.w as i64 {
            let x = origin.0 + j;
            let inside = (b.y_min..=b.y_max).contains(&y) && (b.x_min..=b.x_max).contains(&x);
            grid.push(if inside { class } else { background });
        }
    }
    Ok(Some(grid))
}

/// `(1 − λ) L_att + λ L_focus`. At `λ = 0` the focus term is not touched
/// and the result equals `l_att` bit for bit.
pub fn fan_loss(g: &mut Graph, l_att: Var, l_focus: Option<Var>, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        return Ok(g.scale(l_att, 1.0));
    }
    let a = g.scale(l_att, 1.0 - lambda);
    match l_focus {
        Some(f) => {
            let f = g.scale(f, lambda);
            g.add(a, f)
        }
        None => Ok(a),
    }
}
