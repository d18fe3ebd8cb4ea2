//! Receptive-field arithmetic.
//!
//! Coordinates in this module are **1-indexed**: pixel `(1, 1)` is the
//! top-left input pixel, and the bounding-box recurrence for a layer with
//! kernel `k`, stride `s` and padding `p` maps output position `x` to input
//! columns `(x−1)·s + 1 − p ..= (x−1)·s − p + k` (rows likewise). Boxes are
//! never clipped, so they may reach into padding (below 1 or past the
//! extent). The rest of the crate works in 0-indexed pixel coordinates and
//! crosses into this module through [`Center::from_zero_based`] and
//! [`Center::to_zero_based`].

use std::fmt;

use crate::adcore::{window_out, Size2, Tensor};
use crate::error::{FanError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Pool,
}

/// Window geometry of one convolution or pooling layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: Size2,
    pub stride: Size2,
    pub pad: Size2,
}

impl LayerSpec {
    pub fn conv(kernel: Size2, stride: Size2, pad: Size2) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel,
            stride,
            pad,
        }
    }

    pub fn pool(kernel: Size2, stride: Size2, pad: Size2) -> Self {
        LayerSpec {
            kind: LayerKind::Pool,
            kernel,
            stride,
            pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.h == 0 || self.kernel.w == 0 || self.stride.h == 0 || self.stride.w == 0 {
            return Err(FanError::invalid(format!("kernel and stride must be >= 1 in {self}")));
        }
        Ok(())
    }

    /// Output extents for an input of `input` extents.
    pub fn output_size(&self, input: Size2) -> Option<Size2> {
        Some(Size2 {
            h: window_out(input.h, self.kernel.h, self.stride.h, self.pad.h)?,
            w: window_out(input.w, self.kernel.w, self.stride.w, self.pad.w)?,
        })
    }

    /// Receptive field of output position `(x, y)` one layer down, with the
    /// position checked against the layer's output extents.
    pub fn receptive_field(&self, x: i64, y: i64, output: Size2) -> Result<BBox> {
        if x < 1 || y < 1 || x > output.w as i64 || y > output.h as i64 {
            return Err(FanError::invalid(format!(
                "position ({x}, {y}) outside output extents {}x{}",
                output.w, output.h
            )));
        }
        Ok(self.expand(BBox {
            x_min: x,
            x_max: x,
            y_min: y,
            y_max: y,
        }))
    }

    /// Union of the receptive fields of every position in `b`. Unchecked:
    /// positions in padding map like any other.
    pub fn expand(&self, b: BBox) -> BBox {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let lo = |v: i64, s: usize, p: usize| (v - 1) * s as i64 + 1 - p as i64;
        let hi = |v: i64, s: usize, p: usize, k: usize| (v - 1) * s as i64 - p as i64 + k as i64;
        BBox {
            x_min: lo(b.x_min, s.w, p.w),
            x_max: hi(b.x_max, s.w, p.w, k.w),
            y_min: lo(b.y_min, s.h, p.h),
            y_max: hi(b.y_max, s.h, p.h, k.h),
        }
    }
}

impl fmt::Display for LayerSpec {
    /// `conv 3x3 1x1 1x1`: kernel, stride, pad, each written width×height.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            LayerKind::Conv => "conv",
            LayerKind::Pool => "pool",
        };
        write!(
            f,
            "{kind} {}x{} {}x{} {}x{}",
            self.kernel.w, self.kernel.h, self.stride.w, self.stride.h, self.pad.w, self.pad.h
        )
    }
}

/// Inclusive pixel box. Receptive fields use 1-indexed, unclipped
/// coordinates; character annotations use 0-indexed image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: i64,
    pub x_max: i64,
    pub y_min: i64,
    pub y_max: i64,
}

impl BBox {
    pub fn width(&self) -> i64 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> i64 {
        self.y_max - self.y_min + 1
    }

    pub fn center(&self) -> Center {
        Center {
            x: (self.x_min + self.x_max) as f64 / 2.0,
            y: (self.y_min + self.y_max) as f64 / 2.0,
        }
    }

    /// Intersection with the image `[1, w] × [1, h]`, if non-empty.
    pub fn clip(&self, size: Size2) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(1),
            x_max: self.x_max.min(size.w as i64),
            y_min: self.y_min.max(1),
            y_max: self.y_max.min(size.h as i64),
        };
        (b.x_min <= b.x_max && b.y_min <= b.y_max).then_some(b)
    }
}

/// Fractional point in input-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Center {
    pub x: f64,
    pub y: f64,
}

impl Center {
    pub fn new(x: f64, y: f64) -> Self {
        Center { x, y }
    }

    /// From this module's 1-indexed frame to 0-indexed pixel coordinates.
    pub fn to_zero_based(self) -> Center {
        Center {
            x: self.x - 1.0,
            y: self.y - 1.0,
        }
    }

    /// From 0-indexed pixel coordinates to this module's 1-indexed frame.
    pub fn from_zero_based(self) -> Center {
        Center {
            x: self.x + 1.0,
            y: self.y + 1.0,
        }
    }

    pub fn distance(&self, other: &Center) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered layers from the input upward.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerStack {
    pub layers: Vec<LayerSpec>,
}

impl LayerStack {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        LayerStack { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Extents after every layer, starting with the input itself.
    pub fn propagate(&self, input: Size2) -> Result<Vec<Size2>> {
        let mut sizes = vec![input];
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            cur = layer.output_size(cur).ok_or_else(|| {
                FanError::invalid(format!(
                    "layer {} ({layer}) does not fit its {}x{} input",
                    i + 1,
                    cur.w,
                    cur.h
                ))
            })?;
            sizes.push(cur);
        }
        Ok(sizes)
    }

    pub fn output_size(&self, input: Size2) -> Result<Size2> {
        Ok(*self.propagate(input)?.last().expect("non-empty"))
    }

    /// Product of strides along each axis.
    pub fn net_stride(&self) -> Size2 {
        self.layers.iter().fold(Size2::square(1), |acc, l| Size2 {
            h: acc.h * l.stride.h,
            w: acc.w * l.stride.w,
        })
    }

    /// Map a box at the top of the stack down to input coordinates.
    pub fn expand_to_input(&self, b: BBox) -> BBox {
        self.layers.iter().rev().fold(b, |acc, l| l.expand(acc))
    }

    /// Input-space box of top-level position `(x, y)`, checked against the
    /// top-level extents.
    pub fn receptive_field(&self, x: i64, y: i64, input: Size2) -> Result<BBox> {
        let out = self.output_size(input)?;
        if x < 1 || y < 1 || x > out.w as i64 || y > out.h as i64 {
            return Err(FanError::invalid(format!(
                "position ({x}, {y}) outside output extents {}x{}",
                out.w, out.h
            )));
        }
        Ok(self.expand_to_input(BBox {
            x_min: x,
            x_max: x,
            y_min: y,
            y_max: y,
        }))
    }

    /// Box of top-level column `j` (all rows), 1-indexed.
    pub fn column_field(&self, j: usize, input: Size2) -> Result<BBox> {
        let out = self.output_size(input)?;
        if j < 1 || j > out.w {
            return Err(FanError::invalid(format!(
                "feature index {j} outside 1..={}",
                out.w
            )));
        }
        Ok(self.expand_to_input(BBox {
            x_min: j as i64,
            x_max: j as i64,
            y_min: 1,
            y_max: out.h as i64,
        }))
    }

    /// Parse the line format written by [`LayerStack::describe`]:
    /// an optional `input WxH` line followed by `conv|pool KWxKH SWxSH PWxPH`
    /// lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<(LayerStack, Option<Size2>)> {
        let mut layers = Vec::new();
        let mut input = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| FanError::Parse { line: line_no, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "input" => {
                    if fields.len() != 2 {
                        return Err(err(format!("expected `input WxH`, got `{line}`")));
                    }
                    let (w, h) = parse_pair(fields[1]).map_err(err)?;
                    if w == 0 || h == 0 {
                        return Err(err("input extents must be positive".into()));
                    }
                    input = Some(Size2 { h, w });
                }
                kind @ ("conv" | "pool") => {
                    if fields.len() != 4 {
                        return Err(err(format!(
                            "expected `{kind} KWxKH SWxSH PWxPH`, got `{line}`"
                        )));
                    }
                    let (kw, kh) = parse_pair(fields[1]).map_err(err)?;
                    let (sw, sh) = parse_pair(fields[2]).map_err(err)?;
                    let (pw, ph) = parse_pair(fields[3]).map_err(err)?;
                    let spec = LayerSpec {
                        kind: if kind == "conv" { LayerKind::Conv } else { LayerKind::Pool },
                        kernel: Size2 { h: kh, w: kw },
                        stride: Size2 { h: sh, w: sw },
                        pad: Size2 { h: ph, w: pw },
                    };
                    spec.validate().map_err(|e| err(e.to_string()))?;
                    layers.push(spec);
                }
                other => return Err(err(format!("unknown layer kind `{other}`"))),
            }
        }
        Ok((LayerStack { layers }, input))
    }

    pub fn describe(&self, input: Option<Size2>) -> String {
        let mut out = String::new();
        if let Some(s) = input {
            out.push_str(&format!("input {}x{}\n", s.w, s.h));
        }
        for l in &self.layers {
            out.push_str(&format!("{l}\n"));
        }
        out
    }
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got `{s}`"))?;
    let a = a.parse().map_err(|_| format!("bad integer `{a}` in `{s}`"))?;
    let b = b.parse().map_err(|_| format!("bad integer `{b}` in `{s}`"))?;
    Ok((a, b))
}

/// Receptive field of output position `pos` through a single layer.
pub fn rf_one_layer(pos: (i64, i64), layer: &LayerSpec, output: Size2) -> Result<BBox> {
    layer.receptive_field(pos.0, pos.1, output)
}

/// Midpoint of the unclipped input box of top-level column `j` (1-indexed).
/// With an empty stack the column maps to itself.
pub fn feature_center(j: usize, stack: &LayerStack, input: Size2) -> Result<Center> {
    Ok(stack.column_field(j, input)?.center())
}

/// Centers of every top-level column, in order.
pub fn feature_centers(stack: &LayerStack, input: Size2) -> Result<Vec<Center>> {
    let out = stack.output_size(input)?;
    (1..=out.w).map(|j| feature_center(j, stack, input)).collect()
}

/// `Σ_j α_j · c_j`, componentwise.
pub fn attention_center(alpha: &[f64], centers: &[Center]) -> Result<Center> {
    if alpha.len() != centers.len() {
        return Err(FanError::shape(
            "attention_center",
            format!("{} weights for {} centers", alpha.len(), centers.len()),
        ));
    }
    if alpha.is_empty() {
        return Err(FanError::invalid("attention_center over zero features"));
    }
    let total: f64 = alpha.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(FanError::invalid(format!("attention weights sum to {total}, not 1")));
    }
    let (x, y) = alpha
        .iter()
        .zip(centers)
        .fold((0.0, 0.0), |(x, y), (a, c)| (x + a * c.x, y + a * c.y));
    Ok(Center { x, y })
}

/// A fixed-size window cut from a `C×H×W` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub data: Tensor,
    /// 1-indexed input coordinates of the window's top-left cell.
    pub origin_x: i64,
    pub origin_y: i64,
}

/// Round half up. Values within 1e-9 of a half count as the half: a
/// weighted mean of identical centers (every feature shares one row) lands
/// a few ulps either side of it, and the window must not jitter with that.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5 + 1e-9).floor() as i64
}

/// Source index of every cell of a `P_H × P_W` window over a `C×H×W` map
/// centered on `round_half_up(c)`, with `None` for cells outside the map.
/// For even sizes the extra cell goes after the center. Also returns the
/// window's 1-indexed top-left corner.
pub fn crop_window(shape: &[usize], c: Center, ph: usize, pw: usize) -> Result<(Vec<Option<usize>>, i64, i64)> {
    if shape.len() != 3 {
        return Err(FanError::shape("crop_patch", format!("feature maps must be C×H×W, got {shape:?}")));
    }
    if ph == 0 || pw == 0 {
        return Err(FanError::invalid("crop size must be positive"));
    }
    if !(c.x.is_finite() && c.y.is_finite()) {
        return Err(FanError::NonFinite("crop_patch"));
    }
    let (ch, h, w) = (shape[0], shape[1] as i64, shape[2] as i64);
    let origin_x = round_half_up(c.x) - (pw / 2) as i64;
    let origin_y = round_half_up(c.y) - (ph / 2) as i64;
    let mut index = Vec::with_capacity(ch * ph * pw);
    for k in 0..ch {
        for i in 0..ph {
            let y = origin_y + i as i64;
            for j in 0..pw {
                let x = origin_x + j as i64;
                let inside = (1..=h).contains(&y) && (1..=w).contains(&x);
                index.push(inside.then(|| (k * h as usize + (y - 1) as usize) * w as usize + (x - 1) as usize));
            }
        }
    }
    Ok((index, origin_x, origin_y))
}

/// Cut a `P_H × P_W` window centered on `round_half_up(c)`; cells outside
/// `f` are zero.
pub fn crop_patch(f: &Tensor, c: Center, ph: usize, pw: usize) -> Result<Patch> {
    let (index, origin_x, origin_y) = crop_window(f.shape(), c, ph, pw)?;
    let src = f.data();
    let out = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
    Ok(Patch {
        data: Tensor::from_parts(vec![f.shape()[0], ph, pw], out),
        origin_x,
        origin_y,
    })
}
