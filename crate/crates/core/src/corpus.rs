//! Procedural word images drawn from a built-in dot-matrix font, with
//! per-character boxes, corruptions and partial annotation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adcore::Size2;
use crate::alphabet::{Alphabet, DEFAULT_CHARS};
use crate::error::{FanError, Result};
use crate::netpbm::{self, GrayImage};
use crate::rfgeom::BBox;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

#[rustfmt::skip]
const FONT: [[&str; GLYPH_H]; 36] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."], // 0
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."], // 9
    [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"], // A
    ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."],
    ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
    ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
    ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
    ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
    ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"],
    [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
    ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
    [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."],
    ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
    ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
    ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"], // Z
];

/// Binary 5×7 glyphs for `0-9A-Z`.
#[derive(Clone, Debug)]
pub struct GlyphSet {
    alphabet: Alphabet,
    bits: Vec<[[bool; GLYPH_W]; GLYPH_H]>,
}

impl Default for GlyphSet {
    fn default() -> Self {
        let bits = FONT
            .iter()
            .map(|rows| {
                let mut g = [[false; GLYPH_W]; GLYPH_H];
                for (r, row) in rows.iter().enumerate() {
                    for (c, ch) in row.bytes().enumerate() {
                        g[r][c] = ch == b'#';
                    }
                }
                g
            })
            .collect();
        GlyphSet {
            alphabet: Alphabet::new(DEFAULT_CHARS).expect("font alphabet"),
            bits,
        }
    }
}

impl GlyphSet {
    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn glyph(&self, c: char) -> Option<&[[bool; GLYPH_W]; GLYPH_H]> {
        self.alphabet.class_of(c).map(|k| &self.bits[k])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptKind {
    Blur,
    Noise,
    Occlusion,
    Contrast,
}

impl fmt::Display for CorruptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorruptKind::Blur => "blur",
            CorruptKind::Noise => "noise",
            CorruptKind::Occlusion => "occlusion",
            CorruptKind::Contrast => "contrast",
        })
    }
}

impl FromStr for CorruptKind {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(CorruptKind::Blur),
            "noise" => Ok(CorruptKind::Noise),
            "occlusion" => Ok(CorruptKind::Occlusion),
            "contrast" => Ok(CorruptKind::Contrast),
            _ => Err(FanError::Config(format!("unknown corruption {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Rendered glyph height in pixels.
    pub glyph_height: usize,
    /// Per-character width multiplier range over the 5-pixel design width.
    pub scale_min: f64,
    pub scale_max: f64,
    pub gap_min: usize,
    pub gap_max: usize,
    /// Maximum vertical offset of a character, in pixels.
    pub jitter: usize,
    /// Applied to every sample, in order.
    pub corruptions: Vec<(CorruptKind, f64)>,
    pub ratio: f64,
    pub seed: u64,
    pub count: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            height: 16,
            width: 64,
            min_len: 3,
            max_len: 5,
            glyph_height: 10,
            scale_min: 1.0,
            scale_max: 1.5,
            gap_min: 1,
            gap_max: 2,
            jitter: 1,
            corruptions: vec![(CorruptKind::Noise, 0.1)],
            ratio: 0.3,
            seed: 1,
            count: 2000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FanError::Config(format!("{key}: cannot parse {value:?}")))
}

impl CorpusConfig {
    /// Wide and narrow characters side by side, partly occluded.
    pub fn drift() -> Self {
        CorpusConfig {
            scale_min: 1.0,
            scale_max: 2.5,
            gap_min: 0,
            gap_max: 1,
            corruptions: vec![(CorruptKind::Occlusion, 0.3), (CorruptKind::Noise, 0.1)],
            ..CorpusConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FanError::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("corpus image size must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("corpus length range {}..{} is empty", self.min_len, self.max_len));
        }
        if self.glyph_height == 0 || self.glyph_height > self.height {
            return bad(format!("glyph height {} does not fit image height {}", self.glyph_height, self.height));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return bad(format!("scale range {}..{} is invalid", self.scale_min, self.scale_max));
        }
        if self.gap_min > self.gap_max {
            return bad(format!("gap range {}..{} is empty", self.gap_min, self.gap_max));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return bad(format!("annotation ratio {} outside [0, 1]", self.ratio));
        }
        for (kind, s) in &self.corruptions {
            if !(0.0..=1.0).contains(s) {
                return bad(format!("{kind} strength {s} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Set one field from its config key (without the `corpus.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "min_len" => self.min_len = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "glyph_height" => self.glyph_height = parse(key, value)?,
            "scale_min" => self.scale_min = parse(key, value)?,
            "scale_max" => self.scale_max = parse(key, value)?,
            "gap_min" => self.gap_min = parse(key, value)?,
            "gap_max" => self.gap_max = parse(key, value)?,
            "jitter" => self.jitter = parse(key, value)?,
            "ratio" => self.ratio = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            "corrupt" => {
                self.corruptions = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "none")
                    .map(|item| {
                        let (kind, strength) = item
                            .split_once(':')
                            .ok_or_else(|| FanError::Config(format!("corrupt: expected kind:strength, got {item:?}")))?;
                        Ok((kind.trim().parse()?, parse(key, strength.trim())?))
                    })
                    .collect::<Result<_>>()?;
            }
            _ => return Err(FanError::UnknownKey(format!("corpus.{key}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, readable back through [`set`](Self::set).
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let corrupt = if self.corruptions.is_empty() {
            "none".to_string()
        } else {
            self.corruptions
                .iter()
                .map(|(k, s)| format!("{k}:{s}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            ("glyph_height", self.glyph_height.to_string()),
            ("scale_min", self.scale_min.to_string()),
            ("scale_max", self.scale_max.to_string()),
            ("gap_min", self.gap_min.to_string()),
            ("gap_max", self.gap_max.to_string()),
            ("jitter", self.jitter.to_string()),
            ("corrupt", corrupt),
            ("ratio", self.ratio.to_string()),
            ("seed", self.seed.to_string()),
            ("count", self.count.to_string()),
        ]
    }

    /// Number of annotated samples: `floor(ratio · count)`.
    pub fn annotated_count(&self) -> usize {
        // the epsilon keeps 0.3 · 1000 from landing on 299.99…
        ((self.ratio * self.count as f64) + 1e-9).floor() as usize
    }
}

/// One rendered word.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub text: String,
    /// Per-character boxes, 0-indexed inclusive pixels; present only on
    /// annotated samples.
    pub boxes: Option<Vec<BBox>>,
}

impl Sample {
    pub fn annotated(&self) -> bool {
        self.boxes.is_some()
    }
}

/// Draw `text` left to right. Boxes are always returned; the caller decides
/// whether the sample keeps them.
pub fn render<R: Rng + ?Sized>(text: &str, config: &CorpusConfig, glyphs: &GlyphSet, rng: &mut R) -> Result<Sample> {
    let n = text.chars().count();
    if n < config.min_len || n > config.max_len {
        return Err(FanError::invalid(format!(
            "text length {n} outside {}..={}",
            config.min_len, config.max_len
        )));
    }
    let shapes: Vec<_> = text
        .chars()
        .map(|c| glyphs.glyph(c).ok_or_else(|| FanError::invalid(format!("no glyph for {c:?}"))))
        .collect::<Result<_>>()?;
    let min_w = ((GLYPH_W as f64 * config.scale_min).round() as usize).max(1);
    let mut widths: Vec<usize> = (0..n)
        .map(|_| {
            let s = rng.gen_range(config.scale_min..=config.scale_max);
            ((GLYPH_W as f64 * s).round() as usize).max(min_w)
        })
        .collect();
    let mut gaps: Vec<usize> = (1..n).map(|_| rng.gen_range(config.gap_min..=config.gap_max)).collect();
    if n * min_w + (n - 1) * config.gap_min > config.width {
        return Err(FanError::invalid(format!(
            "{text:?} does not fit in {} pixels at minimum scale",
            config.width
        )));
    }
    // Shrink the widest glyph, then the widest gap, until the word fits.
    while widths.iter().sum::<usize>() + gaps.iter().sum::<usize>() > config.width {
        let (i, &w) = widths.iter().enumerate().rev().max_by_key(|(_, &w)| w).expect("non-empty");
        if w > min_w {
            widths[i] -= 1;
        } else {
            let (j, _) = gaps.iter().enumerate().rev().max_by_key(|(_, &g)| g).expect("fits at minimum");
            gaps[j] -= 1;
        }
    }
    let total = widths.iter().sum::<usize>() + gaps.iter().sum::<usize>();
    let bg = rng.gen_range(0.0..0.2);
    let ink = rng.gen_range(0.7..1.0);
    let gh = config.glyph_height;
    let mut image = GrayImage::new(config.width, config.height);
    image.data.fill(bg);
    let mut x = rng.gen_range(0..=config.width - total);
    let base = (config.height - gh) / 2;
    let mut boxes = Vec::with_capacity(n);
    for (k, (glyph, &w)) in shapes.iter().zip(&widths).enumerate() {
        let j = config.jitter as i64;
        let dy = if j > 0 { rng.gen_range(-j..=j) } else { 0 };
        let y = (base as i64 + dy).clamp(0, (config.height - gh) as i64) as usize;
        for py in 0..gh {
            for px in 0..w {
                if glyph[py * GLYPH_H / gh][px * GLYPH_W / w] {
                    image.set(x + px, y + py, ink);
                }
            }
        }
        boxes.push(BBox {
            x_min: x as i64,
            x_max: (x + w - 1) as i64,
            y_min: y as i64,
            y_max: (y + gh - 1) as i64,
        });
        x += w + gaps.get(k).copied().unwrap_or(0);
    }
    Ok(Sample {
        image,
        text: text.to_ascii_uppercase(),
        boxes: Some(boxes),
    })
}

/// Rectangle an occlusion of `strength` erases, drawn from `rng`.
pub fn occlusion_rect<R: Rng + ?Sized>(width: usize, height: usize, strength: f64, rng: &mut R) -> Option<BBox> {
    if strength <= 0.0 {
        return None;
    }
    let w = ((strength * width as f64 / 4.0).round() as usize).clamp(1, width);
    let h = ((strength * height as f64 * 1.5).round() as usize).clamp(1, height);
    let x = rng.gen_range(0..=width - w) as i64;
    let y = rng.gen_range(0..=height - h) as i64;
    Some(BBox {
        x_min: x,
        x_max: x + w as i64 - 1,
        y_min: y,
        y_max: y + h as i64 - 1,
    })
}

/// Index reflected about the half-sample points `-0.5` and `n - 0.5`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn box_blur(img: &GrayImage, r: usize) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let r = r as i64;
    let norm = (2 * r + 1) as f64;
    let mut tmp = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|k| img.get(reflect(x as i64 + k, w), y)).sum();
            tmp.set(x, y, s / norm);
        }
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|k| tmp.get(x, reflect(y as i64 + k, h))).sum();
            out.set(x, y, s / norm);
        }
    }
    out
}

/// Apply one corruption; the result is clamped to `[0, 1]`.
pub fn corrupt<R: Rng + ?Sized>(image: &GrayImage, kind: CorruptKind, strength: f64, rng: &mut R) -> Result<GrayImage> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(FanError::invalid(format!("{kind} strength {strength} outside [0, 1]")));
    }
    let mut out = match kind {
        CorruptKind::Blur => {
            let r = (strength * 3.0).round() as usize;
            if r == 0 {
                image.clone()
            } else {
                box_blur(image, r)
            }
        }
        CorruptKind::Noise => {
            let a = 0.5 * strength;
            let mut out = image.clone();
            if a > 0.0 {
                for v in &mut out.data {
                    *v += rng.gen_range(-a..=a);
                }
            }
            out
        }
        CorruptKind::Occlusion => {
            let mut out = image.clone();
            if let Some(b) = occlusion_rect(image.width, image.height, strength, rng) {
                for y in b.y_min..=b.y_max {
                    for x in b.x_min..=b.x_max {
                        out.set(x as usize, y as usize, 0.0);
                    }
                }
            }
            out
        }
        CorruptKind::Contrast => {
            let mut out = image.clone();
            for v in &mut out.data {
                *v = 0.5 + (*v - 0.5) * (1.0 - strength);
            }
            out
        }
    };
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Render sample `i` of a dataset from its own random stream.
pub fn generate_sample(config: &CorpusConfig, glyphs: &GlyphSet, i: usize, annotated: bool) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(i as u64);
    let chars: Vec<char> = glyphs.alphabet().chars().chars().collect();
    let n = rng.gen_range(config.min_len..=config.max_len);
    let text: String = (0..n).map(|_| chars[rng.gen_range(0..chars.len())]).collect();
    let mut sample = render(&text, config, glyphs, &mut rng)?;
    for &(kind, strength) in &config.corruptions {
        sample.image = corrupt(&sample.image, kind, strength, &mut rng)?;
    }
    sample.image.quantize();
    if !annotated {
        sample.boxes = None;
    }
    Ok(sample)
}

/// Indices of the annotated samples, chosen by a seeded shuffle.
pub fn annotated_indices(config: &CorpusConfig) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut rng);
    let mut flags = vec![false; config.count];
    for &i in &order[..config.annotated_count()] {
        flags[i] = true;
    }
    flags
}

/// Generated or loaded samples plus their manifest header.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: BTreeMap<String, String>,
    pub samples: Vec<Sample>,
    /// Largest annotated character box, height × width.
    pub crop: Size2,
}

/// Largest height and largest width over `boxes`.
pub fn max_box_size<'a>(boxes: impl Iterator<Item = &'a BBox>) -> Option<Size2> {
    boxes.fold(None, |acc: Option<Size2>, b| {
        let (h, w) = (b.height() as usize, b.width() as usize);
        Some(match acc {
            Some(s) => Size2::new(s.h.max(h), s.w.max(w)),
            None => Size2::new(h, w),
        })
    })
}

pub fn make_dataset(config: &CorpusConfig) -> Result<Dataset> {
    config.validate()?;
    let glyphs = GlyphSet::default();
    let flags = annotated_indices(config);
    let samples: Vec<Sample> = flags
        .iter()
        .enumerate()
        .map(|(i, &a)| generate_sample(config, &glyphs, i, a))
        .collect::<Result<_>>()?;
    let crop = match max_box_size(samples.iter().filter_map(|s| s.boxes.as_ref()).flatten()) {
        Some(c) => c,
        None => {
            // Nothing annotated: size the crop from the unannotated placements.
            let all: Vec<Sample> = (0..config.count.min(256))
                .map(|i| generate_sample(config, &glyphs, i, true))
                .collect::<Result<_>>()?;
            max_box_size(all.iter().filter_map(|s| s.boxes.as_ref()).flatten())
                .unwrap_or(Size2::new(config.glyph_height, GLYPH_W))
        }
    };
    let mut header: BTreeMap<String, String> = config
        .entries()
        .into_iter()
        .map(|(k, v)| (format!("corpus.{k}"), v))
        .collect();
    header.insert("crop_h".into(), crop.h.to_string());
    header.insert("crop_w".into(), crop.w.to_string());
    Ok(Dataset { header, samples, crop })
}

pub const MANIFEST: &str = "manifest.tsv";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Image size shared by all samples.
    pub fn image_size(&self) -> Option<Size2> {
        self.samples.first().map(|s| Size2::new(s.image.height, s.image.width))
    }

    /// Write `images/NNNNNN.pgm` files and the manifest under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| FanError::io(&images, e))?;
        let mut text = String::new();
        for (k, v) in &self.header {
            text.push_str(&format!("#{k}={v}\n"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let rel = format!("images/{i:06}.pgm");
            netpbm::write_pgm(&dir.join(&rel), &s.image)?;
            text.push_str(&format!("{rel}\t{}\t{}", s.text, u8::from(s.annotated())));
            if let Some(boxes) = &s.boxes {
                let b: Vec<String> = boxes
                    .iter()
                    .map(|b| format!("{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max))
                    .collect();
                text.push('\t');
                text.push_str(&b.join(";"));
            }
            text.push('\n');
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| FanError::io(&path, e))
    }

    /// Load a dataset written by [`write`](Self::write) or by hand.
    pub fn read(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| FanError::io(&path, e))?;
        let mut header = BTreeMap::new();
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let perr = |msg: String| FanError::Parse { line: n + 1, msg };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 {
                return Err(perr(format!("expected at least 3 tab-separated fields, got {}", fields.len())));
            }
            let image = netpbm::read_pgm(&dir.join(fields[0]))?;
            let text = fields[1].to_ascii_uppercase();
            let boxes = match fields[2] {
                "0" => None,
                "1" => {
                    let spec = fields.get(3).ok_or_else(|| perr("annotated record without boxes".into()))?;
                    let boxes = parse_boxes(spec).map_err(perr)?;
                    if boxes.len() != text.chars().count() {
                        return Err(perr(format!("{} boxes for text {text:?}", boxes.len())));
                    }
                    if boxes.iter().any(|b| {
                        b.x_min < 0 || b.y_min < 0 || b.x_max >= image.width as i64 || b.y_max >= image.height as i64
                    }) {
                        return Err(perr("box outside the image".into()));
                    }
                    Some(boxes)
                }
                other => return Err(perr(format!("annotated flag must be 0 or 1, got {other:?}"))),
            };
            samples.push(Sample { image, text, boxes });
        }
        let crop = match (header.get("crop_h"), header.get("crop_w")) {
            (Some(h), Some(w)) => Size2::new(parse("crop_h", h)?, parse("crop_w", w)?),
            _ => max_box_size(samples.iter().filter_map(|s| s.boxes.as_ref()).flatten())
                .ok_or_else(|| FanError::Config("manifest has no crop size and no annotated boxes".into()))?,
        };
        if let Some(size) = samples.first().map(|s| (s.image.width, s.image.height)) {
            if samples.iter().any(|s| (s.image.width, s.image.height) != size) {
                return Err(FanError::Image("dataset images differ in size".into()));
            }
        }
        Ok(Dataset { header, samples, crop })
    }
}

fn parse_boxes(spec: &str) -> std::result::Result<Vec<BBox>, String> {
    spec.split(';')
        .map(|b| {
            let v: Vec<i64> = b
                .split(',')
                .map(|x| x.trim().parse::<i64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("bad box {b:?}"))?;
            match v[..] {
                [x0, y0, x1, y1] if x0 <= x1 && y0 <= y1 => Ok(BBox {
                    x_min: x0,
                    x_max: x1,
                    y_min: y0,
                    y_max: y1,
                }),
                _ => Err(format!("bad box {b:?}")),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_has_ink() {
        let g = GlyphSet::default();
        for c in DEFAULT_CHARS.chars() {
            assert!(g.glyph(c).unwrap().iter().flatten().any(|&b| b), "{c}");
        }
    }

    #[test]
    fn single_glyph_box_is_its_extent() {
        let cfg = CorpusConfig {
            min_len: 1,
            max_len: 1,
            scale_max: 1.0,
            jitter: 0,
            ..CorpusConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = render("H", &cfg, &GlyphSet::default(), &mut rng).unwrap();
        let b = s.boxes.unwrap()[0];
        assert_eq!((b.width(), b.height()), (5, 10));
        assert_eq!(b.y_min, 3);
        // left and right columns of H are fully inked
        for y in b.y_min..=b.y_max {
            assert!(s.image.get(b.x_min as usize, y as usize) > 0.5);
            assert!(s.image.get(b.x_max as usize, y as usize) > 0.5);
        }
    }

    #[test]
    fn too_long_text_is_rejected() {
        let cfg = CorpusConfig {
            width: 20,
            ..CorpusConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(render("ABCD", &cfg, &GlyphSet::default(), &mut rng).is_err());
        assert!(render("AB", &cfg, &GlyphSet::default(), &mut rng).is_err());
    }

    #[test]
    fn wide_words_shrink_to_fit() {
        let cfg = CorpusConfig {
            scale_min: 2.5,
            scale_max: 2.5,
            gap_min: 0,
            width: 50,
            ..CorpusConfig::drift()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(render("WWWWW", &cfg, &GlyphSet::default(), &mut rng).is_err());
        let cfg = CorpusConfig { scale_min: 1.0, ..cfg };
        let s = render("WWWWW", &cfg, &GlyphSet::default(), &mut rng).unwrap();
        assert!(s.boxes.unwrap().last().unwrap().x_max < 50);
    }

    #[test]
    fn unknown_corruption_is_rejected() {
        assert!("smear".parse::<CorruptKind>().is_err());
        let mut cfg = CorpusConfig::default();
        assert!(cfg.set("corrupt", "blur:0.2,smear:1").is_err());
        cfg.set("corrupt", "blur:0.2, occlusion:0.3").unwrap();
        assert_eq!(cfg.corruptions, vec![(CorruptKind::Blur, 0.2), (CorruptKind::Occlusion, 0.3)]);
        assert!(matches!(cfg.set("colour", "1"), Err(FanError::UnknownKey(_))));
    }

    #[test]
    fn entries_round_trip() {
        let cfg = CorpusConfig::drift();
        let mut back = CorpusConfig {
            corruptions: vec![],
            ..CorpusConfig::default()
        };
        for (k, v) in cfg.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn reflection_is_half_sample_symmetric() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }
}
