//! Shared oracles for the integration and acceptance tests: central finite
//! differences, the unit-impulse receptive-field oracle, and a tiny model.
#![allow(dead_code)]

use fan::adcore::{lstm_cell, GradBuffer, Graph, LstmParams, ParamStore, Size2, Tensor, Var};
use fan::corpus::Sample;
use fan::encoder::{EncoderConfig, Stage, StageOp};
use fan::focus::{Annotation, FocusConfig, FocusParams, FocusSource};
use fan::model::{FanConfig, FanModel};
use fan::netpbm::GrayImage;
use fan::rfgeom::{self, BBox, Center, LayerKind, LayerSpec, LayerStack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> fan::Result<Var> + 'a;

/// Forward `build` on fresh inputs and reduce with a fixed projection.
fn projected(build: &Build<'_>, inputs: &[Tensor], proj: &Tensor) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let w = g.constant(proj.reshape(g.shape(out).to_vec()).unwrap());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    (g, vars, loss)
}

/// Largest relative error between backprop and central differences over
/// every entry of every input.
pub fn check_op(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let n_out = g.value(out).len();
    let mut r = rng(n_out as u64);
    let proj = random_tensor(&mut r, &[n_out], -1.0, 1.0);

    let (g, vars, loss) = projected(build, inputs, &proj);
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&g, vars[k]);
        for i in 0..input.len() {
            let at = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += delta;
                let (g, _, loss) = projected(build, &moved, &proj);
                g.value(loss).item()
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Finite-difference checks of every differentiable graph operation.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape, -1.0, 1.0);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let same = Size2::square(1);

    out.push(("add", check_op(&[t(&[3, 4]), t(&[3, 4])], &|g, v| g.add(v[0], v[1]))));
    out.push(("mul", check_op(&[t(&[5]), t(&[5])], &|g, v| g.mul(v[0], v[1]))));
    out.push(("scale", check_op(&[t(&[2, 3])], &|g, v| Ok(g.scale(v[0], -1.7)))));
    out.push((
        "add_row_broadcast",
        check_op(&[t(&[4, 3]), t(&[3])], &|g, v| g.add_row_broadcast(v[0], v[1])),
    ));
    out.push(("matmul", check_op(&[t(&[3, 4]), t(&[4, 2])], &|g, v| g.matmul(v[0], v[1]))));
    out.push((
        "matmul_t(a^T b)",
        check_op(&[t(&[4, 3]), t(&[4, 2])], &|g, v| g.matmul_t(v[0], true, v[1], false)),
    ));
    out.push((
        "matmul_t(a b^T)",
        check_op(&[t(&[3, 4]), t(&[2, 4])], &|g, v| g.matmul_t(v[0], false, v[1], true)),
    ));
    out.push((
        "matmul_t(a^T b^T)",
        check_op(&[t(&[4, 3]), t(&[2, 4])], &|g, v| g.matmul_t(v[0], true, v[1], true)),
    ));
    out.push((
        "affine",
        check_op(&[t(&[4]), t(&[3, 4]), t(&[3])], &|g, v| g.affine(v[0], v[1], Some(v[2]))),
    ));
    out.push(("affine(no bias)", check_op(&[t(&[4]), t(&[3, 4])], &|g, v| g.affine(v[0], v[1], None))));
    out.push((
        "conv2d",
        check_op(&[t(&[2, 5, 6]), t(&[3, 2, 3, 3]), t(&[3])], &|g, v| {
            g.conv2d(v[0], v[1], v[2], same, same)
        }),
    ));
    out.push((
        "conv2d(strided)",
        check_op(&[t(&[2, 7, 6]), t(&[2, 2, 3, 2]), t(&[2])], &|g, v| {
            g.conv2d(v[0], v[1], v[2], Size2::new(2, 1), Size2::new(1, 0))
        }),
    ));
    out.push((
        "maxpool2d",
        check_op(&[t(&[2, 6, 6])], &|g, v| {
            g.maxpool2d(v[0], Size2::square(2), Size2::square(2), Size2::square(0))
        }),
    ));
    out.push((
        "maxpool2d(padded)",
        check_op(&[t(&[1, 5, 7])], &|g, v| {
            g.maxpool2d(v[0], Size2::new(2, 3), Size2::new(2, 1), Size2::new(1, 1))
        }),
    ));
    out.push(("relu", check_op(&[t(&[10])], &|g, v| Ok(g.relu(v[0])))));
    out.push(("tanh", check_op(&[t(&[6])], &|g, v| g.tanh(v[0]))));
    out.push(("sigmoid", check_op(&[t(&[6])], &|g, v| g.sigmoid(v[0]))));
    out.push(("softmax", check_op(&[t(&[3, 5])], &|g, v| g.softmax(v[0]))));
    out.push(("log_softmax", check_op(&[t(&[3, 5])], &|g, v| g.log_softmax(v[0]))));
    out.push(("concat", check_op(&[t(&[3]), t(&[2, 2])], &|g, v| g.concat(&[v[0], v[1]]))));
    out.push(("slice", check_op(&[t(&[7])], &|g, v| g.slice(v[0], 2, 4))));
    out.push(("reshape", check_op(&[t(&[2, 6])], &|g, v| g.reshape(v[0], vec![3, 4]))));
    out.push(("transpose", check_op(&[t(&[2, 5])], &|g, v| g.transpose(v[0]))));
    out.push(("sum", check_op(&[t(&[2, 3])], &|g, v| Ok(g.sum(v[0])))));
    out.push(("cross_entropy", check_op(&[t(&[6])], &|g, v| g.cross_entropy(v[0], 4))));
    out.push((
        "nll_rows",
        check_op(&[t(&[3, 4])], &|g, v| {
            let lp = g.log_softmax(v[0])?;
            g.nll_rows(lp, &[1, 3, 0])
        }),
    ));
    out.push((
        "gather",
        check_op(&[t(&[2, 3])], &|g, v| {
            g.gather(v[0], vec![Some(5), None, Some(0), Some(5), Some(2), None], vec![2, 3])
        }),
    ));

    let mut store = ParamStore::new();
    let lstm = LstmParams::register(&mut store, "cell", 3, 4, &mut rng(3)).unwrap();
    let w = store.get(lstm.w).clone();
    let b = random_tensor(&mut rng(4), &[16], -0.5, 0.5);
    out.push((
        "lstm_cell",
        check_op(&[t(&[3]), t(&[4]), t(&[4]), w, b], &|g, v| {
            let p = fan::adcore::LstmVars {
                w: v[3],
                b: v[4],
                input: 3,
                hidden: 4,
            };
            let (h, c) = lstm_cell(g, v[0], v[1], v[2], &p)?;
            g.concat(&[h, c])
        }),
    ));
    out
}

/// A model small enough for exhaustive finite differences: 8×16 input,
/// one conv+pool stage, a collapsing convolution, and alphabet "ABC".
pub fn tiny_config(lambda: f64, source: FocusSource) -> FanConfig {
    let conv = |k: (usize, usize), p: (usize, usize), channels| StageOp::Conv {
        kernel: Size2::new(k.0, k.1),
        stride: Size2::square(1),
        pad: Size2::new(p.0, p.1),
        channels,
    };
    let encoder = EncoderConfig {
        in_channels: 1,
        input: Size2::new(8, 16),
        stages: vec![
            Stage {
                name: "s1".into(),
                ops: vec![
                    conv((3, 3), (1, 1), 3),
                    StageOp::Pool {
                        kernel: Size2::square(2),
                        stride: Size2::square(2),
                        pad: Size2::square(0),
                    },
                ],
            },
            Stage {
                name: "collapse".into(),
                ops: vec![conv((4, 3), (0, 1), 4)],
            },
        ],
        rnn_hidden: 3,
    };
    let mut cfg = FanConfig::toy();
    cfg.preset = "tiny".into();
    cfg.encoder = encoder;
    cfg.attn.attn_hidden = 4;
    cfg.attn.dec_hidden = 5;
    cfg.attn.max_len = 4;
    cfg.alphabet = "ABC".into();
    cfg.focus = FocusConfig {
        crop: Some(Size2::new(4, 3)),
        source,
        lambda,
    };
    cfg
}

/// Random image with two annotated characters.
pub fn tiny_sample(seed: u64) -> Sample {
    let mut r = rng(seed);
    let mut image = GrayImage::new(16, 8);
    for v in image.data.iter_mut() {
        *v = r.gen_range(0.0..1.0);
    }
    Sample {
        image,
        text: "CA".into(),
        boxes: Some(vec![
            BBox {
                x_min: 2,
                x_max: 5,
                y_min: 1,
                y_max: 6,
            },
            BBox {
                x_min: 8,
                x_max: 11,
                y_min: 2,
                y_max: 6,
            },
        ]),
    }
}

fn loss_value(model: &FanModel, sample: &Sample) -> f64 {
    let mut g = Graph::new();
    let parts = model.loss(&mut g, sample).unwrap();
    g.value(parts.total).item()
}

/// Worst relative error of the full joint loss over every parameter entry.
pub fn check_model(model: &mut FanModel, sample: &Sample) -> f64 {
    let mut g = Graph::new();
    let parts = model.loss(&mut g, sample).unwrap();
    let mut analytic = GradBuffer::zeros_like(&model.store);
    g.backward(parts.total).unwrap().accumulate(&g, &mut analytic);
    let ids: Vec<_> = model.store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        for i in 0..model.store.get(id).len() {
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss_value(model, sample);
            model.store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss_value(model, sample);
            model.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic.get(id)[i], numeric);
            if e > 1e-4 && std::env::var("FD_DEBUG").is_ok() {
                eprintln!("{} [{i}] analytic={} numeric={}", model.store.name(id), analytic.get(id)[i], numeric);
            }
            worst = worst.max(e);
        }
    }
    worst
}

/// Focusing loss as a function of explicit alignment vectors: glimpses are
/// `Hᵀα_t`, and crop placement is computed once from the unperturbed
/// weights because it carries no gradient.
pub fn check_focus_alpha() -> f64 {
    let (t_len, d, k) = (6, 5, 4);
    let crop = Size2::new(3, 3);
    let mut store = ParamStore::new();
    let mut r = rng(21);
    let cfg = FocusConfig {
        crop: Some(crop),
        source: FocusSource::Input,
        lambda: 0.01,
    };
    let params = FocusParams::build(cfg, k, 1, d, &mut store, &mut r).unwrap();
    let h = random_tensor(&mut r, &[t_len, d], -1.0, 1.0);
    let image = random_tensor(&mut r, &[1, 8, 14], 0.0, 1.0);
    let centers: Vec<Center> = (0..t_len).map(|j| Center::new(1.4 + 2.0 * j as f64, 4.2)).collect();
    let alphas: Vec<Tensor> = (0..2)
        .map(|_| {
            let raw: Vec<f64> = (0..t_len).map(|_| r.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            Tensor::vector(raw.into_iter().map(|v| v / s).collect())
        })
        .collect();
    let placed: Vec<Center> = alphas
        .iter()
        .map(|a| rfgeom::attention_center(a.data(), &centers).unwrap().to_zero_based())
        .collect();
    let boxes = [
        BBox {
            x_min: 3,
            x_max: 6,
            y_min: 1,
            y_max: 6,
        },
        BBox {
            x_min: 6,
            x_max: 9,
            y_min: 2,
            y_max: 5,
        },
    ];
    let classes = [2, 0];
    check_op(&alphas, &|g, v| {
        let hv = g.constant(h.clone());
        let src = g.constant(image.clone());
        let mut traces = Vec::new();
        for (a, c) in v.iter().zip(&placed) {
            let col = g.reshape(*a, vec![t_len, 1])?;
            let glimpse = g.matmul_t(hv, true, col, false)?;
            let glimpse = g.reshape(glimpse, vec![d])?;
            traces.push(fan::attn::StepTrace {
                alpha: *a,
                glimpse,
                logits: glimpse,
                center: *c,
            });
        }
        let bound = params.bind(g, &store);
        bound.focusing_loss(
            g,
            &traces,
            src,
            Some(Annotation {
                classes: &classes,
                boxes: &boxes,
            }),
        )
    })
}

/// Random stack of at most `max_layers` layers with pad < kernel, sized so
/// that every layer tiles its padded input exactly. Returns the stack and
/// its input extents.
pub fn random_stack(r: &mut ChaCha8Rng, max_layers: usize, max_area: usize) -> (LayerStack, Size2) {
    loop {
        let n = r.gen_range(1..=max_layers);
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let kernel = Size2::new(r.gen_range(1..=4), r.gen_range(1..=4));
            let stride = Size2::new(r.gen_range(1..=3), r.gen_range(1..=3));
            let pad = Size2::new(r.gen_range(0..kernel.h), r.gen_range(0..kernel.w));
            let kind = if r.gen_bool(0.5) {
                LayerKind::Conv
            } else {
                LayerKind::Pool
            };
            layers.push(LayerSpec {
                kind,
                kernel,
                stride,
                pad,
            });
        }
        // walk down from a small top map; sizes follow exactly
        let mut size = Size2::new(r.gen_range(1..=3), r.gen_range(1..=4));
        let mut ok = true;
        for l in layers.iter().rev() {
            let h = ((size.h - 1) * l.stride.h + l.kernel.h) as i64 - 2 * l.pad.h as i64;
            let w = ((size.w - 1) * l.stride.w + l.kernel.w) as i64 - 2 * l.pad.w as i64;
            if h < 1 || w < 1 {
                ok = false;
                break;
            }
            size = Size2::new(h as usize, w as usize);
        }
        if ok && size.h * size.w <= max_area {
            return (LayerStack::new(layers), size);
        }
    }
}

/// Push a single-channel map through the stack with all-ones kernels and
/// max pooling. Nonnegative values stay nonnegative, so an output cell is
/// positive exactly when its window reaches a positive input cell.
fn respond(stack: &LayerStack, input: Tensor) -> Tensor {
    let mut g = Graph::inference();
    let mut x = g.constant(input);
    for l in &stack.layers {
        x = match l.kind {
            LayerKind::Conv => {
                let w = g.constant(Tensor::full(vec![1, 1, l.kernel.h, l.kernel.w], 1.0));
                let b = g.constant(Tensor::zeros(vec![1]));
                g.conv2d(x, w, b, l.stride, l.pad).unwrap()
            }
            LayerKind::Pool => g.maxpool2d(x, l.kernel, l.stride, l.pad).unwrap(),
        };
    }
    g.value(x).clone()
}

/// Input-space bounding box (1-indexed) of every output cell's support,
/// found by propagating a unit impulse from each input pixel. Row-major
/// over the output map.
pub fn impulse_fields(stack: &LayerStack, input: Size2) -> Vec<Option<BBox>> {
    let out = stack.output_size(input).unwrap();
    let mut boxes: Vec<Option<BBox>> = vec![None; out.h * out.w];
    for py in 0..input.h {
        for px in 0..input.w {
            let mut img = Tensor::zeros(vec![1, input.h, input.w]);
            img.data_mut()[py * input.w + px] = 1.0;
            let resp = respond(stack, img);
            for (cell, &v) in resp.data().iter().enumerate() {
                if v > 0.0 {
                    let (x, y) = (px as i64 + 1, py as i64 + 1);
                    let b = boxes[cell].get_or_insert(BBox {
                        x_min: x,
                        x_max: x,
                        y_min: y,
                        y_max: y,
                    });
                    b.x_min = b.x_min.min(x);
                    b.x_max = b.x_max.max(x);
                    b.y_min = b.y_min.min(y);
                    b.y_max = b.y_max.max(y);
                }
            }
        }
    }
    boxes
}

/// Number of output cells whose clipped recursive field differs from the
/// impulse support, together with the cell count.
pub fn rf_mismatches(stack: &LayerStack, input: Size2) -> (usize, usize) {
    let out = stack.output_size(input).unwrap();
    let oracle = impulse_fields(stack, input);
    let mut bad = 0;
    for y in 1..=out.h {
        for x in 1..=out.w {
            let rec = stack
                .receptive_field(x as i64, y as i64, input)
                .unwrap()
                .clip(input);
            if rec != oracle[(y - 1) * out.w + (x - 1)] {
                bad += 1;
            }
        }
    }
    (bad, out.h * out.w)
}

/// Largest deviation from 1 of the alignment sums and of the per-cell
/// focusing distributions over one teacher-forced forward of a freshly
/// initialized toy model on a random image.
pub fn normalization_errors(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let mut cfg = FanConfig::toy();
    cfg.focus.crop = Some(Size2::new(r.gen_range(4..=12), r.gen_range(3..=9)));
    let model = FanModel::new(cfg, seed).unwrap();
    let size = model.input_size();
    let image = random_tensor(&mut r, &[1, size.h, size.w], 0.0, 1.0);
    let len = r.gen_range(1..=model.config.attn.max_len);
    let mut target: Vec<usize> = (0..len).map(|_| r.gen_range(0..model.alphabet.eos())).collect();
    target.push(model.alphabet.eos());

    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let seq = model.encoder.encode(&mut g, &model.store, x).unwrap();
    let bound = model.attn.bind(&mut g, &model.store, &seq).unwrap();
    let (_, traces) = bound.attention_loss(&mut g, &target).unwrap();
    let focus = model.focus.bind(&mut g, &model.store);
    let crop = model.config.focus.crop.unwrap();
    let (mut alpha_err, mut cell_err) = (0.0f64, 0.0f64);
    for t in &traces {
        let s: f64 = g.value(t.alpha).data().iter().sum();
        alpha_err = alpha_err.max((s - 1.0).abs());
        let patch = rfgeom::crop_patch(&image, t.center.from_zero_based(), crop.h, crop.w).unwrap();
        let p = g.constant(patch.data);
        let probs = focus.predict(&mut g, t.glimpse, p).unwrap();
        let k = model.alphabet.len();
        for cell in g.value(probs).data().chunks(k) {
            let s: f64 = cell.iter().sum();
            cell_err = cell_err.max((s - 1.0).abs());
        }
    }
    (alpha_err, cell_err)
}
