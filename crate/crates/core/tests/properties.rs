mod common;

use fan::adcore::Size2;
use fan::corpus::{annotated_indices, corrupt, make_dataset, occlusion_rect, CorpusConfig, CorruptKind, Dataset};
use fan::evalkit::{levenshtein, ned};
use fan::netpbm::GrayImage;
use fan::rfgeom::{crop_window, Center};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Full-table edit distance, written independently of the library's
/// two-row version.
fn edit_table(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn word() -> impl Strategy<Value = String> {
    "[0-9A-F]{0,8}"
}

fn image(w: usize, h: usize, seed: u64) -> GrayImage {
    use rand::Rng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut img = GrayImage::new(w, h);
    img.data.iter_mut().for_each(|v| *v = r.gen_range(0.0..1.0));
    img
}

#[test]
fn golden_edit_distance() {
    assert_eq!(levenshtein("831K", "83KM"), 2);
    assert_eq!(ned("831K", "83KM").unwrap(), 0.5);
    assert_eq!(edit_table("831K", "83KM"), 2);
}

#[test]
fn forward_passes_are_normalized() {
    for seed in 0..10 {
        let (a, c) = common::normalization_errors(seed);
        assert!(a < 1e-6 && c < 1e-12, "seed {seed}: {a:e} {c:e}");
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let cfg = CorpusConfig {
        count: 12,
        ..CorpusConfig::default()
    };
    let data = make_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    assert_eq!(Dataset::read(dir.path()).unwrap(), data);
    assert_eq!(make_dataset(&cfg).unwrap(), data);
}

proptest! {
    #[test]
    fn levenshtein_matches_table(a in word(), b in word()) {
        prop_assert_eq!(levenshtein(&a, &b), edit_table(&a, &b));
    }

    #[test]
    fn levenshtein_is_a_metric(a in word(), b in word(), c in word()) {
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        let (la, lb) = (a.chars().count(), b.chars().count());
        prop_assert!(levenshtein(&a, &b) >= la.abs_diff(lb));
        prop_assert!(levenshtein(&a, &b) <= la.max(lb));
    }

    #[test]
    fn ned_properties(p in word(), g in "[0-9A-F]{1,8}") {
        let n = ned(&p, &g).unwrap();
        let len = g.chars().count() as f64;
        prop_assert!(n >= 0.0);
        prop_assert_eq!(n, levenshtein(&p, &g) as f64 / len);
        prop_assert!(n <= p.chars().count().max(g.chars().count()) as f64 / len);
        prop_assert_eq!(n == 0.0, p == g);
        prop_assert_eq!(ned(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn annotated_fraction_is_floor(n in 1usize..400, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let cfg = CorpusConfig { count: n, ratio, seed, ..CorpusConfig::default() };
        let flags = annotated_indices(&cfg);
        prop_assert_eq!(flags.iter().filter(|&&f| f).count(), (ratio * n as f64 + 1e-9).floor() as usize);
    }

    #[test]
    fn blur_preserves_the_mean(w in 3usize..30, h in 3usize..20, s in 0.0f64..=1.0, seed in any::<u64>()) {
        let img = image(w, h, seed);
        let out = corrupt(&img, CorruptKind::Blur, s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let m0: f64 = img.data.iter().sum::<f64>();
        let m1: f64 = out.data.iter().sum::<f64>();
        prop_assert!((m0 - m1).abs() < 1e-9 * m0.max(1.0));
    }

    #[test]
    fn occlusion_is_local(s in 0.01f64..=1.0, seed in any::<u64>()) {
        let img = image(64, 16, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rect = occlusion_rect(64, 16, s, &mut rng.clone()).unwrap();
        let out = corrupt(&img, CorruptKind::Occlusion, s, &mut rng).unwrap();
        for y in 0..16 {
            for x in 0..64 {
                let inside = (rect.x_min..=rect.x_max).contains(&(x as i64))
                    && (rect.y_min..=rect.y_max).contains(&(y as i64));
                prop_assert_eq!(out.get(x, y), if inside { 0.0 } else { img.get(x, y) });
            }
        }
    }

    #[test]
    fn noise_is_bounded(s in 0.0f64..=1.0, seed in any::<u64>()) {
        let img = image(20, 10, seed);
        let out = corrupt(&img, CorruptKind::Noise, s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (a, b) in img.data.iter().zip(&out.data) {
            prop_assert!((a - b).abs() <= s / 2.0 + 1e-12);
            prop_assert!((0.0..=1.0).contains(b));
        }
    }

    #[test]
    fn crop_reads_the_right_pixels(
        cx in -5.0f64..40.0, cy in -5.0f64..20.0, ph in 1usize..9, pw in 1usize..9,
    ) {
        let (c, h, w) = (2usize, 12usize, 30usize);
        let (index, ox, oy) = crop_window(&[c, h, w], Center::new(cx, cy), ph, pw).unwrap();
        prop_assert_eq!(index.len(), c * ph * pw);
        for k in 0..c {
            for i in 0..ph {
                for j in 0..pw {
                    let (x, y) = (ox + j as i64, oy + i as i64);
                    let want = (x >= 1 && y >= 1 && x <= w as i64 && y <= h as i64)
                        .then(|| (k * h + (y - 1) as usize) * w + (x - 1) as usize);
                    prop_assert_eq!(index[(k * ph + i) * pw + j], want);
                }
            }
        }
        // the rounded center sits at cell (ph/2, pw/2)
        prop_assert_eq!(ox + (pw / 2) as i64, (cx + 0.5 + 1e-9).floor() as i64);
        prop_assert_eq!(oy + (ph / 2) as i64, (cy + 0.5 + 1e-9).floor() as i64);
    }
}

#[test]
fn drift_corpus_varies_widths() {
    let data = make_dataset(&CorpusConfig {
        count: 40,
        ratio: 1.0,
        ..CorpusConfig::drift()
    })
    .unwrap();
    let widths: Vec<i64> = data
        .samples
        .iter()
        .flat_map(|s| s.boxes.as_ref().unwrap().iter().map(|b| b.width()))
        .collect();
    let (lo, hi) = (widths.iter().min().unwrap(), widths.iter().max().unwrap());
    assert!(hi - lo >= 3, "widths {lo}..{hi}");
    assert_eq!(data.crop, Size2::new(data.crop.h, *hi as usize));
}
