use std::collections::BTreeMap;

use dff_core::adapter::{decode_activations, encode_activations};
use dff_core::formats::{decode_factorization, encode_factorization, read_mask_png, write_mask_png};
use dff_core::heatmap::{bilinear_upsample, columns_to_heatmaps, heatmaps_to_columns};
use dff_core::nmf::frobenius_loss;
use dff_core::refine::{guided_filter, meanfield_iterate, meanfield_refine, softmax_unary};
use dff_core::segmentation::{binarize_factor, corloc};
use dff_core::tensor::{concat_batch, flatten_activations, split_batch, unflatten, ImageFeatures};
use dff_core::{ActivationTensor, BBox, BatchLayout, Factorization, HeatMapStack, RefineConfig};
use ndarray::{s, Array2};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = ActivationTensor> {
    (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(0.0f32..10.0, h * w * c)
            .prop_map(move |data| ActivationTensor::new("t", h, w, c, data).unwrap())
    })
}

fn map(max_side: usize) -> impl Strategy<Value = Array2<f32>> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f32..5.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Array2<bool>> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn features(id: &str, h: usize, w: usize, c: usize, seed: f32) -> ImageFeatures {
    let data = (0..h * w * c).map(|i| seed + i as f32).collect();
    ImageFeatures::from_tensor(&ActivationTensor::new(id, h, w, c, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_unflatten_round_trip(t in tensor()) {
        let m = flatten_activations(&t);
        prop_assert_eq!(unflatten(&m, "t", t.height(), t.width()).unwrap(), t);
    }

    #[test]
    fn concat_split_round_trip(ts in prop::collection::vec(tensor(), 1..4), c in 1usize..4) {
        let items: Vec<ImageFeatures> = ts
            .iter()
            .enumerate()
            .map(|(i, t)| features(&format!("i{i}"), t.height(), t.width(), c, i as f32))
            .collect();
        let (m, layout) = concat_batch(&items).unwrap();
        prop_assert!(layout.is_consistent());
        let back = split_batch(&m, &layout).unwrap();
        for (b, item) in back.iter().zip(&items) {
            prop_assert_eq!(&flatten_activations(b), &item.features);
        }
    }

    #[test]
    fn row_permutation_leaves_loss_unchanged(
        (n, c, k) in (2usize..8, 1usize..5, 1usize..4),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((n, c), |_| rng.gen::<f32>());
        let h = Array2::from_shape_fn((n, k), |_| rng.gen::<f32>());
        let w = Array2::from_shape_fn((k, c), |_| rng.gen::<f32>());
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pa = a.select(ndarray::Axis(0), &perm);
        let ph = h.select(ndarray::Axis(0), &perm);
        let base = frobenius_loss(a.view(), h.view(), w.view()).unwrap();
        let permuted = frobenius_loss(pa.view(), ph.view(), w.view()).unwrap();
        prop_assert!((base - permuted).abs() <= 1e-12 * base.max(1.0), "{} vs {}", base, permuted);
    }

    #[test]
    fn upsampling_stays_within_input_range(m in map(6), th in 1usize..20, tw in 1usize..20) {
        let out = bilinear_upsample(&m, th, tw);
        let lo = m.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(out.dim(), (th, tw));
        prop_assert!(out.iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn upsampling_is_idempotent(m in map(6), th in 1usize..20, tw in 1usize..20) {
        let once = bilinear_upsample(&m, th, tw);
        prop_assert_eq!(bilinear_upsample(&once, th, tw), once);
    }

    #[test]
    fn heatmaps_reflatten_to_h(shapes in prop::collection::vec((1usize..5, 1usize..5), 1..4), k in 1usize..4) {
        let layout = BatchLayout::from_shapes(shapes.iter().enumerate().map(|(i, &(h, w))| (format!("i{i}"), h, w)));
        let rows = layout.total_rows();
        let f = Factorization {
            h: Array2::from_shape_fn((rows, k), |(r, j)| (r * k + j) as f32 * 0.5),
            w: Array2::zeros((k, 2)),
            loss_trace: vec![0.0],
            iterations_run: 0,
        };
        let stacks = columns_to_heatmaps(&f, &layout).unwrap();
        prop_assert_eq!(heatmaps_to_columns(&stacks), f.h);
    }

    #[test]
    fn raising_the_percentile_never_adds_foreground(
        maps in prop::collection::vec(map(5), 1..4),
        p1 in 1.0f64..99.0,
        dp in 0.0f64..50.0,
    ) {
        let p2 = (p1 + dp).min(99.5);
        let refs: Vec<&Array2<f32>> = maps.iter().collect();
        let low = binarize_factor(0, &refs, p1).unwrap();
        let high = binarize_factor(0, &refs, p2).unwrap();
        for (a, b) in low.masks.iter().zip(&high.masks) {
            prop_assert!(a.iter().zip(b).all(|(&x, &y)| x || !y));
        }
    }

    #[test]
    fn corloc_ignores_image_naming(
        pairs in prop::collection::vec(((0u32..8, 0u32..8, 0u32..8, 0u32..8), (0u32..8, 0u32..8, 0u32..8, 0u32..8)), 1..8),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let bx = |(a, b, c, d): (u32, u32, u32, u32)| BBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap();
        let mut names: Vec<usize> = (0..pairs.len()).collect();
        let score = |names: &[usize]| {
            let mut preds = BTreeMap::new();
            let mut gts = BTreeMap::new();
            for (&(p, g), n) in pairs.iter().zip(names) {
                preds.insert(format!("img{n}"), bx(p));
                gts.insert(format!("img{n}"), vec![bx(g)]);
            }
            corloc(&preds, &gts).unwrap()
        };
        let base = score(&names);
        names.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(score(&names), base);
    }

    #[test]
    fn dffa_round_trip_is_bit_exact(t in tensor()) {
        let back = decode_activations("t", &encode_activations(&t)).unwrap();
        prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back, t);
    }

    #[test]
    fn dffn_round_trip_is_bit_exact(t in tensor(), k in 1usize..3, trace in prop::collection::vec(0.0f64..1e6, 1..5)) {
        let m = flatten_activations(&t);
        let f = Factorization {
            h: m.as_array().slice(s![.., ..1]).to_owned().broadcast((m.rows(), k)).unwrap().to_owned(),
            w: Array2::from_elem((k, m.cols()), 0.25),
            loss_trace: trace,
            iterations_run: 3,
        };
        let layout = BatchLayout::from_shapes([("t".to_string(), t.height(), t.width())]);
        let (back, back_layout) = decode_factorization(&encode_factorization(&f, &layout)).unwrap();
        prop_assert_eq!(back, f);
        prop_assert_eq!(back_layout, layout);
    }

    #[test]
    fn mask_png_round_trip(m in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| mask(h, w))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_mask_png(&m, &path).unwrap();
        prop_assert_eq!(read_mask_png(&path).unwrap(), m);
    }

    #[test]
    fn mean_field_conserves_probability(
        k in 1usize..4,
        seed in any::<u64>(),
        radius in 1usize..4,
        weight in 0.1f64..5.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let maps = (0..k).map(|_| Array2::from_shape_fn((8, 8), |_| rng.gen::<f32>() * 3.0)).collect();
        let stack = HeatMapStack::new("x", maps).unwrap();
        let guide = Array2::from_shape_fn((8, 8), |_| rng.gen::<f32>());
        let cfg = RefineConfig { iterations: 6, radius, epsilon: 1e-3, pairwise_weight: weight, background_level: Some(0.5) };
        let unary = softmax_unary(std::slice::from_ref(&stack), 0.5).remove(0);
        let mut checked = 0;
        meanfield_iterate(&unary, &guide, &cfg, |_, q| {
            for y in 0..8 {
                for x in 0..8 {
                    let sum: f64 = q.channels.iter().map(|c| c[[y, x]]).sum();
                    assert!((sum - 1.0).abs() <= 1e-5, "sum {sum}");
                    assert!(q.channels.iter().all(|c| c[[y, x]] >= 0.0));
                }
            }
            checked += 1;
        }).unwrap();
        prop_assert_eq!(checked, 6);
    }

    #[test]
    fn guided_filter_is_local(
        seed in any::<u64>(),
        radius in 1usize..3,
        (py, px) in (0usize..14, 0usize..14),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let guide = Array2::from_shape_fn((14, 14), |_| rng.gen::<f32>());
        let src = Array2::from_shape_fn((14, 14), |_| rng.gen::<f32>());
        let base = guided_filter(&guide, &src, radius, 1e-2).unwrap();
        let (mut g2, mut s2) = (guide.clone(), src.clone());
        g2[[py, px]] += 0.7;
        s2[[py, px]] += 0.9;
        let out = guided_filter(&g2, &s2, radius, 1e-2).unwrap();
        for ((y, x), &v) in out.indexed_iter() {
            let d = y.abs_diff(py).max(x.abs_diff(px));
            if d > 2 * radius {
                prop_assert!((v - base[[y, x]]).abs() <= 1e-6, "({},{}) moved", y, x);
            }
        }
    }
}

/// 10%-90% rise width of a monotone profile, in pixels.
fn transition_width(row: &[f64]) -> usize {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |t: f64| row.iter().position(|&v| v >= lo + t * (hi - lo)).unwrap();
    level(0.9) - level(0.1)
}

#[test]
fn refinement_sharpens_a_blurred_step() {
    let (h, w) = (16, 40);
    let edge = 20.0;
    let blurred = |x: usize| 1.0 / (1.0 + (-(x as f64 + 0.5 - edge) / 3.0).exp());
    let fg = Array2::from_shape_fn((h, w), |(_, x)| blurred(x) as f32);
    let bg = fg.mapv(|v| 1.0 - v);
    let guide = Array2::from_shape_fn((h, w), |(_, x)| if (x as f64) < edge { 0.1f32 } else { 0.9 });
    let stack = HeatMapStack::new("step", vec![fg.clone(), bg]).unwrap();
    let cfg = RefineConfig {
        iterations: 5,
        radius: 3,
        epsilon: 1e-3,
        pairwise_weight: 3.0,
        background_level: Some(0.0),
    };
    let refined = meanfield_refine(&[stack], &[guide], &cfg).unwrap();
    let src_row: Vec<f64> = fg.row(h / 2).iter().map(|&v| v as f64).collect();
    let out_row: Vec<f64> = refined[0].map(0).row(h / 2).iter().map(|&v| v as f64).collect();
    let (before, after) = (transition_width(&src_row), transition_width(&out_row));
    assert!(after <= before, "width {after} > {before}");
    assert!(out_row.iter().all(|&v| v >= 0.0));
}
