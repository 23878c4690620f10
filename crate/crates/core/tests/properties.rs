//! Randomized invariants across modules.

use mamba_matcher::flops::{self, FlopsConfig, Scheme};
use mamba_matcher::metrics::{pck, EvalRecord, PckMode};
use mamba_matcher::numerics::{argsort_desc_stable, conv2d, l2_normalize, softmax};
use mamba_matcher::pipeline::{build_multilevel, scan_sorted_sequence, FeatureMeta, FeatureSet, SortOrder};
use mamba_matcher::ssm::{mamba_block_forward, ScanElement, ScanMode, SsmConfig, SsmParams};
use mamba_matcher::transfer::{dense_flow, normalize_with_kernel, Keypoint, SamplerWeights};
use mamba_matcher::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_with_identity_kernel_is_exact(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = tensor(&[c, h, w], seed, -5.0, 5.0);
        let k = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let y = conv2d(&x, &k, &Tensor::zeros(&[c]), 0).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..40, scale in 0.1f32..200.0, seed in any::<u64>()) {
        let x = tensor(&[rows, cols], seed, -scale, scale);
        let y = softmax(&x, 1).unwrap();
        for r in y.data().chunks(cols) {
            let s: f64 = r.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "sum {}", s);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn l2_norm_is_zero_or_one(d in 1usize..50, scale in prop_oneof![Just(0.0f32), Just(1e-12f32), 1e-3f32..1e3], seed in any::<u64>()) {
        let v = tensor(&[d], seed, -scale.max(f32::MIN_POSITIVE), scale.max(f32::MIN_POSITIVE));
        let n: f64 = l2_normalize(&v).data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-5, "norm {}", n);
    }

    #[test]
    fn argsort_is_stable_and_invertible(scores in prop::collection::vec(0u8..4, 1..200)) {
        let s: Vec<f32> = scores.iter().map(|&v| v as f32).collect();
        let p = argsort_desc_stable(&s).unwrap();
        let idx = p.indices();
        for w in idx.windows(2) {
            prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
        }
        prop_assert!(p.compose(&p.inverse()).unwrap().is_identity());
        let restored = p.inverse().apply(&p.apply(&s).unwrap()).unwrap();
        prop_assert_eq!(restored, s);
    }

    #[test]
    fn scan_composition_is_associative(ds in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut el = || ScanElement::<f64> {
            a_bar: (0..ds).map(|_| rng.gen_range(0.0..1.0)).collect(),
            bx: (0..ds).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let (e1, e2, e3) = (el(), el(), el());
        let left = e1.then(&e2).then(&e3);
        let right = e1.then(&e2.then(&e3));
        for (a, b) in left.a_bar.iter().chain(&left.bx).zip(right.a_bar.iter().chain(&right.bx)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn cosine_entries_are_bounded(c in 1usize..6, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let fs = FeatureSet::new(tensor(&[2, c, h, w], seed, -3.0, 3.0), FeatureMeta::default()).unwrap();
        let ft = FeatureSet::new(tensor(&[2, c, h, w], seed ^ 1, -3.0, 3.0), FeatureMeta::default()).unwrap();
        let corr = build_multilevel(&fs, &ft).unwrap();
        prop_assert!(corr.levels.data().iter().all(|v| v.abs() <= 1.0 + 1e-5));
    }

    #[test]
    fn normalized_rows_sum_to_one_and_flow_is_inside_grid(h in 1usize..5, w in 1usize..5, sigma in 0.3f64..20.0, seed in any::<u64>()) {
        let corr = tensor(&[h, w, h, w], seed, -30.0, 30.0);
        let norm = normalize_with_kernel(&corr, sigma).unwrap();
        for row in norm.data().chunks(h * w) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-4);
        }
        let flow = dense_flow(&norm).unwrap();
        for p in flow.transferred.data().chunks(2) {
            prop_assert!(p[0] >= -1e-4 && p[0] <= (h - 1) as f32 + 1e-4);
            prop_assert!(p[1] >= -1e-4 && p[1] <= (w - 1) as f32 + 1e-4);
        }
    }

    #[test]
    fn sampler_weights_sum_to_one(x in 0.0f64..=1.0, y in 0.0f64..=1.0, tau in 0.01f64..0.5, h in 1usize..12, w in 1usize..12) {
        let sw = SamplerWeights::new(&Keypoint::new(x, y), h, w, tau).unwrap();
        prop_assert!(sw.entries.iter().all(|e| e.1 >= 0.0));
        let s: f64 = sw.entries.iter().map(|e| e.1).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn pck_is_monotone_in_alpha(errs in prop::collection::vec((0.0f64..50.0, 1.0f64..100.0), 1..30), a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
        let (lo, hi) = (a1.min(a2), a1.max(a2));
        let recs: Vec<EvalRecord> = errs
            .chunks(3)
            .enumerate()
            .map(|(i, c)| EvalRecord { pair_id: i.to_string(), category: String::new(), keypoints: c.to_vec() })
            .collect();
        for mode in [PckMode::PerImage, PckMode::PerPoint] {
            prop_assert!(pck(&recs, lo.max(1e-9), mode).unwrap() <= pck(&recs, hi.max(1e-9), mode).unwrap());
        }
    }

    #[test]
    fn pck_modes_agree_with_equal_counts(errs in prop::collection::vec((0.0f64..50.0, 1.0f64..100.0), 1..10), per in 1usize..5, alpha in 0.01f64..1.0) {
        let recs: Vec<EvalRecord> = (0..errs.len())
            .map(|i| EvalRecord {
                pair_id: i.to_string(),
                category: String::new(),
                keypoints: (0..per).map(|k| errs[(i + k) % errs.len()]).collect(),
            })
            .collect();
        let a = pck(&recs, alpha, PckMode::PerImage).unwrap();
        let b = pck(&recs, alpha, PckMode::PerPoint).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn flops_terms_are_linear_in_n(n in 1u64..1_000_000, k in 1u64..5) {
        let base = FlopsConfig { n, ..FlopsConfig::default() };
        let scaled = FlopsConfig { n: n * k, ..base };
        for scheme in [Scheme::Conv4d, Scheme::Fastformer, Scheme::Mamba] {
            for (t1, t2) in flops::terms(scheme, &base).unwrap().iter().zip(flops::terms(scheme, &scaled).unwrap()) {
                if t1.name == "1d convolution" {
                    // written without an N factor
                    prop_assert_eq!(t1.flops, t2.flops);
                } else {
                    prop_assert!((t2.flops - k as f64 * t1.flops).abs() <= 1e-6 * t2.flops);
                }
            }
        }
    }
}

#[test]
fn unsort_restores_positions_with_sentinel_channel() {
    // last channel is the sort key, channel 0 tags each row with its index
    let n = 3000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = Tensor::from_fn(&[n, 4], |i| {
        if i % 4 == 0 {
            (i / 4) as f32
        } else {
            (rng.gen_range(0..5) as f32) / 4.0
        }
    });
    let cfg = SsmConfig::for_model(4);
    let mut block = SsmParams::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(1));

    // sorted position k must land back at original row perm[k]
    let (out, perm) = scan_sorted_sequence(&seq, &[block.clone()], ScanMode::default(), SortOrder::Descending).unwrap();
    assert!(!perm.is_identity());
    let y = mamba_block_forward(&perm.apply_rows(&seq).unwrap(), &block, ScanMode::default()).unwrap();
    for (k, &p) in perm.indices().iter().enumerate() {
        assert_eq!(&out.data()[p * 4..p * 4 + 4], &y.data()[k * 4..k * 4 + 4]);
    }

    // with the block reduced to its residual path the tags come back in order
    block.w_out = Tensor::zeros(block.w_out.shape());
    let (out, _) = scan_sorted_sequence(&seq, &[block], ScanMode::default(), SortOrder::Descending).unwrap();
    for (i, row) in out.data().chunks(4).enumerate() {
        assert_eq!(row[0], i as f32);
    }
}

#[test]
fn long_sequences_stay_finite() {
    let cfg = SsmConfig::for_model(4);
    let block = SsmParams::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let seq = tensor(&[10_000, 4], 3, -1.0, 1.0);
    for mode in [ScanMode::Sequential, ScanMode::Parallel { chunk: 256 }] {
        let y = mamba_block_forward(&seq, &block, mode).unwrap();
        assert!(y.all_finite());
    }
}

#[test]
fn a_bar_lies_in_unit_interval() {
    let cfg = SsmConfig::for_model(16);
    let block = SsmParams::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(4));
    let a = block.state_matrix();
    for &delta in &[1e-6, 1e-3, 0.1, 1.0, 30.0] {
        for &ai in a.data() {
            let (a_bar, _) = mamba_matcher::ssm::zoh_coefficients(ai, delta);
            assert!(a_bar > 0.0 && a_bar < 1.0, "a {ai} delta {delta} -> {a_bar}");
        }
    }
}
