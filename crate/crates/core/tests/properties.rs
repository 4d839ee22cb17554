use drnet_core::analysis::similarity_matrix;
use drnet_core::dissect::ChannelImportanceVector;
use drnet_core::infer::{cost_report, masked_forward_counted, masked_softmax};
use drnet_core::reconstruct::{sweep_threshold, union_mask, xor_mask, CombineMethod};
use drnet_core::tensor::softmax;
use drnet_core::{Architecture, GatedNetwork, Tensor};
use proptest::prelude::*;

fn civ_set(max_classes: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=64, 1usize..=max_classes)
        .prop_flat_map(|(len, k)| prop::collection::vec(prop::collection::vec(0.0f64..10.0, len), k))
}

fn civs(values: &[Vec<f64>]) -> Vec<ChannelImportanceVector> {
    values
        .iter()
        .enumerate()
        .map(|(c, v)| ChannelImportanceVector {
            class_id: c,
            values: v.clone(),
            sample_count: 1,
        })
        .collect()
}

proptest! {
    #[test]
    fn union_is_permutation_invariant(vs in civ_set(5), thr in 0.0f64..10.0, rot in 0usize..5) {
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let mut rotated = refs.clone();
        let k = rotated.len();
        rotated.rotate_left(rot % k);
        rotated.reverse();
        prop_assert_eq!(union_mask(&refs, thr).unwrap(), union_mask(&rotated, thr).unwrap());
    }

    #[test]
    fn union_grows_with_classes(vs in civ_set(5), thr in 0.0f64..10.0) {
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        for k in 1..refs.len() {
            let small = union_mask(&refs[..k], thr).unwrap();
            let big = union_mask(&refs[..k + 1], thr).unwrap();
            prop_assert!(small.iter().zip(&big).all(|(&s, &b)| !s || b));
        }
    }

    #[test]
    fn xor_is_symmetric(vs in civ_set(2).prop_filter("two", |v| v.len() == 2), thr in 0.0f64..10.0) {
        prop_assert_eq!(xor_mask(&vs[0], &vs[1], thr).unwrap(), xor_mask(&vs[1], &vs[0], thr).unwrap());
    }

    #[test]
    fn masks_nest_as_threshold_rises(vs in civ_set(3), a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let (ml, mh) = (union_mask(&refs, lo).unwrap(), union_mask(&refs, hi).unwrap());
        prop_assert!(mh.iter().zip(&ml).all(|(&h, &l)| !h || l));
        if refs.len() >= 2 {
            let (xl, xh) = (xor_mask(refs[0], refs[1], lo).unwrap(), xor_mask(refs[0], refs[1], hi).unwrap());
            prop_assert!(xh.iter().zip(&xl).all(|(&h, &l)| !h || l));
        }
    }

    #[test]
    fn sweep_fractions_never_increase(vs in civ_set(3), mut thr in prop::collection::vec(0.0f64..11.0, 10)) {
        thr.sort_by(f64::total_cmp);
        let cs = civs(&vs);
        let refs: Vec<&ChannelImportanceVector> = cs.iter().collect();
        let table = sweep_threshold(&refs, CombineMethod::Union, &thr).unwrap();
        for w in table.windows(2) {
            prop_assert!(w[1].1 <= w[0].1);
        }
        // Direct recount.
        for (t, f) in table {
            let n = (0..vs[0].len()).filter(|&j| vs.iter().any(|v| v[j] >= t)).count();
            prop_assert_eq!(f, n as f64 / vs[0].len() as f64);
        }
    }

    #[test]
    fn masked_softmax_is_a_distribution_on_the_set(
        logits in prop::collection::vec(-50.0f64..50.0, 2..12),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..12),
    ) {
        let mut set: Vec<usize> = picks.iter().map(|i| i.index(logits.len())).collect();
        set.sort_unstable();
        set.dedup();
        let p = masked_softmax(&logits, &set).unwrap();
        let sum: f64 = set.iter().map(|&c| p[c]).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        for c in 0..logits.len() {
            if !set.contains(&c) {
                prop_assert_eq!(p[c], 0.0);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn similarity_is_symmetric(vs in civ_set(6), eps in 0.0f64..5.0) {
        let m = similarity_matrix(&civs(&vs), eps);
        for i in 0..m.len() {
            prop_assert!(m[i][i] == 1.0 || m[i][i] == 0.0);
            for j in 0..m.len() {
                prop_assert_eq!(m[i][j], m[j][i]);
                prop_assert!((0.0..=1.0).contains(&m[i][j]));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn running_params_grow_with_mask(bits in prop::collection::vec(any::<bool>(), 56), extra in 0usize..56) {
        let net = GatedNetwork::zeros(Architecture::mnist5()).unwrap();
        let mut more = bits.clone();
        more[extra] = true;
        let a = cost_report(&net, &bits).unwrap();
        let b = cost_report(&net, &more).unwrap();
        prop_assert!(a.running_params <= b.running_params);
        prop_assert!(a.per_layer.iter().all(|l| l.running_params <= l.total_params));
        prop_assert_eq!(a.per_layer.iter().map(|l| l.running_channels).sum::<usize>(), a.running_channels);
    }

    #[test]
    fn masked_forward_equals_zero_gating(seed in 0u64..1000, bits in prop::collection::vec(any::<bool>(), 56)) {
        let net = GatedNetwork::init(Architecture::mnist5(), seed).unwrap();
        let data: Vec<f64> = (0..784).map(|i| ((i as u64 * 7919 + seed * 104729) % 1000) as f64 / 1000.0).collect();
        let x = Tensor::new(vec![1, 1, 28, 28], data).unwrap();
        let gates: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let masked = masked_forward_counted(&net, &x, &bits).unwrap();
        let oracle = net.forward_gated(&x, &gates).unwrap();
        for (a, b) in masked.logits.data().iter().zip(oracle.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!(masked.macs <= masked.full_macs);
    }
}
