use std::sync::Arc;

use proptest::prelude::*;
use shipnet::data::image::resize_plane;
use shipnet::data::loader::epoch_order;
use shipnet::data::{Dataset, Image, Sample, SampleSource};
use shipnet::model::{ModelConfig, Variant};
use shipnet::nn::{conv2d_forward, Conv2dSpec};
use shipnet::tensor::Tensor;
use shipnet::train::adam::{adam_update, AdamConfig, StepDecay};
use shipnet::train::metrics::{f1_score, MetricsReport};

fn conv_spec() -> impl Strategy<Value = (Conv2dSpec, usize, usize)> {
    (1..4usize, 1..3usize, 1..3usize, 1..6usize, 1..4usize, 0..3usize, 1..3usize, 3..12usize, 3..12usize).prop_map(
        |(g, ci, co, k, s, p, d, h, w)| {
            let spec = Conv2dSpec::new(g * ci, g * co, k).groups(g).stride(s).padding(p).dilation(d);
            (spec, h, w)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn conv_output_shape_law((spec, h, w) in conv_spec()) {
        let x = Tensor::<f32>::zeros(&[1, spec.in_channels, h, w]);
        let wt = Tensor::<f32>::zeros(&spec.weight_shape());
        match spec.output_hw(h, w) {
            Ok((oh, ow)) => {
                let y = conv2d_forward(&x, &wt, None, &spec).unwrap();
                prop_assert_eq!(y.shape(), &[1, spec.out_channels, oh, ow]);
                let (sh, sw) = spec.span();
                prop_assert_eq!(oh, (h + 2 * spec.padding.0 - sh) / spec.stride.0 + 1);
                prop_assert_eq!(ow, (w + 2 * spec.padding.1 - sw) / spec.stride.1 + 1);
            }
            Err(_) => prop_assert!(conv2d_forward(&x, &wt, None, &spec).is_err()),
        }
    }

    #[test]
    fn metrics_are_self_consistent(cells in prop::collection::vec(0..40usize, 16)) {
        let classes: Vec<String> = (0..4).map(|c| format!("c{c}")).collect();
        prop_assume!(cells.iter().sum::<usize>() > 0);
        let m: Vec<Vec<usize>> = cells.chunks(4).map(|r| r.to_vec()).collect();
        let r = MetricsReport::from_confusion(&classes, m.clone()).unwrap();
        let total: usize = cells.iter().sum();
        prop_assert_eq!(r.total, total);
        for (row, stats) in m.iter().zip(&r.per_class) {
            prop_assert_eq!(row.iter().sum::<usize>(), stats.support);
            prop_assert!((stats.f1 - f1_score(stats.precision, stats.recall)).abs() < 1e-9);
        }
        let trace: usize = (0..4).map(|i| m[i][i]).sum();
        prop_assert!((r.accuracy - trace as f64 / total as f64).abs() < 1e-12);
        prop_assert!((r.accuracy - r.weighted_avg.recall).abs() < 1e-9);
        let wp: f64 = r.per_class.iter().map(|s| s.precision * s.support as f64).sum::<f64>() / total as f64;
        prop_assert!((r.weighted_avg.precision - wp).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op(theta in prop::collection::vec(-5.0f64..5.0, 1..20), t in 1u64..1000) {
        let mut p = theta.clone();
        let n = p.len();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        adam_update(&mut p, &vec![0.0; n], &mut m, &mut v, t, 1e-3, &AdamConfig::default());
        prop_assert_eq!(p, theta);
    }

    #[test]
    fn schedule_is_piecewise_constant(e in 0usize..200) {
        let s = StepDecay::default();
        prop_assert!(s.lr(e + 1) <= s.lr(e));
        if (e + 1) % 10 != 0 {
            prop_assert_eq!(s.lr(e + 1), s.lr(e));
        }
    }

    #[test]
    fn resize_stays_within_source_range(
        vals in prop::collection::vec(0.0f32..1.0, 12),
        th in 1..20usize,
        tw in 1..20usize,
    ) {
        let out = resize_plane(&vals, (3, 4), (th, tw)).unwrap();
        prop_assert_eq!(out.len(), th * tw);
        let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(out.iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        prop_assert_eq!(resize_plane(&vals, (3, 4), (3, 4)).unwrap(), vals);
    }

    #[test]
    fn shuffles_are_permutations(n in 0usize..300, seed in any::<u64>()) {
        let mut order = epoch_order(n, Some(seed));
        prop_assert_eq!(order.clone(), epoch_order(n, Some(seed)));
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_split_partitions_each_class(
        counts in prop::collection::vec(2usize..40, 2..5),
        seed in any::<u64>(),
    ) {
        let img = Arc::new(Image::filled(2, 2, [0.0; 3]));
        let classes: Vec<String> = (0..counts.len()).map(|c| format!("k{c}")).collect();
        let samples: Vec<Sample> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |_| c))
            .map(|label| Sample { source: SampleSource::Memory(img.clone()), label })
            .collect();
        let ds = Dataset::new(classes, samples).unwrap();
        let (a, b) = ds.split(0.8, seed).unwrap();
        for (c, &n) in counts.iter().enumerate() {
            let (x, y) = (a.class_counts()[c], b.class_counts()[c]);
            prop_assert_eq!(x + y, n);
            prop_assert_eq!(x, (0.8 * n as f64 + 1e-9).floor() as usize);
        }
    }

    #[test]
    fn canonical_config_round_trips(
        v in prop::sample::select(Variant::ALL.to_vec()),
        width in prop::sample::select(vec![16usize, 32, 64]),
        classes in 2usize..10,
    ) {
        let mut cfg = ModelConfig::tiny(v);
        cfg.base_width = width;
        cfg.num_classes = classes;
        let text = cfg.to_canonical();
        prop_assert_eq!(ModelConfig::from_canonical(&text).unwrap(), cfg);
    }
}
