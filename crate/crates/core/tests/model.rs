use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shipnet::attention::GateMode;
use shipnet::model::{ForwardOptions, Model, ModelConfig, Variant};
use shipnet::nn::{cross_entropy, Ctx};
use shipnet::tensor::{RandomInit, Scalar, Tape, Tensor};

fn input<T: Scalar>(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<T> {
    let (h, w) = cfg.input_size;
    Tensor::random_with(
        &[n, 3, h, w],
        RandomInit::Normal { std: 1.0 },
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn logits<T: Scalar>(m: &Model<T>, x: &Tensor<T>, opts: ForwardOptions) -> Tensor<T> {
    let tape = Tape::new();
    let out = m.forward(&tape, tape.constant(x.clone()), opts).unwrap();
    (*out.logits.value()).clone()
}

#[test]
fn randomized_config_sweep_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..10 {
        let variant = Variant::ALL[case % 3];
        let mut cfg = ModelConfig::tiny(variant);
        cfg.stage_blocks = (0..4).map(|_| rng.random_range(1..=2)).collect();
        cfg.base_width = [4, 8][rng.random_range(0..2)];
        cfg.num_classes = rng.random_range(2..=5);
        let side = [32, 48, 64][rng.random_range(0..3)];
        cfg.input_size = (side, side);
        cfg.reduction_ratio = 4;
        cfg.fusion_width = 8;
        if variant != Variant::Baseline {
            cfg.attention_stages = (2..=5).filter(|_| rng.random_bool(0.6)).collect();
        }
        if variant == Variant::Enhanced {
            cfg.enhanced.multiscale_fusion = rng.random_bool(0.5);
            cfg.enhanced.dilated_stage5 = rng.random_bool(0.5);
            if !cfg.enhanced.any() {
                cfg.enhanced.dilated_stage5 = true;
            }
        }
        let m = match Model::<f32>::build(&cfg, case as u64) {
            Ok(m) => m,
            // non-integer fusion ratios are rejected at build time
            Err(_) => {
                assert!(cfg.enhanced.multiscale_fusion && variant == Variant::Enhanced, "{cfg:?}");
                continue;
            }
        };
        for opts in [ForwardOptions::train(), ForwardOptions::eval()] {
            let l = logits(&m, &input(&cfg, 2, case as u64), opts);
            assert_eq!(l.shape(), &[2, cfg.num_classes]);
            assert!(l.all_finite());
        }
    }
}

#[test]
fn zero_residual_gamma_leaves_shortcut_cascade() {
    for variant in [Variant::Baseline, Variant::Cbam] {
        let cfg = ModelConfig::tiny(variant);
        let mut m = Model::<f64>::build(&cfg, 5).unwrap();
        for block in m.stages.iter().flatten() {
            let id = block.bn3.gamma;
            let c = m.store.value(id).len();
            m.store.set_value(id, Tensor::zeros(&[c])).unwrap();
        }
        let x = input::<f64>(&cfg, 2, 6);
        let tape = Tape::new();
        let out = m.forward(&tape, tape.constant(x), ForwardOptions::eval()).unwrap();
        let cx = Ctx::new(&tape, &m.store, false);
        let mut y = out.feature("stem").unwrap();
        for block in m.stages.iter().flatten() {
            let (conv, bn) = block.shortcut.as_ref().expect("tiny blocks all project");
            y = bn.forward(&cx, conv.forward(&cx, y).unwrap()).unwrap().relu().unwrap();
        }
        assert_eq!(*out.feature("stage5").unwrap().value(), *y.value(), "{variant}");
    }
}

#[test]
fn bypass_gates_match_attention_free_skeleton() {
    let mut enhanced = ModelConfig::tiny(Variant::Enhanced);
    enhanced.enhanced.multiscale_fusion = false;
    for cfg in [ModelConfig::tiny(Variant::Cbam), enhanced] {
        let full = Model::<f32>::build(&cfg, 21).unwrap();
        let mut skeleton = Model::<f32>::build(&cfg.skeleton(), 22).unwrap();
        let copied = skeleton.store.copy_matching(&full.store);
        assert_eq!(copied, skeleton.store.len());
        let x = input::<f32>(&cfg, 3, 23);
        for train in [false, true] {
            let bypass = ForwardOptions {
                train,
                gates: GateMode::Bypass,
            };
            let plain = ForwardOptions {
                train,
                gates: GateMode::Learned,
            };
            let a = logits(&full, &x, bypass);
            let b = logits(&skeleton, &x, plain);
            assert_eq!(a.data(), b.data(), "{:?} train={train}", cfg.variant);
            let learned = logits(&full, &x, plain);
            assert_ne!(learned.data(), b.data());
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for variant in Variant::ALL {
        let cfg = ModelConfig::tiny(variant);
        let mut m = Model::<f64>::build(&cfg, 31).unwrap();
        let x = input::<f64>(&cfg, 2, 32);
        let tape = Tape::new();
        let out = m.forward(&tape, tape.constant(x), ForwardOptions::train()).unwrap();
        let loss = cross_entropy(out.logits, &[0, 3]).unwrap();
        let grads = tape.backward(loss).unwrap();
        drop(out);
        m.store.accumulate_grads(&grads);
        for id in m.store.trainable_ids() {
            let g = m.store.grad(id).unwrap_or_else(|| panic!("{} has no gradient", m.store.name(id)));
            assert!(
                g.data().iter().any(|v| *v != 0.0),
                "{variant}: {} has an all-zero gradient",
                m.store.name(id)
            );
        }
    }
}

#[test]
fn fusion_sum_identities() {
    let cfg = ModelConfig::tiny(Variant::Enhanced);
    let mut m = Model::<f64>::build(&cfg, 41).unwrap();
    let x = input::<f64>(&cfg, 1, 42);
    let zero_lateral = |m: &mut Model<f64>, i: usize| {
        let id = m.fusion.as_ref().unwrap().laterals[i].weight;
        let shape = m.store.value(id).shape().to_vec();
        m.store.set_value(id, Tensor::zeros(&shape)).unwrap();
    };
    zero_lateral(&mut m, 1);
    zero_lateral(&mut m, 2);
    let tape = Tape::new();
    let out = m.forward(&tape, tape.constant(x.clone()), ForwardOptions::eval()).unwrap();
    let cx = Ctx::new(&tape, &m.store, false);
    let f = m.fusion.as_ref().unwrap();
    let lone = f.laterals[0].forward(&cx, out.feature("stage3").unwrap()).unwrap();
    let expect = f.smooth.forward(&cx, lone).unwrap();
    assert_eq!(*out.feature("fused").unwrap().value(), *expect.value());

    zero_lateral(&mut m, 0);
    let tape = Tape::new();
    let out = m.forward(&tape, tape.constant(x), ForwardOptions::eval()).unwrap();
    assert!(out.feature("fused").unwrap().value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn train_mode_updates_running_stats() {
    let cfg = ModelConfig::tiny(Variant::Baseline);
    let mut m = Model::<f32>::build(&cfg, 51).unwrap();
    let before = m.store.checksum();
    let x = input::<f32>(&cfg, 2, 52);
    let tape = Tape::new();
    let out = m.forward(&tape, tape.constant(x.clone()), ForwardOptions::train()).unwrap();
    let updates = out.updates;
    assert_eq!(updates.len(), 1 + 4 * 4);
    m.store.apply_stat_updates(updates);
    assert_ne!(m.store.checksum(), before);
    let frozen = m.store.checksum();
    let tape = Tape::new();
    let out = m.forward(&tape, tape.constant(x), ForwardOptions::eval()).unwrap();
    assert!(out.updates.is_empty());
    assert_eq!(m.store.checksum(), frozen);
}
