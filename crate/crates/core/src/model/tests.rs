use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Mode, Tensor};

fn spec(backbone: Backbone, variant: Variant) -> ArchitectureSpec {
    ArchitectureSpec::new(backbone, variant)
}

fn eighth(mut s: ArchitectureSpec) -> ArchitectureSpec {
    s.scale = Scale::new(1, 8).unwrap();
    s.input_side = 32;
    s
}

fn names(net: &Network) -> BTreeSet<String> {
    net.params().iter().map(|p| p.name.clone()).collect()
}

fn shape_of<'a>(net: &'a Network, name: &str) -> &'a [usize] {
    &net.params()[net.param_index(name).unwrap_or_else(|| panic!("no param {name}"))].shape
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// The nine single-network configurations plus the four fusion combinations.
pub(crate) fn all_specs() -> Vec<ArchitectureSpec> {
    use Variant::*;
    let mut out = vec![
        spec(Backbone::Vgg, CnnOnly),
        spec(Backbone::Vgg, Basic),
        spec(Backbone::Vgg, OneRnn),
        spec(Backbone::Vgg, TwoRnn),
        spec(Backbone::Vgg, TwoRnnFc),
        spec(Backbone::Vgg, ThreeRnn),
        spec(Backbone::Vgg, ThreeRnn).with_conv_tap(ConvTap::Penultimate),
        spec(Backbone::Vgg, ThreeRnnFc),
        spec(Backbone::Resnet, Basic),
        spec(Backbone::Resnet, FcRnn),
    ];
    for branch_fc in [false, true] {
        for fusion_fc in [false, true] {
            let mut s = spec(Backbone::Vgg, Fusion);
            s.fusion_branch_fc = branch_fc;
            s.fusion_fc = fusion_fc;
            out.push(s);
        }
    }
    out
}

#[test]
fn vgg_cnn_full_scale_shapes() {
    let net = build_vgg_cnn(&spec(Backbone::Vgg, Variant::CnnOnly)).unwrap();
    assert_eq!(net.tap_shape("pool_last").unwrap(), [3, 3, 512]);
    assert_eq!(net.tap_shape("conv_last").unwrap(), [6, 6, 512]);
    assert_eq!(shape_of(&net, "fc1.w"), [4608, 4096]);
    assert_eq!(shape_of(&net, "fc2.w"), [4096, 2048]);
    assert_eq!(shape_of(&net, "out.w"), [2048, 2]);
    assert_eq!(shape_of(&net, "vgg.b1.c1.w"), [3, 3, 3, 64]);
    assert_eq!(net.slot_shape(1), [96, 96, 64]);
    assert!(net.rnn_heads().is_empty());
    // pool chain 96 → 48 → 24 → 12 → 6 → 3
    let pools: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Pool { .. }))
        .map(|(i, _)| net.slot_shape(i + 1)[0])
        .collect();
    assert_eq!(pools, [48, 24, 12, 6, 3]);
}

#[test]
fn vgg_eighth_scale_shapes() {
    let net = build(&eighth(spec(Backbone::Vgg, Variant::CnnOnly))).unwrap();
    assert_eq!(net.tap_shape("pool_last").unwrap(), [1, 1, 64]);
    assert_eq!(shape_of(&net, "fc1.w"), [64, 512]);
    assert_eq!(shape_of(&net, "fc2.w"), [512, 256]);
}

#[test]
fn input_side_must_divide_by_32() {
    let mut s = spec(Backbone::Vgg, Variant::Basic);
    s.input_side = 100;
    assert!(matches!(build(&s), Err(ModelError::Spec(_))));
}

#[test]
fn basic_head_reads_fc1() {
    let net = build_basic_cnn_rnn(&spec(Backbone::Vgg, Variant::Basic)).unwrap();
    assert_eq!(
        net.rnn_heads(),
        [RnnHead {
            name: "rnn".into(),
            inputs: vec!["fc1".into()],
            input_width: 4096
        }]
    );
    assert_eq!(shape_of(&net, "rnn.l1.w"), [4096, 384]);
    assert_eq!(shape_of(&net, "rnn.l2.w"), [128, 384]);
    assert_eq!(shape_of(&net, "out.w"), [128, 2]);
}

#[test]
fn multi_rnn_wiring_matches_tap_enumeration() {
    use Variant::*;
    let heads = |s: ArchitectureSpec| -> Vec<(String, Vec<String>)> {
        build(&s)
            .unwrap()
            .rnn_heads()
            .iter()
            .map(|h| (h.name.clone(), h.inputs.clone()))
            .collect()
    };
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    assert_eq!(
        heads(spec(Backbone::Vgg, OneRnn)),
        [("rnn".into(), v(&["conv_last", "pool_last", "fc1"]))]
    );
    for var in [TwoRnn, TwoRnnFc] {
        assert_eq!(
            heads(spec(Backbone::Vgg, var)),
            [("rnn_pool".into(), v(&["pool_last"])), ("rnn_fc".into(), v(&["fc1"]))]
        );
    }
    for (tap, name) in [(ConvTap::Last, "conv_last"), (ConvTap::Penultimate, "conv_penultimate")] {
        for var in [ThreeRnn, ThreeRnnFc] {
            assert_eq!(
                heads(spec(Backbone::Vgg, var).with_conv_tap(tap)),
                [
                    ("rnn_conv".into(), v(&[name])),
                    ("rnn_pool".into(), v(&["pool_last"])),
                    ("rnn_fc".into(), v(&["fc1"]))
                ]
            );
        }
    }
}

#[test]
fn one_rnn_concat_width() {
    let net = build(&spec(Backbone::Vgg, Variant::OneRnn)).unwrap();
    assert_eq!(net.rnn_heads()[0].input_width, 18432 + 4608 + 4096);
    assert_eq!(net.rnn_heads()[0].input_width, 27136);
}

#[test]
fn three_rnn_output_widths() {
    let net = build(&spec(Backbone::Vgg, Variant::ThreeRnn)).unwrap();
    assert_eq!(shape_of(&net, "out.w"), [384, 2]);
    assert_eq!(shape_of(&net, "rnn_conv.l1.w"), [18432, 384]);
    let pen = build(&spec(Backbone::Vgg, Variant::ThreeRnn).with_conv_tap(ConvTap::Penultimate)).unwrap();
    assert_eq!(pen.tap_shape("conv_penultimate").unwrap(), [6, 6, 512]);
    assert_ne!(pen.tap("conv_penultimate"), pen.tap("conv_last"));
    let fc = build(&spec(Backbone::Vgg, Variant::ThreeRnnFc)).unwrap();
    assert_eq!(shape_of(&fc, "head.fc.w"), [384, 64]);
    assert_eq!(shape_of(&fc, "out.w"), [64, 2]);
}

#[test]
fn fc_variants_add_exactly_one_layer() {
    let a = build(&spec(Backbone::Vgg, Variant::TwoRnn)).unwrap();
    let b = build(&spec(Backbone::Vgg, Variant::TwoRnnFc)).unwrap();
    let extra: Vec<_> = names(&b).difference(&names(&a)).cloned().collect();
    assert_eq!(extra, ["head.fc.b", "head.fc.w"]);
    assert!(names(&a).is_subset(&names(&b)));
    assert_eq!(shape_of(&b, "head.fc.b"), [64]);

    let r = build(&spec(Backbone::Resnet, Variant::Basic)).unwrap();
    let rf = build(&spec(Backbone::Resnet, Variant::FcRnn)).unwrap();
    let extra: Vec<_> = names(&rf).difference(&names(&r)).cloned().collect();
    assert_eq!(extra, ["fc.b", "fc.w"]);
    assert!(names(&r).difference(&names(&rf)).next().is_none());
}

#[test]
fn resnet_stage_widths() {
    for (s, side, fin) in [(Scale::FULL, 96, [3, 3, 2048]), (Scale::new(1, 8).unwrap(), 32, [1, 1, 256])] {
        let net = build(&spec(Backbone::Resnet, Variant::Basic).with_scale(s, side)).unwrap();
        assert_eq!(net.tap_shape("features").unwrap(), fin);
        for (stage, width) in [64, 128, 256, 512].into_iter().enumerate() {
            let mid = s.apply(width);
            let block = format!("resnet.s{}.b0", stage + 1);
            assert_eq!(shape_of(&net, &format!("{block}.c1.w"))[3], mid);
            assert_eq!(shape_of(&net, &format!("{block}.c2.w"))[..2], [3, 3]);
            assert_eq!(shape_of(&net, &format!("{block}.c3.w"))[3], 4 * mid);
            assert!(net.param_index(&format!("{block}.proj.w")).is_some());
            assert!(net.param_index(&format!("resnet.s{}.b1.proj.w", stage + 1)).is_none());
        }
        assert_eq!(shape_of(&net, "resnet.stem.w"), [7, 7, 3, s.apply(64)]);
    }
    let net = build(&spec(Backbone::Resnet, Variant::Basic)).unwrap();
    assert_eq!(net.tap_shape("resnet.stem").unwrap(), [48, 48, 64]);
    assert_eq!(net.tap_shape("resnet.pool").unwrap(), [23, 23, 64]);
    assert_eq!(net.tap_shape("resnet.s4.b2").unwrap(), [3, 3, 2048]);
}

#[test]
fn shortcut_without_projection_is_rejected() {
    let mut s = eighth(spec(Backbone::Resnet, Variant::Basic));
    s.resnet_projection = false;
    let e = build(&s).unwrap_err();
    assert!(e.to_string().contains("shortcut"), "{e}");
}

#[test]
fn zero_residual_branch_is_identity_skip() {
    let mut s = eighth(spec(Backbone::Resnet, Variant::Basic));
    s.resnet_blocks = [2, 1, 1, 1];
    let net = build(&s).unwrap();
    let mut params = init_parameters(&net, 3);
    for p in ["resnet.s1.b1.c3.w", "resnet.s1.b1.c3.b"] {
        params.get_mut(p).unwrap().data_mut().fill(0.0);
    }
    let frames = Tensor::full(&[2, 32, 32, 3], 0.3);
    let fwd = net.forward(&params, &frames, Mode::Eval, &mut rng()).unwrap();
    let before = fwd.tap(&net, "resnet.s1.b0").unwrap();
    let after = fwd.tap(&net, "resnet.s1.b1").unwrap();
    assert_eq!(before, after);
}

#[test]
fn fusion_inventories() {
    let specs: Vec<_> = all_specs().into_iter().filter(|s| s.variant == Variant::Fusion).collect();
    let inventories: BTreeSet<Vec<(String, Vec<usize>)>> = specs
        .iter()
        .map(|s| {
            build(s)
                .unwrap()
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone()))
                .collect()
        })
        .collect();
    assert_eq!(inventories.len(), 4);

    let net = build(&specs[0]).unwrap();
    assert_eq!(shape_of(&net, "fusion.head.out.w"), [256, 2]);
    assert!(net.params().iter().all(|p| p.name.starts_with("fusion.")));
    let with_fc = build(&specs[1]).unwrap();
    assert_eq!(shape_of(&with_fc, "fusion.head.fc.w"), [256, 64]);

    // branch parameters carry the standalone names after the prefix
    let a = build(&spec(Backbone::Vgg, Variant::Basic)).unwrap();
    let b = build(&spec(Backbone::Resnet, Variant::FcRnn)).unwrap();
    let fused = build(&specs[3]).unwrap();
    for (prefix, standalone) in [("fusion.a.", &a), ("fusion.b.", &b)] {
        for p in standalone.params().iter().filter(|p| !p.name.starts_with("out.")) {
            assert_eq!(shape_of(&fused, &format!("{prefix}{}", p.name)), p.shape.as_slice());
        }
    }
}

#[test]
fn build_fusion_checks_branch_kinds() {
    let a = spec(Backbone::Vgg, Variant::Basic);
    let b = spec(Backbone::Resnet, Variant::FcRnn);
    let net = build_fusion(&a, &b, true).unwrap();
    assert!(net.spec().fusion_branch_fc && net.spec().fusion_fc);
    assert!(build_fusion(&b, &a, false).is_err());
    let mut other_side = b.clone();
    other_side.input_side = 64;
    assert!(build_fusion(&a, &other_side, false).is_err());
}

#[test]
fn every_variant_builds_at_both_scales() {
    for s in all_specs() {
        for scaled in [s.clone(), eighth(s.clone())] {
            let net = build(&scaled).unwrap_or_else(|e| panic!("{} {}: {e}", scaled.backbone, scaled.variant));
            assert_eq!(net.slot_shape(net.output_slot()), [2]);
            for (name, slot) in net.taps() {
                assert!(*slot <= net.layers().len(), "tap {name} dangles");
            }
        }
    }
}

#[test]
fn golden_parameter_counts_at_one_eighth() {
    let counts: Vec<(String, usize)> = all_specs()
        .into_iter()
        .map(|s| {
            let label = format!("{}/{}/{}/{}/{}", s.backbone, s.variant, s.conv_tap, s.fusion_branch_fc, s.fusion_fc);
            (label, build(&eighth(s)).unwrap().param_count())
        })
        .collect();
    let golden = GOLDEN_COUNTS;
    assert_eq!(counts.len(), golden.len());
    for ((label, n), (g_label, g)) in counts.iter().zip(golden) {
        assert_eq!(label, g_label);
        assert_eq!(n, g, "{label}");
    }
}

/// Recorded once from the builders; any change here is an architecture change.
const GOLDEN_COUNTS: &[(&str, usize)] = &[
    ("vgg/cnn-only/last/false/false", 395690),
    ("vgg/basic/last/false/false", 608938),
    ("vgg/1rnn/last/false/false", 731818),
    ("vgg/2rnn/last/false/false", 781994),
    ("vgg/2rnn-fc/last/false/false", 798058),
    ("vgg/3rnn/last/false/false", 1028778),
    ("vgg/3rnn/penultimate/false/false", 1028778),
    ("vgg/3rnn-fc/last/false/false", 1052778),
    ("resnet/basic/last/false/false", 617618),
    ("resnet/fc-rnn/last/false/false", 847506),
    ("vgg/fusion/last/false/false", 1226554),
    ("vgg/fusion/last/false/true", 1242618),
    ("vgg/fusion/last/true/false", 1456442),
    ("vgg/fusion/last/true/true", 1472506),
];

#[test]
fn vgg_parameter_count_matches_closed_form() {
    // conv: k·k·cin·cout + cout per layer, fc: n·m + m
    let widths = [8, 8, 16, 16, 32, 32, 32, 64, 64, 64, 64, 64, 64];
    let mut cin = 3;
    let mut total = 0;
    for w in widths {
        total += 9 * cin * w + w;
        cin = w;
    }
    total += 64 * 512 + 512 + 512 * 256 + 256 + 256 * 2 + 2;
    let net = build(&eighth(spec(Backbone::Vgg, Variant::CnnOnly))).unwrap();
    assert_eq!(net.param_count(), total);
}

#[test]
fn zero_parameters_give_zero_output() {
    for s in all_specs() {
        let s = eighth(s);
        let net = build(&s).unwrap();
        let params = ParamStore::zeros(&net);
        let mut frames = Tensor::zeros(&[3, 32, 32, 3]);
        frames.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 7) as f64 - 3.0) / 3.0);
        let fwd = net.forward(&params, &frames, Mode::Eval, &mut rng()).unwrap();
        let out = fwd.graph.value(fwd.output());
        assert_eq!(out.shape(), [3, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0), "{} {}", s.backbone, s.variant);
    }
}

#[test]
fn forward_shapes_and_repeatability() {
    let net = build(&eighth(spec(Backbone::Vgg, Variant::ThreeRnn))).unwrap();
    let params = init_parameters(&net, 11);
    let mut frames = Tensor::zeros(&[1, 32, 32, 3]);
    frames.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 31 % 17) as f64) / 8.5 - 1.0);
    let one = net.forward(&params, &frames, Mode::Eval, &mut rng()).unwrap();
    let out = one.graph.value(one.output()).clone();
    assert_eq!(out.shape(), [1, 2]);
    assert!(out.data().iter().all(|v| v.is_finite() && v.abs() < 10.0));
    let again = net.forward(&params, &frames, Mode::Eval, &mut rng()).unwrap();
    assert_eq!(again.graph.value(again.output()), &out);
    assert!(net.forward(&params, &Tensor::zeros(&[1, 16, 16, 3]), Mode::Eval, &mut rng()).is_err());
}

#[test]
fn fusion_with_zeroed_branch_b_reads_branch_a_only() {
    let s = eighth(spec(Backbone::Vgg, Variant::Fusion));
    let net = build(&s).unwrap();
    let mut params = init_parameters(&net, 2);
    let zero: Vec<String> = params.names().iter().filter(|n| n.starts_with("fusion.b.")).cloned().collect();
    for n in &zero {
        params.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let mut frames = Tensor::zeros(&[2, 32, 32, 3]);
    frames.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 13) as f64) / 6.5 - 1.0);
    let fwd = net.forward(&params, &frames, Mode::Eval, &mut rng()).unwrap();
    let a = fwd.tap(&net, "fusion.a.rnn").unwrap();
    assert!(fwd.tap(&net, "fusion.b.rnn").unwrap().data().iter().all(|&v| v == 0.0));
    let w = params.get("fusion.head.out.w").unwrap();
    let b = params.get("fusion.head.out.b").unwrap();
    let out = fwd.graph.value(fwd.output());
    for t in 0..2 {
        for j in 0..2 {
            let mut expect = b.data()[j];
            for i in 0..128 {
                expect += a.data()[t * 128 + i] * w.data()[i * 2 + j];
            }
            assert!((out.data()[t * 2 + j] - expect).abs() < 1e-12);
        }
    }
}
