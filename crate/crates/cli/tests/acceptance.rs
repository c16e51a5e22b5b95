//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report lines are never captured.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use affectkit::data::{synth_corpus, Dataset, SynthConfig, SynthFormat};
use affectkit::model::{build, forward_sequence, init_parameters, ArchitectureSpec, Backbone, ConvTap, Scale, Variant};
use affectkit::objective::{ccc, ccc_loss_joint, Aggregator};
use affectkit::postproc::{
    evaluate, median_filter, run_postprocess, utterance_score, FrameTrack, LabelRanges, PostprocConfig,
    UtterancePrediction,
};
use affectkit::tensor::{Activation, Graph, Mode, NodeId, Padding, Tensor};
use affectkit::trainer::{batch_gradients, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// pinned tolerances
const FD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared against it instead of their
/// own magnitude; below it central differences are dominated by rounding.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_BUDGET_SECS: f64 = 60.0;
const CCC_TOL: f64 = 1e-10;
const OVERFIT_TARGET: f64 = 0.9;
const OVERFIT_EPOCHS: usize = 200;
const OVERFIT_BUDGET_SECS: f64 = 600.0;
const REPORT_TOL: f64 = 1e-9;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// One-sided slopes further apart than this (relative) mean the
/// perturbation interval contains a ReLU or max-selection switch.
const KINK_GAP: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Error of `analytic` against finite differences from `f(x+h)`, `f(x)`,
/// `f(x-h)`, and whether the interval straddles a kink. Across a kink the
/// central difference mixes two linear pieces, so the analytic value must
/// instead match one of the one-sided slopes.
fn fd_error(analytic: f64, up: f64, mid: f64, down: f64) -> (f64, bool) {
    let central = (up - down) / (2.0 * FD_STEP);
    let fwd = (up - mid) / FD_STEP;
    let bwd = (mid - down) / FD_STEP;
    if rel_err(fwd, bwd) > KINK_GAP {
        (rel_err(analytic, fwd).min(rel_err(analytic, bwd)), true)
    } else {
        (rel_err(analytic, central), false)
    }
}

// ---------------------------------------------------------------- criterion 1

type OpBuilder = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Worst relative error over every input coordinate of one op, for the
/// scalar `sum(out ⊙ probe)` with a fixed random probe.
fn op_gradcheck(inputs: &[Tensor], f: &OpBuilder) -> (f64, usize) {
    let eval = |xs: &[Tensor]| -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &ids);
        (g, ids, out)
    };
    let (g, ids, out) = eval(inputs);
    let probe = random(g.value(out).shape(), &mut rng(99));
    let dot = |t: &Tensor| t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
    let grads = g.backward_seeded(out, probe.clone()).unwrap();
    let mid = dot(g.value(out));
    let (mut worst, mut kinks) = (0.0f64, 0);
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[j] += FD_STEP;
            let (gp, _, op) = eval(&xs);
            xs[k].data_mut()[j] -= 2.0 * FD_STEP;
            let (gm, _, om) = eval(&xs);
            let (e, kink) = fd_error(analytic.data()[j], dot(gp.value(op)), mid, dot(gm.value(om)));
            worst = worst.max(e);
            kinks += usize::from(kink);
        }
    }
    (worst, kinks)
}

fn loss_gradcheck(agg: Aggregator, r: &mut ChaCha8Rng) -> (f64, usize) {
    let (b, t) = (5, 4);
    let preds = random(&[b, t, 2], r);
    let labels: Vec<[f64; 2]> = (0..b).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(0.0..1.0)]).collect();
    let mut mask = vec![false; b * t];
    mask[t - 1] = true;
    let at = ccc_loss_joint(&preds, &labels, agg, Some(&mask)).unwrap();
    let (analytic, mid) = (at.grad, at.value);
    let (mut worst, mut kinks) = (0.0f64, 0);
    for j in 0..preds.len() {
        let mut p = preds.clone();
        p.data_mut()[j] += FD_STEP;
        let up = ccc_loss_joint(&p, &labels, agg, Some(&mask)).unwrap().value;
        p.data_mut()[j] -= 2.0 * FD_STEP;
        let down = ccc_loss_joint(&p, &labels, agg, Some(&mask)).unwrap().value;
        let (e, kink) = fd_error(analytic.data()[j], up, mid, down);
        worst = worst.max(e);
        kinks += usize::from(kink);
    }
    (worst, kinks)
}

/// Sampled coordinates of every parameter tensor of a scale-1/8 3rnn
/// network: the largest-gradient entry plus two random ones.
fn network_gradcheck() -> (f64, usize, usize) {
    let mut arch = ArchitectureSpec::new(Backbone::Vgg, Variant::ThreeRnn).with_scale(Scale::new(1, 8).unwrap(), 32);
    arch.conv_tap = ConvTap::Last;
    let net = build(&arch).unwrap();
    let mut params = init_parameters(&net, 3);
    let mut r = rng(11);
    // nonzero biases so every bias gradient path is exercised
    for t in params.tensors_mut() {
        if t.rank() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.05..0.05));
        }
    }
    let (b, steps) = (4, 3);
    let utts: Vec<_> = (0..b)
        .map(|i| affectkit::data::Utterance {
            id: format!("v0/u{i}"),
            frames: affectkit::data::FrameSource::Images(Vec::new()),
            frame_count: steps,
            valence: r.gen_range(-1.0..1.0),
            arousal: r.gen_range(0.0..1.0),
        })
        .collect();
    let frames = (0..b).map(|_| random(&[steps, 32, 32, 3], &mut r)).collect();
    let ds = Dataset::from_frames(utts, frames, steps).unwrap();
    let batch = ds.batch(&(0..b).collect::<Vec<_>>());
    let agg = Aggregator::Median;
    let analytic = batch_gradients(&net, &params, &batch, agg, Mode::Eval, 0, 0).unwrap().grads;
    let loss = |p: &affectkit::model::ParamStore| {
        let preds = forward_sequence(&net, p, &batch, Mode::Eval, 0, 0).unwrap();
        ccc_loss_joint(&preds, &batch.labels, agg, Some(&batch.pad_mask)).unwrap().value
    };
    let names: Vec<String> = params.names().to_vec();
    let mid = loss(&params);
    let (mut worst, mut checked, mut kinks) = (0.0f64, 0, 0);
    for (k, name) in names.iter().enumerate() {
        let g = analytic[k].data();
        let top = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        for j in [top, r.gen_range(0..g.len()), r.gen_range(0..g.len())] {
            let orig = params.get(name).unwrap().data()[j];
            params.get_mut(name).unwrap().data_mut()[j] = orig + FD_STEP;
            let up = loss(&params);
            params.get_mut(name).unwrap().data_mut()[j] = orig - FD_STEP;
            let down = loss(&params);
            params.get_mut(name).unwrap().data_mut()[j] = orig;
            let (e, kink) = fd_error(g[j], up, mid, down);
            worst = worst.max(e);
            kinks += usize::from(kink);
            checked += 1;
        }
    }
    (worst, checked, kinks)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut r = rng(1);
    let mut x = |s: &[usize]| random(s, &mut r);
    let conv = |stride: usize, pad: Padding, bias: bool| {
        move |g: &mut Graph, i: &[NodeId]| g.conv2d(i[0], i[1], bias.then(|| i[2]), stride, pad).unwrap()
    };
    let cases: Vec<(&str, Vec<Tensor>, Box<OpBuilder>)> = vec![
        ("conv2d same", vec![x(&[5, 5, 2]), x(&[3, 3, 2, 3]), x(&[3])], Box::new(conv(1, Padding::Same, true))),
        ("conv2d valid batched s2", vec![x(&[2, 6, 6, 2]), x(&[3, 3, 2, 2])], Box::new(conv(2, Padding::Valid, false))),
        ("conv2d same s2 k7", vec![x(&[7, 7, 1]), x(&[7, 7, 1, 2]), x(&[2])], Box::new(conv(2, Padding::Same, true))),
        ("conv2d 1x1 s2", vec![x(&[2, 5, 5, 3]), x(&[1, 1, 3, 2])], Box::new(conv(2, Padding::Same, false))),
        ("maxpool2d", vec![x(&[4, 4, 2])], Box::new(|g: &mut Graph, i: &[NodeId]| g.maxpool2d(i[0], 2, 2).unwrap())),
        ("maxpool2d batched k3", vec![x(&[2, 7, 7, 1])], Box::new(|g: &mut Graph, i: &[NodeId]| g.maxpool2d(i[0], 3, 2).unwrap())),
        ("dense", vec![x(&[4]), x(&[4, 3]), x(&[3])], Box::new(|g: &mut Graph, i: &[NodeId]| g.dense(i[0], i[1], i[2]).unwrap())),
        ("dense batched", vec![x(&[3, 4]), x(&[4, 3]), x(&[3])], Box::new(|g: &mut Graph, i: &[NodeId]| g.dense(i[0], i[1], i[2]).unwrap())),
        ("relu", vec![x(&[8])], Box::new(|g: &mut Graph, i: &[NodeId]| g.activation(i[0], Activation::Relu).unwrap())),
        ("tanh", vec![x(&[8])], Box::new(|g: &mut Graph, i: &[NodeId]| g.activation(i[0], Activation::Tanh).unwrap())),
        ("sigmoid", vec![x(&[8])], Box::new(|g: &mut Graph, i: &[NodeId]| g.activation(i[0], Activation::Sigmoid).unwrap())),
        (
            "dropout",
            vec![x(&[16])],
            Box::new(|g: &mut Graph, i: &[NodeId]| g.dropout(i[0], 0.3, Mode::Train, &mut rng(5)).unwrap()),
        ),
        ("concat", vec![x(&[2]), x(&[3])], Box::new(|g: &mut Graph, i: &[NodeId]| g.concat(&[i[0], i[1]]).unwrap())),
        ("concat rows", vec![x(&[2, 3]), x(&[2, 2])], Box::new(|g: &mut Graph, i: &[NodeId]| g.concat(&[i[0], i[1]]).unwrap())),
        (
            "gru_step",
            vec![x(&[3]), x(&[2]), x(&[3, 6]), x(&[2, 6]), x(&[6])],
            Box::new(|g: &mut Graph, i: &[NodeId]| g.gru_step(i[0], i[1], i[2], i[3], i[4]).unwrap()),
        ),
        ("add", vec![x(&[2, 3]), x(&[2, 3])], Box::new(|g: &mut Graph, i: &[NodeId]| g.add(i[0], i[1]).unwrap())),
        ("reshape", vec![x(&[2, 3])], Box::new(|g: &mut Graph, i: &[NodeId]| g.reshape(i[0], vec![6]).unwrap())),
        ("row", vec![x(&[3, 4])], Box::new(|g: &mut Graph, i: &[NodeId]| g.row(i[0], 1).unwrap())),
        ("stack", vec![x(&[3]), x(&[3])], Box::new(|g: &mut Graph, i: &[NodeId]| g.stack(&[i[0], i[1], i[0]]).unwrap())),
        ("sum", vec![x(&[2, 3])], Box::new(|g: &mut Graph, i: &[NodeId]| g.sum(i[0]).unwrap())),
    ];
    let mut worst_op = ("", 0.0f64);
    let mut failures = Vec::new();
    let mut op_kinks = 0;
    for (name, inputs, f) in &cases {
        let (e, k) = op_gradcheck(inputs, f.as_ref());
        op_kinks += k;
        if e >= GRAD_REL_TOL {
            failures.push(format!("{name} {e:.2e}"));
        }
        if e > worst_op.1 {
            worst_op = (name, e);
        }
    }
    for agg in [Aggregator::Mean, Aggregator::Median] {
        let (e, k) = loss_gradcheck(agg, &mut rng(7));
        op_kinks += k;
        if e >= GRAD_REL_TOL {
            failures.push(format!("ccc loss ({agg}) {e:.2e}"));
        }
        worst_op.1 = worst_op.1.max(e);
    }
    let (net_err, coords, net_kinks) = network_gradcheck();
    if net_err >= GRAD_REL_TOL {
        failures.push(format!("3rnn network {net_err:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= GRAD_BUDGET_SECS {
        failures.push(format!("took {secs:.1}s"));
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} ops + loss: worst {:.2e} ({}), {op_kinks} kink coords; 3rnn 1/8 network, {coords} coords: worst {net_err:.2e}, {net_kinks} kink coords; step {FD_STEP:e}, tol {GRAD_REL_TOL:e}; {secs:.1}s{}",
            cases.len(),
            worst_op.1,
            worst_op.0,
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

/// Direct two-pass evaluation with population moments.
fn ccc_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let sy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    2.0 * sxy / (sx + sy + (mx - my).powi(2))
}

fn criterion_2() -> Verdict {
    let mut r = rng(2);
    let (mut worst, mut problems) = (0.0f64, Vec::new());
    for case in 0..1000 {
        let n = r.gen_range(2..=256);
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        // mix unrelated, correlated and anti-correlated gold series
        let mode = case % 3;
        let y: Vec<f64> = x
            .iter()
            .map(|&v| match mode {
                0 => r.gen_range(-1.0..1.0),
                1 => 0.7 * v + 0.1 + r.gen_range(-0.2..0.2),
                _ => -v + r.gen_range(-0.1..0.1),
            })
            .collect();
        let lib = ccc(&x, &y).unwrap();
        worst = worst.max((lib - ccc_oracle(&x, &y)).abs());
        if (lib - ccc(&y, &x).unwrap()).abs() > CCC_TOL {
            problems.push(format!("asymmetric at case {case}"));
        }
        if !(-1.0..=1.0).contains(&lib) {
            problems.push(format!("out of range at case {case}"));
        }
        if (ccc(&x, &x).unwrap() - 1.0).abs() > CCC_TOL {
            problems.push(format!("ccc(x,x) != 1 at case {case}"));
        }
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        if ccc(&x, &shifted).unwrap() >= 1.0 - 1e-12 || ccc(&x, &scaled).unwrap() >= 1.0 - 1e-12 {
            problems.push(format!("shift/scale blind at case {case}"));
        }
    }
    if worst > CCC_TOL {
        problems.push(format!("oracle gap {worst:.2e}"));
    }
    problems.truncate(5);
    verdict(
        problems.is_empty(),
        format!("1000 pairs, max |lib - oracle| {worst:.2e} (tol {CCC_TOL:e}){}", join_problems(&problems)),
    )
}

fn join_problems(p: &[String]) -> String {
    if p.is_empty() {
        String::new()
    } else {
        format!("; {}", p.join(", "))
    }
}

// ---------------------------------------------------------------- criterion 3

fn median_oracle(signal: &[f64], window: usize) -> Vec<f64> {
    let n = signal.len();
    let largest_odd = if n % 2 == 1 { n } else { n - 1 };
    let w = window.min(largest_odd);
    let half = (w / 2) as isize;
    (0..n as isize)
        .map(|i| {
            let mut v: Vec<f64> = (-half..=half)
                .map(|k| signal[(i + k).clamp(0, n as isize - 1) as usize])
                .collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect()
}

fn criterion_3() -> Verdict {
    let mut r = rng(3);
    let (mut mismatches, mut clamped, mut ties) = (0, 0, 0);
    for case in 0..1000 {
        let n = r.gen_range(1..=500);
        let w = 2 * r.gen_range(0..=40) + 1;
        // every fourth signal is quantized so ties are common
        let signal: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = r.gen_range(-1.0..1.0);
                if case % 4 == 0 {
                    (v * 3.0).round()
                } else {
                    v
                }
            })
            .collect();
        if w > n {
            clamped += 1;
        }
        if case % 4 == 0 {
            ties += 1;
        }
        if median_filter(&signal, w).unwrap() != median_oracle(&signal, w) {
            mismatches += 1;
        }
    }
    let even_rejected = median_filter(&[1.0, 2.0, 3.0], 2).is_err();
    verdict(
        mismatches == 0 && even_rejected && clamped > 0,
        format!("1000 signals, {mismatches} mismatches vs sort-and-pick ({clamped} clamped windows, {ties} tie-heavy); even window rejected: {even_rejected}"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn all_specs() -> Vec<(String, ArchitectureSpec)> {
    use Variant::*;
    let mut out: Vec<(String, ArchitectureSpec)> = [
        (Backbone::Vgg, CnnOnly),
        (Backbone::Vgg, Basic),
        (Backbone::Vgg, OneRnn),
        (Backbone::Vgg, TwoRnn),
        (Backbone::Vgg, TwoRnnFc),
        (Backbone::Vgg, ThreeRnn),
        (Backbone::Vgg, ThreeRnnFc),
        (Backbone::Resnet, Basic),
        (Backbone::Resnet, FcRnn),
    ]
    .into_iter()
    .map(|(b, v)| (format!("{b} {v}"), ArchitectureSpec::new(b, v)))
    .collect();
    out.insert(
        6,
        (
            "vgg 3rnn (penultimate tap)".into(),
            ArchitectureSpec::new(Backbone::Vgg, ThreeRnn).with_conv_tap(ConvTap::Penultimate),
        ),
    );
    for branch_fc in [false, true] {
        for fusion_fc in [false, true] {
            let mut s = ArchitectureSpec::new(Backbone::Vgg, Fusion);
            s.fusion_branch_fc = branch_fc;
            s.fusion_fc = fusion_fc;
            out.push((format!("fusion branch_fc={branch_fc} fusion_fc={fusion_fc}"), s));
        }
    }
    out
}

/// VGG feature-map extents from the block layout: four pools before the
/// last conv block, five before the last pool.
fn vgg_widths(side: usize, scale: Scale) -> (usize, usize, usize) {
    let ch = scale.apply(512);
    let conv_last = (side >> 4) * (side >> 4) * ch;
    let pool_last = (side >> 5) * (side >> 5) * ch;
    (conv_last, pool_last, scale.apply(4096))
}

fn criterion_4() -> Verdict {
    let mut problems = Vec::new();
    let mut built = 0;
    for (scale, side) in [(Scale::new(1, 1).unwrap(), 96), (Scale::new(1, 8).unwrap(), 32)] {
        let (conv_last, pool_last, fc1) = vgg_widths(side, scale);
        for (name, spec) in all_specs() {
            let spec = spec.with_scale(scale, side);
            let net = match build(&spec) {
                Ok(n) => n,
                Err(e) => {
                    problems.push(format!("{name} at {scale}: {e}"));
                    continue;
                }
            };
            built += 1;
            let head = |h: &str| net.rnn_heads().iter().find(|x| x.name == h).map(|x| x.input_width);
            let expect = match spec.variant {
                Variant::OneRnn => vec![("rnn", conv_last + pool_last + fc1)],
                Variant::Basic if spec.backbone == Backbone::Vgg => vec![("rnn", fc1)],
                Variant::TwoRnn => vec![("rnn_pool", pool_last), ("rnn_fc", fc1)],
                Variant::ThreeRnn => vec![("rnn_conv", conv_last), ("rnn_pool", pool_last), ("rnn_fc", fc1)],
                _ => vec![],
            };
            for (h, w) in expect {
                if head(h) != Some(w) {
                    problems.push(format!("{name} at {scale}: head {h} width {:?} != {w}", head(h)));
                }
            }
            if spec.backbone == Backbone::Vgg && spec.variant != Variant::Fusion {
                let pool = net.tap_shape("pool_last").map(<[usize]>::to_vec);
                let c = scale.apply(512);
                if pool != Some(vec![side >> 5, side >> 5, c]) {
                    problems.push(format!("{name} at {scale}: pool_last {pool:?}"));
                }
            }
        }
    }
    let full_1rnn = build(&ArchitectureSpec::new(Backbone::Vgg, Variant::OneRnn))
        .unwrap()
        .rnn_heads()[0]
        .input_width;
    let full_pool = build(&ArchitectureSpec::new(Backbone::Vgg, Variant::CnnOnly))
        .unwrap()
        .tap_shape("pool_last")
        .unwrap()
        .to_vec();
    if full_1rnn != 27136 || full_pool != [3, 3, 512] {
        problems.push(format!("1rnn concat {full_1rnn}, last pool {full_pool:?}"));
    }
    verdict(
        problems.is_empty() && built == 28,
        format!(
            "{built}/28 networks built (14 configurations at scale 1 and 1/8); full-scale 1rnn concat width {full_1rnn}, last pool {full_pool:?}{}",
            join_problems(&problems)
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        utterances: 16,
        frames_min: 16,
        frames_max: 16,
        side: 32,
        seed: 7,
        format: SynthFormat::Raw,
        ..SynthConfig::default()
    };
    let ds = Dataset::load(synth_corpus(dir.path(), &synth).unwrap(), 32, 3, 16).unwrap();
    let arch = ArchitectureSpec::new(Backbone::Vgg, Variant::ThreeRnn).with_scale(Scale::new(1, 8).unwrap(), 32);
    let cfg = TrainConfig {
        arch,
        aggregator: Aggregator::Median,
        learning_rate: 0.001,
        batch_size: 4,
        seq_len: 16,
        epochs: OVERFIT_EPOCHS,
        seed: 7,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let mut reached = None;
    let mut last = (0.0, 0.0);
    for _ in 0..OVERFIT_EPOCHS {
        let rep = t.run_epoch(&ds, None).unwrap();
        last = (rep.ccc_valence, rep.ccc_arousal);
        if rep.ccc_valence >= OVERFIT_TARGET && rep.ccc_arousal >= OVERFIT_TARGET {
            reached = Some(rep.epoch);
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();

    // determinism: a second run reproduces the first epochs' log exactly
    let mut again = Trainer::new(cfg).unwrap();
    for _ in 0..2 {
        again.run_epoch(&ds, None).unwrap();
    }
    let prefix = again.log.to_text();
    let deterministic = t.log.to_text().starts_with(&prefix);
    verdict(
        reached.is_some() && secs < OVERFIT_BUDGET_SECS && deterministic,
        format!(
            "training CCC v={:.4} a={:.4} (target {OVERFIT_TARGET}) at epoch {} of {OVERFIT_EPOCHS} in {secs:.1}s; rerun log identical: {deterministic}",
            last.0,
            last.1,
            reached.map_or("none".to_string(), |e| e.to_string()),
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Verdict {
    let mut r = rng(6);
    let ranges = LabelRanges::default();
    let utterances = 40;
    let gold: Vec<UtterancePrediction> = (0..utterances)
        .map(|i| UtterancePrediction::new(format!("v{:02}/u{}", i / 4, i % 4), r.gen_range(-0.8..0.8), r.gen_range(0.1..0.9)))
        .collect();
    let lengths: Vec<usize> = (0..utterances).map(|i| if i % 5 == 0 { 8 } else { r.gen_range(60..240) }).collect();
    let clean: Vec<FrameTrack> = gold
        .iter()
        .zip(&lengths)
        .map(|(g, &n)| FrameTrack::new(g.id.clone(), vec![[g.valence, g.arousal]; n]))
        .collect();
    let noisy: Vec<FrameTrack> = clean
        .iter()
        .map(|t| {
            let mut values = t.values.clone();
            let hits = (values.len() as f64 * 0.05).round() as usize;
            for _ in 0..hits {
                let i = r.gen_range(0..values.len());
                values[i][0] = if r.gen_bool(0.5) { 1.0 } else { -1.0 } * r.gen_range(3.0..6.0);
            }
            FrameTrack::new(t.id.clone(), values)
        })
        .collect();

    let mean_cfg = PostprocConfig {
        aggregator: Aggregator::Mean.to_string(),
        smoothing: None,
        ..PostprocConfig::default()
    };
    let score = |tracks: &[FrameTrack]| -> Vec<UtterancePrediction> {
        tracks.iter().map(|t| utterance_score(t, Aggregator::Mean, &ranges).unwrap()).collect()
    };
    let before = evaluate(&score(&noisy), &gold).unwrap().ccc_valence;
    let filtered = run_postprocess(&noisy, &mean_cfg, None).unwrap().predictions;
    let after = evaluate(&filtered, &gold).unwrap().ccc_valence;

    let runner = run_postprocess(&clean, &PostprocConfig::default(), Some(&gold)).unwrap();
    let plain: Vec<UtterancePrediction> = clean
        .iter()
        .map(|t| utterance_score(t, Aggregator::Median, &ranges).unwrap())
        .collect();
    let unchanged = runner.predictions == plain;
    verdict(
        after > before && unchanged,
        format!(
            "impulse noise on 5% of frames: valence CCC {before:.4} -> {after:.4} with window 81; clean tracks unchanged by keep-if-improved runner: {unchanged}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_affectkit"))
        .args(args)
        .env("AFFECTKIT_THREADS", "1")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn read_labels(manifest: &Path) -> Vec<(String, f64, f64)> {
    fs::read_to_string(manifest)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

fn criterion_7() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel).to_string_lossy().into_owned();
    fs::write(
        p("run.cfg"),
        "[arch]\nvariant = 3rnn\nscale = 1/8\ninput_side = 32\n[train]\nseq_len = 16\nepochs = 10\nseed = 7\n",
    )
    .unwrap();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("synth", vec!["synth".into(), "--out".into(), p("data"), "--utterances".into(), "8".into(), "--frames-min".into(), "16".into(), "--frames-max".into(), "40".into(), "--seed".into(), "7".into()]),
        ("train", vec!["train".into(), "--config".into(), p("run.cfg"), "--train".into(), p("data/manifest.csv"), "--out".into(), p("run")]),
        ("predict", vec!["predict".into(), "--checkpoint".into(), p("run/best.ckpt"), "--manifest".into(), p("data/manifest.csv"), "--out".into(), p("run/tracks.bin")]),
        ("postprocess", vec!["postprocess".into(), "--tracks".into(), p("run/tracks.bin"), "--out".into(), p("run/preds.csv")]),
        ("eval", vec!["eval".into(), "--preds".into(), p("run/preds.csv"), "--gold".into(), p("data/manifest.csv"), "--out".into(), p("run/report.json")]),
    ];
    for (name, args) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, text) = cli(&args);
        if code != 0 {
            return verdict(false, format!("{name} exited {code}: {}", text.trim()));
        }
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("run/report.json")).unwrap()).unwrap();
    let preds: std::collections::HashMap<String, (f64, f64)> = fs::read_to_string(p("run/preds.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), (f[1].parse().unwrap(), f[2].parse().unwrap()))
        })
        .collect();
    let gold = read_labels(Path::new(&p("data/manifest.csv")));
    let pv: Vec<f64> = gold.iter().map(|g| preds[&g.0].0).collect();
    let pa: Vec<f64> = gold.iter().map(|g| preds[&g.0].1).collect();
    let gv: Vec<f64> = gold.iter().map(|g| g.1).collect();
    let ga: Vec<f64> = gold.iter().map(|g| g.2).collect();
    let (ov, oa) = (ccc_oracle(&pv, &gv), ccc_oracle(&pa, &ga));
    let (rv, ra) = (report["ccc_valence"].as_f64().unwrap(), report["ccc_arousal"].as_f64().unwrap());
    let ok = (rv - ov).abs() < REPORT_TOL && (ra - oa).abs() < REPORT_TOL && report["utterances"] == 8;
    verdict(
        ok,
        format!("synth -> train -> predict -> postprocess -> eval all exit 0; report ccc_v={rv:.6} ccc_a={ra:.6}, oracle {ov:.6}/{oa:.6} (tol {REPORT_TOL:e})"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Verdict {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = fs::read_to_string(&readme).unwrap_or_default();
    let needles = ["not reproducible", "0.491", "0.311", "0.23", "0.12", "OMG-Emotion", "Aff-Wild"];
    let missing: Vec<&str> = needles.iter().copied().filter(|n| !text.contains(n)).collect();
    verdict(
        missing.is_empty(),
        if missing.is_empty() {
            "README states that the published validation scores are not reproducible here and why".to_string()
        } else {
            format!("README.md lacks {missing:?}")
        },
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 8] = [
        ("gradient correctness", criterion_1),
        ("CCC oracle equivalence", criterion_2),
        ("median-filter oracle equivalence", criterion_3),
        ("structural conformance", criterion_4),
        ("overfit capability", criterion_5),
        ("post-processing efficacy", criterion_6),
        ("pipeline round trip", criterion_7),
        ("non-reproducibility statement", criterion_8),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!("criterion {} {}: {name}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
