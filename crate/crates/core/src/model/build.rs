use super::params::{Init, ParamSpec};
use super::spec::{ArchitectureSpec, Backbone, ConvTap, Variant};
use super::{Layer, ModelError, Network, RnnHead, Slot};
use crate::tensor::Padding;

const VGG_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
const FC1_WIDTH: usize = 4096;
const FC2_WIDTH: usize = 2048;
const RESNET_STEM: usize = 64;
const RESNET_STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;
const OUTPUTS: usize = 2;

struct Builder {
    prefix: String,
    params: Vec<ParamSpec>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    taps: Vec<(String, Slot)>,
    heads: Vec<RnnHead>,
}

impl Builder {
    fn new(spec: &ArchitectureSpec) -> Self {
        Self {
            prefix: String::new(),
            params: Vec::new(),
            layers: Vec::new(),
            shapes: vec![vec![spec.input_side, spec.input_side, spec.channels]],
            taps: Vec::new(),
            heads: Vec::new(),
        }
    }

    fn scoped<T>(
        &mut self,
        scope: &str,
        f: impl FnOnce(&mut Self) -> Result<T, ModelError>,
    ) -> Result<T, ModelError> {
        let saved = self.prefix.clone();
        self.prefix.push_str(scope);
        self.prefix.push('.');
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn name(&self, local: &str) -> String {
        format!("{}{local}", self.prefix)
    }

    fn param(&mut self, local: &str, shape: Vec<usize>, init: Init) -> usize {
        self.params.push(ParamSpec {
            name: self.name(local),
            shape,
            init,
        });
        self.params.len() - 1
    }

    fn push(&mut self, layer: Layer, shape: Vec<usize>) -> Slot {
        self.layers.push(layer);
        self.shapes.push(shape);
        self.layers.len()
    }

    fn tap(&mut self, local: &str, slot: Slot) {
        let name = self.name(local);
        self.taps.push((name, slot));
    }

    fn shape_err(&self, local: &str, detail: String) -> ModelError {
        ModelError::Shape {
            layer: self.name(local),
            detail,
        }
    }

    fn spatial(&self, local: &str, input: Slot) -> Result<(usize, usize, usize), ModelError> {
        match *self.shapes[input].as_slice() {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(self.shape_err(local, format!("expected a feature map, got {s:?}"))),
        }
    }

    fn flat(&self, local: &str, input: Slot) -> Result<usize, ModelError> {
        match *self.shapes[input].as_slice() {
            [n] => Ok(n),
            ref s => Err(self.shape_err(local, format!("expected a flat vector, got {s:?}"))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        local: &str,
        input: Slot,
        cout: usize,
        k: usize,
        stride: usize,
        relu: bool,
        gain: f64,
    ) -> Result<Slot, ModelError> {
        let (h, w, cin) = self.spatial(local, input)?;
        let pad = (k - 1) / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(self.shape_err(local, format!("{k}×{k} kernel exceeds {h}×{w} input")));
        }
        let out = |e: usize| (e + 2 * pad - k) / stride + 1;
        let shape = vec![out(h), out(w), cout];
        let kernel = self.param(
            &format!("{local}.w"),
            vec![k, k, cin, cout],
            Init::FanIn {
                fan_in: k * k * cin,
                gain,
            },
        );
        let bias = self.param(&format!("{local}.b"), vec![cout], Init::Zeros);
        Ok(self.push(
            Layer::Conv {
                input,
                kernel,
                bias,
                stride,
                padding: Padding::Same,
                relu,
            },
            shape,
        ))
    }

    fn pool(&mut self, local: &str, input: Slot, k: usize, stride: usize) -> Result<Slot, ModelError> {
        let (h, w, c) = self.spatial(local, input)?;
        if h < k || w < k {
            return Err(self.shape_err(local, format!("{k}×{k} pool exceeds {h}×{w} input")));
        }
        let shape = vec![(h - k) / stride + 1, (w - k) / stride + 1, c];
        Ok(self.push(Layer::Pool { input, k, stride }, shape))
    }

    fn flatten(&mut self, input: Slot) -> Slot {
        if self.shapes[input].len() == 1 {
            return input;
        }
        let n = self.shapes[input].iter().product();
        self.push(Layer::Flatten { input }, vec![n])
    }

    fn dense(&mut self, local: &str, input: Slot, n_out: usize, relu: bool) -> Result<Slot, ModelError> {
        let n_in = self.flat(local, input)?;
        let weight = self.param(
            &format!("{local}.w"),
            vec![n_in, n_out],
            Init::FanIn {
                fan_in: n_in,
                gain: 1.0,
            },
        );
        let bias = self.param(&format!("{local}.b"), vec![n_out], Init::Zeros);
        Ok(self.push(
            Layer::Dense {
                input,
                weight,
                bias,
                relu,
            },
            vec![n_out],
        ))
    }

    fn dropout(&mut self, input: Slot, p: f64) -> Slot {
        let shape = self.shapes[input].clone();
        self.push(Layer::Dropout { input, p }, shape)
    }

    fn residual(&mut self, local: &str, a: Slot, b: Slot) -> Result<Slot, ModelError> {
        if self.shapes[a] != self.shapes[b] {
            return Err(self.shape_err(
                local,
                format!(
                    "shortcut shape {:?} does not match residual branch {:?}",
                    self.shapes[a], self.shapes[b]
                ),
            ));
        }
        let shape = self.shapes[a].clone();
        Ok(self.push(Layer::Residual { a, b }, shape))
    }

    fn concat(&mut self, local: &str, inputs: Vec<Slot>) -> Result<Slot, ModelError> {
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let mut total = 0;
        for &s in &inputs {
            total += self.flat(local, s)?;
        }
        Ok(self.push(Layer::Concat { inputs }, vec![total]))
    }

    fn gru(&mut self, local: &str, input: Slot, m: usize) -> Result<Slot, ModelError> {
        let n = self.flat(local, input)?;
        let w = self.param(
            &format!("{local}.w"),
            vec![n, 3 * m],
            Init::Uniform {
                bound: 1.0 / (n as f64).sqrt(),
            },
        );
        let u = self.param(
            &format!("{local}.u"),
            vec![m, 3 * m],
            Init::Uniform {
                bound: 1.0 / (m as f64).sqrt(),
            },
        );
        let b = self.param(&format!("{local}.b"), vec![3 * m], Init::Zeros);
        Ok(self.push(Layer::Gru { input, w, u, b }, vec![m]))
    }

    /// Two stacked GRU layers with dropout between them, fed by the
    /// flattened concatenation of `inputs` (tap names).
    fn rnn_head(&mut self, local: &str, inputs: &[&str], spec: &ArchitectureSpec) -> Result<Slot, ModelError> {
        let mut slots = Vec::with_capacity(inputs.len());
        let mut names = Vec::with_capacity(inputs.len());
        for &tap in inputs {
            let full = self.name(tap);
            let slot = self
                .taps
                .iter()
                .find(|(n, _)| *n == full)
                .map(|&(_, s)| s)
                .ok_or_else(|| self.shape_err(local, format!("unknown tap `{full}`")))?;
            slots.push(self.flatten(slot));
            names.push(full);
        }
        let x = self.concat(local, slots)?;
        let input_width = self.flat(local, x)?;
        let l1 = self.gru(&format!("{local}.l1"), x, spec.rnn_width)?;
        let mid = self.dropout(l1, spec.rnn_dropout);
        let l2 = self.gru(&format!("{local}.l2"), mid, spec.rnn_width)?;
        self.heads.push(RnnHead {
            name: self.name(local),
            inputs: names,
            input_width,
        });
        self.tap(local, l2);
        Ok(l2)
    }

    /// Concatenate `inputs`, optionally pass a ReLU FC, then the linear
    /// two-unit output layer.
    fn output(
        &mut self,
        inputs: Vec<Slot>,
        fc_name: &str,
        fc_width: Option<usize>,
        out_name: &str,
    ) -> Result<Slot, ModelError> {
        let mut x = self.concat(out_name, inputs)?;
        if let Some(width) = fc_width {
            x = self.dense(fc_name, x, width, true)?;
            self.tap(fc_name, x);
        }
        self.dense(out_name, x, OUTPUTS, false)
    }

    fn finish(self, spec: ArchitectureSpec) -> Result<Network, ModelError> {
        let out = self.shapes.last().expect("input slot always present");
        if out.as_slice() != [OUTPUTS] {
            return Err(ModelError::Shape {
                layer: "output".into(),
                detail: format!("network must emit {OUTPUTS} values per frame, got {out:?}"),
            });
        }
        Ok(Network {
            spec,
            params: self.params,
            layers: self.layers,
            shapes: self.shapes,
            taps: self.taps,
            heads: self.heads,
        })
    }
}

/// Blocks 1–5 of the VGG trunk. Registers taps `conv_penultimate`,
/// `conv_last` (block 5, after ReLU) and `pool_last`.
fn vgg_trunk(b: &mut Builder, spec: &ArchitectureSpec) -> Result<Slot, ModelError> {
    let mut x = 0;
    let (mut penultimate, mut last) = (0, 0);
    b.scoped("vgg", |b| {
        for (block, &(convs, width)) in VGG_BLOCKS.iter().enumerate() {
            let width = spec.scale.apply(width);
            for c in 0..convs {
                x = b.conv(&format!("b{}.c{}", block + 1, c + 1), x, width, 3, 1, true, 1.0)?;
                if c + 2 == convs {
                    penultimate = x;
                }
            }
            last = x;
            x = b.pool(&format!("b{}.pool", block + 1), x, 2, 2)?;
        }
        Ok(())
    })?;
    b.tap("conv_penultimate", penultimate);
    b.tap("conv_last", last);
    b.tap("pool_last", x);
    Ok(x)
}

/// VGG trunk plus FC1 and its dropout; the post-dropout output is tap `fc1`.
fn vgg_features(b: &mut Builder, spec: &ArchitectureSpec) -> Result<Slot, ModelError> {
    let pool = vgg_trunk(b, spec)?;
    let flat = b.flatten(pool);
    let fc1 = b.dense("fc1", flat, spec.scale.apply(FC1_WIDTH), true)?;
    let fc1 = b.dropout(fc1, spec.fc_dropout);
    b.tap("fc1", fc1);
    Ok(fc1)
}

/// Stem, pool and four bottleneck stages. The flattened final map is tap
/// `features`; with `with_fc` a ReLU FC plus dropout follows as tap `fc`.
fn resnet_features(b: &mut Builder, spec: &ArchitectureSpec, with_fc: bool) -> Result<Slot, ModelError> {
    let total_blocks: usize = spec.resnet_blocks.iter().sum();
    let branch_gain = 1.0 / (total_blocks as f64).sqrt();
    let mut x = 0;
    b.scoped("resnet", |b| {
        x = b.conv("stem", x, spec.scale.apply(RESNET_STEM), 7, 2, true, 1.0)?;
        b.tap("stem", x);
        x = b.pool("pool", x, 3, 2)?;
        b.tap("pool", x);
        for (stage, (&width, &blocks)) in RESNET_STAGE_WIDTHS.iter().zip(&spec.resnet_blocks).enumerate() {
            let mid = spec.scale.apply(width);
            let out = EXPANSION * mid;
            for block in 0..blocks {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                let name = format!("s{}.b{}", stage + 1, block);
                let c1 = b.conv(&format!("{name}.c1"), x, mid, 1, 1, true, 1.0)?;
                let c2 = b.conv(&format!("{name}.c2"), c1, mid, 3, stride, true, 1.0)?;
                let c3 = b.conv(&format!("{name}.c3"), c2, out, 1, 1, false, branch_gain)?;
                let shortcut = if b.shapes[x] != b.shapes[c3] && spec.resnet_projection {
                    b.conv(&format!("{name}.proj"), x, out, 1, stride, false, 1.0)?
                } else {
                    x
                };
                x = b.residual(&name, shortcut, c3)?;
                b.tap(&name, x);
            }
        }
        Ok(())
    })?;
    b.tap("features", x);
    let mut feat = b.flatten(x);
    if with_fc {
        feat = b.dense("fc", feat, spec.scale.apply(FC1_WIDTH), true)?;
        feat = b.dropout(feat, spec.fc_dropout);
        b.tap("fc", feat);
    }
    Ok(feat)
}

fn require(cond: bool, what: &str, spec: &ArchitectureSpec) -> Result<(), ModelError> {
    if cond {
        Ok(())
    } else {
        Err(ModelError::Spec(format!(
            "{what} cannot build backbone {} variant {}",
            spec.backbone, spec.variant
        )))
    }
}

/// VGG CNN without recurrence: FC1 → FC2 → two outputs.
pub fn build_vgg_cnn(spec: &ArchitectureSpec) -> Result<Network, ModelError> {
    spec.validate()?;
    require(
        spec.backbone == Backbone::Vgg && spec.variant == Variant::CnnOnly,
        "build_vgg_cnn",
        spec,
    )?;
    let mut b = Builder::new(spec);
    let fc1 = vgg_features(&mut b, spec)?;
    let fc2 = b.dense("fc2", fc1, spec.scale.apply(FC2_WIDTH), true)?;
    let fc2 = b.dropout(fc2, spec.fc_dropout);
    b.tap("fc2", fc2);
    b.dense("out", fc2, OUTPUTS, false)?;
    b.finish(spec.clone())
}

/// VGG trunk → FC1 → two-layer GRU → two outputs.
pub fn build_basic_cnn_rnn(spec: &ArchitectureSpec) -> Result<Network, ModelError> {
    spec.validate()?;
    require(
        spec.backbone == Backbone::Vgg && spec.variant == Variant::Basic,
        "build_basic_cnn_rnn",
        spec,
    )?;
    let mut b = Builder::new(spec);
    vgg_basic_body(&mut b, spec)?;
    let rnn = b.tap_slot("rnn");
    b.output(vec![rnn], "head.fc", None, "out")?;
    b.finish(spec.clone())
}

fn vgg_basic_body(b: &mut Builder, spec: &ArchitectureSpec) -> Result<Slot, ModelError> {
    vgg_features(b, spec)?;
    b.rnn_head("rnn", &["fc1"], spec)
}

impl Builder {
    fn tap_slot(&self, local: &str) -> Slot {
        let full = self.name(local);
        self.taps
            .iter()
            .find(|(n, _)| *n == full)
            .map(|&(_, s)| s)
            .expect("tap registered by the caller")
    }
}

/// The multi-tap VGG variants: 1rnn, 2rnn, 2rnn-fc, 3rnn, 3rnn-fc.
pub fn build_multi_rnn(spec: &ArchitectureSpec) -> Result<Network, ModelError> {
    spec.validate()?;
    use Variant::*;
    require(
        spec.backbone == Backbone::Vgg && matches!(spec.variant, OneRnn | TwoRnn | TwoRnnFc | ThreeRnn | ThreeRnnFc),
        "build_multi_rnn",
        spec,
    )?;
    let mut b = Builder::new(spec);
    vgg_features(&mut b, spec)?;
    let conv_tap = match spec.conv_tap {
        ConvTap::Last => "conv_last",
        ConvTap::Penultimate => "conv_penultimate",
    };
    let heads = match spec.variant {
        OneRnn => vec![b.rnn_head("rnn", &["conv_last", "pool_last", "fc1"], spec)?],
        TwoRnn | TwoRnnFc => vec![
            b.rnn_head("rnn_pool", &["pool_last"], spec)?,
            b.rnn_head("rnn_fc", &["fc1"], spec)?,
        ],
        _ => vec![
            b.rnn_head("rnn_conv", &[conv_tap], spec)?,
            b.rnn_head("rnn_pool", &["pool_last"], spec)?,
            b.rnn_head("rnn_fc", &["fc1"], spec)?,
        ],
    };
    let fc = matches!(spec.variant, TwoRnnFc | ThreeRnnFc).then_some(spec.fusion_fc_width);
    b.output(heads, "head.fc", fc, "out")?;
    b.finish(spec.clone())
}

/// Bottleneck ResNet → [FC] → two-layer GRU → two outputs.
pub fn build_resnet_rnn(spec: &ArchitectureSpec) -> Result<Network, ModelError> {
    spec.validate()?;
    require(
        spec.backbone == Backbone::Resnet && matches!(spec.variant, Variant::Basic | Variant::FcRnn),
        "build_resnet_rnn",
        spec,
    )?;
    let mut b = Builder::new(spec);
    let rnn = resnet_body(&mut b, spec)?;
    b.output(vec![rnn], "head.fc", None, "out")?;
    b.finish(spec.clone())
}

fn resnet_body(b: &mut Builder, spec: &ArchitectureSpec) -> Result<Slot, ModelError> {
    let with_fc = spec.variant == Variant::FcRnn;
    resnet_features(b, spec, with_fc)?;
    b.rnn_head("rnn", &[if with_fc { "fc" } else { "features" }], spec)
}

/// Joint network over a VGG CNN-FC-RNN (`a`) and a ResNet RNN (`b`).
///
/// Both branches see the same frames, so they must agree on input side,
/// channels, scale and recurrent width. Branch parameters live under
/// `fusion.a.` and `fusion.b.` with the standalone names after the prefix;
/// the joint head lives under `fusion.head.`.
pub fn build_fusion(a: &ArchitectureSpec, b: &ArchitectureSpec, fusion_fc: bool) -> Result<Network, ModelError> {
    if a.backbone != Backbone::Vgg || a.variant != Variant::Basic {
        return Err(ModelError::Spec(format!(
            "fusion branch a must be a vgg basic network, got {} {}",
            a.backbone, a.variant
        )));
    }
    if b.backbone != Backbone::Resnet || !matches!(b.variant, Variant::Basic | Variant::FcRnn) {
        return Err(ModelError::Spec(format!(
            "fusion branch b must be a resnet basic or fc-rnn network, got {} {}",
            b.backbone, b.variant
        )));
    }
    let spec = ArchitectureSpec {
        variant: Variant::Fusion,
        conv_tap: ConvTap::Last,
        fusion_fc,
        fusion_branch_fc: b.variant == Variant::FcRnn,
        ..a.clone()
    };
    let plain = |s: &ArchitectureSpec| ArchitectureSpec {
        fusion_fc: false,
        fusion_branch_fc: false,
        conv_tap: ConvTap::Last,
        ..s.clone()
    };
    if plain(&spec.fusion_branch_b()) != plain(b) {
        return Err(ModelError::Spec(
            "fusion branches must share input side, channels, scale, widths and dropout".into(),
        ));
    }
    build(&spec)
}

fn build_fusion_spec(spec: &ArchitectureSpec) -> Result<Network, ModelError> {
    spec.validate()?;
    let (sa, sb) = (spec.fusion_branch_a(), spec.fusion_branch_b());
    let mut b = Builder::new(spec);
    let ga = b.scoped("fusion.a", |b| vgg_basic_body(b, &sa))?;
    let gb = b.scoped("fusion.b", |b| resnet_body(b, &sb))?;
    let fc = spec.fusion_fc.then_some(spec.fusion_fc_width);
    b.scoped("fusion", |b| b.output(vec![ga, gb], "head.fc", fc, "head.out"))?;
    b.finish(spec.clone())
}

/// Build whichever network `spec` describes.
pub fn build(spec: &ArchitectureSpec) -> Result<Network, ModelError> {
    spec.validate()?;
    use Variant::*;
    match (spec.variant, spec.backbone) {
        (Fusion, _) => build_fusion_spec(spec),
        (CnnOnly, _) => build_vgg_cnn(spec),
        (Basic, Backbone::Vgg) => build_basic_cnn_rnn(spec),
        (Basic | FcRnn, Backbone::Resnet) => build_resnet_rnn(spec),
        _ => build_multi_rnn(spec),
    }
}
