use std::fmt;
use std::str::FromStr;

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Vgg,
    Resnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    CnnOnly,
    Basic,
    OneRnn,
    TwoRnn,
    TwoRnnFc,
    ThreeRnn,
    ThreeRnnFc,
    FcRnn,
    Fusion,
}

/// Which block-5 convolution feeds the conv head of the three-RNN variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvTap {
    Last,
    Penultimate,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

string_enum!(Backbone { Vgg => "vgg", Resnet => "resnet" });
string_enum!(Variant {
    CnnOnly => "cnn-only",
    Basic => "basic",
    OneRnn => "1rnn",
    TwoRnn => "2rnn",
    TwoRnnFc => "2rnn-fc",
    ThreeRnn => "3rnn",
    ThreeRnnFc => "3rnn-fc",
    FcRnn => "fc-rnn",
    Fusion => "fusion",
});
string_enum!(ConvTap { Last => "last", Penultimate => "penultimate" });

/// Width multiplier `num / den`, at most 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scale {
    num: u64,
    den: u64,
}

impl Scale {
    pub const FULL: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self, ModelError> {
        if num == 0 || den == 0 || num > den {
            return Err(ModelError::Spec(format!("scale {num}/{den} must lie in (0, 1]")));
        }
        Ok(Self { num, den })
    }

    /// `max(1, round(scale · full))`, rounding half up, in exact integer arithmetic.
    pub fn apply(self, full: usize) -> usize {
        let full = full as u64;
        (((2 * self.num * full + self.den) / (2 * self.den)) as usize).max(1)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Scale {
    type Err = String;

    /// Accepts `a/b`, an integer, or a terminating decimal such as `0.125`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("invalid scale `{s}` (expected a/b or a decimal in (0, 1])");
        let (num, den) = if let Some((a, b)) = s.split_once('/') {
            (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)
        } else if let Some((int, frac)) = s.split_once('.') {
            if frac.len() > 12 || !frac.chars().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            let den = 10u64.pow(frac.len() as u32);
            let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
            let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
            (int.checked_mul(den).and_then(|v| v.checked_add(frac_v)).ok_or_else(bad)?, den)
        } else {
            (s.parse().map_err(|_| bad())?, 1)
        };
        let g = gcd(num, den);
        let (num, den) = num.checked_div(g).zip(den.checked_div(g)).unwrap_or((num, den));
        Scale::new(num, den).map_err(|e| e.to_string())
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Declarative description of one network.
///
/// For `variant = fusion` the two branches are derived from this spec: a
/// VGG CNN-FC-RNN and a ResNet RNN, the latter with a pre-GRU FC when
/// `fusion_branch_fc` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub backbone: Backbone,
    pub variant: Variant,
    pub conv_tap: ConvTap,
    pub fusion_fc: bool,
    pub fusion_branch_fc: bool,
    pub scale: Scale,
    pub input_side: usize,
    pub channels: usize,
    pub rnn_width: usize,
    pub fusion_fc_width: usize,
    pub fc_dropout: f64,
    pub rnn_dropout: f64,
    /// Bottleneck blocks per ResNet stage.
    pub resnet_blocks: [usize; 4],
    /// 1×1 projection on shortcuts whose shape changes.
    pub resnet_projection: bool,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            backbone: Backbone::Vgg,
            variant: Variant::Basic,
            conv_tap: ConvTap::Last,
            fusion_fc: false,
            fusion_branch_fc: false,
            scale: Scale::FULL,
            input_side: 96,
            channels: 3,
            rnn_width: 128,
            fusion_fc_width: 64,
            fc_dropout: 0.5,
            rnn_dropout: 0.2,
            resnet_blocks: [3, 4, 6, 3],
            resnet_projection: true,
        }
    }
}

impl ArchitectureSpec {
    pub fn new(backbone: Backbone, variant: Variant) -> Self {
        Self {
            backbone,
            variant,
            ..Self::default()
        }
    }

    pub fn with_scale(mut self, scale: Scale, input_side: usize) -> Self {
        self.scale = scale;
        self.input_side = input_side;
        self
    }

    pub fn with_conv_tap(mut self, tap: ConvTap) -> Self {
        self.conv_tap = tap;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        use Variant::*;
        let ok = matches!(
            (self.variant, self.backbone),
            (Fusion | Basic, _)
                | (CnnOnly | OneRnn | TwoRnn | TwoRnnFc | ThreeRnn | ThreeRnnFc, Backbone::Vgg)
                | (FcRnn, Backbone::Resnet)
        );
        if !ok {
            return Err(ModelError::Spec(format!(
                "variant {} is not defined for the {} backbone",
                self.variant, self.backbone
            )));
        }
        let uses_vgg = self.variant == Fusion || self.backbone == Backbone::Vgg;
        if uses_vgg && (self.input_side == 0 || !self.input_side.is_multiple_of(32)) {
            return Err(ModelError::Spec(format!(
                "input_side {} must be a positive multiple of 32 for the vgg backbone",
                self.input_side
            )));
        }
        if self.input_side == 0 || self.channels == 0 || self.rnn_width == 0 || self.fusion_fc_width == 0 {
            return Err(ModelError::Spec("extents must be positive".into()));
        }
        for p in [self.fc_dropout, self.rnn_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Spec(format!("dropout {p} outside [0, 1)")));
            }
        }
        if self.resnet_blocks.contains(&0) {
            return Err(ModelError::Spec("every resnet stage needs at least one block".into()));
        }
        Ok(())
    }

    /// Plain `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("backbone", self.backbone.to_string()),
            ("variant", self.variant.to_string()),
            ("conv_tap", self.conv_tap.to_string()),
            ("fusion_fc", self.fusion_fc.to_string()),
            ("fusion_branch_fc", self.fusion_branch_fc.to_string()),
            ("scale", self.scale.to_string()),
            ("input_side", self.input_side.to_string()),
            ("channels", self.channels.to_string()),
            ("rnn_width", self.rnn_width.to_string()),
            ("fusion_fc_width", self.fusion_fc_width.to_string()),
            ("fc_dropout", self.fc_dropout.to_string()),
            ("rnn_dropout", self.rnn_dropout.to_string()),
            (
                "resnet_blocks",
                self.resnet_blocks.map(|b| b.to_string()).join(","),
            ),
            ("resnet_projection", self.resnet_projection.to_string()),
        ]
    }

    /// Apply one `key=value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .trim()
                .parse()
                .map_err(|_| format!("{key}: cannot parse `{value}`"))
        }
        let value = value.trim();
        match key {
            "backbone" => self.backbone = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "variant" => self.variant = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "conv_tap" => self.conv_tap = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "fusion_fc" => self.fusion_fc = parse(key, value)?,
            "fusion_branch_fc" => self.fusion_branch_fc = parse(key, value)?,
            "scale" => self.scale = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "input_side" => self.input_side = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "rnn_width" => self.rnn_width = parse(key, value)?,
            "fusion_fc_width" => self.fusion_fc_width = parse(key, value)?,
            "fc_dropout" | "rnn_dropout" => {
                let p: f64 = parse(key, value)?;
                if !(0.0..1.0).contains(&p) {
                    return Err(format!("{key}: {p} outside [0, 1)"));
                }
                if key == "fc_dropout" {
                    self.fc_dropout = p;
                } else {
                    self.rnn_dropout = p;
                }
            }
            "resnet_blocks" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p))
                    .collect::<Result<_, _>>()?;
                self.resnet_blocks = parts
                    .try_into()
                    .map_err(|_| format!("{key}: expected four comma-separated counts"))?;
            }
            "resnet_projection" => self.resnet_projection = parse(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, String> {
        let mut spec = Self::default();
        for (k, v) in pairs {
            spec.set(k, v)?;
        }
        Ok(spec)
    }

    /// The VGG CNN-FC-RNN branch of a fusion spec.
    pub fn fusion_branch_a(&self) -> Self {
        Self {
            backbone: Backbone::Vgg,
            variant: Variant::Basic,
            fusion_fc: false,
            fusion_branch_fc: false,
            ..self.clone()
        }
    }

    /// The ResNet branch of a fusion spec.
    pub fn fusion_branch_b(&self) -> Self {
        Self {
            backbone: Backbone::Resnet,
            variant: if self.fusion_branch_fc { Variant::FcRnn } else { Variant::Basic },
            fusion_fc: false,
            fusion_branch_fc: false,
            ..self.clone()
        }
    }
}
