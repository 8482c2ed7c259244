//! Cross-domain degradation analysis: frequency features from the centered
//! log-amplitude spectrum, fused with spatial features by two cross-attention
//! passes into a per-pixel correction prompt and a global strategy prompt.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::nn::{Session, SpecBuilder};
use crate::scalar::Scalar;
use crate::spectral;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Image features, average-pooled to the frequency grid.
    Spatial,
    /// Frequency degradation features `D_f`.
    Frequency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Query,
    Key,
    Value,
}

impl Slot {
    fn tag(self) -> &'static str {
        match self {
            Slot::Query => "q",
            Slot::Key => "k",
            Slot::Value => "v",
        }
    }
}

/// Where one prompt's query, key and value come from, and which slot passes
/// through the non-linear projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptRouting {
    pub query: Source,
    pub key: Source,
    pub value: Source,
    pub projected: Slot,
}

impl PromptRouting {
    fn source(&self, slot: Slot) -> Source {
        match slot {
            Slot::Query => self.query,
            Slot::Key => self.key,
            Slot::Value => self.value,
        }
    }
}

/// The six Q/K/V routings compared for the two prompts. `A` is the routing of
/// the defining attention equations; `F` is the best-performing one and the
/// default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionPreset {
    A,
    B,
    C,
    D,
    E,
    #[default]
    F,
}

impl AttentionPreset {
    pub const ALL: [AttentionPreset; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F];

    /// `(correction, strategy)` routings. The correction prompt always projects
    /// its value and the strategy prompt its query.
    pub fn routing(self) -> (PromptRouting, PromptRouting) {
        use Source::{Frequency as Df, Spatial as I};
        let (ct, st) = match self {
            Self::A => ([I, I, Df], [I, Df, Df]),
            Self::B => ([Df, Df, I], [I, Df, Df]),
            Self::C => ([I, I, Df], [Df, I, I]),
            Self::D => ([I, I, Df], [I, I, Df]),
            Self::E => ([Df, Df, I], [Df, Df, I]),
            Self::F => ([Df, Df, I], [Df, I, I]),
        };
        let mk = |s: [Source; 3], projected| PromptRouting {
            query: s[0],
            key: s[1],
            value: s[2],
            projected,
        };
        (mk(ct, Slot::Value), mk(st, Slot::Query))
    }
}

impl fmt::Display for AttentionPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
            Self::E => "e",
            Self::F => "f",
        };
        f.write_str(c)
    }
}

impl FromStr for AttentionPreset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "a" => Self::A,
            "b" => Self::B,
            "c" => Self::C,
            "d" => Self::D,
            "e" => Self::E,
            "f" => Self::F,
            other => return Err(arg_err("attention_preset", format!("unknown preset {other:?} (expected a..f)"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CddaConfig {
    pub image_channels: usize,
    /// Channels of the decomposition features; the correction prompt matches it.
    pub feature_channels: usize,
    pub freq_channels: usize,
    pub prompt_dim: usize,
    pub strategy_dim: usize,
    pub preset: AttentionPreset,
}

impl Default for CddaConfig {
    fn default() -> Self {
        CddaConfig {
            image_channels: 3,
            feature_channels: 16,
            freq_channels: 16,
            prompt_dim: 32,
            strategy_dim: 32,
            preset: AttentionPreset::F,
        }
    }
}

/// Graph handles of the two prompts.
#[derive(Clone, Copy, Debug)]
pub struct Prompts {
    /// `[C, H, W]` per-pixel correction prompt.
    pub correction: Var,
    /// `[C_s]` global strategy prompt.
    pub strategy: Var,
}

/// Materialized prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair<S = f64> {
    pub correction: Tensor<S>,
    pub strategy: Tensor<S>,
}

impl Prompts {
    pub fn materialize<S: Scalar>(&self, g: &Graph<S>) -> PromptPair<S> {
        PromptPair {
            correction: g.value(self.correction).clone(),
            strategy: g.value(self.strategy).clone(),
        }
    }
}

pub const PREFIX: &str = "cdda";

#[derive(Clone, Debug)]
pub struct Cdda {
    pub config: CddaConfig,
}

impl Cdda {
    pub fn new(config: CddaConfig) -> Self {
        Cdda { config }
    }

    fn source_channels(&self, s: Source) -> usize {
        match s {
            Source::Spatial => self.config.image_channels,
            Source::Frequency => self.config.freq_channels,
        }
    }

    pub fn declare(&self, b: &mut SpecBuilder) {
        let c = &self.config;
        b.conv(&format!("{PREFIX}.freq.conv1"), 1, c.freq_channels, 3, true);
        b.conv(&format!("{PREFIX}.freq.conv2"), c.freq_channels, c.freq_channels, 3, true);
        let (ct, st) = c.preset.routing();
        for (tag, routing, out_dim) in [("ct", ct, c.feature_channels), ("st", st, c.strategy_dim)] {
            for slot in [Slot::Query, Slot::Key, Slot::Value] {
                let src = self.source_channels(routing.source(slot));
                let d_in = if slot == routing.projected {
                    let phi = format!("{PREFIX}.{tag}.phi");
                    declare_projection(b, &phi, src, c.prompt_dim);
                    c.prompt_dim
                } else {
                    src
                };
                b.linear(&format!("{PREFIX}.{tag}.{}", slot.tag()), d_in, c.prompt_dim);
            }
            b.linear(&format!("{PREFIX}.{tag}.out"), c.prompt_dim, out_dim);
        }
    }

    /// Frequency input for an image: centered `ln(1 + |F|)` of its luminance, `[1, H, W]`.
    pub fn spectrum_input<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
        let (_, h, w) = image.dims3()?;
        spectral::log_compress(&spectral::amplitude_map(image)?).reshape([1, h, w])
    }

    /// Full analyzer: image `[C_img, H, W]` to prompts at resolution `H x W`.
    pub fn forward<S: Scalar>(&self, sess: &mut Session<S>, image: Var) -> Result<Prompts> {
        let spec = Self::spectrum_input(sess.value(image))?;
        let m = sess.constant(spec)?;
        let df = freq_feature_extract(sess, m)?;
        self.generate_prompts(sess, image, df)
    }

    /// Fuses spatial features and `D_f` into the two prompts according to the preset.
    pub fn generate_prompts<S: Scalar>(&self, sess: &mut Session<S>, spatial: Var, df: Var) -> Result<Prompts> {
        let (_, h, w) = sess.value(spatial).dims3()?;
        let (_, fh, fw) = sess.value(df).dims3()?;
        if h < 4 || w < 4 || (h / 4, w / 4) != (fh, fw) {
            return Err(shape_err(
                "generate_prompts",
                format!("spatial {h}x{w} does not pool onto the frequency grid {fh}x{fw}"),
            ));
        }
        let pooled = sess.graph.avg_pool2d(spatial, 4)?;
        let (ct_route, st_route) = self.config.preset.routing();

        let ct = self.attend(sess, "ct", ct_route, pooled, df)?;
        let ct = sess.linear(ct, &format!("{PREFIX}.ct.out"))?;
        let ct = sess.graph.transpose(ct)?;
        let ct = sess.graph.reshape(ct, [self.config.feature_channels, fh, fw])?;
        let correction = sess.graph.resize_bilinear(ct, h, w)?;

        let st = self.attend(sess, "st", st_route, pooled, df)?;
        let st = sess.linear(st, &format!("{PREFIX}.st.out"))?;
        let st = sess.graph.transpose(st)?;
        let st = sess.graph.reshape(st, [self.config.strategy_dim, fh * fw, 1])?;
        let strategy = sess.graph.global_avg_pool(st)?;

        Ok(Prompts { correction, strategy })
    }

    fn attend<S: Scalar>(&self, sess: &mut Session<S>, tag: &str, routing: PromptRouting, spatial: Var, df: Var) -> Result<Var> {
        let mut qkv = [None; 3];
        for (i, slot) in [Slot::Query, Slot::Key, Slot::Value].into_iter().enumerate() {
            let mut map = match routing.source(slot) {
                Source::Spatial => spatial,
                Source::Frequency => df,
            };
            if slot == routing.projected {
                map = nonlinear_proj(sess, map, &format!("{PREFIX}.{tag}.phi"))?;
            }
            let tokens = to_tokens(&mut sess.graph, map)?;
            qkv[i] = Some(sess.linear(tokens, &format!("{PREFIX}.{tag}.{}", slot.tag()))?);
        }
        let [q, k, v] = qkv.map(|x| x.expect("all slots filled"));
        Ok(cross_attention(&mut sess.graph, q, k, v)?.output)
    }
}

pub(crate) fn declare_projection(b: &mut SpecBuilder, prefix: &str, c_in: usize, c_out: usize) {
    b.conv(&format!("{prefix}.conv1"), c_in, c_out, 3, true);
    b.conv(&format!("{prefix}.conv2"), c_out, c_out, 3, true);
    b.conv(&format!("{prefix}.conv3"), c_out, c_out, 3, true);
}

/// `[C, h, w]` map to `[h*w, C]` tokens.
pub fn to_tokens<S: Scalar>(g: &mut Graph<S>, map: Var) -> Result<Var> {
    let (c, h, w) = g.value(map).dims3()?;
    let flat = g.reshape(map, [c, h * w])?;
    g.transpose(flat)
}

/// conv3x3, ReLU, 2x2 max-pool, conv3x3, ReLU, 2x2 max-pool over the
/// log-amplitude map, using `cdda.freq.conv{1,2}`.
pub fn freq_feature_extract<S: Scalar>(sess: &mut Session<S>, m: Var) -> Result<Var> {
    let (c, h, w) = sess.value(m).dims3()?;
    if c != 1 {
        return Err(shape_err("freq_feature_extract", format!("expected one channel, got {c}")));
    }
    if h < 4 || w < 4 {
        return Err(shape_err("freq_feature_extract", format!("amplitude map {h}x{w} smaller than 4x4")));
    }
    let x = sess.conv_relu(m, &format!("{PREFIX}.freq.conv1"), 1)?;
    let x = sess.graph.max_pool2d(x, 2, 2)?;
    let x = sess.conv_relu(x, &format!("{PREFIX}.freq.conv2"), 1)?;
    sess.graph.max_pool2d(x, 2, 2)
}

/// Three 3x3 convolutions with ReLU between them; spatial extents preserved.
pub fn nonlinear_proj<S: Scalar>(sess: &mut Session<S>, x: Var, prefix: &str) -> Result<Var> {
    let x = sess.conv_relu(x, &format!("{prefix}.conv1"), 1)?;
    let x = sess.conv_relu(x, &format!("{prefix}.conv2"), 1)?;
    sess.conv(x, &format!("{prefix}.conv3"), 1)
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    /// Row-stochastic `[T, T']` attention weights.
    pub weights: Var,
}

/// Single-head `softmax(Q K^T / sqrt(d)) V`.
pub fn cross_attention<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<Attention> {
    let (_, d) = g.value(q).dims2()?;
    cross_attention_scaled(g, q, k, v, S::one() / S::lit(d as f64).sqrt())
}

/// Cross-attention with an explicit logit scale.
pub fn cross_attention_scaled<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var, scale: S) -> Result<Attention> {
    let (t, dq) = g.value(q).dims2()?;
    let (tk, dk) = g.value(k).dims2()?;
    let (tv, dv) = g.value(v).dims2()?;
    if dq != dk || dq != dv {
        return Err(shape_err("cross_attention", format!("head dims differ: Q {dq}, K {dk}, V {dv}")));
    }
    if tk != tv {
        return Err(shape_err("cross_attention", format!("{tk} keys but {tv} values")));
    }
    if t == 0 || tk == 0 {
        return Err(shape_err("cross_attention", "empty token sequence"));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, scale)?;
    let weights = g.softmax(logits, 1)?;
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}
