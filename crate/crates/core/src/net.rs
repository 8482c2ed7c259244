//! The two-branch restoration network.
//!
//! The reconstruction branch is a plain U-Net (max-pool down, nearest-up plus
//! 1x1 reduce, concatenation skips). Its first encoder block also feeds the
//! decomposition branch: prompts from the analyzer steer a gated chain of
//! decomposition stages, a two-conv refinement turns the result into `I'`,
//! and `I'` is injected at every decoder scale (average-pooled, 1x1-projected
//! without bias, added). The head predicts a residual over the input.

use crate::autodiff::Var;
use crate::cdda::{AttentionPreset, Cdda, CddaConfig, Prompts};
use crate::ddm::{Ddm, DdmConfig, GateMode, GateOptions, GateRng, StageTrace};
use crate::error::{shape_err, Result};
use crate::nn::{ParamSpec, ParamStore, Session, SpecBuilder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub unet_depth: usize,
    pub stages: usize,
    pub attention_preset: AttentionPreset,
    pub gate_mode: GateMode,
    pub freq_channels: usize,
    pub prompt_dim: usize,
    pub strategy_dim: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            unet_depth: 3,
            stages: 12,
            attention_preset: AttentionPreset::F,
            gate_mode: GateMode::Hard,
            freq_channels: 16,
            prompt_dim: 32,
            strategy_dim: 32,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("unet_depth", self.unet_depth),
            ("n_stages", self.stages),
            ("freq_channels", self.freq_channels),
            ("prompt_dim", self.prompt_dim),
            ("strategy_dim", self.strategy_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(crate::Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn alignment(&self) -> usize {
        1 << self.unet_depth
    }
}

/// Which parts of the network run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Branches {
    #[default]
    Both,
    /// Reconstruction U-Net alone, no feedback.
    UnetOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub gates: GateOptions,
    pub branches: Branches,
}

impl ForwardOptions {
    pub fn infer(gate_mode: GateMode) -> Self {
        ForwardOptions {
            gates: GateOptions::infer(gate_mode),
            branches: Branches::Both,
        }
    }

    pub fn train(tau: f64) -> Self {
        ForwardOptions {
            gates: GateOptions::train(tau),
            branches: Branches::Both,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub restored: Var,
    pub traces: Vec<StageTrace>,
    pub prompts: Option<Prompts>,
    /// Decomposition-finalized features `I'`.
    pub refined: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct D3Net {
    pub config: NetworkConfig,
    pub cdda: Cdda,
    pub ddm: Ddm,
}

impl D3Net {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let cdda = Cdda::new(CddaConfig {
            image_channels: IMAGE_CHANNELS,
            feature_channels: config.base_channels,
            freq_channels: config.freq_channels,
            prompt_dim: config.prompt_dim,
            strategy_dim: config.strategy_dim,
            preset: config.attention_preset,
        });
        let ddm = Ddm::new(DdmConfig {
            channels: config.base_channels,
            strategy_dim: config.strategy_dim,
            stages: config.stages,
        });
        Ok(D3Net { config, cdda, ddm })
    }

    fn width(&self, level: usize) -> usize {
        self.config.base_channels << level
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut b = SpecBuilder::new();
        let depth = self.config.unet_depth;
        let c = self.config.base_channels;
        for l in 0..=depth {
            let c_in = if l == 0 { IMAGE_CHANNELS } else { self.width(l - 1) };
            b.conv(&format!("unet.enc{l}.conv1"), c_in, self.width(l), 3, true);
            b.conv(&format!("unet.enc{l}.conv2"), self.width(l), self.width(l), 3, true);
        }
        for l in (0..depth).rev() {
            b.conv(&format!("unet.dec{l}.up"), self.width(l + 1), self.width(l), 1, true);
            b.conv(&format!("unet.dec{l}.conv1"), 2 * self.width(l), self.width(l), 3, true);
            b.conv(&format!("unet.dec{l}.conv2"), self.width(l), self.width(l), 3, true);
            b.conv(&format!("feedback.dec{l}"), c, self.width(l), 1, false);
        }
        b.conv("unet.head", c, IMAGE_CHANNELS, 3, true);
        b.conv("refine.conv1", c, c, 3, true);
        b.conv("refine.conv2", c, c, 3, true);
        self.cdda.declare(&mut b);
        self.ddm.declare(&mut b);
        b.finish()
    }

    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamStore<S> {
        ParamStore::init(&self.param_specs(), seed)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let [c, h, w] = shape[..] else {
            return Err(shape_err("d3net", format!("expected [3, H, W], got {shape:?}")));
        };
        if c != IMAGE_CHANNELS {
            return Err(shape_err("d3net", format!("expected {IMAGE_CHANNELS} channels, got {c}")));
        }
        let a = self.config.alignment();
        let pad = |x: usize| (a - x % a) % a;
        if h == 0 || w == 0 || pad(h) != 0 || pad(w) != 0 || h < 4 || w < 4 {
            return Err(shape_err(
                "d3net",
                format!(
                    "extents {h}x{w} must be positive multiples of {a} (and at least 4); pad by {} rows and {} columns",
                    pad(h),
                    pad(w)
                ),
            ));
        }
        Ok((h, w))
    }

    /// Shallow features `x`: the first encoder block's output, `[C, H, W]`.
    pub fn encode_shallow<S: Scalar>(&self, sess: &mut Session<S>, image: Var) -> Result<Var> {
        self.check_input(sess.graph.shape(image))?;
        self.block(sess, image, "unet.enc0")
    }

    fn block<S: Scalar>(&self, sess: &mut Session<S>, x: Var, prefix: &str) -> Result<Var> {
        let x = sess.conv_relu(x, &format!("{prefix}.conv1"), 1)?;
        sess.conv_relu(x, &format!("{prefix}.conv2"), 1)
    }

    /// Feature refinement: conv3x3, ReLU, conv3x3.
    pub fn refine<S: Scalar>(&self, sess: &mut Session<S>, y: Var) -> Result<Var> {
        let x = sess.conv_relu(y, "refine.conv1", 1)?;
        sess.conv(x, "refine.conv2", 1)
    }

    pub fn forward<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        image: Var,
        opts: &ForwardOptions,
        rng: &mut GateRng,
    ) -> Result<ForwardOutput> {
        let x = self.encode_shallow(sess, image)?;

        let (refined, traces, prompts) = match opts.branches {
            Branches::Both => {
                let prompts = self.cdda.forward(sess, image)?;
                let (y, traces) = self.ddm.run(sess, x, &prompts, &opts.gates, rng)?;
                let refined = self.refine(sess, y)?;
                (Some(refined), traces, Some(prompts))
            }
            Branches::UnetOnly => (None, Vec::new(), None),
        };

        let depth = self.config.unet_depth;
        let mut skips = vec![x];
        let mut h = x;
        for l in 1..=depth {
            h = sess.graph.max_pool2d(h, 2, 2)?;
            h = self.block(sess, h, &format!("unet.enc{l}"))?;
            skips.push(h);
        }
        for l in (0..depth).rev() {
            h = sess.graph.upsample_nearest(h, 2)?;
            h = sess.conv(h, &format!("unet.dec{l}.up"), 0)?;
            h = sess.graph.concat_channels(h, skips[l])?;
            h = self.block(sess, h, &format!("unet.dec{l}"))?;
            if let Some(r) = refined {
                let r = if l == 0 { r } else { sess.graph.avg_pool2d(r, 1 << l)? };
                let inj = sess.conv(r, &format!("feedback.dec{l}"), 0)?;
                h = sess.graph.add(h, inj)?;
            }
        }
        let residual = sess.conv(h, "unet.head", 1)?;
        let restored = sess.graph.add(image, residual)?;
        Ok(ForwardOutput {
            restored,
            traces,
            prompts,
            refined,
        })
    }

    /// Inference on a single image with no gradient tracking.
    pub fn restore<S: Scalar>(&self, params: &ParamStore<S>, image: &Tensor<S>, opts: &ForwardOptions) -> Result<(Tensor<S>, Vec<StageTrace>)> {
        use rand::SeedableRng;
        let mut sess = Session::new(params, false);
        let img = sess.graph.constant(image.clone())?;
        let mut rng = GateRng::seed_from_u64(self.config.seed);
        let out = self.forward(&mut sess, img, opts, &mut rng)?;
        Ok((sess.graph.value(out.restored).clone(), out.traces))
    }
}

/// Edge-replicates `image` on the bottom and right up to `h x w`.
pub fn pad_replicate<S: Scalar>(image: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let (c, ih, iw) = image.dims3()?;
    if h < ih || w < iw || ih == 0 || iw == 0 {
        return Err(shape_err("pad_replicate", format!("cannot pad {ih}x{iw} to {h}x{w}")));
    }
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, r) = (i / (h * w), i % (h * w));
        let (y, x) = ((r / w).min(ih - 1), (r % w).min(iw - 1));
        image.data()[ch * ih * iw + y * iw + x]
    }))
}

/// Top-left `h x w` window of a `[C, H, W]` tensor.
pub fn crop<S: Scalar>(image: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let (c, ih, iw) = image.dims3()?;
    if h > ih || w > iw {
        return Err(shape_err("crop", format!("cannot crop {ih}x{iw} to {h}x{w}")));
    }
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, r) = (i / (h * w), i % (h * w));
        image.data()[ch * ih * iw + (r / w) * iw + r % w]
    }))
}

impl D3Net {
    /// [`D3Net::restore`] for any extents: pads to the alignment, crops back.
    pub fn restore_any<S: Scalar>(&self, params: &ParamStore<S>, image: &Tensor<S>, opts: &ForwardOptions) -> Result<(Tensor<S>, Vec<StageTrace>)> {
        let (_, h, w) = image.dims3()?;
        let a = self.config.alignment();
        let up = |x: usize| x.div_ceil(a).max(1) * a;
        let (ph, pw) = (up(h.max(4)), up(w.max(4)));
        let (out, traces) = self.restore(params, &pad_replicate(image, ph, pw)?, opts)?;
        Ok((crop(&out, h, w)?, traces))
    }
}

/// Mean absolute error between restored and ground-truth images on the tape.
pub fn loss_l1<S: Scalar>(sess: &mut Session<S>, restored: Var, target: Var) -> Result<Var> {
    if sess.graph.shape(restored) != sess.graph.shape(target) {
        return Err(shape_err(
            "loss_l1",
            format!("{:?} vs {:?}", sess.graph.shape(restored), sess.graph.shape(target)),
        ));
    }
    let d = sess.graph.sub(restored, target)?;
    let a = sess.graph.abs(d)?;
    sess.graph.mean(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> D3Net {
        D3Net::new(NetworkConfig {
            base_channels: 4,
            unet_depth: 2,
            stages: 2,
            freq_channels: 4,
            prompt_dim: 8,
            strategy_dim: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn parameter_names_are_unique() {
        let specs = tiny().param_specs();
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
    }

    #[test]
    fn misaligned_input_reports_padding() {
        let net = tiny();
        let err = net.check_input(&[3, 10, 8]).unwrap_err().to_string();
        assert!(err.contains("pad by 2 rows and 0 columns"), "{err}");
        assert!(net.check_input(&[1, 8, 8]).is_err());
        assert!(net.check_input(&[3, 8, 12]).is_ok());
    }

    #[test]
    fn pad_then_crop_is_identity_and_any_size_restores() {
        let img = Tensor::<f64>::from_fn([3, 5, 7], |i| (i as f64 * 0.37).sin() * 0.5 + 0.5);
        let padded = pad_replicate(&img, 8, 8).unwrap();
        assert_eq!(padded.at(&[1, 7, 7]), img.at(&[1, 4, 6]));
        assert!(crop(&padded, 5, 7).unwrap().bitwise_eq(&img));
        let net = tiny();
        let p = net.init_params::<f64>(0);
        let (out, _) = net.restore_any(&p, &img, &ForwardOptions::infer(GateMode::Hard)).unwrap();
        assert_eq!(out.shape(), &[3, 5, 7]);
    }

    #[test]
    fn zero_config_field_is_rejected() {
        let cfg = NetworkConfig { stages: 0, ..Default::default() };
        assert!(D3Net::new(cfg).is_err());
    }
}
