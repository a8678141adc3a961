//! Encoder-decoder networks with skip connections.
//!
//! Layout for `levels = L` and channel schedule `c[0..=L]`:
//!
//! ```text
//! enc0: conv3x3(in → c0), conv3x3(c0 → c0)                 H × W
//! encI: conv3x3/2(c[i-1] → c[i]), conv3x3(c[i] → c[i])     H/2^i × W/2^i   (i = 1..=L, L is the bottleneck)
//! decI: up2x, conv3x3(c[i+1] → c[i]), concat(encI, ·), conv3x3(2c[i] → c[i])   (i = L-1..=0)
//! head: conv3x3(c0 → out), sigmoid, × max_depth (depth head only)
//! ```
//!
//! Encoder convs use leaky ReLU (slope 0.2), decoder convs use ReLU. Weights
//! are He-uniform over fan-in, biases start at zero.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{AdamState, CheckpointSection, Shape, Tape, Tensor, Var};

pub const ENCODER_SLOPE: f64 = 0.2;
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    /// One channel, `sigmoid · max_depth` meters.
    Depth,
    /// Three channels in `(0, 1)`.
    Rgb,
}

impl OutputHead {
    fn as_str(self) -> &'static str {
        match self {
            OutputHead::Depth => "depth",
            OutputHead::Rgb => "rgb",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Number of stride-2 stages; the bottleneck sits at `H / 2^levels`.
    pub levels: usize,
    /// Channels at each resolution, `levels + 1` entries (full resolution
    /// first, bottleneck last).
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub head: OutputHead,
    /// Upper bound of the depth head in meters (ignored for RGB).
    pub max_depth: f64,
    /// Nominal input size used for the shape schedule.
    pub input_height: usize,
    pub input_width: usize,
}

/// `(channels, height, width)` of one activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeSchedule {
    /// Output of encoder level `i`; the last entry is the bottleneck.
    pub encoder: Vec<ActShape>,
    /// Output of decoder level `i` (index by level).
    pub decoder: Vec<ActShape>,
    pub output: ActShape,
}

impl ShapeSchedule {
    pub fn bottleneck(&self) -> ActShape {
        *self.encoder.last().expect("at least one level")
    }
}

impl UNetConfig {
    /// Channel schedule `min(base · 2^i, cap)`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_schedule(
        levels: usize,
        base_channels: usize,
        channel_cap: usize,
        in_channels: usize,
        head: OutputHead,
        max_depth: f64,
        input_height: usize,
        input_width: usize,
    ) -> Self {
        let channels = (0..=levels)
            .map(|i| {
                base_channels
                    .saturating_mul(1usize.checked_shl(i as u32).unwrap_or(usize::MAX))
                    .min(channel_cap)
            })
            .collect();
        Self {
            levels,
            channels,
            in_channels,
            head,
            max_depth,
            input_height,
            input_width,
        }
    }

    /// Small depth network for CPU experiments: 3 levels, base 8.
    pub fn desk_depth(height: usize, width: usize, max_depth: f64) -> Self {
        Self::with_schedule(3, 8, 1024, 3, OutputHead::Depth, max_depth, height, width)
    }

    pub fn desk_rgb(height: usize, width: usize) -> Self {
        Self::with_schedule(3, 8, 1024, 3, OutputHead::Rgb, 1.0, height, width)
    }

    /// Full-size square configuration: 256×256 input, 1×1×1024 bottleneck.
    pub fn reference_square(head: OutputHead) -> Self {
        Self::with_schedule(8, 16, 1024, 3, head, 10.0, 256, 256)
    }

    /// Full-size wide configuration: 256×768 input, 1×3×512 bottleneck.
    pub fn reference_wide(head: OutputHead) -> Self {
        Self::with_schedule(8, 16, 512, 3, head, 80.0, 256, 768)
    }

    pub fn out_channels(&self) -> usize {
        match self.head {
            OutputHead::Depth => 1,
            OutputHead::Rgb => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("a U-Net needs at least one level"));
        }
        if self.channels.len() != self.levels + 1 || self.channels.contains(&0) {
            return Err(Error::config(format!(
                "channel schedule {:?} must have {} nonzero entries",
                self.channels,
                self.levels + 1
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be nonzero"));
        }
        if self.head == OutputHead::Depth && !(self.max_depth.is_finite() && self.max_depth > 0.0) {
            return Err(Error::config(format!(
                "max_depth must be positive, got {}",
                self.max_depth
            )));
        }
        check_divisible(self.levels, self.input_height, self.input_width)
    }

    /// Activation shapes for the nominal input, computed without building
    /// the network.
    pub fn shape_schedule(&self) -> Result<ShapeSchedule> {
        self.validate()?;
        let at = |i: usize, c: usize| ActShape {
            channels: c,
            height: self.input_height >> i,
            width: self.input_width >> i,
        };
        Ok(ShapeSchedule {
            encoder: (0..=self.levels).map(|i| at(i, self.channels[i])).collect(),
            decoder: (0..self.levels).map(|i| at(i, self.channels[i])).collect(),
            output: at(0, self.out_channels()),
        })
    }

    /// Every conv as `(name, in, out, stride)`, in parameter order.
    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let c = &self.channels;
        let mut out = vec![
            ("enc0.conv0".to_string(), self.in_channels, c[0], 1),
            ("enc0.conv1".to_string(), c[0], c[0], 1),
        ];
        for i in 1..=self.levels {
            out.push((format!("enc{i}.conv0"), c[i - 1], c[i], 2));
            out.push((format!("enc{i}.conv1"), c[i], c[i], 1));
        }
        for i in (0..self.levels).rev() {
            out.push((format!("dec{i}.up"), c[i + 1], c[i], 1));
            out.push((format!("dec{i}.fuse"), 2 * c[i], c[i], 1));
        }
        out.push(("head".to_string(), c[0], self.out_channels(), 1));
        out
    }

    /// Number of scalar parameters, a pure function of the config.
    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, cin, cout, _)| cout * cin * KERNEL * KERNEL + cout)
            .sum()
    }

    /// `key=value` lines, parseable by [`UNetConfig::from_header`].
    pub fn to_header(&self) -> String {
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "levels={}", self.levels);
        let _ = writeln!(s, "channels={}", channels.join(","));
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "out_channels={}", self.out_channels());
        let _ = writeln!(s, "head={}", self.head.as_str());
        let _ = writeln!(s, "max_depth={}", self.max_depth);
        let _ = writeln!(s, "input_height={}", self.input_height);
        let _ = writeln!(s, "input_width={}", self.input_width);
        s
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut levels = None;
        let mut channels = None;
        let mut in_channels = None;
        let mut head = None;
        let mut max_depth = None;
        let mut input_height = None;
        let mut input_width = None;
        let bad = |k: &str, v: &str| Error::config(format!("bad network header value {k}={v}"));
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("network header line without '=': {line}")))?;
            let (k, v) = (k.trim(), v.trim());
            let int = || v.parse::<usize>().map_err(|_| bad(k, v));
            match k {
                "levels" => levels = Some(int()?),
                "channels" => {
                    channels = Some(
                        v.split(',')
                            .map(|c| c.trim().parse::<usize>().map_err(|_| bad(k, v)))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "in_channels" => in_channels = Some(int()?),
                "out_channels" => {}
                "head" => {
                    head = Some(match v {
                        "depth" => OutputHead::Depth,
                        "rgb" => OutputHead::Rgb,
                        _ => return Err(bad(k, v)),
                    })
                }
                "max_depth" => max_depth = Some(v.parse::<f64>().map_err(|_| bad(k, v))?),
                "input_height" => input_height = Some(int()?),
                "input_width" => input_width = Some(int()?),
                _ => return Err(Error::config(format!("unknown network header key {k}"))),
            }
        }
        let need = |name: &str| Error::config(format!("network header is missing {name}"));
        let cfg = Self {
            levels: levels.ok_or_else(|| need("levels"))?,
            channels: channels.ok_or_else(|| need("channels"))?,
            in_channels: in_channels.ok_or_else(|| need("in_channels"))?,
            head: head.ok_or_else(|| need("head"))?,
            max_depth: max_depth.ok_or_else(|| need("max_depth"))?,
            input_height: input_height.ok_or_else(|| need("input_height"))?,
            input_width: input_width.ok_or_else(|| need("input_width"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_divisible(levels: usize, h: usize, w: usize) -> Result<()> {
    let f = 1usize << levels;
    if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(Error::config(format!(
            "input {h}x{w} is not divisible by 2^{levels} = {f}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Parameters of one U-Net plus its config.
#[derive(Debug)]
pub struct Network<T> {
    config: UNetConfig,
    params: Vec<Param<T>>,
    forward_calls: AtomicUsize,
}

impl<T: Real> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

impl<T: Real> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Tape handles for every parameter of a network in one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Intermediate handles recorded by [`Network::forward_traced`].
#[derive(Clone, Debug)]
pub struct UNetTrace {
    pub encoder: Vec<Var>,
    /// Skip concatenations, indexed by level.
    pub concat: Vec<Var>,
    pub decoder: Vec<Var>,
    pub output: Var,
}

/// Deterministic He-uniform initialization.
pub fn build_unet<T: Real>(config: UNetConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (name, cin, cout, _) in config.layers() {
        let fan_in = (cin * KERNEL * KERNEL) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<T> = (0..cout * cin * KERNEL * KERNEL)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        params.push(Param {
            name: format!("{name}.weight"),
            value: Tensor::new(Shape::new(cout, cin, KERNEL, KERNEL), w)?,
        });
        params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(Shape::new(1, cout, 1, 1)),
        });
    }
    Ok(Network {
        config,
        params,
        forward_calls: AtomicUsize::new(0),
    })
}

impl<T: Real> Network<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }

    /// How many forward passes ran since construction.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    /// Records parameters as constants (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Gradients of the bound parameters after [`Tape::backward`], zero for
    /// unreached ones.
    pub fn gradients(&self, tape: &Tape<T>, bound: &BoundParams) -> Vec<Tensor<T>> {
        bound.vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundParams, input: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, bound, input)?.output)
    }

    pub fn forward_traced(&self, tape: &mut Tape<T>, bound: &BoundParams, input: Var) -> Result<UNetTrace> {
        let cfg = &self.config;
        if bound.vars.len() != self.params.len() {
            return Err(Error::contract("parameters bound from a different network"));
        }
        let s = tape.shape(input);
        if s.channels != cfg.in_channels {
            return Err(Error::config(format!(
                "network expects {} input channels, got {s}",
                cfg.in_channels
            )));
        }
        check_divisible(cfg.levels, s.height, s.width)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);

        let mut next = bound.vars.chunks_exact(2);
        let mut conv = |tape: &mut Tape<T>, x: Var, stride: usize| -> Result<Var> {
            let wb = next.next().expect("layer list matches parameters");
            tape.conv2d(x, wb[0], wb[1], stride, KERNEL / 2)
        };
        let slope = T::from_f64(ENCODER_SLOPE);

        let mut encoder = Vec::with_capacity(cfg.levels + 1);
        let mut x = conv(tape, input, 1)?;
        x = tape.leaky_relu(x, slope);
        x = conv(tape, x, 1)?;
        x = tape.leaky_relu(x, slope);
        encoder.push(x);
        for _ in 1..=cfg.levels {
            x = conv(tape, x, 2)?;
            x = tape.leaky_relu(x, slope);
            x = conv(tape, x, 1)?;
            x = tape.leaky_relu(x, slope);
            encoder.push(x);
        }

        let mut concat = vec![None; cfg.levels];
        let mut decoder = vec![None; cfg.levels];
        for i in (0..cfg.levels).rev() {
            let up = tape.upsample_nearest2x(x);
            let up = conv(tape, up, 1)?;
            let up = tape.relu(up);
            let cat = tape.concat_channels(encoder[i], up)?;
            let fused = conv(tape, cat, 1)?;
            x = tape.relu(fused);
            concat[i] = Some(cat);
            decoder[i] = Some(x);
        }

        let logits = conv(tape, x, 1)?;
        let mut output = tape.sigmoid(logits);
        if cfg.head == OutputHead::Depth {
            output = tape.scale_shift(output, T::from_f64(cfg.max_depth), T::ZERO);
        }
        Ok(UNetTrace {
            encoder,
            concat: concat.into_iter().map(|v| v.expect("filled")).collect(),
            decoder: decoder.into_iter().map(|v| v.expect("filled")).collect(),
            output,
        })
    }

    /// Forward pass without gradient bookkeeping.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_section(&self, name: &str, adam: Option<AdamState<T>>) -> CheckpointSection<T> {
        CheckpointSection {
            name: name.to_string(),
            header: self.config.to_header(),
            params: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            adam,
        }
    }

    pub fn from_section(section: &CheckpointSection<T>) -> Result<Self> {
        let config = UNetConfig::from_header(&section.header)?;
        let template = build_unet::<T>(config.clone(), 0)?;
        if template.params.len() != section.params.len() {
            return Err(Error::config(format!(
                "section {} has {} parameters, config implies {}",
                section.name,
                section.params.len(),
                template.params.len()
            )));
        }
        let mut params = Vec::with_capacity(section.params.len());
        for (tp, (name, value)) in template.params.iter().zip(&section.params) {
            if &tp.name != name || tp.value.shape() != value.shape() {
                return Err(Error::config(format!(
                    "parameter {name} {} does not match expected {} {}",
                    value.shape(),
                    tp.name,
                    tp.value.shape()
                )));
            }
            params.push(Param {
                name: name.clone(),
                value: value.clone(),
            });
        }
        Ok(Self {
            config,
            params,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            forward_calls: AtomicUsize::new(0),
        }
    }
}

/// DepNet: RGB → depth in meters.
pub fn depnet_forward<T: Real>(net: &Network<T>, tape: &mut Tape<T>, bound: &BoundParams, rgb: Var) -> Result<Var> {
    if net.config.head != OutputHead::Depth {
        return Err(Error::contract("depnet_forward needs a network with a depth head"));
    }
    net.forward(tape, bound, rgb)
}

/// SynNet: warped RGB → completed RGB.
pub fn synnet_forward<T: Real>(net: &Network<T>, tape: &mut Tape<T>, bound: &BoundParams, warped: Var) -> Result<Var> {
    if net.config.head != OutputHead::Rgb {
        return Err(Error::contract("synnet_forward needs a network with an RGB head"));
    }
    net.forward(tape, bound, warped)
}

#[cfg(test)]
mod tests;
