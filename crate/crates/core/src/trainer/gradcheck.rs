use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward_from_depth, Batch, Mode, PipelineNets, PipelineOptions};
use crate::data::{generate_sample, SceneConfig, SceneKind};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{build_unet, depnet_forward, Network, UNetConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    DepnetWeight,
    SynnetWeight,
    SourceDepth,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::DepnetWeight => "depnet_weight",
            ParamGroup::SynnetWeight => "synnet_weight",
            ParamGroup::SourceDepth => "source_depth",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Square image side; must be divisible by `2^levels`.
    pub size: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub depnet_weights: usize,
    pub synnet_weights: usize,
    pub depth_pixels: usize,
    pub weight_step: f64,
    pub depth_step: f64,
    /// Denominator floor of the relative deviation, so that two gradients
    /// both at round-off level do not count as a mismatch.
    pub abs_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            size: 32,
            levels: 3,
            base_channels: 8,
            depnet_weights: 10,
            synnet_weights: 10,
            depth_pixels: 20,
            weight_step: 1e-6,
            depth_step: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub group: ParamGroup,
    /// `(tensor index, element index)`; the tensor index is 0 for depth.
    pub location: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_dev: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    /// Samples dropped because the perturbation changed a discrete branch
    /// (z-buffer winners, activation or absolute-value signs).
    pub skipped: usize,
    pub max_rel_dev: f64,
}

impl GradcheckReport {
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).count()
    }

    pub fn passed(&self, cfg: &GradcheckConfig, tol: f64) -> bool {
        self.count(ParamGroup::DepnetWeight) == cfg.depnet_weights
            && self.count(ParamGroup::SynnetWeight) == cfg.synnet_weights
            && self.count(ParamGroup::SourceDepth) == cfg.depth_pixels
            && self.max_rel_dev < tol
    }
}

struct Setup {
    depnet: Network<f64>,
    synnet: Network<f64>,
    batch: Batch<f64>,
    depth: Tensor<f64>,
    opts: PipelineOptions,
}

enum Perturb {
    None,
    Depnet(usize, usize, f64),
    Synnet(usize, usize, f64),
    Depth(usize, f64),
}

impl Setup {
    /// Total loss and branch signature. Weight perturbations run the full
    /// pipeline; depth perturbations inject the source depth directly.
    fn eval(&self, p: &Perturb, injected: bool) -> Result<(f64, u64)> {
        let mut dep = self.depnet.clone();
        let mut syn = self.synnet.clone();
        let mut depth = self.depth.clone();
        match *p {
            Perturb::None => {}
            Perturb::Depnet(t, i, h) => dep.params_mut()[t].value.data_mut()[i] += h,
            Perturb::Synnet(t, i, h) => syn.params_mut()[t].value.data_mut()[i] += h,
            Perturb::Depth(i, h) => depth.data_mut()[i] += h,
        }
        let mut tape = Tape::new();
        let (loss, _, _, _) = self.run(&mut tape, &dep, &syn, depth, injected)?;
        Ok((tape.value(loss).data()[0], tape.branch_signature()))
    }

    fn run(
        &self,
        tape: &mut Tape<f64>,
        dep: &Network<f64>,
        syn: &Network<f64>,
        depth: Tensor<f64>,
        injected: bool,
    ) -> Result<(
        crate::tensor::Var,
        crate::nets::BoundParams,
        crate::nets::BoundParams,
        crate::tensor::Var,
    )> {
        let bd = dep.bind(tape);
        let bs = syn.bind(tape);
        let rgb1 = tape.constant(self.batch.rgb1.clone());
        let d1 = if injected {
            tape.param(depth)
        } else {
            depnet_forward(dep, tape, &bd, rgb1)?
        };
        let nets = PipelineNets {
            depnet: dep,
            depnet_params: &bd,
            synnet: Some((syn, &bs)),
        };
        let out = forward_from_depth(tape, &self.batch, rgb1, d1, &nets, &self.opts)?;
        Ok((out.total, bd, bs, d1))
    }
}

/// Compares analytic gradients of the full-mode total loss with central
/// differences in 64-bit arithmetic: random DepNet weights, random SynNet
/// weights, and random source-depth pixels of an injected depth map.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let scene = SceneConfig {
        width: cfg.size,
        height: cfg.size,
        focal: cfg.size as f64,
        kind: SceneKind::Mixed,
        ..SceneConfig::default()
    };
    let sample = generate_sample(&scene, cfg.seed)?;
    let batch = Batch::<f64>::from_samples(&[&sample])?;
    let max_depth = scene.max_depth;
    let net = |head| {
        UNetConfig::with_schedule(
            cfg.levels,
            cfg.base_channels,
            1024,
            3,
            head,
            max_depth,
            cfg.size,
            cfg.size,
        )
    };
    let depnet = build_unet::<f64>(net(crate::nets::OutputHead::Depth), cfg.seed)?;
    let synnet = build_unet::<f64>(net(crate::nets::OutputHead::Rgb), cfg.seed.wrapping_add(1))?;
    // Scaled off the ground truth so the depth L1 is not evaluated at its kink.
    let fill = 0.5 * (scene.min_depth + scene.max_depth);
    let depth_values: Vec<f64> = sample
        .depth1
        .values()
        .iter()
        .zip(sample.depth1.valid())
        .map(|(&z, &ok)| if ok { 1.1 * z as f64 } else { fill })
        .collect();
    let depth = Tensor::new(batch.gt1.values.shape(), depth_values)?;
    let setup = Setup {
        depnet,
        synnet,
        batch,
        depth,
        opts: PipelineOptions {
            mode: Mode::Full,
            weights: LossWeights::default(),
            detach_warp_for_l2: false,
        },
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport::default();

    for (group, wanted) in [
        (ParamGroup::DepnetWeight, cfg.depnet_weights),
        (ParamGroup::SynnetWeight, cfg.synnet_weights),
        (ParamGroup::SourceDepth, cfg.depth_pixels),
    ] {
        let injected = group == ParamGroup::SourceDepth;
        let mut tape = Tape::new();
        let (loss, bd, bs, d1) = setup.run(&mut tape, &setup.depnet, &setup.synnet, setup.depth.clone(), injected)?;
        tape.backward(loss)?;
        let (_, base_sig) = setup.eval(&Perturb::None, injected)?;

        let net = match group {
            ParamGroup::DepnetWeight => Some((&setup.depnet, &bd)),
            ParamGroup::SynnetWeight => Some((&setup.synnet, &bs)),
            ParamGroup::SourceDepth => None,
        };
        let mut found = 0;
        let mut attempts = 0;
        while found < wanted {
            attempts += 1;
            if attempts > 50 * wanted.max(1) {
                return Err(Error::degenerate(format!(
                    "gradcheck: only {found} of {wanted} {} samples avoided branch changes",
                    group.as_str()
                )));
            }
            let (loc, analytic, h) = match net {
                Some((n, b)) => {
                    let t = rng.random_range(0..n.params().len());
                    let i = rng.random_range(0..n.params()[t].value.data().len());
                    let g = tape.grad_tensor(b.vars()[t]);
                    ((t, i), g.data()[i], cfg.weight_step)
                }
                None => {
                    let i = rng.random_range(0..setup.depth.data().len());
                    ((0, i), tape.grad_tensor(d1).data()[i], cfg.depth_step)
                }
            };
            let perturb = |h: f64| match group {
                ParamGroup::DepnetWeight => Perturb::Depnet(loc.0, loc.1, h),
                ParamGroup::SynnetWeight => Perturb::Synnet(loc.0, loc.1, h),
                ParamGroup::SourceDepth => Perturb::Depth(loc.1, h),
            };
            let (lp, sp) = setup.eval(&perturb(h), injected)?;
            let (lm, sm) = setup.eval(&perturb(-h), injected)?;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel_dev = (analytic - numeric).abs() / scale;
            report.max_rel_dev = report.max_rel_dev.max(rel_dev);
            report.entries.push(GradcheckEntry {
                group,
                location: loc,
                analytic,
                numeric,
                rel_dev,
            });
            found += 1;
        }
    }
    Ok(report)
}
