//! Training pipeline: DepNet → warp → SynNet → DepNet, trained jointly with
//! Adam, plus evaluation, ablation runs and a finite-difference check.

mod config;
mod gradcheck;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::{relative_pose, DepthMap};
use crate::losses::{
    depth_loss, image_loss, image_tensor, second_view_depth_loss, total_loss, DepthTarget, LossReport, LossTerms,
    LossWeights, LOSS_CSV_HEADER,
};
use crate::metrics::{compute_metrics, EvalRange, MetricsReport};
use crate::nets::{build_unet, depnet_forward, synnet_forward, BoundParams, Network, OutputHead};
use crate::real::Real;
use crate::tensor::{adam_step, read_checkpoint, write_checkpoint, AdamState, Checkpoint, Tape, Tensor, Var};
use crate::warp::{warp_on_tape, WarpOptions, WarpOutputs, WarpSample};

pub use config::{Mode, NetSpec, TrainConfig};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckEntry, GradcheckReport, ParamGroup};

pub const VALIDATION_CSV_HEADER: &str = "epoch,rel,rmse,rmse_log,sq_rel,d1,d2,d3";
pub const ABLATION_CSV_HEADER: &str = "mode,rel,rmse,rmse_log,sq_rel,d1,d2,d3";
const EVAL_CHUNK: usize = 8;

/// Tensors for one optimizer step.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub rgb1: Tensor<T>,
    pub rgb2: Tensor<T>,
    pub gt1: DepthTarget<T>,
    pub gt2: DepthTarget<T>,
    pub warp: Vec<WarpSample>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&SceneSample]) -> Result<Self> {
        let rgb1: Vec<_> = samples.iter().map(|s| &s.rgb1).collect();
        let rgb2: Vec<_> = samples.iter().map(|s| &s.rgb2).collect();
        let d1: Vec<_> = samples.iter().map(|s| &s.depth1).collect();
        let d2: Vec<_> = samples.iter().map(|s| &s.depth2).collect();
        Ok(Self {
            rgb1: image_tensor(&rgb1)?,
            rgb2: image_tensor(&rgb2)?,
            gt1: DepthTarget::from_maps(&d1)?,
            gt2: DepthTarget::from_maps(&d2)?,
            warp: samples
                .iter()
                .map(|s| WarpSample {
                    intrinsics: s.intrinsics,
                    relative: relative_pose(&s.pose1, &s.pose2),
                })
                .collect(),
        })
    }
}

/// Networks bound to one tape.
pub struct PipelineNets<'a, T> {
    pub depnet: &'a Network<T>,
    pub depnet_params: &'a BoundParams,
    pub synnet: Option<(&'a Network<T>, &'a BoundParams)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineOptions {
    pub mode: Mode,
    pub weights: LossWeights,
    pub detach_warp_for_l2: bool,
}

impl PipelineOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            mode: cfg.mode,
            weights: cfg.effective_weights(),
            detach_warp_for_l2: cfg.detach_warp_for_l2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub pred_depth1: Var,
    pub warp: Option<WarpOutputs>,
    pub synth_rgb2: Option<Var>,
    pub pred_depth2: Option<Var>,
    pub terms: LossTerms,
    pub total: Var,
    pub report: LossReport,
}

/// Runs the pipeline up to the mode's cut and records all losses.
pub fn forward_pipeline<T: Real>(
    tape: &mut Tape<T>,
    batch: &Batch<T>,
    nets: &PipelineNets<T>,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    let rgb1 = tape.constant(batch.rgb1.clone());
    let pred_depth1 = depnet_forward(nets.depnet, tape, nets.depnet_params, rgb1)?;
    forward_from_depth(tape, batch, rgb1, pred_depth1, nets, opts)
}

/// The pipeline after DepNet's first pass, with `pred_depth1` supplied by
/// the caller (a network output or an injected leaf).
pub fn forward_from_depth<T: Real>(
    tape: &mut Tape<T>,
    batch: &Batch<T>,
    rgb1: Var,
    pred_depth1: Var,
    nets: &PipelineNets<T>,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    let l1 = depth_loss(tape, pred_depth1, &batch.gt1)?;
    let mut terms = LossTerms { l1, l2: None, l3: None };
    let (mut warp, mut synth_rgb2, mut pred_depth2) = (None, None, None);

    if opts.mode.uses_synnet() {
        let (synnet, syn_params) = nets
            .synnet
            .ok_or_else(|| Error::contract(format!("mode {} needs a SynNet", opts.mode.as_str())))?;
        let wopts = WarpOptions::default();
        let warped = warp_on_tape(tape, rgb1, pred_depth1, &batch.warp, &wopts)?;
        let synth = synnet_forward(synnet, tape, syn_params, warped.image)?;
        let l2_input = if opts.detach_warp_for_l2 {
            let frozen = tape.constant(tape.value(pred_depth1).clone());
            let detached = warp_on_tape(tape, rgb1, frozen, &batch.warp, &wopts)?;
            synnet_forward(synnet, tape, syn_params, detached.image)?
        } else {
            synth
        };
        terms.l2 = Some(image_loss(tape, l2_input, &batch.rgb2)?);
        if opts.mode == Mode::Full {
            let d2 = depnet_forward(nets.depnet, tape, nets.depnet_params, synth)?;
            terms.l3 = Some(second_view_depth_loss(tape, d2, &batch.gt2)?);
            pred_depth2 = Some(d2);
        }
        warp = Some(warped);
        synth_rgb2 = Some(synth);
    }

    let total = total_loss(tape, &terms, &opts.weights)?;
    let report = LossReport::from_tape(tape, &terms, total);
    Ok(PipelineOutput {
        pred_depth1,
        warp,
        synth_rgb2,
        pred_depth2,
        terms,
        total,
        report,
    })
}

/// Both networks plus optional optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel<T: Real> {
    pub depnet: Network<T>,
    pub synnet: Option<Network<T>>,
    /// Joint state over DepNet then SynNet parameters.
    pub adam: Option<AdamState<T>>,
}

impl<T: Real> TrainedModel<T> {
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let n_dep = self.depnet.params().len();
        let split = |range: std::ops::Range<usize>| {
            self.adam.as_ref().map(|a| AdamState {
                step: a.step,
                m: a.m[range.clone()].to_vec(),
                v: a.v[range].to_vec(),
            })
        };
        let mut sections = vec![self.depnet.to_section("depnet", split(0..n_dep))];
        if let Some(syn) = &self.synnet {
            let end = n_dep + syn.params().len();
            sections.push(syn.to_section("synnet", split(n_dep..end)));
        }
        Checkpoint { sections }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let dep = ckpt
            .section("depnet")
            .ok_or_else(|| Error::config("checkpoint has no depnet section"))?;
        let depnet = Network::from_section(dep)?;
        if depnet.config().head != OutputHead::Depth {
            return Err(Error::config("depnet section does not hold a depth network"));
        }
        let syn = ckpt.section("synnet");
        let synnet = syn.map(Network::from_section).transpose()?;
        let adam = match (&dep.adam, syn.map(|s| &s.adam)) {
            (Some(a), None) => Some(a.clone()),
            (Some(a), Some(Some(b))) if a.step == b.step => {
                let mut joint = a.clone();
                joint.m.extend(b.m.iter().cloned());
                joint.v.extend(b.v.iter().cloned());
                Some(joint)
            }
            _ => None,
        };
        Ok(Self { depnet, synnet, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        Self::from_checkpoint(&ckpt).map_err(|e| Error::ingestion(path, e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub report: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Validation metrics; absent with an empty validation split.
    pub metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRecord {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel<f32>,
    pub record: TrainRecord,
    /// Last checkpoint written, when a checkpoint directory is configured.
    pub checkpoint: Option<PathBuf>,
}

/// Seeded shuffle of `0..n` for one epoch; independent of the mode so every
/// ablation arm sees the same order.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

struct Logs {
    losses: Option<BufWriter<File>>,
    validation: Option<BufWriter<File>>,
    dir: PathBuf,
}

impl Logs {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                losses: None,
                validation: None,
                dir: PathBuf::new(),
            });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
            Ok(f)
        };
        Ok(Self {
            losses: Some(open("losses.csv", LOSS_CSV_HEADER)?),
            validation: Some(open("validation.csv", VALIDATION_CSV_HEADER)?),
            dir: dir.to_path_buf(),
        })
    }

    fn write(file: &mut Option<BufWriter<File>>, path: PathBuf, line: &str) -> Result<()> {
        if let Some(f) = file {
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    fn step(&mut self, r: &StepRecord) -> Result<()> {
        let path = self.dir.join("losses.csv");
        Self::write(&mut self.losses, path, &r.report.csv_row(r.step))
    }

    fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        if let Some(m) = r.metrics {
            let line = format!(
                "{},{},{},{},{},{},{},{}",
                r.epoch, m.rel, m.rmse, m.rmse_log, m.sq_rel, m.delta1, m.delta2, m.delta3
            );
            let path = self.dir.join("validation.csv");
            Self::write(&mut self.validation, path, &line)?;
        }
        Ok(())
    }
}

/// Describes the first non-finite value on the tape.
fn non_finite_report<T: Real>(tape: &Tape<T>, step: usize) -> Error {
    match tape.first_non_finite() {
        Some((v, op)) => Error::NonFinite(format!(
            "step {step}: tensor #{} ({op}, shape {}) is the first non-finite value",
            v.index(),
            tape.shape(v)
        )),
        None => Error::NonFinite(format!("step {step}: loss is not finite")),
    }
}

/// Trains per `cfg` on the train split. Deterministic for a fixed config
/// and dataset.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_with(cfg: &TrainConfig, ds: &Dataset, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut samples: Vec<SceneSample> = ds.train.clone();
    if cfg.symmetric_pairs {
        samples.extend(ds.train.iter().map(SceneSample::reversed));
    }
    let first = samples
        .first()
        .ok_or_else(|| Error::degenerate("training split is empty"))?;
    let (h, w) = (first.intrinsics.height, first.intrinsics.width);

    let mut depnet = build_unet::<f32>(cfg.depnet_config(h, w), cfg.seed)?;
    let mut synnet = if cfg.mode.uses_synnet() {
        Some(build_unet::<f32>(cfg.synnet_config(h, w), cfg.seed.wrapping_add(1))?)
    } else {
        None
    };
    let mut adam = {
        let shapes = depnet.params().iter().chain(synnet.iter().flat_map(|s| s.params()));
        AdamState::for_shapes(shapes.map(|p| &p.value))
    };
    let adam_cfg = cfg.adam();
    let opts = PipelineOptions::from_config(cfg);
    let mut logs = Logs::open(cfg.log_dir.as_deref())?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut record = TrainRecord::default();
    let mut step = 0usize;
    let exhausted = |step: usize| cfg.max_steps.is_some_and(|m| step >= m);
    for epoch in 0..cfg.epochs {
        if exhausted(step) {
            break;
        }
        let order = epoch_order(cfg.seed, epoch, samples.len());
        for chunk in order.chunks(cfg.batch_size) {
            if exhausted(step) {
                break;
            }
            let picked: Vec<&SceneSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = Batch::<f32>::from_samples(&picked)?;

            let mut tape = Tape::new();
            let dep_params = depnet.bind(&mut tape);
            let syn_params = synnet.as_ref().map(|s| s.bind(&mut tape));
            let nets = PipelineNets {
                depnet: &depnet,
                depnet_params: &dep_params,
                synnet: synnet.as_ref().zip(syn_params.as_ref()),
            };
            let out = forward_pipeline(&mut tape, &batch, &nets, &opts)?;
            if !out.report.total.is_finite() {
                return Err(non_finite_report(&tape, step));
            }
            tape.backward(out.total)?;

            let mut grads = depnet.gradients(&tape, &dep_params);
            if let (Some(s), Some(b)) = (&synnet, &syn_params) {
                grads.extend(s.gradients(&tape, b));
            }
            let names = depnet.params().iter().chain(synnet.iter().flat_map(|s| s.params()));
            if let Some((p, _)) = names.zip(&grads).find(|(_, g)| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "step {step}: gradient of {} is not finite",
                    p.name
                )));
            }
            {
                let mut params: Vec<&mut Tensor<f32>> = depnet.params_mut().iter_mut().map(|p| &mut p.value).collect();
                if let Some(s) = synnet.as_mut() {
                    params.extend(s.params_mut().iter_mut().map(|p| &mut p.value));
                }
                adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
            }

            let rec = StepRecord {
                step,
                epoch,
                report: out.report,
            };
            logs.step(&rec)?;
            on_step(&rec);
            record.steps.push(rec);
            step += 1;
        }

        let metrics = if ds.val.is_empty() {
            None
        } else {
            Some(evaluate(&depnet, &ds.val, &cfg.eval_range)?)
        };
        let rec = EpochRecord { epoch, metrics };
        logs.epoch(&rec)?;
        record.epochs.push(rec);
        if let Some(dir) = cfg
            .checkpoint_dir
            .as_ref()
            .filter(|_| (epoch + 1) % cfg.checkpoint_every == 0)
        {
            let model = TrainedModel {
                depnet: depnet.clone(),
                synnet: synnet.clone(),
                adam: Some(adam.clone()),
            };
            model.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    let model = TrainedModel {
        depnet,
        synnet,
        adam: Some(adam),
    };
    let checkpoint = match &cfg.checkpoint_dir {
        Some(dir) => {
            let path = dir.join("final.ckpt");
            model.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        record,
        checkpoint,
    })
}

/// Scores predictions produced by `predict` for each chunk of samples; the
/// result is the mean of per-image metrics. Images without a scored pixel
/// are left out of the mean.
pub fn evaluate_with(
    samples: &[SceneSample],
    range: &EvalRange,
    mut predict: impl FnMut(&[&SceneSample]) -> Result<Vec<DepthMap>>,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::degenerate("evaluation split is empty"));
    }
    let mut reports = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let preds = predict(&refs)?;
        for (pred, s) in preds.iter().zip(chunk) {
            match compute_metrics(pred, &s.depth1, range) {
                Ok(m) => reports.push(m),
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    MetricsReport::mean(&reports)
}

/// DepNet predictions for a chunk of samples.
pub fn predict_depth(depnet: &Network<f32>, samples: &[&SceneSample]) -> Result<Vec<DepthMap>> {
    let rgb: Vec<_> = samples.iter().map(|s| &s.rgb1).collect();
    let out = depnet.infer(&image_tensor::<f32>(&rgb)?)?;
    let s = out.shape();
    (0..s.batch)
        .map(|b| DepthMap::dense(s.width, s.height, out.batch_item(b).to_vec()))
        .collect()
}

/// Runs DepNet alone over `samples`.
pub fn evaluate(depnet: &Network<f32>, samples: &[SceneSample], range: &EvalRange) -> Result<MetricsReport> {
    evaluate_with(samples, range, |chunk| predict_depth(depnet, chunk))
}

/// Ground truth used as the prediction (a zero-error reference).
pub fn evaluate_ground_truth(samples: &[SceneSample], range: &EvalRange) -> Result<MetricsReport> {
    evaluate_with(samples, range, |chunk| {
        Ok(chunk.iter().map(|s| s.depth1.clone()).collect())
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: Mode,
    pub metrics: MetricsReport,
    pub record: TrainRecord,
}

#[derive(Clone, Debug, Default)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn row(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.mode.as_str(),
                m.rel,
                m.rmse,
                m.rmse_log,
                m.sq_rel,
                m.delta1,
                m.delta2,
                m.delta3
            ));
        }
        out
    }
}

/// Trains each listed mode from the same seed and scores DepNet on the test
/// split. Log and checkpoint directories get one subdirectory per mode.
pub fn run_modes(base: &TrainConfig, ds: &Dataset, modes: &[Mode]) -> Result<AblationResult> {
    let mut result = AblationResult::default();
    for &mode in modes {
        let cfg = TrainConfig {
            mode,
            log_dir: base.log_dir.as_ref().map(|d| d.join(mode.as_str())),
            checkpoint_dir: base.checkpoint_dir.as_ref().map(|d| d.join(mode.as_str())),
            ..base.clone()
        };
        let outcome = train(&cfg, ds)?;
        let metrics = evaluate(&outcome.model.depnet, &ds.test, &cfg.eval_range)?;
        result.rows.push(AblationRow {
            mode,
            metrics,
            record: outcome.record,
        });
    }
    Ok(result)
}

/// All three modes.
pub fn run_ablation(base: &TrainConfig, ds: &Dataset) -> Result<AblationResult> {
    run_modes(base, ds, &Mode::ALL)
}
