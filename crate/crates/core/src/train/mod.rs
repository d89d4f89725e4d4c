//! Optimization: configuration, the Adam step, the epoch loop with
//! validation and checkpoints, and the ablation runner.
//!
//! All randomness is derived from `TrainConfig::seed` together with the epoch
//! and sample index, so a run is a pure function of its configuration and
//! data, and a resumed run needs no stored generator state beyond the epoch
//! and batch cursor.

pub mod checkpoint;
pub mod variants;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_any_checkpoint, load_checkpoint, save_checkpoint, AnyCheckpoint, Checkpoint};
pub use variants::{parse_variants, ComponentFlags, Variant};

use crate::autograd::Graph;
use crate::backend::{Backend, Eager};
use crate::data::{Batch, Dataset, Interpolation, Manifest, Split};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::losses::{l1_loss, ChromaConfig, LossParts, LossWeights, Objective};
use crate::metrics::{psnr, score_image, MetricOptions, MetricReport, MetricSelection};
use crate::net::{ModelConfig, WaterFormer};
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

/// Moment decay rates and the denominator guard of Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Everything a training run depends on. Serialized as TOML for config files
/// and echoed into every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Full-model loss weights; the variant zeroes the terms it disables.
    pub weights: LossWeights,
    pub chroma: ChromaConfig,
    /// Full-model architecture; the variant toggles components on top.
    pub model: ModelConfig,
    /// Square training size in pixels; 0 keeps each pair's native size.
    pub image_size: usize,
    pub interpolation: Interpolation,
    /// Random flips and quarter turns of training pairs.
    pub augment: bool,
    /// Global gradient-norm threshold; off when absent.
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    pub dtype: DType,
    /// Stop after this many optimizer steps in total (across resumes).
    pub max_steps: Option<u64>,
    /// Steps between progress log lines; 0 disables them.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr0: 1e-3,
            decay_every: 50,
            decay_factor: 0.5,
            seed: 0,
            variant: Variant::V5,
            weights: LossWeights::default(),
            chroma: ChromaConfig::default(),
            model: ModelConfig::reference(),
            image_size: 64,
            interpolation: Interpolation::Bilinear,
            augment: true,
            grad_clip: None,
            adam: AdamConfig::default(),
            dtype: DType::F32,
            max_steps: None,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    /// The schedule and batch settings of the original long protocol, at the
    /// full training size.
    pub fn full_scale() -> Self {
        TrainConfig { epochs: 300, image_size: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 = {} must be positive", self.lr0));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor = {} must lie in (0, 1]", self.decay_factor));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip = {c} must be positive"));
            }
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("adam settings {a:?} out of range"));
        }
        if self.image_size != 0 && self.image_size < 8 {
            return bad(format!("image_size {} is too small (minimum 8)", self.image_size));
        }
        self.weights.validate()?;
        self.chroma.validate()?;
        self.model.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The network and objective of the configured variant.
    pub fn resolved(&self) -> (ModelConfig, Objective) {
        let (model, weights) = self.variant.apply(&self.model, &self.weights);
        (model, Objective::new(weights, self.chroma))
    }

    pub fn train_size(&self) -> Option<(usize, usize)> {
        (self.image_size > 0).then_some((self.image_size, self.image_size))
    }
}

/// Step schedule: `lr0 * decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = epoch / cfg.decay_every.max(1);
    cfg.lr0 * cfg.decay_factor.powi(i32::try_from(k).unwrap_or(i32::MAX))
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub parts: LossParts,
}

pub const CURVE_COLUMNS: &str = "step,total,l1,chroma,sobel,lr";

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = format!("{CURVE_COLUMNS}\n");
    for p in curve {
        let l = p.parts;
        out.push_str(&format!("{},{},{},{},{},{}\n", p.step, l.total, l.l1, l.chroma, l.sobel, p.lr));
    }
    out
}

/// Reads a curve written by [`curve_csv`]. The epoch column is not stored, so
/// it comes back as zero.
pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CURVE_COLUMNS) {
        return Err(Error::Config(format!("loss curve must start with `{CURVE_COLUMNS}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Config(format!("loss curve row {}: `{line}`", i + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let [step, total, l1, chroma, sobel, lr] = f[..] else { return Err(bad()) };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CurvePoint {
                step: step.parse().map_err(|_| bad())?,
                epoch: 0,
                lr: num(lr)?,
                parts: LossParts { total: num(total)?, l1: num(l1)?, chroma: num(chroma)?, sobel: num(sobel)? },
            })
        })
        .collect()
}

/// Whether the mean total loss of the last `k` steps is below that of the
/// first `k`, with every value finite. Needs at least `2k` points.
pub fn trend_decreasing(curve: &[CurvePoint], k: usize) -> bool {
    if k == 0 || curve.len() < 2 * k || !curve.iter().all(|p| p.parts.is_finite()) {
        return false;
    }
    let mean = |s: &[CurvePoint]| s.iter().map(|p| p.parts.total).sum::<f64>() / s.len() as f64;
    mean(&curve[curve.len() - k..]) < mean(&curve[..k])
}

/// Parameters, optimizer moments and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    /// Epoch in progress.
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub cursor: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub best_val_psnr: Option<f64>,
    /// Loss parts of the most recent step.
    pub last: LossParts,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: ParamStore<T>) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        TrainState { params, m, v, epoch: 0, cursor: 0, step: 0, best_val_psnr: None, last: LossParts::default() }
    }
}

/// Validation scores after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochScore {
    pub epoch: usize,
    pub l1: f64,
    pub psnr: f64,
}

/// What a call to [`Trainer::fit`] did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOutcome {
    pub curve: Vec<CurvePoint>,
    pub validation: Vec<EpochScore>,
    /// False when `max_steps` stopped the run early.
    pub completed: bool,
}

/// Names of the files a run writes into its output directory.
pub const LAST_CHECKPOINT: &str = "last.wfk";
pub const BEST_CHECKPOINT: &str = "best.wfk";
pub const LOSS_CSV: &str = "loss.csv";
pub const VALIDATION_CSV: &str = "validation.csv";

/// A built network with its objective and run configuration.
pub struct Trainer {
    pub model: WaterFormer,
    pub objective: Objective,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model_cfg, objective) = cfg.resolved();
        let model = WaterFormer::new(model_cfg)?;
        Ok(Trainer { model, objective, cfg })
    }

    pub fn init_state<T: Real>(&self) -> TrainState<T> {
        TrainState::new(self.model.init(self.cfg.seed))
    }

    /// Rebuilds a trainer around a checkpoint, checking that its parameters
    /// fit the stored architecture.
    pub fn from_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<Self> {
        let t = Trainer::new(ck.train.clone())?;
        if t.model.config != ck.model {
            return Err(Error::Incompatible("stored architecture does not match its training config".into()));
        }
        t.model.check_params(&ck.state.params)?;
        Ok(t)
    }

    pub fn checkpoint<T: Real>(&self, state: &TrainState<T>) -> Checkpoint<T> {
        Checkpoint { model: self.model.config.clone(), train: self.cfg.clone(), state: state.clone() }
    }

    /// Loss parts and parameter gradients of one batch.
    pub fn gradients<T: Real>(&self, params: &ParamStore<T>, batch: &Batch<T>) -> Result<(LossParts, Vec<(String, Tensor<T>)>)> {
        let mut g = Graph::new(params);
        let x = g.constant(batch.degraded.clone());
        let y = g.constant(batch.reference.clone());
        let pred = self.model.forward(&mut g, &x)?;
        let (loss, parts) = self.objective.evaluate(&mut g, &y, &pred)?;
        let grads = g.backward(loss)?;
        Ok((parts, g.param_grads(&grads).into_iter().collect()))
    }

    /// One Adam step at learning rate `lr`. A non-finite loss or gradient
    /// aborts before any state is touched, with the loss parts and the
    /// largest gradient norms in the error.
    pub fn train_step<T: Real>(&self, state: &mut TrainState<T>, batch: &Batch<T>, lr: f64) -> Result<LossParts> {
        if batch.ids.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        let (parts, mut grads) = self.gradients(&state.params, batch)?;
        let norms: Vec<(String, f64)> = grads.iter().map(|(n, g)| (n.clone(), l2_norm(g))).collect();
        let global = norms.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
        if !parts.is_finite() || !global.is_finite() {
            return Err(Error::NonFinite(diagnostic(state.step + 1, &parts, &norms)));
        }
        if let Some(clip) = self.cfg.grad_clip {
            if global > clip {
                log::warn!("step {}: gradient norm {global:.4e} clipped to {clip:.4e}", state.step + 1);
                let s = T::lit(clip / global);
                for (_, g) in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        adam_update(state, &grads, lr, &self.cfg.adam)?;
        state.last = parts;
        Ok(parts)
    }

    /// Runs epochs from the state's position until `cfg.epochs` (or
    /// `max_steps`). With an output directory, the loss curve, validation
    /// scores, `last.wfk` after every epoch and `best.wfk` on validation
    /// improvement are written there. `history` seeds the curve when resuming.
    pub fn fit<T: Real>(
        &self,
        state: &mut TrainState<T>,
        train: &Dataset,
        val: Option<&Dataset>,
        out_dir: Option<&Path>,
        history: Vec<CurvePoint>,
    ) -> Result<FitOutcome> {
        self.fit_tracking_best(state, train, val, out_dir, history).map(|(outcome, _)| outcome)
    }

    /// [`fit`](Self::fit) that also returns the parameters of the best
    /// validation epoch seen during this call (the final parameters when there
    /// is no validation set or no epoch finished).
    pub fn fit_tracking_best<T: Real>(
        &self,
        state: &mut TrainState<T>,
        train: &Dataset,
        val: Option<&Dataset>,
        out_dir: Option<&Path>,
        history: Vec<CurvePoint>,
    ) -> Result<(FitOutcome, ParamStore<T>)> {
        let mut best: Option<ParamStore<T>> = None;
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let cfg = &self.cfg;
        let mut outcome = FitOutcome { curve: history, ..FitOutcome::default() };
        while state.epoch < cfg.epochs {
            let lr = lr_at(state.epoch, cfg);
            let batches = train.epoch_batches(state.epoch, cfg.seed, cfg.batch_size);
            while state.cursor < batches.len() {
                if cfg.max_steps.is_some_and(|m| state.step >= m) {
                    self.persist(state, out_dir, &outcome)?;
                    let best = best.unwrap_or_else(|| state.params.clone());
                    return Ok((outcome, best));
                }
                let seed = cfg.augment.then_some((cfg.seed, state.epoch));
                let batch = train.batch::<T>(&batches[state.cursor], seed)?;
                let parts = self.train_step(state, &batch, lr)?;
                state.cursor += 1;
                outcome.curve.push(CurvePoint { step: state.step, epoch: state.epoch, lr, parts });
                if cfg.log_every > 0 && state.step % cfg.log_every as u64 == 0 {
                    log::info!(
                        "epoch {} step {}: loss {:.5} (l1 {:.5}, chroma {:.5}, sobel {:.5}) lr {lr:.2e}",
                        state.epoch,
                        state.step,
                        parts.total,
                        parts.l1,
                        parts.chroma,
                        parts.sobel
                    );
                }
            }
            state.epoch += 1;
            state.cursor = 0;

            let mut improved = false;
            if let Some(val) = val.filter(|v| !v.is_empty()) {
                let (l1, score) = validate(&self.model, &state.params, val)?;
                log::info!("epoch {} validation: l1 {l1:.5}, psnr {score:.3} dB", state.epoch - 1);
                outcome.validation.push(EpochScore { epoch: state.epoch - 1, l1, psnr: score });
                if state.best_val_psnr.is_none_or(|b| score > b) {
                    state.best_val_psnr = Some(score);
                    improved = true;
                }
                if improved {
                    best = Some(state.params.clone());
                }
            }
            if let Some(dir) = out_dir {
                if improved || (val.is_none_or(Dataset::is_empty) && state.epoch == cfg.epochs) {
                    save_checkpoint(&dir.join(BEST_CHECKPOINT), &self.checkpoint(state))?;
                }
            }
            self.persist(state, out_dir, &outcome)?;
        }
        outcome.completed = true;
        let best = best.unwrap_or_else(|| state.params.clone());
        Ok((outcome, best))
    }

    fn persist<T: Real>(&self, state: &TrainState<T>, out_dir: Option<&Path>, outcome: &FitOutcome) -> Result<()> {
        let Some(dir) = out_dir else { return Ok(()) };
        save_checkpoint(&dir.join(LAST_CHECKPOINT), &self.checkpoint(state))?;
        std::fs::write(dir.join(LOSS_CSV), curve_csv(&outcome.curve))?;
        if !outcome.validation.is_empty() {
            let mut text = String::from("epoch,l1,psnr\n");
            for s in &outcome.validation {
                text.push_str(&format!("{},{},{}\n", s.epoch, s.l1, s.psnr));
            }
            std::fs::write(dir.join(VALIDATION_CSV), text)?;
        }
        Ok(())
    }
}

fn l2_norm<T: Real>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|&x| x.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt()
}

fn diagnostic(step: u64, parts: &LossParts, norms: &[(String, f64)]) -> String {
    let mut sorted: Vec<&(String, f64)> = norms.iter().collect();
    // non-finite norms first, then the largest
    sorted.sort_by(|a, b| {
        let key = |x: f64| if x.is_finite() { x } else { f64::INFINITY };
        key(b.1).total_cmp(&key(a.1))
    });
    let listed: Vec<String> = sorted.iter().take(8).map(|(n, v)| format!("{n}={v:.3e}")).collect();
    format!(
        "step {step}: loss total {} (l1 {}, chroma {}, sobel {}); largest gradient norms: {}",
        parts.total,
        parts.l1,
        parts.chroma,
        parts.sobel,
        listed.join(", ")
    )
}

/// Adam with bias correction. Parameters without a gradient are treated as
/// having a zero gradient. A zero learning rate leaves parameters untouched
/// (the moments still advance).
fn adam_update<T: Real>(state: &mut TrainState<T>, grads: &[(String, Tensor<T>)], lr: f64, a: &AdamConfig) -> Result<()> {
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - a.beta1.powi(t);
    let c2 = 1.0 - a.beta2.powi(t);
    let (b1, b2) = (T::lit(a.beta1), T::lit(a.beta2));
    let (ob1, ob2) = (T::lit(1.0 - a.beta1), T::lit(1.0 - a.beta2));
    let (ic1, ic2) = (T::lit(1.0 / c1), T::lit(1.0 / c2));
    let (lr_t, eps) = (T::lit(lr), T::lit(a.eps));
    let mut gi = grads.iter().peekable();
    let names: Vec<String> = state.params.names().cloned().collect();
    for name in names {
        // gradients arrive in the same (lexical) order as the store
        let g = match gi.peek() {
            Some((n, _)) if *n == name => gi.next().map(|(_, g)| g),
            _ => None,
        };
        let p = state.params.get_mut(&name)?;
        let m = state.m.get_mut(&name)?;
        let v = state.v.get_mut(&name)?;
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::Dimension(format!("moments of `{name}` are not shaped like the parameter")));
        }
        if let Some(g) = g.filter(|g| g.shape() != p.shape()) {
            return Err(Error::Dimension(format!("gradient of `{name}` has shape {:?}", g.shape())));
        }
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        match g {
            Some(g) => {
                for (((x, m), v), &gv) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                    *m = b1 * *m + ob1 * gv;
                    *v = b2 * *v + ob2 * gv * gv;
                    if lr != 0.0 {
                        *x -= lr_t * (*m * ic1) / ((*v * ic2).sqrt() + eps);
                    }
                }
            }
            None => {
                for ((x, m), v) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()) {
                    *m = b1 * *m;
                    *v = b2 * *v;
                    if lr != 0.0 {
                        *x -= lr_t * (*m * ic1) / ((*v * ic2).sqrt() + eps);
                    }
                }
            }
        }
    }
    if let Some((n, _)) = gi.next() {
        return Err(Error::Dimension(format!("gradient for unknown parameter `{n}`")));
    }
    Ok(())
}

/// Runs the model on one image with frozen parameters; the result is clamped.
pub fn predict<T: Real>(model: &WaterFormer, params: &ParamStore<T>, img: &ImageRgb) -> Result<ImageRgb> {
    model.enhance(params, img).map(|(out, _)| out)
}

/// Mean L1 and mean PSNR of clamped predictions over a split.
pub fn validate<T: Real>(model: &WaterFormer, params: &ParamStore<T>, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let (mut l1, mut score) = (0.0, 0.0);
    for s in &ds.samples {
        let pred = predict(model, params, &s.degraded)?;
        l1 += l1_loss(&s.reference, &pred)?;
        score += psnr(&s.reference, &pred)?;
    }
    let n = ds.len() as f64;
    Ok((l1 / n, score / n))
}

/// Scores every sample of a split.
pub fn evaluate_dataset<T: Real>(
    model: &WaterFormer,
    params: &ParamStore<T>,
    ds: &Dataset,
    select: MetricSelection,
    opts: MetricOptions,
) -> Result<MetricReport> {
    let rows = ds
        .samples
        .iter()
        .map(|s| {
            let pred = predict(model, params, &s.degraded)?;
            score_image(s.id.clone(), Some(&s.reference), &pred, select, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(rows))
}

/// The result of training and scoring one ablation variant.
#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub flags: ComponentFlags,
    pub num_params: usize,
    /// Scores on the held-out split.
    pub report: MetricReport,
    pub curve: Vec<CurvePoint>,
    pub validation: Vec<EpochScore>,
}

impl VariantOutcome {
    pub fn loss_trend_decreasing(&self) -> bool {
        trend_decreasing(&self.curve, 10)
    }
}

/// The held-out split used for scoring: test when present, otherwise val.
pub fn held_out_split(manifest: &Manifest) -> Result<Split> {
    [Split::Test, Split::Val]
        .into_iter()
        .find(|&s| manifest.count(s) > 0)
        .ok_or_else(|| Error::Config("manifest has no test or val entries to evaluate on".into()))
}

/// Trains `variant` from scratch with the settings of `cfg` and scores it on
/// the held-out split. Run artifacts go to `out_dir` when given.
pub fn run_variant(variant: Variant, manifest: &Manifest, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<VariantOutcome> {
    let data = VariantData::load(manifest, cfg)?;
    run_variant_on(variant, &data, cfg, out_dir)
}

/// Decoded splits shared by several variant runs.
pub struct VariantData {
    pub train: Dataset,
    pub val: Dataset,
    pub held_out: Dataset,
}

impl VariantData {
    pub fn load(manifest: &Manifest, cfg: &TrainConfig) -> Result<Self> {
        let size = cfg.train_size();
        let held = held_out_split(manifest)?;
        Ok(VariantData {
            train: Dataset::load(manifest, Split::Train, size, cfg.interpolation)?,
            val: Dataset::load(manifest, Split::Val, size, cfg.interpolation)?,
            held_out: Dataset::load(manifest, held, size, cfg.interpolation)?,
        })
    }
}

pub fn run_variant_on(variant: Variant, data: &VariantData, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<VariantOutcome> {
    let cfg = TrainConfig { variant, ..cfg.clone() };
    match cfg.dtype {
        DType::F32 => run_variant_typed::<f32>(&cfg, data, out_dir),
        DType::F64 => run_variant_typed::<f64>(&cfg, data, out_dir),
    }
}

fn run_variant_typed<T: Real>(cfg: &TrainConfig, data: &VariantData, out_dir: Option<&Path>) -> Result<VariantOutcome> {
    let trainer = Trainer::new(cfg.clone())?;
    let mut state = trainer.init_state::<T>();
    let dir: Option<PathBuf> = out_dir.map(|d| d.join(cfg.variant.name()));
    // the held-out split is scored with the parameters of the best validation epoch
    let (fit, best) = trainer.fit_tracking_best(&mut state, &data.train, Some(&data.val), dir.as_deref(), Vec::new())?;
    let report = evaluate_dataset(&trainer.model, &best, &data.held_out, MetricSelection::default(), MetricOptions::default())?;
    log::info!("variant {}: {}", cfg.variant, report.summary());
    Ok(VariantOutcome {
        variant: cfg.variant,
        flags: cfg.variant.flags(),
        num_params: trainer.model.count_params(),
        report,
        curve: fit.curve,
        validation: fit.validation,
    })
}

/// Component table of an ablation: one row per variant with check marks for
/// the enabled components and the held-out SSIM / PSNR.
pub fn ablation_table(rows: &[VariantOutcome]) -> String {
    let mark = |b: bool| if b { "yes" } else { "-" };
    let mut out = format!(
        "{:<12} {:>5} {:>5} {:>7} {:>6} {:<20} {:>8} {:>8}\n",
        "variant", "CRB", "CFB", "chroma", "sobel", "change", "SSIM", "PSNR"
    );
    for r in rows {
        let f = r.flags;
        let fmt = |v: Option<f64>, p: usize| v.map_or("n/a".to_string(), |v| format!("{v:.p$}"));
        out.push_str(&format!(
            "{:<12} {:>5} {:>5} {:>7} {:>6} {:<20} {:>8} {:>8}\n",
            r.variant.name(),
            mark(f.crb),
            mark(f.cfb),
            mark(f.chroma),
            mark(f.sobel),
            r.variant.swap_label(),
            fmt(r.report.mean_ssim(), 4),
            fmt(r.report.mean_psnr(), 2),
        ));
    }
    out
}

/// The same table as comma-separated values.
pub fn ablation_csv(rows: &[VariantOutcome]) -> String {
    let mut out = String::from("variant,crb,cfb,chroma,sobel,change,ssim,psnr,params,loss_trend_decreasing\n");
    for r in rows {
        let f = r.flags;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.variant.name(),
            f.crb,
            f.cfb,
            f.chroma,
            f.sobel,
            r.variant.swap_label(),
            opt(r.report.mean_ssim()),
            opt(r.report.mean_psnr()),
            r.num_params,
            r.loss_trend_decreasing()
        ));
    }
    out
}

/// Evaluates an eager forward pass on a batch; used by tests and tooling that
/// need predictions without gradients.
pub fn forward_batch<T: Real>(model: &WaterFormer, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut b = Eager::new(params);
    let xv = b.constant(x.clone());
    let y = model.forward(&mut b, &xv)?;
    Ok(b.value(&y).clone())
}
