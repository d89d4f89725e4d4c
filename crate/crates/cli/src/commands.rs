use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use waterformer::data::{self, build_synthetic_corpus, write_procedural_scenes, CorpusSpec, Manifest};
use waterformer::metrics::{score_image, MetricOptions, MetricReport, MetricSelection, NrmseNorm, SsimMode};
use waterformer::net::WaterFormer;
use waterformer::physics::WaterTable;
use waterformer::train::{
    ablation_csv, ablation_table, load_any_checkpoint, load_checkpoint, parse_curve_csv, parse_variants, run_variant_on,
    AnyCheckpoint, Checkpoint, Trainer, TrainConfig, TrainState, VariantData, LAST_CHECKPOINT, LOSS_CSV,
};
use waterformer::{DType, Error, ParamStore, Real};

use crate::{
    AblateArgs, Command, EnhanceArgs, EvaluateArgs, InspectArgs, NrmseArg, Precision, Preset, SsimModeArg,
    SynthesizeArgs, TrainArgs, TrainOverrides,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synthesize(a) => synthesize(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Inspect(a) => inspect(a),
    }
}

/// Maps a failure to the documented exit code by the library error kind
/// anywhere in its chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::Ingestion { .. } | Error::Integrity(_) | Error::Incompatible(_) => 3,
                Error::Dimension(_) | Error::Domain(_) | Error::NonFinite(_) | Error::Io(_) => 4,
            };
        }
    }
    4
}

fn data_error(path: &Path, reason: impl ToString) -> anyhow::Error {
    Error::ingestion(path, reason).into()
}

fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let table = match &a.water_table {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| data_error(p, e))?;
            WaterTable::from_toml(&text)?
        }
        None => WaterTable::builtin(),
    };
    let clean = match a.clean {
        Some(dir) => dir,
        None => {
            let dir = a.out.join("clean");
            write_procedural_scenes(&dir, a.count, a.scene_size, a.scene_size, a.seed)?;
            dir
        }
    };
    let spec = CorpusSpec {
        types: a.types.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        depth_min: a.depth_min,
        depth_max: a.depth_max,
        count: a.count,
        seed: a.seed,
        gradient_prob: a.gradient_prob,
    };
    let manifest = build_synthetic_corpus(&clean, &a.out, &spec, &table)?;
    println!(
        "wrote {} pairs to {} (train {}, val {}, test {})",
        manifest.entries.len(),
        a.out.join(data::MANIFEST_FILE).display(),
        manifest.count(data::Split::Train),
        manifest.count(data::Split::Val),
        manifest.count(data::Split::Test)
    );
    Ok(())
}

/// Preset, then config file, then individual flags.
fn build_config(o: &TrainOverrides, variant: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = match o.preset {
        Some(Preset::Full) => TrainConfig::full_scale(),
        _ => TrainConfig::default(),
    };
    if let Some(path) = &o.config {
        let text = std::fs::read_to_string(path).map_err(|e| data_error(path, e))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // lay the file over the preset so absent keys keep preset values
        let toml::Value::Table(mut base) = toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))? else {
            unreachable!("a struct serializes to a table")
        };
        merge(&mut base, std::mem::take(&mut table));
        cfg = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    macro_rules! set {
        ($flag:expr => $($field:ident).+) => {
            if let Some(v) = $flag {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(o.epochs => epochs);
    set!(o.batch_size => batch_size);
    set!(o.lr => lr0);
    set!(o.decay_every => decay_every);
    set!(o.decay_factor => decay_factor);
    set!(o.seed => seed);
    set!(o.image_size => image_size);
    set!(o.w_l1 => weights.l1);
    set!(o.w_chroma => weights.chroma);
    set!(o.w_sobel => weights.sobel);
    set!(o.log_every => log_every);
    if let Some(c) = o.grad_clip {
        cfg.grad_clip = Some(c);
    }
    if let Some(m) = o.max_steps {
        cfg.max_steps = Some(m);
    }
    if o.no_augment {
        cfg.augment = false;
    }
    if let Some(p) = o.dtype {
        cfg.dtype = match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        };
    }
    if let Some(v) = variant {
        cfg.variant = v.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let m = Manifest::load(path)?;
    if m.entries.is_empty() {
        return Err(data_error(path, "manifest lists no pairs"));
    }
    Ok(m)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = build_config(&a.overrides, a.variant.as_deref())?;
    let manifest = load_manifest(&a.data)?;
    let data = VariantData::load(&manifest, &cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml_string()?)?;
    log::info!(
        "training {} on {} pairs ({} val), {} epochs, batch {}, lr {}",
        cfg.variant,
        data.train.len(),
        data.val.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.lr0
    );
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(&a, cfg, &data),
        DType::F64 => train_typed::<f64>(&a, cfg, &data),
    }
}

fn train_typed<T: Real>(a: &TrainArgs, cfg: TrainConfig, data: &VariantData) -> Result<()> {
    let trainer = Trainer::new(cfg)?;
    let (mut state, history): (TrainState<T>, _) = if a.resume {
        let path = a.out.join(LAST_CHECKPOINT);
        let ck: Checkpoint<T> = load_checkpoint(&path).with_context(|| format!("resuming from {}", path.display()))?;
        if ck.model != trainer.model.config {
            return Err(Error::Incompatible("checkpoint architecture differs from the requested configuration".into()).into());
        }
        trainer.model.check_params(&ck.state.params)?;
        let curve_path = a.out.join(LOSS_CSV);
        let history = match std::fs::read_to_string(&curve_path) {
            Ok(text) => parse_curve_csv(&text)?,
            Err(_) => Vec::new(),
        };
        log::info!("resuming at epoch {}, step {}", ck.state.epoch, ck.state.step);
        (ck.state, history)
    } else {
        (trainer.init_state(), Vec::new())
    };
    let t0 = Instant::now();
    let outcome = trainer.fit(&mut state, &data.train, Some(&data.val), Some(&a.out), history)?;
    let last = outcome.curve.last().map(|p| p.parts.total);
    println!(
        "{} after {} steps ({:.1}s): final loss {}, best validation PSNR {}",
        if outcome.completed { "finished" } else { "stopped" },
        state.step,
        t0.elapsed().as_secs_f64(),
        last.map_or("n/a".into(), |v| format!("{v:.5}")),
        state.best_val_psnr.map_or("n/a".into(), |v| format!("{v:.3} dB"))
    );
    Ok(())
}

fn input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let files = data::list_images(input)?;
        if files.is_empty() {
            return Err(data_error(input, "no PNG or JPEG images found"));
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(data_error(input, "no such file or directory"))
    }
}

fn output_name(path: &Path) -> Result<String> {
    let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| data_error(path, "file name is not UTF-8"))?;
    Ok(format!("{stem}.png"))
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    let ck = load_any_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let inputs = input_images(&a.input)?;
    std::fs::create_dir_all(&a.output)?;
    match ck {
        AnyCheckpoint::F32(c) => enhance_typed(&c, &inputs, &a.output),
        AnyCheckpoint::F64(c) => enhance_typed(&c, &inputs, &a.output),
    }
}

fn enhance_typed<T: Real>(ck: &Checkpoint<T>, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let model = WaterFormer::new(ck.model.clone())?;
    model.check_params(&ck.state.params)?;
    println!("model: {} parameters, {:.3} GMACs at 256x256", model.count_params(), model.count_macs(256, 256) as f64 / 1e9);
    let mut seen = BTreeMap::new();
    for path in inputs {
        let name = output_name(path)?;
        if let Some(prev) = seen.insert(name.clone(), path.clone()) {
            return Err(data_error(path, format!("output name {name} collides with {}", prev.display())));
        }
        let img = data::load_image(path)?;
        let t0 = Instant::now();
        let (result, clamp) = model.enhance(&ck.state.params, &img)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        data::save_png(&out.join(&name), &result)?;
        let (h, w) = img.dims();
        println!("{name}\t{h}x{w}\t{ms:.1} ms{}", if clamp.clipped() { "\t(clamped)" } else { "" });
    }
    Ok(())
}

/// Images of a directory keyed by file stem.
fn by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(data_error(dir, "not a directory"));
    }
    let mut out = BTreeMap::new();
    for p in data::list_images(dir)? {
        let stem = p.file_stem().and_then(|s| s.to_str()).ok_or_else(|| data_error(&p, "file name is not UTF-8"))?;
        if let Some(prev) = out.insert(stem.to_string(), p.clone()) {
            return Err(data_error(&p, format!("stem `{stem}` also used by {}", prev.display())));
        }
    }
    if out.is_empty() {
        return Err(data_error(dir, "no PNG or JPEG images found"));
    }
    Ok(out)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let preds = by_stem(&a.pred)?;
    let refs = match &a.r#ref {
        // a manifest pairs each prediction (named after its entry id) with the
        // entry's reference; extra entries are fine
        Some(path) if path.is_file() => {
            let manifest = load_manifest(path)?;
            let refs: BTreeMap<String, PathBuf> =
                manifest.entries.into_iter().map(|e| (e.id, e.reference)).collect();
            let orphans: Vec<String> =
                preds.keys().filter(|k| !refs.contains_key(*k)).map(|k| format!("pred:{k}")).collect();
            if !orphans.is_empty() {
                return Err(data_error(&a.pred, format!("predictions missing from the manifest: {}", orphans.join(", "))));
            }
            Some(refs)
        }
        Some(dir) => {
            let refs = by_stem(dir)?;
            let orphans: Vec<String> = preds
                .keys()
                .filter(|k| !refs.contains_key(*k))
                .map(|k| format!("pred:{k}"))
                .chain(refs.keys().filter(|k| !preds.contains_key(*k)).map(|k| format!("ref:{k}")))
                .collect();
            if !orphans.is_empty() {
                return Err(data_error(&a.pred, format!("unmatched images: {}", orphans.join(", "))));
            }
            Some(refs)
        }
        None => None,
    };
    let opts = MetricOptions {
        ssim_mode: match a.ssim_mode {
            SsimModeArg::Luma => SsimMode::Luma,
            SsimModeArg::PerChannel => SsimMode::PerChannel,
        },
        nrmse_norm: match a.nrmse_norm {
            NrmseArg::Euclidean => NrmseNorm::Euclidean,
            NrmseArg::MinMax => NrmseNorm::MinMax,
        },
    };
    let select = MetricSelection { full_reference: refs.is_some(), no_reference: true };
    let mut rows = Vec::with_capacity(preds.len());
    for (stem, path) in &preds {
        let pred = data::load_image(path)?;
        let gt = match &refs {
            Some(r) => {
                let gt = data::load_image(&r[stem])?;
                if gt.dims() != pred.dims() {
                    return Err(data_error(path, format!("size {:?} differs from reference {:?}", pred.dims(), gt.dims())));
                }
                Some(gt)
            }
            None => None,
        };
        rows.push(score_image(stem.clone(), gt.as_ref(), &pred, select, opts)?);
    }
    let report = MetricReport::new(rows);
    let csv = report.to_csv();
    print!("{csv}");
    let out = a.out.unwrap_or_else(|| a.pred.join("metrics.csv"));
    std::fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
    log::info!("{}; report written to {}", report.summary(), out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let variants = parse_variants(&a.variants)?;
    if variants.is_empty() {
        bail!(Error::Config("no variants given".into()));
    }
    let cfg = build_config(&a.overrides, None)?;
    let manifest = load_manifest(&a.data)?;
    let data = VariantData::load(&manifest, &cfg)?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let t0 = Instant::now();
        let outcome = run_variant_on(v, &data, &cfg, a.out.as_deref())?;
        log::info!(
            "{v}: {} steps in {:.1}s, loss trend {}",
            outcome.curve.len(),
            t0.elapsed().as_secs_f64(),
            if outcome.loss_trend_decreasing() { "decreasing" } else { "NOT decreasing" }
        );
        rows.push(outcome);
    }
    let table = ablation_table(&rows);
    print!("{table}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("ablation.txt"), &table)?;
        std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
        for r in &rows {
            std::fs::write(out.join(r.variant.name()).join("metrics.csv"), r.report.to_csv())?;
        }
    }
    Ok(())
}

fn describe_store<T: Real>(store: &ParamStore<T>, tensors: bool) {
    if tensors {
        for (name, t) in store.iter() {
            println!("  {name}\t{:?}", t.shape());
        }
    }
}

fn inspect(a: InspectArgs) -> Result<()> {
    let size = a.size;
    if let Some(path) = &a.checkpoint {
        let ck = load_any_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let model = WaterFormer::new(ck.model().clone())?;
        println!("checkpoint: {}", path.display());
        println!("dtype: {:?}", ck.dtype());
        let (train, epoch, step, best) = match &ck {
            AnyCheckpoint::F32(c) => {
                describe_store(&c.state.params, a.tensors);
                (&c.train, c.state.epoch, c.state.step, c.state.best_val_psnr)
            }
            AnyCheckpoint::F64(c) => {
                describe_store(&c.state.params, a.tensors);
                (&c.train, c.state.epoch, c.state.step, c.state.best_val_psnr)
            }
        };
        println!("variant: {}", train.variant);
        println!("epoch: {epoch}, step: {step}");
        if let Some(b) = best {
            println!("best validation PSNR: {b:.3} dB");
        }
        print_model(&model, size);
        return Ok(());
    }
    let cfg = build_config(&a.overrides, a.variant.as_deref())?;
    let (model_cfg, objective) = cfg.resolved();
    let model = WaterFormer::new(model_cfg)?;
    println!("variant: {}", cfg.variant);
    println!(
        "loss weights: l1 {}, chroma {}, sobel {}",
        objective.weights.l1, objective.weights.chroma, objective.weights.sobel
    );
    if a.tensors {
        for s in model.param_specs() {
            println!("  {}\t{:?}", s.name, s.shape);
        }
    }
    print_model(&model, size);
    Ok(())
}

fn print_model(model: &WaterFormer, size: usize) {
    let c = &model.config;
    println!(
        "architecture: widths {:?}, depths {:?}/{:?}, heads {:?}, window {}, CRB {}, fusion {:?}, recon {:?}, activation {:?}",
        c.stage_widths,
        c.stage_depths,
        c.decoder_depths,
        c.heads,
        c.window_size,
        c.use_crb,
        c.effective_fusion(),
        c.recon_kind,
        c.activation
    );
    println!("parameters: {}", model.count_params());
    println!("MACs at {size}x{size}: {} ({:.3} G)", model.count_macs(size, size), model.count_macs(size, size) as f64 / 1e9);
}
