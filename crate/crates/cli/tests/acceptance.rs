//! Acceptance gates, one line per gate.
//!
//! Runs without the libtest harness so every gate reports `PASS` or `FAIL`
//! on its own line even when an earlier one fails; the process exits non-zero
//! if any gate fails. Pass gate numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waterformer::autograd::Graph;
use waterformer::backend::AttentionKind;
use waterformer::color::{rgb_to_yiq, rgb_to_yiq_pixel, yiq_to_rgb};
use waterformer::data::{build_synthetic_corpus, write_procedural_scenes, CorpusSpec, Dataset, Interpolation, Split};
use waterformer::losses::{self, ChromaConfig};
use waterformer::metrics;
use waterformer::net::layers::{rln_normalize, Conv, Fusion};
use waterformer::net::{FusionKind, Layer};
use waterformer::physics::{degrade, recover_analytic, DegradationParams, WaterTable};
use waterformer::train::checkpoint::{decode_any, encode};
use waterformer::train::{forward_batch, lr_at, parse_curve_csv, trend_decreasing, AnyCheckpoint, Trainer, TrainConfig};
use waterformer::{Backend, Eager, ImageRgb, ModelConfig, ParamStore, Tensor, WaterFormer};

type Gate = fn() -> Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> ImageRgb {
    ImageRgb::from_fn(h, w, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0))).unwrap()
}

fn random_tensor(rng: &mut impl Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------------------

fn physics_inverse() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (48, 48);
        let clean = random_image(&mut rng, h, w);
        let a = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
        let t = (0..h * w * 3).map(|_| rng.random_range(0.1..=1.0)).collect();
        let params = DegradationParams::new(a, h, w, t).map_err(|e| e.to_string())?;
        let (u, _) = degrade(&clean, &params).map_err(|e| e.to_string())?;
        let (back, _) = recover_analytic(&u, &params, 0.1).map_err(|e| e.to_string())?;
        for (x, y) in clean.pixels().iter().zip(back.pixels()) {
            worst = worst.max((x - y).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(worst <= 1e-6, format!("max abs error {worst:e}"))?;
    ensure(secs < 5.0, format!("took {secs:.2} s"))?;
    Ok(format!("100 images, max abs error {worst:.1e}, {secs:.2} s"))
}

fn soft_identity() -> Result<String, String> {
    let model = WaterFormer::new(ModelConfig::reference()).map_err(|e| e.to_string())?;
    let params = model.init::<f32>(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for side in [64, 250] {
        let img = random_image(&mut rng, side, side);
        let x = img.to_tensor::<f32>();
        let y = forward_batch(&model, &params, &x).map_err(|e| e.to_string())?;
        ensure(y.shape() == x.shape(), format!("{side}: output {:?}", y.shape()))?;
        let differing = x.data().iter().zip(y.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        ensure(differing == 0, format!("{side}x{side}: {differing} values differ from the input"))?;
        // the image-level path only adds the f32 rounding of the input
        let (out, _) = model.enhance(&params, &img).map_err(|e| e.to_string())?;
        let rounded = img.pixels().iter().map(|&v| v as f32 as f64);
        ensure(out.pixels().iter().copied().eq(rounded), format!("{side}x{side}: enhance is not the identity"))?;
    }
    Ok("forward(x) == x bit for bit at 64x64 and 250x250".into())
}

fn yiq() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let img = random_image(&mut rng, 16, 16);
        let (back, _) = yiq_to_rgb(&rgb_to_yiq(&img)).map_err(|e| e.to_string())?;
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, format!("round trip error {worst:e}"))?;
    let red = rgb_to_yiq_pixel([1.0, 0.0, 0.0]);
    ensure(red == [0.299, 0.596, 0.211], format!("(1,0,0) -> {red:?}"))?;
    Ok(format!("1000 images, max error {worst:.1e}; (1,0,0) -> {red:?}"))
}

/// `‖analytic − central difference‖ / ‖central difference‖` over an 18x18x3 prediction.
fn loss_gradient_error(seed: u64, which: usize) -> f64 {
    let chroma_cfg = ChromaConfig { window: 15, stride: 1, c1: 1e-3, c2: 1e-3, ..ChromaConfig::default() };
    fn apply<B: Backend<f64>>(b: &mut B, which: usize, cfg: &ChromaConfig, g: &B::Value, p: &B::Value) -> B::Value {
        match which {
            0 => losses::l1(b, g, p),
            1 => losses::chroma(b, g, p, cfg),
            _ => losses::sobel_color(b, g, p),
        }
        .unwrap()
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_tensor(&mut rng, [1, 3, 18, 18], 0.1, 0.9);
    // keep every component away from the |.| kink of the L1 and Sobel terms
    let pred = Tensor::from_fn(gt.shape(), |[n, c, y, x]| {
        let d: f64 = rng.random_range(0.01..0.08);
        gt.at(n, c, y, x) + if rng.random_bool(0.5) { d } else { -d }
    });

    let mut g = Graph::without_params();
    let gv = g.constant(gt.clone());
    let pv = g.leaf(pred.clone());
    let loss = apply(&mut g, which, &chroma_cfg, &gv, &pv);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(pv).unwrap().clone();

    let eval = |p: &Tensor<f64>| {
        let mut e = Eager::without_params();
        let gv = e.constant(gt.clone());
        let pv = e.constant(p.clone());
        let v = apply(&mut e, which, &chroma_cfg, &gv, &pv);
        e.item(&v)
    };
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    let mut probe = pred.clone();
    for i in 0..pred.len() {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = eval(&probe);
        probe.data_mut()[i] = x0 - h;
        let down = eval(&probe);
        probe.data_mut()[i] = x0;
        let fd = (up - down) / (2.0 * h);
        num += (analytic.data()[i] - fd).powi(2);
        den += fd * fd;
    }
    (num / den).sqrt()
}

fn loss_gradients() -> Result<String, String> {
    let t0 = Instant::now();
    let names = ["l1", "chroma", "sobel"];
    let errs: Vec<f64> = (0..3).map(|k| loss_gradient_error(10 + k as u64, k)).collect();
    let secs = t0.elapsed().as_secs_f64();
    let detail = names.iter().zip(&errs).map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    for (n, e) in names.iter().zip(&errs) {
        ensure(*e <= 1e-6, format!("{n} relative error {e:e} ({detail})"))?;
    }
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("relative errors {detail}; {secs:.2} s"))
}

fn normalization() -> Result<String, String> {
    let model = WaterFormer::new(ModelConfig::reference()).map_err(|e| e.to_string())?;
    let params = model.init::<f64>(0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_image(&mut rng, 64, 64).to_tensor::<f64>();
    let mut b = Eager::new(&params).capture_attention();
    let xv = b.constant(x);
    model.forward(&mut b, &xv).map_err(|e| e.to_string())?;
    let (mut rows, mut window_maps, mut channel_maps, mut worst) = (0usize, 0, 0, 0.0f64);
    for m in b.take_attention_maps() {
        match m.kind {
            AttentionKind::Window { .. } => window_maps += 1,
            AttentionKind::Channel { .. } => channel_maps += 1,
        }
        for row in m.rows() {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            rows += 1;
        }
    }
    ensure(window_maps > 0 && channel_maps > 0, "no attention captured")?;
    ensure(worst <= 1e-6, format!("attention row sum off by {worst:e}"))?;

    let fusion = Fusion::new(FusionKind::Cfb, "f", 24, 1.0);
    let mut specs = Vec::new();
    fusion.param_specs(&mut specs);
    let mut store = ParamStore::new();
    for s in specs {
        store.insert(s.name, random_tensor(&mut rng, s.shape, -0.5, 0.5));
    }
    let mut b = Eager::new(&store);
    let x1 = b.constant(random_tensor(&mut rng, [2, 24, 8, 8], -1.0, 1.0));
    let x2 = b.constant(random_tensor(&mut rng, [2, 24, 8, 8], -1.0, 1.0));
    let (a1, a2) = fusion.weights(&mut b, &x1, &x2).map_err(|e| e.to_string())?;
    let sum_err = b.value(&a1).data().iter().zip(b.value(&a2).data()).map(|(p, q)| (p + q - 1.0).abs()).fold(0.0, f64::max);
    let (s1, s2) = fusion.weights(&mut b, &x1, &x1).map_err(|e| e.to_string())?;
    let half_err = b.value(&s1).data().iter().chain(b.value(&s2).data()).map(|p| (p - 0.5).abs()).fold(0.0, f64::max);
    ensure(sum_err <= 1e-6, format!("CFB weights sum off by {sum_err:e}"))?;
    ensure(half_err <= 1e-6, format!("CFB weights for identical inputs off 0.5 by {half_err:e}"))?;
    Ok(format!(
        "{rows} attention rows ({window_maps} spatial, {channel_maps} channel maps) within {worst:.1e}; CFB sum {sum_err:.1e}, identical {half_err:.1e}"
    ))
}

fn rln_statistics() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn([2, 48, 16, 16], |[n, c, _, _]| {
        3.0 * n as f64 - 1.5 + 0.2 * c as f64 + rng.random_range(-4.0..4.0)
    });
    let mut b = Eager::<f64>::without_params();
    let xv = b.constant(x);
    let (normalized, _, _) = rln_normalize(&mut b, &xv, 1e-5).map_err(|e| e.to_string())?;
    let t = b.value(&normalized);
    let [n, c, h, w] = t.shape();
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let v: Vec<f64> = (0..c).map(|ch| t.at(i, ch, y, x)).collect();
                let mean = v.iter().sum::<f64>() / c as f64;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
                worst_mean = worst_mean.max(mean.abs());
                worst_var = worst_var.max((var - 1.0).abs());
            }
        }
    }
    ensure(worst_mean <= 1e-5, format!("channel mean {worst_mean:e}"))?;
    ensure(worst_var <= 1e-4, format!("channel variance off by {worst_var:e}"))?;
    Ok(format!("|mean| <= {worst_mean:.1e}, |var - 1| <= {worst_var:.1e}"))
}

fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut k = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let (mut acc, mut count) = (0.0, 0.0);
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let at = |p: &[f64], i: usize, j: usize| p[(y0 + i) * w + x0 + j];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += k[i][j] / total * at(a, i, j);
                    mb += k[i][j] / total * at(b, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (da, db) = (at(a, i, j) - ma, at(b, i, j) - mb);
                    va += k[i][j] / total * da * da;
                    vb += k[i][j] / total * db * db;
                    cov += k[i][j] / total * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

fn metric_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut e_ssim, mut e_psnr, mut e_nrmse) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let gt = random_image(&mut rng, 32, 32);
        let sigma: f64 = rng.random_range(0.02..0.3);
        let (pred, _) = gt.map_pixels(|p| p.map(|v| (v + rng.random_range(-sigma..sigma)).clamp(0.0, 1.0))).unwrap();
        let (g, p) = (gt.pixels(), pred.pixels());
        let n = g.len() as f64;
        let mse = g.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let psnr = 10.0 * (1.0 / mse).log10();
        let nrmse = mse.sqrt() / (g.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
        let y = |img: &ImageRgb| -> Vec<f64> {
            img.pixels().chunks(3).map(|q| 0.299 * q[0] + 0.587 * q[1] + 0.114 * q[2]).collect()
        };
        let ssim = naive_ssim(&y(&gt), &y(&pred), 32, 32);
        e_psnr = e_psnr.max((metrics::psnr(&gt, &pred).unwrap() - psnr).abs());
        e_nrmse = e_nrmse.max((metrics::nrmse(&gt, &pred).unwrap() - nrmse).abs());
        e_ssim = e_ssim.max((metrics::ssim(&gt, &pred).unwrap() - ssim).abs());
    }
    ensure(e_ssim <= 1e-6 && e_psnr <= 1e-6 && e_nrmse <= 1e-6, format!("ssim {e_ssim:e}, psnr {e_psnr:e}, nrmse {e_nrmse:e}"))?;
    let gt = ImageRgb::from_fn(32, 32, |_, _| std::array::from_fn(|_| rng.random_range(0.0..0.9))).unwrap();
    let (shifted, _) = gt.map_pixels(|p| p.map(|v| v + 0.1)).unwrap();
    let offset = metrics::psnr(&gt, &shifted).unwrap();
    ensure((offset - 20.0).abs() <= 1e-6, format!("+0.1 offset gives {offset} dB"))?;
    Ok(format!("50 pairs: ssim {e_ssim:.1e}, psnr {e_psnr:.1e}, nrmse {e_nrmse:.1e}; +0.1 offset {offset:.9} dB"))
}

fn overfit() -> Result<String, String> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_procedural_scenes(&dir.path().join("clean"), 8, 64, 64, 0).map_err(|e| e.to_string())?;
    let spec = CorpusSpec { types: vec!["3".into()], count: 8, seed: 0, ..CorpusSpec::default() };
    let mut manifest = build_synthetic_corpus(&dir.path().join("clean"), &dir.path().join("corpus"), &spec, &WaterTable::builtin())
        .map_err(|e| e.to_string())?;
    for e in &mut manifest.entries {
        e.split = Split::Train;
    }
    let ds = Dataset::load(&manifest, Split::Train, Some((64, 64)), Interpolation::Bilinear).map_err(|e| e.to_string())?;
    ensure(ds.len() == 8, format!("{} pairs", ds.len()))?;

    let cfg = TrainConfig {
        epochs: 2000,
        batch_size: 1,
        lr0: 1e-3,
        decay_every: 10_000,
        augment: false,
        seed: 0,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (mut best, mut reached) = (f64::NEG_INFINITY, None);
    let mut trainer = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut state = trainer.init_state::<f32>();
    // train in 100-step chunks, scoring the whole training set after each
    while state.step < 2000 {
        trainer.cfg.max_steps = Some(state.step + 100);
        trainer.fit(&mut state, &ds, None, None, Vec::new()).map_err(|e| e.to_string())?;
        let (_, psnr) = waterformer::train::validate(&trainer.model, &state.params, &ds).map_err(|e| e.to_string())?;
        best = best.max(psnr);
        if psnr >= 30.0 {
            reached = Some(state.step);
            break;
        }
    }
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    let step = reached.ok_or_else(|| format!("best train PSNR {best:.2} dB after 2000 steps"))?;
    ensure(mins <= 15.0, format!("took {mins:.1} min"))?;
    Ok(format!("train PSNR {best:.2} dB >= 30 dB at step {step}, {mins:.1} min"))
}

fn footprint() -> Result<String, String> {
    let model = WaterFormer::new(ModelConfig::reference()).map_err(|e| e.to_string())?;
    let (params, macs) = (model.count_params(), model.count_macs(256, 256));
    ensure((200_000..=500_000).contains(&params), format!("{params} parameters"))?;
    ensure((4_000_000_000..=12_000_000_000).contains(&macs), format!("{macs} MACs"))?;
    let toy = [Conv::new("a", 3, 16, 3, 1, 1.0), Conv::pointwise("b", 16, 3, 1.0)];
    let toy_params: usize = toy.iter().map(|l| l.num_params()).sum();
    let toy_macs: u64 = toy.iter().map(|l| l.macs(256, 256)).sum();
    let closed_params = (3 * 16 * 3 * 3 + 16) + (16 * 3 + 3);
    let closed_macs = ((3 * 16 * 9 + 16 * 3) * 256 * 256) as u64;
    ensure(toy_params == closed_params, format!("toy params {toy_params} vs {closed_params}"))?;
    ensure(toy_macs == closed_macs, format!("toy MACs {toy_macs} vs {closed_macs}"))?;
    Ok(format!(
        "{:.3}M parameters, {:.3} GMACs at 256x256; toy {toy_params} params / {toy_macs} MACs match closed form",
        params as f64 / 1e6,
        macs as f64 / 1e9
    ))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_waterformer"))
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn ablation() -> Result<String, String> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let corpus = root.join("corpus");
    run_cli(&["synthesize", "--out", corpus.to_str().unwrap(), "--count", "20", "--types", "3,7", "--seed", "0"])?;
    let manifest = corpus.join("manifest.csv");
    let variants = ["base", "v1", "v2", "v3", "v4", "v5"];
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        let printed = run_cli(&[
            "ablate",
            "--variants",
            "base,v1,v2,v3,v4,v5",
            "--data",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "10",
            "--image-size",
            "32",
        ])?;
        tables.push(printed);
    }
    let (a, b) = (root.join("a"), root.join("b"));
    ensure(tables[0] == tables[1], "printed tables differ between identical runs")?;
    ensure(read(&a.join("ablation.csv"))? == read(&b.join("ablation.csv"))?, "ablation.csv differs between runs")?;
    for v in variants {
        for f in ["last.wfk", "loss.csv"] {
            ensure(read(&a.join(v).join(f))? == read(&b.join(v).join(f))?, format!("{v}/{f} differs between runs"))?;
        }
    }

    let table = &tables[0];
    let header: Vec<&str> = table.lines().next().unwrap_or_default().split_whitespace().collect();
    ensure(
        header == ["variant", "CRB", "CFB", "chroma", "sobel", "change", "SSIM", "PSNR"],
        format!("table header {header:?}"),
    )?;
    ensure(table.lines().count() == 1 + variants.len(), "table should have one row per variant")?;

    for v in variants {
        let text = String::from_utf8(read(&a.join(v).join("loss.csv"))?).map_err(|e| e.to_string())?;
        let curve = parse_curve_csv(&text).map_err(|e| e.to_string())?;
        ensure(trend_decreasing(&curve, 10), format!("{v}: training loss trend is not decreasing"))?;
    }

    let csv = String::from_utf8(read(&a.join("ablation.csv"))?).map_err(|e| e.to_string())?;
    let psnr_of = |name: &str| -> Result<f64, String> {
        let row = csv.lines().find(|l| l.split(',').next() == Some(name)).ok_or(format!("{name} missing"))?;
        row.split(',').nth(7).and_then(|s| s.parse().ok()).ok_or(format!("{name}: no PSNR"))
    };
    let (base, v5) = (psnr_of("base")?, psnr_of("v5")?);
    ensure(v5 >= base, format!("held-out PSNR v5 {v5:.2} dB < base {base:.2} dB"))?;
    Ok(format!(
        "6 variants x 2 identical runs, all loss trends decreasing; held-out PSNR base {base:.2} dB, v5 {v5:.2} dB; {:.1} min",
        t0.elapsed().as_secs_f64() / 60.0
    ))
}

fn schedule() -> Result<String, String> {
    let cfg = TrainConfig::default();
    let got = [0, 50, 100].map(|e| lr_at(e, &cfg));
    ensure(got == [0.001, 0.0005, 0.00025], format!("{got:?}"))?;
    Ok(format!("epochs 0/50/100 -> {got:?}"))
}

fn checkpoint_determinism() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let samples = (0..4)
        .map(|k| {
            let reference = random_image(&mut rng, 32, 32);
            let (degraded, _) = reference.map_pixels(|p| [0.6 * p[0] + 0.05, 0.85 * p[1] + 0.1, 0.9 * p[2] + 0.08]).unwrap();
            waterformer::data::PairedSample { id: format!("s{k}"), degraded, reference }
        })
        .collect();
    let ds = Dataset::new(samples);
    let cfg = TrainConfig { epochs: 3, batch_size: 2, image_size: 32, ..TrainConfig::default() };
    let trainer = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;

    let mut straight = trainer.init_state::<f32>();
    trainer.fit(&mut straight, &ds, None, None, Vec::new()).map_err(|e| e.to_string())?;

    let partial = Trainer::new(TrainConfig { max_steps: Some(3), ..cfg.clone() }).map_err(|e| e.to_string())?;
    let mut first = partial.init_state::<f32>();
    partial.fit(&mut first, &ds, None, None, Vec::new()).map_err(|e| e.to_string())?;
    let bytes = encode(&partial.checkpoint(&first)).map_err(|e| e.to_string())?;
    let AnyCheckpoint::F32(ck) = decode_any(&bytes).map_err(|e| e.to_string())? else {
        return Err("checkpoint decoded with the wrong precision".into());
    };
    let mut resumed = ck.state;
    trainer.fit(&mut resumed, &ds, None, None, Vec::new()).map_err(|e| e.to_string())?;

    ensure(resumed.step == straight.step, format!("steps {} vs {}", resumed.step, straight.step))?;
    let mismatched = straight
        .params
        .iter()
        .chain(straight.m.iter())
        .chain(straight.v.iter())
        .zip(resumed.params.iter().chain(resumed.m.iter()).chain(resumed.v.iter()))
        .filter(|((_, x), (_, y))| x.data().iter().zip(y.data()).any(|(p, q)| p.to_bits() != q.to_bits()))
        .count();
    ensure(mismatched == 0, format!("{mismatched} tensors differ"))?;
    ensure(resumed == straight, "training state differs")?;
    Ok(format!("interrupted at step 3 of {}, resumed from bytes: parameters and moments bit-identical", straight.step))
}

fn main() {
    let gates: [(u32, &str, Gate); 12] = [
        (1, "physics inverse", physics_inverse),
        (2, "soft-reconstruction identity", soft_identity),
        (3, "YIQ round trip", yiq),
        (4, "loss gradient oracle", loss_gradients),
        (5, "attention/fusion normalization", normalization),
        (6, "RLN statistics", rln_statistics),
        (7, "metric oracles", metric_oracles),
        (8, "overfit gate", overfit),
        (9, "footprint bracket", footprint),
        (10, "ablation harness", ablation),
        (11, "learning-rate schedule", schedule),
        (12, "checkpoint determinism", checkpoint_determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, gate) in gates {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(gate)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({why}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
