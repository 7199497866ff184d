//! End-to-end acceptance checks, one numbered criterion each.
//!
//! Everything runs inside a single test so the heavy training runs do not
//! compete for the CPU. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion does.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use mdvit::dsp::{self, time_to_column};
use mdvit::iqsim::{add_noise, class_presets, simulate_rotor_iq, ClassId, CpiSpec, CPI_PULSES, DEFAULT_PRF_HZ};
use mdvit::mdtcwt::{denoise, dt_forward, dt_inverse, DEFAULT_LEVELS};
use mdvit::rng::{derive_seed, rng_from_seed};
use mdvit::train::{
    build_dataset, evaluate, synthesize, train, DatasetSpec, Labeled, ManifestSamples, Metrics, Samples, Split, TrainConfig, Trainer, HISTORY_FILE,
};
use mdvit::vit::{
    count_params, forward, forward_compact, init_params, loss_and_gradients, pad_and_mask, raw_attention_map, Mode, PaddedInput, ViTConfig, ViTParams,
};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

struct Report {
    lines: Vec<String>,
    failed: Vec<usize>,
}

impl Report {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        let line = format!("criterion {n:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line);
        if !pass {
            self.failed.push(n);
        }
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn perfect_reconstruction() -> (bool, String) {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = rng_from_seed(101);
    for i in 0..100 {
        let n = [512, 1024, 3072][i % 3];
        let levels = 1 + i % 4;
        let x: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
        let y = dt_inverse(&dt_forward(&x, levels).unwrap()).unwrap();
        let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = x.iter().map(|a| a.norm_sqr()).sum();
        worst = worst.max((num / den).sqrt());
    }
    let el = t.elapsed();
    (worst <= 1e-8 && el < Duration::from_secs(5), format!("max rel err {worst:.2e} over 100 signals, {:.2}s", secs(el)))
}

fn denoising_gain() -> (bool, String) {
    let t = Instant::now();
    let mut gains = Vec::new();
    for class_id in ClassId::ALL {
        for i in 0..30u64 {
            let n = CPI_PULSES[i as usize % 3];
            let seed = derive_seed(500 + class_id.index() as u64, i);
            let raw = simulate_rotor_iq(&class_presets(class_id), &CpiSpec::new(n), seed).unwrap();
            let clean = dsp::highpass(&raw, dsp::DEFAULT_CUTOFF_HZ).unwrap();
            let noisy = add_noise(&clean, 0.0, derive_seed(seed, 9)).unwrap();
            let out = denoise(&noisy, DEFAULT_LEVELS).unwrap();
            gains.push(dsp::snr_db(&clean, &out).unwrap() - dsp::snr_db(&clean, &noisy).unwrap());
        }
    }
    let el = t.elapsed();
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let worst = gains.iter().copied().fold(f64::INFINITY, f64::min);
    (
        mean >= 3.0 && worst >= -0.5 && el < Duration::from_secs(30),
        format!("mean gain {mean:.2} dB, worst {worst:.2} dB over {} records, {:.1}s", gains.len(), secs(el)),
    )
}

fn spectrogram_shapes() -> (bool, String) {
    let mut ok = true;
    let mut widths = Vec::new();
    for (n, want) in CPI_PULSES.iter().zip([384usize, 768, 1152]) {
        let iq = simulate_rotor_iq(&class_presets(ClassId::Heli4), &CpiSpec::new(*n), 1).unwrap();
        let img = dsp::spectrogram(&iq).unwrap();
        ok &= img.width == want && img.height == 384;
        // Columns per second as the exact rational width * prf / pulses,
        // compared by cross-multiplication against the 1024-pulse record.
        ok &= img.width * 1024 == 384 * n;
        ok &= ((img.width as u64) * (DEFAULT_PRF_HZ as u64)).is_multiple_of(*n as u64);
        widths.push(img.width);
    }
    (ok, format!("widths {widths:?}, 3750 columns/s for every duration"))
}

fn accounting() -> (bool, String) {
    let full = ViTConfig::full();
    let n = count_params(&full);
    let wide = ViTConfig { canvas_width: 1536, ..full.clone() };
    let delta = count_params(&wide) - n;
    let within = (n as f64 - 10.6e6).abs() <= 0.05 * 10.6e6;
    (
        within && full.seq_len() == 433 && delta == 144 * 384,
        format!("params {n}, seq_len {}, delta {delta} (144*384 = {})", full.seq_len(), 144 * 384),
    )
}

fn tiny_config(mask_padding: bool) -> ViTConfig {
    ViTConfig {
        patch: 4,
        embed_dim: 8,
        heads: 2,
        te_layers: 1,
        mlp_dim: 32,
        n_classes: 2,
        canvas_height: 8,
        canvas_width: 8,
        dropout_rate: 0.1,
        mask_padding,
    }
}

fn tiny_input(seed: u64) -> PaddedInput {
    let mut rng = rng_from_seed(seed);
    let canvas = (0..64).map(|k| if k % 8 < 4 { rng.gen::<f32>() } else { 0.0 }).collect();
    PaddedInput { canvas, canvas_height: 8, canvas_width: 8, content_width: 4, patch: 4, patch_mask: vec![true, false, true, false] }
}

/// Largest relative error of the analytic gradient against central
/// differences, over every scalar parameter.
fn fd_error(cfg: &ViTConfig) -> f64 {
    let x = tiny_input(3);
    let mut params: ViTParams<f64> = init_params(cfg, 4).unwrap();
    // Non-trivial LayerNorm and bias values so their gradients are exercised.
    let mut rng = rng_from_seed(5);
    for t in params.arrays_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let loss = |p: &ViTParams<f64>| loss_and_gradients(&x, 1, p, cfg, Mode::Train, 77).unwrap().0;
    let (_, _, grads) = loss_and_gradients(&x, 1, &params, cfg, Mode::Train, 77).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            let orig = params.arrays()[i].data()[j];
            params.arrays_mut()[i].data_mut()[j] = orig + h;
            let up = loss(&params);
            params.arrays_mut()[i].data_mut()[j] = orig - h;
            let down = loss(&params);
            params.arrays_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn gradient_correctness() -> (bool, String) {
    let t = Instant::now();
    let masked = fd_error(&tiny_config(true));
    let unmasked = fd_error(&tiny_config(false));
    let el = t.elapsed();
    let n = count_params(&tiny_config(true));
    (
        masked.max(unmasked) <= 1e-5 && el < Duration::from_secs(60),
        format!("max rel err {masked:.2e} (masked), {unmasked:.2e} (unmasked) over {n} params each, {:.1}s", secs(el)),
    )
}

fn mask_invariance() -> (bool, String) {
    let cfg = ViTConfig::full();
    let params = init_params::<f32>(&cfg, 12).unwrap();
    let (img, _) = synthesize(ClassId::Heli3, 1024, 10.0, 33).unwrap();
    let base = pad_and_mask(&img, &cfg).unwrap();
    let reference = forward(&base, &params, &cfg, Mode::Eval, 0).unwrap();
    let mut worst_logit = 0.0f32;
    let mut worst_pad_weight = 0.0f32;
    let mut rng = rng_from_seed(44);
    for _ in 0..3 {
        let mut x = base.clone();
        for (k, v) in x.canvas.iter_mut().enumerate() {
            if k % cfg.canvas_width >= img.width {
                *v = rng.gen::<f32>() * 4.0 - 2.0;
            }
        }
        let out = forward(&x, &params, &cfg, Mode::Eval, 0).unwrap();
        for (a, b) in out.logits.iter().zip(&reference.logits) {
            worst_logit = worst_logit.max((a - b).abs());
        }
        let attn = out.attention.unwrap();
        for l in 0..attn.layers {
            for h in 0..attn.heads {
                for q in 0..attn.tokens {
                    let row = attn.row(l, h, q);
                    for (key, patch) in attn.token_patch.iter().enumerate() {
                        if let Some(p) = patch {
                            if !x.patch_mask[*p] {
                                worst_pad_weight = worst_pad_weight.max(row[key].abs());
                            }
                        }
                    }
                }
            }
        }
    }
    (
        worst_logit <= 1e-5 && worst_pad_weight == 0.0,
        format!("max logit change {worst_logit:.2e}, max padded-key weight {worst_pad_weight:e} (full model, 384-wide input)"),
    )
}

fn smoke_samples() -> Vec<Labeled> {
    let cfg = ViTConfig::desk();
    (0..64u64)
        .map(|i| {
            let class_id = ClassId::ALL[i as usize % 3];
            let n = CPI_PULSES[(i as usize / 3) % 3];
            let (img, _) = synthesize(class_id, n, 10.0, derive_seed(900, i)).unwrap();
            Labeled { input: pad_and_mask(&img, &cfg).unwrap(), label: class_id.index() }
        })
        .collect()
}

struct SmokeRun {
    reached_at: Option<usize>,
    steps: usize,
    losses: Vec<f64>,
    params: ViTParams<f32>,
}

fn smoke_run(data: &[Labeled]) -> SmokeRun {
    let tc = TrainConfig { seed: 61, ..TrainConfig::default() };
    let mut t = Trainer::new(&ViTConfig::desk(), &tc).unwrap();
    let mut losses = Vec::new();
    let mut steps = 0;
    let mut reached_at = None;
    while steps < 200 {
        let stats = t.run_epoch_limited(data, 200 - steps).unwrap();
        steps += stats.steps;
        losses.push(stats.loss);
        if evaluate(&t.params, &t.config, data).unwrap().accuracy == 1.0 {
            reached_at = Some(steps);
            break;
        }
    }
    SmokeRun { reached_at, steps, losses, params: t.params }
}

struct DeskRun {
    manifest: Vec<u8>,
    history: Vec<u8>,
    test: Metrics,
    config: ViTConfig,
    params: ViTParams<f32>,
    test_samples: ManifestSamples,
    elapsed: Duration,
}

const DESK_EPOCHS: usize = 12;

fn desk_run(root: &Path) -> DeskRun {
    let t = Instant::now();
    let data = root.join("data");
    let rows = build_dataset(&DatasetSpec { total: 600, snr_db: (5.0, 15.0), seed: 2024 }, &data).unwrap();
    let cfg = ViTConfig::desk();
    let tr = ManifestSamples::new(&data, &rows, Split::Train, &cfg);
    let va = ManifestSamples::new(&data, &rows, Split::Val, &cfg);
    let te = ManifestSamples::new(&data, &rows, Split::Test, &cfg);
    let tc = TrainConfig { epochs: DESK_EPOCHS, seed: 2025, ..TrainConfig::default() };
    let out = train(&tr, &va, &cfg, &tc, &root.join("run"), None).unwrap();
    let test = evaluate(&out.best.params, &out.best.config, &te).unwrap();
    DeskRun {
        manifest: fs::read(data.join(mdvit::train::MANIFEST_FILE)).unwrap(),
        history: fs::read(root.join("run").join(HISTORY_FILE)).unwrap(),
        test,
        config: out.best.config.clone(),
        params: out.best.params,
        test_samples: te,
        elapsed: t.elapsed(),
    }
}

/// Pooled mean heatmap value inside +-3 columns of a flash versus outside,
/// over correctly classified helicopter test samples.
fn attention_localization(run: &DeskRun) -> (bool, String) {
    let (mut near_sum, mut near_n, mut far_sum, mut far_n) = (0.0f64, 0usize, 0.0f64, 0usize);
    let mut used = 0;
    let mut per_sample = Vec::new();
    for (i, row) in run.test_samples.rows().iter().enumerate() {
        if row.class_id == ClassId::Drone6x2 {
            // Flashes every ~3 columns leave no "elsewhere" to compare with.
            continue;
        }
        let s = run.test_samples.get(i).unwrap();
        let out = forward_compact(&s.input, &run.params, &run.config, Mode::Eval, 0, true).unwrap();
        if out.predicted() != s.label {
            continue;
        }
        let heat = raw_attention_map(out.attention.as_ref().unwrap(), &s.input).unwrap();
        let n_pulses = (row.duration_ms * DEFAULT_PRF_HZ / 1000.0).round() as usize;
        let flash_cols: Vec<f64> = row.flash_times_s.iter().map(|&t| time_to_column(t, n_pulses, DEFAULT_PRF_HZ).unwrap()).collect();
        let (mut ns, mut nn, mut fs_, mut fn_) = (0.0, 0, 0.0, 0);
        for x in 0..heat.width {
            let col_mean = (0..heat.height).map(|y| heat.data[y * heat.width + x] as f64).sum::<f64>() / heat.height as f64;
            if flash_cols.iter().any(|&c| (x as f64 - c).abs() <= 3.0) {
                ns += col_mean;
                nn += 1;
            } else {
                fs_ += col_mean;
                fn_ += 1;
            }
        }
        if nn == 0 || fn_ == 0 {
            continue;
        }
        near_sum += ns;
        near_n += nn;
        far_sum += fs_;
        far_n += fn_;
        per_sample.push((ns / nn as f64) / (fs_ / fn_ as f64).max(1e-12));
        used += 1;
    }
    if used == 0 {
        return (false, "no correctly classified helicopter test samples".into());
    }
    let ratio = (near_sum / near_n as f64) / (far_sum / far_n as f64).max(1e-12);
    per_sample.sort_by(f64::total_cmp);
    let median = per_sample[per_sample.len() / 2];
    (used >= 20 && ratio >= 2.0, format!("near/elsewhere ratio {ratio:.2} (pooled), median per sample {median:.2}, {used} samples"))
}

#[test]
fn acceptance() {
    let mut r = Report { lines: Vec::new(), failed: Vec::new() };

    let (ok, d) = perfect_reconstruction();
    r.record(1, ok, d);
    let (ok, d) = denoising_gain();
    r.record(2, ok, d);
    let (ok, d) = spectrogram_shapes();
    r.record(3, ok, d);
    let (ok, d) = accounting();
    r.record(4, ok, d);
    let (ok, d) = gradient_correctness();
    r.record(5, ok, d);
    let (ok, d) = mask_invariance();
    r.record(6, ok, d);

    let t = Instant::now();
    let smoke_data = smoke_samples();
    let smoke = smoke_run(&smoke_data);
    let smoke_time = t.elapsed();
    let ok = smoke.reached_at.is_some() && smoke_time < Duration::from_secs(300);
    r.record(
        7,
        ok,
        format!(
            "100% train accuracy {} ({} steps run, {} epochs), {:.0}s",
            smoke.reached_at.map_or("not reached".to_string(), |s| format!("after {s} steps")),
            smoke.steps,
            smoke.losses.len(),
            secs(smoke_time)
        ),
    );

    let dir_a = tempfile::tempdir().unwrap();
    let desk = desk_run(dir_a.path());
    let ok = desk.test.accuracy >= 0.90 && desk.elapsed < Duration::from_secs(1800);
    r.record(
        8,
        ok,
        format!("test accuracy {:.4} on {} samples after {DESK_EPOCHS} epochs, {:.0}s", desk.test.accuracy, desk.test.samples, secs(desk.elapsed)),
    );

    let (ok, d) = attention_localization(&desk);
    r.record(9, ok, d);

    let smoke_again = smoke_run(&smoke_samples());
    let dir_b = tempfile::tempdir().unwrap();
    let desk_again = desk_run(dir_b.path());
    let same = smoke_again.losses == smoke.losses
        && smoke_again.params == smoke.params
        && desk_again.manifest == desk.manifest
        && desk_again.history == desk.history
        && desk_again.test == desk.test;
    r.record(
        10,
        same,
        format!("repeat runs: smoke losses/weights, dataset manifest, history and test metrics {}", if same { "identical" } else { "differ" }),
    );

    println!("\n{}", r.lines.join("\n"));
    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
