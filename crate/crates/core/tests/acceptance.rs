//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reverbswap::audio::{synthetic_vocal, Waveform, CANONICAL_RATE};
use reverbswap::checkpoint::Checkpoint;
use reverbswap::cli::{convert_audio, main_with_args, RunLog};
use reverbswap::databus::{bus_weights, mix_bus, DatasetManifest, Gamma, QuadFactory, QuadRecord};
use reverbswap::metrics::{si_sdr, srmr, stoi};
use reverbswap::model::{ModelConfig, ModelParams};
use reverbswap::nn::Params;
use reverbswap::reverb::{estimate_rt60, impulse_response, render_wet, sample_preset, PresetSpace};
use reverbswap::stft::{Stft, StftConfig};
use reverbswap::training::{gradient_check, train, Batch, LossReport, LossWeights, TrainConfig, TrainData, LOSS_LOG};

use common::{args, path_str, write_corpus};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn noise_wave(rng: &mut ChaCha8Rng, channels: usize, frames: usize) -> Waveform {
    let rows: Vec<Vec<f64>> = (0..channels).map(|_| (0..frames).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
    Waveform::from_channels(&rows, CANONICAL_RATE).unwrap()
}

fn max_abs_diff(a: &Waveform, b: &Waveform) -> f64 {
    Zip::from(a.samples()).and(b.samples()).fold(0.0, |m: f64, x, y| m.max((x - y).abs()))
}

fn stft_round_trip() -> Outcome {
    let t = Instant::now();
    let stft = Stft::new(StftConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let len = rng.gen_range(4_000..60_000);
        let x = noise_wave(&mut rng, 2, len);
        let (m, p) = stft.analyze(&x).unwrap();
        let y = stft.synthesize(&m, &p, len, CANONICAL_RATE).unwrap();
        let err = (x.samples() - y.samples()).mapv(|v| v * v).sum().sqrt() / x.energy().sqrt();
        worst = worst.max(err);
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst < 1e-6 && secs < 5.0, format!("worst relative L2 error {worst:.2e}, {secs:.2} s"))
}

fn bus_mix_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = noise_wave(&mut rng, 2, 5000);
    let rev = noise_wave(&mut rng, 2, 5000);
    let identity = mix_bus(&src, &rev, 0.0).unwrap() == src;
    let (ws, wr) = bus_weights(0.7);
    let weights_ok = ws == 1.0 / 1.7 && wr == 0.7 / 1.7;
    let mixed = mix_bus(&src, &rev, 0.7).unwrap();
    let expect = (src.samples() * (1.0 / 1.7)) + (rev.samples() * (0.7 / 1.7));
    let mix_err = Zip::from(mixed.samples()).and(&expect).fold(0.0, |m: f64, a, b| m.max((a - b).abs()));
    let pct = ((100.0 * ws).round(), (100.0 * wr).round());
    check(
        identity && weights_ok && mix_err < 1e-15 && pct == (59.0, 41.0),
        format!("gamma 0 identity {identity}; gamma 0.7 weights {ws:.6}/{wr:.6} ({}:{}), mix error {mix_err:.1e}", pct.0, pct.1),
    )
}

fn reverb_engine() -> Outcome {
    let mut worst: f64 = 0.0;
    let presets: Vec<_> = (0..16)
        .map(|s| sample_preset(&PresetSpace::train(), s))
        .chain((0..4).map(|s| sample_preset(&PresetSpace::validation(), s)))
        .collect();
    for p in &presets {
        let len = (1.5 * p.rt60.max(0.4) * CANONICAL_RATE as f64) as usize;
        let est = estimate_rt60(&impulse_response(p, len).unwrap()).unwrap();
        worst = worst.max((est - p.rt60).abs() / p.rt60);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = noise_wave(&mut rng, 2, 20_000);
    let y = noise_wave(&mut rng, 2, 20_000);
    let p = &presets[5];
    let sum = Waveform::new(x.samples() + y.samples(), CANONICAL_RATE).unwrap();
    let parts = Waveform::new(render_wet(&x, p).unwrap().samples() + render_wet(&y, p).unwrap().samples(), CANONICAL_RATE).unwrap();
    let superpos = max_abs_diff(&render_wet(&sum, p).unwrap(), &parts);
    let scaled = max_abs_diff(&render_wet(&x.scaled(2.5), p).unwrap(), &render_wet(&x, p).unwrap().scaled(2.5));
    check(
        worst <= 0.15 && superpos < 1e-6 && scaled < 1e-6,
        format!("worst RT60 error {:.1}% over 20 presets; superposition {superpos:.1e}, scaling {scaled:.1e}", 100.0 * worst),
    )
}

fn shape_contract() -> Outcome {
    let cfg = ModelConfig::default();
    let p = ModelParams::new(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array4::from_shape_simple_fn((1, 2, 1024, 640), || rng.gen_range(0.0..1.0));
    let stack = p.encode_batch(&x).unwrap();
    let widths: Vec<usize> = stack.layers.iter().map(|l| l.dim().1).collect();
    let dims: Vec<(usize, usize)> = stack.layers.iter().map(|l| (l.dim().2, l.dim().3)).collect();
    let halving = dims.iter().enumerate().all(|(i, &(h, w))| h == 1024 >> (i + 1) && w == 640 >> (i + 1));
    let out = p.decode_batch(&stack, &stack).unwrap();
    check(
        widths == [32, 64, 128, 256, 512] && halving && out.dim() == (1, 2, 1024, 640),
        format!("widths {widths:?}, maps {dims:?}, decoder output {:?}", out.dim()),
    )
}

fn gradient_check_run() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::reduced();
    let mut p = ModelParams::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // nonzero biases keep pre-activations off the ReLU kink at exactly zero
    p.visit_mut("", &mut |n, mut t| {
        if n.ends_with("bias") || n.ends_with(".b1") || n.ends_with(".b2") {
            t.mapv_inplace(|_| rng.gen_range(-0.05..0.05));
        }
    });
    let mut r = || Array4::from_shape_simple_fn((1, 2, cfg.freq_bins, cfg.time_frames), || rng.gen_range(0.0..3.0));
    let batch = Batch { in_a: r(), in_b: r(), gt_a: r(), gt_b: r() };
    let rep = gradient_check(&p, &batch, &LossWeights::default(), true, 220, 1e-5, 1e-3, 3).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = rep.max_rel_error();
    check(
        rep.entries.len() >= 200 && worst < 1e-3 && secs < 300.0,
        format!("{} parameters, max relative error {worst:.2e}, {} kink probes redrawn, {secs:.0} s", rep.entries.len(), rep.kinks_skipped),
    )
}

fn conversion_liveness() -> Outcome {
    let cfg = ModelConfig::reduced();
    let p = ModelParams::new(cfg.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut r = || Array4::from_shape_simple_fn((1, 2, cfg.freq_bins, cfg.time_frames), || rng.gen_range(0.0..2.0));
    let (a, b, c) = (r(), r(), r());
    let sa = p.encode_batch(&a).unwrap();
    let sb = p.encode_batch(&b).unwrap();
    let sc = p.encode_batch(&c).unwrap();
    let last = sb.len() - 1;

    let h = 1e-4;
    let dir = Array4::from_shape_simple_fn(sb.reverb_half(last).raw_dim(), || rng.gen_range(-1.0..1.0));
    let shifted = |s: f64| {
        let mut st = sb.clone();
        st.reverb_half_mut(last).scaled_add(s, &dir);
        p.decode_batch(&sa, &st).unwrap()
    };
    let sens = (&shifted(h) - &shifted(-h)).mapv(f64::abs).sum() / (2.0 * h);

    let zero_reverb = |s: &reverbswap::model::LatentStack| {
        let mut s = s.clone();
        (0..s.len()).for_each(|i| s.reverb_half_mut(i).fill(0.0));
        s
    };
    let differs = p.decode_batch(&sa, &sb).unwrap() != p.decode_batch(&sa, &sc).unwrap();
    let independent = p.decode_batch(&sa, &zero_reverb(&sb)).unwrap() == p.decode_batch(&sa, &zero_reverb(&sc)).unwrap();
    check(
        sens > 0.0 && sens.is_finite() && differs && independent,
        format!("bottleneck sensitivity {sens:.3e}; distinct references differ {differs}; reverb halves zeroed gives bit-identical outputs {independent}"),
    )
}

/// Tiny training set: 4 dry clips, 3 presets, 12 ordered pairs with distinct
/// gammas plus 4 dry-reference quads.
struct Overfit {
    params: ModelParams,
    data: TrainData,
    records: Vec<QuadRecord>,
    reports: Vec<LossReport>,
    steps_per_epoch: usize,
    secs: f64,
}

const OVERFIT_STEPS: usize = 360;
const OVERFIT_LR: f64 = 1e-2;

fn overfit_run() -> Overfit {
    let t = Instant::now();
    let model = ModelConfig {
        channels: vec![8, 16, 32, 64, 128],
        ..ModelConfig::reduced()
    };
    let clip = model.stft_config().samples_for_frames(model.time_frames);
    let presets: Vec<_> = (0..3)
        .map(|i| {
            let mut p = sample_preset(&PresetSpace::train(), 100 + i);
            p.preset_id = format!("p{i}");
            p
        })
        .collect();
    let mut factory = QuadFactory::new(&presets, clip);
    for i in 0..4 {
        factory.insert_source(format!("s{i}"), synthetic_vocal(i, clip * 3, CANONICAL_RATE));
    }
    let g = |v: f64| Gamma::from_value(v).unwrap();
    let gammas = [(0.1, 0.6), (0.7, 0.2), (0.35, 0.0), (0.5, 0.25), (0.0, 0.45), (0.6, 0.3)];
    let mut records = Vec::new();
    let mut rec = |a: usize, b: usize, p1: usize, p2: usize, g1: f64, g2: f64| {
        let quad_id = records.len();
        records.push(QuadRecord {
            quad_id,
            source_a: format!("s{a}"),
            source_b: format!("s{b}"),
            preset_1: format!("p{p1}"),
            preset_2: format!("p{p2}"),
            gamma_1: g(g1),
            gamma_2: g(g2),
            segment_offset: clip / 2,
            seed: quad_id as u64,
        });
    };
    let mut id = 0;
    for a in 0..4 {
        for b in (0..4).filter(|&b| b != a) {
            let (g1, g2) = gammas[id % gammas.len()];
            rec(a, b, id % 3, (id + 1) % 3, g1, g2);
            id += 1;
        }
    }
    for (a, g1) in [(0, 0.4), (1, 0.7), (2, 0.7), (3, 0.4)] {
        rec(a, (a + 1) % 4, a % 3, 0, g1, 0.0);
    }
    let mut data = TrainData::new(factory, records.clone(), &model).unwrap();
    let batch_size = 4;
    let steps_per_epoch = records.len() / batch_size;
    let epochs = OVERFIT_STEPS / steps_per_epoch;
    let cfg = TrainConfig {
        lr: OVERFIT_LR,
        total_epochs: epochs,
        adv_start_epoch: epochs,
        batch_size,
        redraw_gamma: false,
        cache_quads: true,
        seed: 5,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let s = train(&mut data, &model, &cfg, dir.path(), false, &mut |_| {}).unwrap();
    Overfit {
        params: s.params,
        data,
        records,
        reports: s.reports,
        steps_per_epoch,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn overfit_oracle(o: &mut Overfit) -> Outcome {
    let spe = o.steps_per_epoch;
    let mean = |rs: &[LossReport]| rs.iter().map(|r| r.l_spec).sum::<f64>() / rs.len() as f64;
    let first = mean(&o.reports[..spe]);
    let last = mean(&o.reports[o.reports.len() - spe..]);
    let tensors = o.data.tensors(&o.records, true).unwrap();
    let (mut ordered, mut total) = (0, 0);
    for (r, q) in o.records.iter().zip(&tensors) {
        if r.gamma_1 == r.gamma_2 {
            continue;
        }
        let b = Batch::stack(&[q.as_ref()]).unwrap();
        let (out, _) = o.params.convert_batch(&b.in_a, &b.in_b).unwrap();
        let to_target = (&out - &b.gt_a).mapv(f64::abs).mean().unwrap();
        let to_input = (&out - &b.in_a).mapv(f64::abs).mean().unwrap();
        total += 1;
        if to_target < to_input {
            ordered += 1;
        }
    }
    let ratio = last / first;
    check(
        ratio <= 0.2 && ordered == total && o.secs < 900.0,
        format!(
            "{} steps in {:.0} s; final l_spec {last:.4} = {:.1}% of epoch 1 ({first:.4}); output closer to target than input on {ordered}/{total} quads",
            o.reports.len(),
            o.secs,
            100.0 * ratio
        ),
    )
}

fn dereverb_trend(o: &mut Overfit) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let derev: Vec<QuadRecord> = o.records.iter().filter(|r| r.gamma_2 == Gamma::DRY && r.gamma_1 != Gamma::DRY).cloned().collect();
    for r in &derev {
        let q = o.data.factory_mut().build(r).unwrap();
        let out = convert_audio(&o.params, &q.in_a.audio, &q.in_b.audio).unwrap();
        let s_out = si_sdr(&out, &q.gt_a.audio).unwrap();
        let s_in = si_sdr(&q.in_a.audio, &q.gt_a.audio).unwrap();
        ok &= s_out > s_in;
        lines.push(format!("g{} {s_in:.2}->{s_out:.2} dB", r.gamma_1));
    }
    check(ok && !derev.is_empty(), format!("SI-SDR input->output vs dry: {}", lines.join(", ")))
}

fn metric_suite() -> Outcome {
    let mut fails = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = noise_wave(&mut rng, 2, 8000);
    let n = noise_wave(&mut rng, 2, 8000);
    let est = Waveform::new(x.samples() + &(n.samples() * 0.3), CANONICAL_RATE).unwrap();
    let base = si_sdr(&est, &x).unwrap();
    for a in [0.01, 0.5, 3.0, 100.0] {
        if (si_sdr(&est.scaled(a), &x).unwrap() - base).abs() > 1e-6 {
            fails.push(format!("si_sdr scale {a}"));
        }
    }
    // noise orthogonal to the reference with equal energy, per channel
    let mut orth = n.samples().clone();
    for ch in 0..2 {
        let s = x.channel(ch);
        let proj = orth.row(ch).dot(&s) / s.dot(&s);
        let mut row = orth.row_mut(ch);
        row.scaled_add(-proj, &s);
        let gain = (s.dot(&s) / row.dot(&row)).sqrt();
        row.mapv_inplace(|v| v * gain);
    }
    let orth_db = si_sdr(&Waveform::new(x.samples() + &orth, CANONICAL_RATE).unwrap(), &x).unwrap();
    if orth_db.abs() > 1e-6 {
        fails.push(format!("orthogonal noise {orth_db:.2e} dB"));
    }

    let v = synthetic_vocal(11, 3 * CANONICAL_RATE as usize, CANONICAL_RATE);
    let self_score = stoi(&v, &v).unwrap();
    if (self_score - 1.0).abs() > 1e-6 {
        fails.push(format!("stoi(x, x) = {self_score}"));
    }
    let wn = noise_wave(&mut rng, 1, v.frames());
    let noisy = |snr_db: f64| {
        let g = (v.energy() / wn.energy() / 10f64.powf(snr_db / 10.0)).sqrt();
        Waveform::new(v.samples() + &(wn.samples() * g), CANONICAL_RATE).unwrap()
    };
    let curve: Vec<f64> = [20.0, 10.0, 0.0].iter().map(|&s| stoi(&noisy(s), &v).unwrap()).collect();
    if !(curve[0] < self_score && curve[0] > curve[1] && curve[1] > curve[2]) {
        fails.push(format!("stoi noise curve {curve:?}"));
    }

    let s1 = srmr(&v).unwrap();
    let s2 = srmr(&v.scaled(3.0)).unwrap();
    if (s1 - s2).abs() > 1e-6 * s1.max(1.0) {
        fails.push(format!("srmr gain {s1} vs {s2}"));
    }
    let mut preset = sample_preset(&PresetSpace::train(), 42);
    preset.rt60 = 3.0;
    let mut ordered = 0;
    for seed in 0..20 {
        let dry = synthetic_vocal(200 + seed, 2 * CANONICAL_RATE as usize, CANONICAL_RATE);
        let wet = render_wet(&dry, &preset).unwrap();
        if srmr(&dry).unwrap() > srmr(&wet).unwrap() {
            ordered += 1;
        }
    }
    if ordered < 18 {
        fails.push(format!("srmr dry > wet on {ordered}/20"));
    }
    let detail = format!(
        "si_sdr {base:.3} dB scale-invariant, orthogonal {orth_db:.1e} dB; stoi self {self_score:.6}, noise {:.3}/{:.3}/{:.3}; srmr gain {s1:.4}/{s2:.4}, dry>wet {ordered}/20",
        curve[0], curve[1], curve[2]
    );
    if fails.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failed: {}", fails.join(", ")))
    }
}

fn read_log(dir: &std::path::Path) -> Vec<LossReport> {
    std::fs::read_to_string(dir.join(LOSS_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn adversarial_schedule() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus, 2, 8000);
    let manifest = tmp.path().join("data").join("train.json");
    let out = tmp.path().join("run");
    let mut log = RunLog::quiet();
    let rc = main_with_args(
        args(&["synth-data", "--corpus", path_str(&corpus), "--out", path_str(&manifest), "--quads", "2", "--val-quads", "0", "--model", "reduced"]),
        &mut log,
    );
    assert_eq!(rc, 0);
    let rc = main_with_args(
        args(&["train", "--manifest", path_str(&manifest), "--out", path_str(&out), "--model", "reduced", "--epochs", "21", "--batch-size", "2", "--seed", "3"]),
        &mut log,
    );
    assert_eq!(rc, 0);
    let reports = read_log(&out);
    let flip_ok = reports.iter().all(|r| r.adv_active == (r.epoch >= 20));
    let last_off = reports.iter().filter(|r| !r.adv_active).map(|r| r.epoch).max();
    let first_on = reports.iter().filter(|r| r.adv_active).map(|r| r.epoch).min();
    let init = ModelParams::new(ModelConfig::reduced(), 3).unwrap().discriminator;
    let disc = |e: usize| Checkpoint::load(out.join(format!("epoch_{e:04}.ckpt"))).unwrap().params().unwrap().discriminator;
    let frozen = (1..=20).all(|e| disc(e) == init);
    let moved = disc(21) != init;
    check(
        flip_ok && last_off == Some(19) && first_on == Some(20) && frozen && moved,
        format!("adv_active false through epoch {last_off:?}, true from {first_on:?}; discriminator bit-identical over epochs 1-20 {frozen}, updated in epoch 21 {moved}"),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus, 3, 9000);
    let mut log = RunLog::quiet();
    let mut runs = Vec::new();
    for k in 0..2 {
        let manifest = tmp.path().join(format!("data{k}")).join("m.json");
        let out = tmp.path().join(format!("run{k}"));
        let rc = main_with_args(
            args(&["synth-data", "--corpus", path_str(&corpus), "--out", path_str(&manifest), "--quads", "6", "--val-quads", "2", "--seed", "17", "--model", "reduced"]),
            &mut log,
        );
        assert_eq!(rc, 0);
        let rc = main_with_args(
            args(&["train", "--manifest", path_str(&manifest), "--out", path_str(&out), "--model", "reduced", "--epochs", "1", "--batch-size", "2", "--seed", "17"]),
            &mut log,
        );
        assert_eq!(rc, 0);
        let dir = manifest.parent().unwrap();
        let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        let data: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect();
        runs.push((data, std::fs::read(out.join(LOSS_LOG)).unwrap(), std::fs::read(out.join("epoch_0001.ckpt")).unwrap()));
    }
    let manifests_same = runs[0].0 == runs[1].0;
    let logs_same = runs[0].1 == runs[1].1;
    let ckpt_same = runs[0].2 == runs[1].2;
    let quads = DatasetManifest::read(tmp.path().join("data0").join("m.json")).unwrap().quads.len();
    check(
        manifests_same && logs_same && ckpt_same,
        format!("{} manifest files ({quads} quads) identical {manifests_same}; loss logs byte-identical {logs_same}; checkpoints byte-identical {ckpt_same}", runs[0].0.len()),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &res {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {id:>2} {name} ({:.1} s): {detail}", t.elapsed().as_secs_f64());
    res.is_ok()
}

#[test]
fn acceptance_checks() {
    let mut results = vec![
        run(1, "stft round trip", stft_round_trip),
        run(2, "bus mix exactness", bus_mix_exactness),
        run(3, "reverb engine", reverb_engine),
        run(4, "shape contract", shape_contract),
        run(5, "gradient check", gradient_check_run),
        run(6, "conversion-path liveness", conversion_liveness),
    ];
    let mut fit = catch_unwind(overfit_run);
    match &mut fit {
        Ok(o) => {
            results.push(run(7, "overfit oracle", || overfit_oracle(o)));
            results.push(run(8, "de-reverberation trend", || dereverb_trend(o)));
        }
        Err(_) => {
            results.push(run(7, "overfit oracle", || Err("training run panicked".into())));
            results.push(run(8, "de-reverberation trend", || Err("training run panicked".into())));
        }
    }
    results.push(run(9, "metric suite", metric_suite));
    results.push(run(10, "adversarial schedule", adversarial_schedule));
    results.push(run(11, "determinism", determinism));
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} checks passed", results.len());
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &r)| !r).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed checks: {failed:?}");
}
