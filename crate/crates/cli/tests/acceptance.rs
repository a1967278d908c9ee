//! Acceptance suite. Each test prints one `ACCEPTANCE <n> PASS|FAIL` line
//! (written past the test harness's capture) and then asserts.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::Rng;
use wsdc_cli::{cmd_ablate_alpha, cmd_sweep_snr, cmd_train, AblateArgs, Snr, SweepArgs, TrainArgs};
use wsdc_core::codebook::{forgy_init, lloyd, quantization_distortion};
use wsdc_core::data::{gen_gmm, load_cifar10, CifarBatch, Split, CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use wsdc_core::modem::{
    capacity_awgn, demodulate, gaussian_cond_entropy, gaussian_output_entropy, modulate, ser_theoretical,
    simulate_symbol_errors, ChannelConfig, Constellation,
};
use wsdc_core::nn::{grad_check, GradCheckOptions, ModelState, TrainConfig};
use wsdc_core::ot::{ot_exact, sinkhorn, DiscreteMeasure};
use wsdc_core::wsdc::fit_codewords_ws;
use wsdc_core::{seeded_rng, Error};

// Wall-clock limits assume one criterion at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, ok: bool, detail: &str, elapsed: Duration, limit: Duration) -> bool {
    let within = elapsed <= limit;
    let pass = ok && within;
    let line = format!(
        "ACCEPTANCE {n} {}: {detail} (runtime {:.2}s, limit {}s)\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    pass
}

fn write_config(dir: &Path, name: &str, json: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

/// Desk configuration shared by the training criteria.
fn desk_config(seed: u64, lambda: f64, extra: &str) -> String {
    format!(
        r#"{{"K": 16, "D": 4, "Q": 2, "epochs": 15, "lr": 0.003, "batch_size": 64,
            "encoder_hidden": [64], "head_hidden": [64], "snr_train_db": 12, "alpha": 0.5,
            "lambda": {lambda}, "seed": {seed}{extra}}}"#
    )
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# wsdc-csv v1"));
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn col(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let i = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

#[test]
fn criterion_01_channel_math() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let c3 = capacity_awgn(3.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for i in 0..10 {
        for j in 0..10 {
            let p = 10f64.powf(-2.0 + 5.0 * i as f64 / 9.0);
            let var = 10f64.powf(-3.0 + 4.0 * j as f64 / 9.0);
            let lhs = capacity_awgn(p, var).unwrap();
            let rhs = gaussian_output_entropy(p, var).unwrap() - gaussian_cond_entropy(var).unwrap();
            worst = worst.max((lhs - rhs).abs());
        }
    }
    let ok = (c3 - 1.0).abs() <= 1e-12 && worst <= 1e-12;
    let detail = format!("capacity_awgn(3,1)={c3}, max |C - (h_out - h_cond)| over 100 points = {worst:e} (tol 1e-12)");
    assert!(report(1, ok, &detail, t0.elapsed(), Duration::from_secs(1)));
}

#[test]
fn criterion_02_modem_fidelity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let n = 1_000_000usize;
    let mut worst_z = 0.0f64;
    let mut ok = true;
    for (ki, k) in [4usize, 16, 64].into_iter().enumerate() {
        let c = Constellation::new(k).unwrap();
        for (si, snr) in [8.0, 12.0, 16.0].into_iter().enumerate() {
            let sim = simulate_symbol_errors(&c, snr, n, 1000 + (ki * 3 + si) as u64) as f64 / n as f64;
            let p = ser_theoretical(k, snr).unwrap();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            // At vanishing p the binomial SE is zero; one stray error is still consistent.
            let z = if se > 0.0 { (sim - p).abs() / se } else if sim == 0.0 { 0.0 } else { f64::INFINITY };
            worst_z = worst_z.max(z);
            ok &= z <= 3.0;
        }
    }
    let mut noiseless_errors = 0;
    for k in [4usize, 16, 64, 256] {
        let c = Constellation::new(k).unwrap();
        let idx: Vec<usize> = (0..k).cycle().take(10 * k).collect();
        let rx = demodulate(&wsdc_core::modem::awgn(&modulate(&idx, &c).unwrap(), &ChannelConfig::noiseless()).unwrap(), &c);
        noiseless_errors += rx.iter().zip(&idx).filter(|(a, b)| a != b).count();
    }
    ok &= noiseless_errors == 0;
    let detail = format!("max |SER_sim - SER_theory| = {worst_z:.2} SE over 9 cells (tol 3 SE); noiseless errors {noiseless_errors}");
    assert!(report(2, ok, &detail, t0.elapsed(), Duration::from_secs(30)));
}

fn permutation_oracle(c: &Array2<f64>) -> f64 {
    fn rec(c: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n = c.nrows();
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                rec(c, row + 1, used, acc + c[[row, j]], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.nrows()], 0.0, &mut best);
    best / c.nrows() as f64
}

fn uniform_measure(n: usize) -> DiscreteMeasure {
    DiscreteMeasure::uniform(Array2::zeros((n, 1))).unwrap()
}

#[test]
fn criterion_03_ot_correctness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = seeded_rng(303, 0);
    let mut worst_exact = 0.0f64;
    for n in 1..=6 {
        let m = uniform_measure(n);
        for _ in 0..100 {
            let c = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0));
            let got = ot_exact(&m, &m, c.view()).unwrap().value;
            worst_exact = worst_exact.max((got - permutation_oracle(&c)).abs());
        }
    }
    let m8 = uniform_measure(8);
    let mut worst_rel = 0.0f64;
    for _ in 0..50 {
        let c = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0));
        let exact = ot_exact(&m8, &m8, c.view()).unwrap().value;
        let eps = 1e-3 * c.mean().unwrap();
        let plan = sinkhorn(&m8, &m8, c.view(), eps, 200_000, 1e-10).unwrap();
        worst_rel = worst_rel.max((plan.value - exact).abs() / exact);
    }
    let ok = worst_exact <= 1e-9 && worst_rel <= 0.01;
    let detail = format!(
        "exact vs permutation oracle max abs diff {worst_exact:e} over 600 instances (tol 1e-9); sinkhorn(eps=1e-3 mean C) max rel diff {worst_rel:e} over 50 8x8 (tol 1e-2)"
    );
    assert!(report(3, ok, &detail, t0.elapsed(), Duration::from_secs(60)));
}

#[test]
fn criterion_04_gradient_correctness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let data = gen_gmm(3, 4, 3.0, 4, 44).unwrap();
    let (mut worst_task, mut worst_full) = (0.0f64, 0.0f64);
    let mut max_params = 0;
    for seed in 0..10u64 {
        let base = TrainConfig {
            k: if seed % 2 == 0 { 4 } else { 16 },
            d: 2,
            q: 2,
            seed,
            encoder_hidden: vec![6],
            head_hidden: vec![5],
            per_q_logits: seed % 3 == 0,
            batch_size: 12,
            ..TrainConfig::default()
        };
        for lambda in [0.0, 1.0] {
            let cfg = TrainConfig { lambda, ..base.clone() };
            let state = ModelState::new(&cfg, 4, 3, None).unwrap();
            max_params = max_params.max(state.n_params());
            let r = grad_check(&state, data.inputs.view(), &data.labels, &cfg, &GradCheckOptions::default()).unwrap();
            if lambda == 0.0 {
                worst_task = worst_task.max(r.max_rel_error);
            } else {
                worst_full = worst_full.max(r.max_rel_error);
            }
        }
    }
    let ok = worst_task < 1e-6 && worst_full < 1e-3 && max_params <= 2000;
    let detail = format!(
        "10 models (<= {max_params} params): max rel err lambda=0 {worst_task:e} (tol 1e-6), full objective {worst_full:e} (tol 1e-3)"
    );
    assert!(report(4, ok, &detail, t0.elapsed(), Duration::from_secs(60)));
}

#[test]
fn criterion_05_ws_clustering() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut cells = Vec::new();
    for k in [4usize, 8, 16] {
        for seed in 0..5u64 {
            let mut rng = seeded_rng(500 + seed, k as u64);
            let n = 32 * k;
            let latents = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
            let init = forgy_init(latents.view(), k, &mut rng);
            let (_, d_lloyd) = lloyd(latents.view(), init.clone(), 500);
            let pi = Array1::from_elem(k, 1.0 / k as f64);
            let fitted = fit_codewords_ws(latents.view(), init, &pi, 0.01, 200).unwrap();
            let d_ws = quantization_distortion(latents.view(), &fitted);
            let rel = (d_ws - d_lloyd).abs() / d_lloyd;
            worst = worst.max(rel);
            cells.push(format!("K{k}/s{seed}:{:+.3}", (d_ws - d_lloyd) / d_lloyd));
        }
    }
    let ok = worst <= 0.05;
    let detail = format!("max |D_ws - D_lloyd| / D_lloyd = {worst:.4} over K in {{4,8,16}} x 5 seeds (tol 0.05); {}", cells.join(" "));
    assert!(report(5, ok, &detail, t0.elapsed(), Duration::from_secs(120)));
}

#[test]
fn criterion_06_anti_collapse() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut passed = 0;
    let mut cells = Vec::new();
    for seed in 1..=3u64 {
        let mut final_perp = [0.0; 2];
        for (i, lambda) in [0.0, 1.0].into_iter().enumerate() {
            let cfg = write_config(dir.path(), &format!("c{seed}_{i}.json"), &desk_config(seed, lambda, ""));
            let out = dir.path().join(format!("run{seed}_{i}"));
            let r = cmd_train(&TrainArgs { config: cfg, out: out.clone(), seed: None, alpha: None }).unwrap();
            let (h, rows) = read_csv(&out.join("metrics.csv"));
            final_perp[i] = *col(&h, &rows, "perplexity").last().unwrap();
            assert_eq!(final_perp[i], r.history.last().unwrap().perplexity);
        }
        let gain = final_perp[1] / final_perp[0] - 1.0;
        if gain >= 0.25 {
            passed += 1;
        }
        cells.push(format!("seed {seed}: {:.2} vs {:.2} (+{:.0}%)", final_perp[1], final_perp[0], 100.0 * gain));
    }
    let detail = format!("final perplexity lambda=1 vs lambda=0, need +25% on 3/3: {}; {passed}/3", cells.join(", "));
    assert!(report(6, passed == 3, &detail, t0.elapsed(), Duration::from_secs(300)));
}

#[test]
fn criterion_07_alpha_ablation_trend() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let alphas = vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let mut passed = 0;
    let mut cells = Vec::new();
    for seed in 1..=3u64 {
        let cfg = write_config(dir.path(), &format!("a{seed}.json"), &desk_config(seed, 1.0, ""));
        let out = dir.path().join(format!("abl{seed}"));
        cmd_ablate_alpha(&AblateArgs { config: cfg, out: out.clone(), seed: None, alpha: Some(alphas.clone()), snr: None }).unwrap();
        let (h, rows) = read_csv(&out.join("ablation.csv"));
        let a = col(&h, &rows, "alpha");
        let cost = col(&h, &rows, "ot_cost");
        let per_alpha: Vec<f64> = alphas.iter().map(|al| cost[a.iter().position(|x| x == al).unwrap()]).collect();
        if per_alpha.windows(2).all(|w| w[1] <= w[0]) {
            passed += 1;
        }
        cells.push(format!("seed {seed}: [{}]", per_alpha.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>().join(", ")));
    }
    let detail = format!("ot_cost nonincreasing in alpha on 3/3 seeds: {}; {passed}/3", cells.join("; "));
    // No runtime limit is set for this criterion; ten minutes is a sanity bound.
    assert!(report(7, passed == 3, &detail, t0.elapsed(), Duration::from_secs(600)));
}

/// At most one adjacent inversion, of size at most `noise`.
fn trend_ok(xs: &[f64], increasing: bool, noise: f64) -> bool {
    let drops: Vec<f64> = xs.windows(2).map(|w| if increasing { w[0] - w[1] } else { w[1] - w[0] }).filter(|&d| d > 0.0).collect();
    drops.len() <= 1 && drops.iter().all(|&d| d <= noise)
}

#[test]
fn criterion_08_snr_trend() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let snrs: Vec<Snr> = [4.0, 8.0, 12.0, 16.0, 20.0].into_iter().map(Snr).collect();
    let (mut trend_failures, mut wins) = (Vec::new(), 0);
    let mut cells = Vec::new();
    for seed in 1..=5u64 {
        let mut acc4 = [0.0; 2];
        for (i, lambda) in [0.0, 1.0].into_iter().enumerate() {
            let cfg = write_config(dir.path(), &format!("s{seed}_{i}.json"), &desk_config(seed, lambda, ""));
            let out = dir.path().join(format!("sw{seed}_{i}"));
            cmd_train(&TrainArgs { config: cfg.clone(), out: out.clone(), seed: None, alpha: None }).unwrap();
            let recs = cmd_sweep_snr(&SweepArgs { config: cfg, model: None, out, seed: None, snr: Some(snrs.clone()) }).unwrap();
            let acc: Vec<f64> = recs.iter().map(|r| r.accuracy).collect();
            let ier: Vec<f64> = recs.iter().map(|r| r.index_error_rate).collect();
            if !trend_ok(&acc, true, 0.005) || !trend_ok(&ier, false, 0.005) {
                trend_failures.push(format!("seed {seed} lambda {lambda}: acc {acc:?} ier {ier:?}"));
            }
            acc4[i] = acc[0];
        }
        if acc4[1] >= acc4[0] {
            wins += 1;
        }
        cells.push(format!("s{seed} {:.3}/{:.3}", acc4[1], acc4[0]));
    }
    let ok = trend_failures.is_empty() && wins >= 4;
    let detail = format!(
        "monotone accuracy/index-error trends on 10 runs ({} violations{}); WS-DC >= baseline at 4 dB in {wins}/5 (need 4): {}",
        trend_failures.len(),
        if trend_failures.is_empty() { String::new() } else { format!(": {}", trend_failures.join("; ")) },
        cells.join(", ")
    );
    assert!(report(8, ok, &detail, t0.elapsed(), Duration::from_secs(600)));
}

#[test]
fn criterion_09_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.json", &desk_config(9, 1.0, ""));
    let strip = |p: &Path| -> Vec<String> {
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let wall = lines[1].split(',').position(|c| c == "wall_time_s").unwrap();
        lines
            .iter()
            .map(|l| {
                if l.starts_with('#') {
                    return l.to_string();
                }
                let mut f: Vec<&str> = l.split(',').collect();
                f.remove(wall);
                f.join(",")
            })
            .collect()
    };
    let mut csvs = Vec::new();
    let mut models = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("det{run}"));
        cmd_train(&TrainArgs { config: cfg.clone(), out: out.clone(), seed: None, alpha: None }).unwrap();
        csvs.push(strip(&out.join("metrics.csv")));
        models.push(std::fs::read(out.join("model.wsdc")).unwrap());
    }
    let ok = csvs[0] == csvs[1] && models[0] == models[1] && csvs[0].len() == 17;
    let detail = format!(
        "metrics CSV without wall time identical: {}; model container identical: {}",
        csvs[0] == csvs[1],
        models[0] == models[1]
    );
    assert!(report(9, ok, &detail, t0.elapsed(), Duration::from_secs(120)));
}

fn fixture(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = seeded_rng(seed, 0);
    let mut bytes = Vec::with_capacity(n * CIFAR_RECORD);
    for _ in 0..n {
        bytes.push(rng.random_range(0..10u8));
        bytes.extend((0..CIFAR_RECORD - 1).map(|_| rng.random::<u8>()));
    }
    bytes
}

#[test]
fn criterion_10_cifar_ingestion() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut checks = Vec::new();
    for (i, f) in CIFAR_TRAIN_FILES.iter().enumerate() {
        std::fs::write(dir.path().join(f), fixture(20 + i, i as u64)).unwrap();
    }
    let test_bytes = fixture(7, 99);
    std::fs::write(dir.path().join(CIFAR_TEST_FILE), &test_bytes).unwrap();

    let parsed = CifarBatch::read(&dir.path().join(CIFAR_TEST_FILE)).unwrap();
    checks.push(("round trip byte-identical", parsed.to_bytes() == test_bytes));
    let train = load_cifar10(dir.path(), Split::Train).unwrap();
    checks.push(("train split concatenates 5 files (110 records)", train.len() == 110));
    checks.push(("test split has 7 records", load_cifar10(dir.path(), Split::Test).unwrap().len() == 7));

    let truncated = &test_bytes[..test_bytes.len() - 5];
    let e = CifarBatch::parse(truncated, "test_batch.bin").unwrap_err();
    checks.push(("truncated file rejected naming the file", matches!(&e, Error::Format(m) if m.contains("test_batch.bin"))));
    let mut bad_label = test_bytes.clone();
    bad_label[3 * CIFAR_RECORD] = 10;
    let e = CifarBatch::parse(&bad_label, "test_batch.bin").unwrap_err();
    checks.push(("label > 9 rejected with record index", matches!(&e, Error::Format(m) if m.contains("record 3"))));
    std::fs::write(dir.path().join(CIFAR_TRAIN_FILES[2]), &truncated[..CIFAR_RECORD + 1]).unwrap();
    checks.push(("corrupt member fails the train split", load_cifar10(dir.path(), Split::Train).is_err()));

    let ok = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!("{}/{} checks passed{}", checks.len() - failed.len(), checks.len(), if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) });
    assert!(report(10, ok, &detail, t0.elapsed(), Duration::from_secs(10)));
}
