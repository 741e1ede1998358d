//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Everything runs inside one test so the criteria execute in order and the
//! trained models are shared between the training, trend and learned-PnP
//! checks. Lines go straight to stdout, past the test harness's capture.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use ncvsd::commands::{final_swd, run_training};
use ncvsd::config::RunConfig;
use ncvsd::suites::{gradient_problems, prop2_problem};
use ncvsd_core::nn::fd::check_backward_passes;
use ncvsd_core::pnp::{run_pnp_batch, LinearEnergy, PnpConfig};
use ncvsd_core::rng::stream;
use ncvsd_core::sampler::{GenerativeDenoiser, OracleDenoiser};
use ncvsd_core::schedule::AnnealingSchedule;
use ncvsd_core::train::{pretrain_teacher, TrainConfig, TrainState};
use ncvsd_core::verify::{
    check_ema_gating, check_gradient_unbiasedness, check_prop1, check_prop2,
    check_ula_monotonicity, energy_distance,
};
use ncvsd_core::{GaussianMixture, NoiseLevel};

const PROP1_TRIALS: usize = 1000;
const PROP1_TOL: f64 = 1e-4;
const PROP2_TRAJECTORIES: usize = 100_000;
const PROP2_ZETAS: [f64; 3] = [0.25, 0.5, 1.0];
const PROP2_ALPHA: f64 = 0.01;
const GRADIENT_PAIRS: usize = 5;
const GRADIENT_SAMPLES: usize = 100_000;
const GRADIENT_Z: f64 = 3.0;
const FD_CONFIGS: usize = 20;
const SWD_BOUND: f64 = 0.15;
const TRAIN_SECONDS: f64 = 600.0;
const CONVERGENCE_SEEDS: u64 = 3;
const TREND_SEEDS: u64 = 5;
const PNP_CHAINS: usize = 10_000;
const PNP_LEVELS: usize = 50;
const PNP_RHO: f64 = 2.0;
const PNP_SIGMA_MINS: [f64; 3] = [0.1, 0.02, 0.002];
const PNP_ORACLE_ED: f64 = 0.02;
const PNP_LEARNED_ED: f64 = 0.1;
const SCHEDULE_TOL: f64 = 1e-12;

fn line(ok: bool, id: usize, text: &str) {
    let mark = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{mark}] criterion {id:>2}: {text}");
    let _ = out.flush();
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn criterion_prop1() -> bool {
    let t = Instant::now();
    let r = check_prop1(PROP1_TRIALS, 1).unwrap();
    let ok = r.value < PROP1_TOL && r.n_a == PROP1_TRIALS;
    line(ok, 1, &format!("conditional score vs finite differences, {PROP1_TRIALS} trials: max error {:.2e} < {PROP1_TOL:.0e} ({:.1}s)", r.value, seconds(t)));
    ok
}

fn criterion_prop2() -> bool {
    let t = Instant::now();
    let (g, obs, levels) = prop2_problem();
    assert_eq!(levels.len(), 8);
    let mut ok = true;
    let mut worst = 1.0f64;
    let mut tests = 0;
    for (k, &zeta) in PROP2_ZETAS.iter().enumerate() {
        let r = check_prop2(
            &g,
            &obs,
            &levels,
            zeta,
            PROP2_TRAJECTORIES,
            2 + k as u64,
            PROP2_ALPHA,
            0.0,
        )
        .unwrap();
        for m in &r.reports {
            let p = m.p_value.unwrap();
            worst = worst.min(p);
            ok &= p >= PROP2_ALPHA;
            tests += 1;
        }
    }
    line(
        ok,
        2,
        &format!("multi-step marginals, N=8, {PROP2_TRAJECTORIES} trajectories, {tests} KS tests: min p-value {worst:.4} >= {PROP2_ALPHA} ({:.1}s)", seconds(t)),
    );
    ok
}

fn criterion_gradient() -> bool {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for (k, cfg) in gradient_problems(GRADIENT_PAIRS, GRADIENT_SAMPLES, 3)
        .iter()
        .enumerate()
    {
        let r = check_gradient_unbiasedness(cfg, 30 + k as u64).unwrap();
        worst = worst.max(r.max_abs_z());
    }
    let ok = worst < GRADIENT_Z;
    line(ok, 3, &format!("gradient unbiasedness, {GRADIENT_PAIRS} (t, sigma) pairs x {GRADIENT_SAMPLES} samples: max |z| {worst:.2} < {GRADIENT_Z} ({:.1}s)", seconds(t)));
    ok
}

fn criterion_fd() -> bool {
    let t = Instant::now();
    let reports = check_backward_passes(FD_CONFIGS, 4).unwrap();
    let ok = reports
        .iter()
        .all(|r| r.passed() && r.configs == FD_CONFIGS && r.checked > 0);
    let worst = reports
        .iter()
        .map(|r| format!("{} {:.1e}", r.network, r.worst_ratio))
        .collect::<Vec<_>>()
        .join(", ");
    line(ok, 4, &format!("backward passes vs central differences, {FD_CONFIGS} configs each, worst error/tolerance: {worst} ({:.1}s)", seconds(t)));
    ok
}

struct Trained {
    seed: u64,
    state: TrainState,
    swd: [f64; 3],
    seconds: f64,
}

fn train_seed(seed: u64, gmm: &GaussianMixture) -> Trained {
    let t = Instant::now();
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let (init, report) = pretrain_teacher(&config, gmm, config.teacher_mode).unwrap();
    let mut state = TrainState::from_init(config, gmm, init, Some(report)).unwrap();
    run_training(&mut state, gmm, None).unwrap();
    let swd = final_swd(&state, gmm).unwrap();
    let seconds = seconds(t);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "         seed {seed}: swd 1/2/4-step {:.4} {:.4} {:.4} ({seconds:.0}s)",
        swd[0], swd[1], swd[2]
    );
    Trained {
        seed,
        state,
        swd,
        seconds,
    }
}

fn criterion_convergence(runs: &[Trained]) -> bool {
    let conv: Vec<&Trained> = runs.iter().filter(|r| r.seed < CONVERGENCE_SEEDS).collect();
    assert_eq!(conv.len() as u64, CONVERGENCE_SEEDS);
    let ok = conv
        .iter()
        .all(|r| r.swd[0] < SWD_BOUND && r.seconds < TRAIN_SECONDS);
    let vals: Vec<String> = conv.iter().map(|r| format!("{:.4}", r.swd[0])).collect();
    let slowest = conv.iter().map(|r| r.seconds).fold(0.0, f64::max);
    line(
        ok,
        5,
        &format!("training on the 8-mode ring, 1-step swd per seed [{}] < {SWD_BOUND}, slowest run {slowest:.0}s < {TRAIN_SECONDS}s", vals.join(", ")),
    );
    ok
}

fn criterion_trend(runs: &[Trained]) -> bool {
    assert_eq!(runs.len() as u64, TREND_SEEDS);
    let mean = |k: usize| runs.iter().map(|r| r.swd[k]).sum::<f64>() / runs.len() as f64;
    let (one, four) = (mean(0), mean(2));
    let ok = four <= one;
    line(ok, 6, &format!("test-time compute, mean over {TREND_SEEDS} seeds: 4-step swd {four:.4} <= 1-step swd {one:.4} (2-step {:.4})", mean(1)));
    ok
}

struct PnpProblem {
    gmm: GaussianMixture,
    energy: LinearEnergy,
    exact: ncvsd_core::SampleBatch,
    beta: f64,
}

fn pnp_problem() -> PnpProblem {
    let config = RunConfig::default();
    let gmm = config.mixture(None).unwrap();
    let a = DMatrix::<f64>::identity(2, 2);
    let y = vec![0.6, 0.5];
    let sigma_y = 0.1;
    let beta = 2.0 * sigma_y * sigma_y;
    let posterior = gmm
        .linear_posterior(&a, &y, NoiseLevel::new(sigma_y).unwrap())
        .unwrap();
    let exact = posterior.sample(PNP_CHAINS, 99, &mut stream(99, &[]));
    PnpProblem {
        energy: LinearEnergy::new(a, y, true).unwrap(),
        gmm,
        exact,
        beta,
    }
}

fn pnp_config(p: &PnpProblem, sigma_min: f64) -> PnpConfig {
    let mut cfg = PnpConfig::new(p.beta);
    cfg.schedule = AnnealingSchedule::edm(PNP_LEVELS, sigma_min, 80.0, PNP_RHO).unwrap();
    cfg
}

fn criterion_pnp_oracle(p: &PnpProblem) -> bool {
    let t = Instant::now();
    let oracle = OracleDenoiser(&p.gmm);
    let eds: Vec<f64> = PNP_SIGMA_MINS
        .iter()
        .map(|&s| {
            let batch =
                run_pnp_batch(&oracle, &p.energy, &pnp_config(p, s), PNP_CHAINS, 7).unwrap();
            energy_distance(&batch, &p.exact).unwrap().value
        })
        .collect();
    let decreasing = eds.windows(2).all(|w| w[1] < w[0]);
    let last = *eds.last().unwrap();
    let ok = decreasing && last < PNP_ORACLE_ED;
    line(
        ok,
        7,
        &format!(
            "oracle PnP, {PNP_CHAINS} chains: energy distance {:.4} / {:.4} / {:.4} at sigma_min {:?}, strictly decreasing, final < {PNP_ORACLE_ED} ({:.1}s)",
            eds[0],
            eds[1],
            eds[2],
            PNP_SIGMA_MINS,
            seconds(t)
        ),
    );
    ok
}

fn criterion_pnp_learned(p: &PnpProblem, trained: &Trained) -> bool {
    let t = Instant::now();
    let net = trained.state.ema_generator();
    let den = GenerativeDenoiser {
        net: &net,
        gamma: trained.state.config.gamma,
    };
    let cfg = pnp_config(p, 0.002);
    let batch = run_pnp_batch(&den, &p.energy, &cfg, PNP_CHAINS, 7).unwrap();
    let ed = energy_distance(&batch, &p.exact).unwrap().value;
    let exact_gate = check_ema_gating(&den, &p.energy, &cfg, 11).unwrap();
    let ula = LinearEnergy::new(DMatrix::identity(2, 2), vec![0.6, 0.5], false).unwrap();
    let ula_gate = check_ema_gating(
        &den,
        &ula,
        &PnpConfig {
            ula_steps: 10,
            ..cfg.clone()
        },
        12,
    )
    .unwrap();
    let mut sigmas = cfg.schedule.levels().to_vec();
    sigmas.reverse();
    let betas = [1e-4, 1e-3, 0.02, 0.1, 1.0, 10.0];
    let mono = check_ula_monotonicity(&betas, &sigmas, cfg.c1, cfg.c2);
    let ok = ed < PNP_LEARNED_ED && exact_gate.passed() && ula_gate.passed() && mono;
    line(
        ok,
        8,
        &format!(
            "learned PnP (seed {} generator): energy distance {ed:.4} < {PNP_LEARNED_ED}; EMA gating exact {} / Langevin {}; step-size monotonicity {} ({:.1}s)",
            trained.seed,
            exact_gate.passed(),
            ula_gate.passed(),
            mono,
            seconds(t)
        ),
    );
    ok
}

/// Closed form written out independently of the library.
fn reference_level(i: usize, n: usize, smin: f64, smax: f64, rho: f64) -> f64 {
    if n == 1 {
        return smax;
    }
    let frac = i as f64 / (n - 1) as f64;
    let a = smax.powf(1.0 / rho);
    let b = smin.powf(1.0 / rho);
    (a + frac * (b - a)).powf(rho)
}

fn criterion_schedule() -> bool {
    let mut ok = true;
    let mut worst = 0.0f64;
    for (n, rho) in [(40, 7.0), (1000, 7.0), (50, 2.0), (8, 7.0), (2, 3.0)] {
        let s = AnnealingSchedule::edm(n, 0.002, 80.0, rho).unwrap();
        let lv = s.levels();
        ok &= lv[0] == 80.0 && lv[n - 1] == 0.002;
        for (i, &v) in lv.iter().enumerate() {
            worst = worst.max((v - reference_level(i, n, 0.002, 80.0, rho)).abs());
        }
    }
    ok &= worst < SCHEDULE_TOL;
    line(ok, 9, &format!("schedule endpoints exactly (80, 0.002); max gap to an independent evaluator {worst:.1e} < {SCHEDULE_TOL:.0e}"));
    ok
}

const TINY: &str = "seed = 11
batch_size = 16
total_images = 640
lr_warmup_images = 64
adv_warmup_images = 160
width = 16
uncertainty_width = 8
pretrain_steps = 50
pretrain_batch = 32
metric_every = 10
metric_samples = 256
metric_projections = 16
sample_count = 300
pnp_levels = 12
pnp_ula_steps = 5
pnp_chains = 64
verify_prop1_trials = 30
verify_prop2_trajectories = 3000
verify_gradient_samples = 3000
";

fn run(dir: &Path, out: &str, args: &[&str]) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_ncvsd"))
        .args(args)
        .args(["--out", out])
        .current_dir(dir)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    status.code().unwrap_or(-1)
}

/// Compares two output directories file by file; manifests must agree on
/// their experiment id, everything else byte for byte.
fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let names = |d: &Path| {
        let mut v: Vec<String> = fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    let (na, nb) = (names(a), names(b));
    if na != nb {
        return Err(format!(
            "{} and {} hold different files",
            a.display(),
            b.display()
        ));
    }
    for name in &na {
        let (fa, fb) = (
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
        );
        let same = if name == "manifest.json" {
            let id = |bytes: &[u8]| {
                serde_json::from_slice::<serde_json::Value>(bytes).unwrap()["experiment_id"].clone()
            };
            id(&fa) == id(&fb)
        } else {
            fa == fb
        };
        if !same {
            return Err(format!(
                "{} differs between {} and {}",
                name,
                a.display(),
                b.display()
            ));
        }
    }
    Ok(na.len())
}

fn criterion_determinism() -> bool {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    fs::write(
        d.join("cond.toml"),
        format!("{TINY}sample_y = [0.5, -0.2]\nsample_sigma = 0.3\n"),
    )
    .unwrap();
    let cfg = ["--config", "tiny.toml"];
    let with = |extra: &[&'static str]| -> Vec<&'static str> {
        cfg.iter().chain(extra).copied().collect()
    };
    let mut problems = Vec::new();
    let mut files = 0;
    let mut pair = |name: &str, args: Vec<&str>, threads: (&str, &str)| {
        let (a, b) = (format!("{name}-a"), format!("{name}-b"));
        let mut args_a = args.clone();
        args_a.extend(["--threads", threads.0]);
        let mut args_b = args;
        args_b.extend(["--threads", threads.1]);
        let (ca, cb) = (run(d, &a, &args_a), run(d, &b, &args_b));
        // verify may legitimately report a failed check; both runs must agree
        if ca != cb || (name != "verify" && ca != 0) {
            problems.push(format!("{name}: exit codes {ca}, {cb}"));
            return;
        }
        match same_outputs(&d.join(&a), &d.join(&b)) {
            Ok(n) => files += n,
            Err(e) => problems.push(e),
        }
    };
    pair("pretrain", with(&["pretrain"]), ("1", "1"));
    pair("train", with(&["train"]), ("1", "3"));
    let ck = "train-a/checkpoint.json";
    let pre = "pretrain-a/checkpoint.json";
    pair(
        "train-from-pretrain",
        with(&["train", "--checkpoint", pre]),
        ("1", "1"),
    );
    pair(
        "sample-oracle",
        with(&["sample", "--steps", "2"]),
        ("1", "3"),
    );
    pair(
        "sample-learned",
        with(&["sample", "--checkpoint", ck, "--steps", "4", "--n", "200"]),
        ("1", "1"),
    );
    pair(
        "sample-conditional",
        vec!["--config", "cond.toml", "sample", "--checkpoint", ck],
        ("2", "1"),
    );
    pair("pnp-oracle", with(&["pnp"]), ("1", "3"));
    pair(
        "pnp-learned",
        with(&["pnp", "--checkpoint", ck, "--n", "32"]),
        ("1", "1"),
    );
    pair("verify", with(&["verify", "all"]), ("1", "3"));

    // an interrupted run resumed from its checkpoint ends where an
    // uninterrupted one does
    let mut resumed = false;
    if run(d, "part", &with(&["train", "--steps", "17"])) == 0
        && run(
            d,
            "rest",
            &["train", "--checkpoint", "part/checkpoint.json"],
        ) == 0
    {
        let whole = fs::read(d.join("train-a/checkpoint.json")).unwrap();
        resumed = fs::read(d.join("rest/checkpoint.json")).unwrap() == whole
            && fs::read(d.join("rest/report.json")).unwrap()
                == fs::read(d.join("train-a/report.json")).unwrap();
    }
    if !resumed {
        problems.push("resumed training differs from the uninterrupted run".into());
    }
    let ok = problems.is_empty();
    let detail = if ok {
        String::new()
    } else {
        format!(": {}", problems.join("; "))
    };
    line(
        ok,
        10,
        &format!("determinism: 9 commands run twice, {files} output files identical, split-and-resume training bit-identical ({:.1}s){detail}", seconds(t)),
    );
    ok
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    results.push(criterion_prop1());
    results.push(criterion_prop2());
    results.push(criterion_gradient());
    results.push(criterion_fd());

    let gmm = RunConfig::default().mixture(None).unwrap();
    let runs: Vec<Trained> = (0..TREND_SEEDS).map(|s| train_seed(s, &gmm)).collect();
    results.push(criterion_convergence(&runs));
    results.push(criterion_trend(&runs));

    let problem = pnp_problem();
    results.push(criterion_pnp_oracle(&problem));
    results.push(criterion_pnp_learned(&problem, &runs[0]));
    results.push(criterion_schedule());
    results.push(criterion_determinism());

    let passed = results.iter().filter(|&&r| r).count();
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "acceptance: {passed}/{} criteria passed",
        results.len()
    );
    drop(out);
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, &r)| !r)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
