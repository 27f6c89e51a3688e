//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line followed
//! by a summary. Failing criteria are reported, not turned into a process
//! failure; set `DPETS_ACCEPTANCE_STRICT=1` to exit non-zero on any failure.
//!
//! Set `DPETS_ACCEPTANCE_ONLY=name1,name2` to run a subset.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use dpets_core::agent::{oracle_episode, run_episode, Ablation, Learner, ModelSection, PlannerSection, Policy, RunConfig};
use dpets_core::envs::EnvKind;
use dpets_core::experiment::run_trials;
use dpets_core::model::{
    sample_mask, total_loss, DropoutMode, Ensemble, InputMap, ModelConfig, Normalizer, Penalties, StateEncoding,
    TransitionBatch, TwoStepTransition,
};
use dpets_core::nn::{Architecture, NetworkParams};
use dpets_core::planner::{cem_optimize, ActionBounds, CemConfig, PlanState};
use dpets_core::probe::{site, Probe};
use dpets_core::propagation::{init_bundle, mean_pairwise_distance, propagate_trajectory, PropagationMode};
use dpets_core::regression::{fit, gap_ratio, predict_grid, RegressConfig};
use dpets_core::rng;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{Binomial, DiscreteCDF};

const SEEDS: u64 = 5;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    let o = Outcome { name, pass, detail };
    println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    o
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- gradients

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (ds, da) = (3, 1);
    let mut map = InputMap::new(StateEncoding::Identity, ds, da);
    let arch = Architecture::new(map.input_dim(), vec![16, 16], ds);
    let mut r = rng::stream(2024, &[]);
    let mut params = NetworkParams::init(&arch, &mut r).unwrap();
    // move the bounds off their initial values so both bound terms are active
    params.max_logvar.mapv_inplace(|v| v - 0.3);
    params.min_logvar.mapv_inplace(|v| v + 7.0);
    let v = |k: usize, r: &mut rng::StreamRng| (0..k).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let data: Vec<TwoStepTransition> = (0..8)
        .map(|_| TwoStepTransition {
            s_prev: v(ds, &mut r),
            a_prev: v(da, &mut r),
            s_mid: v(ds, &mut r),
            a_mid: v(da, &mut r),
            s_next: v(ds, &mut r),
            episode: 0,
        })
        .collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = TransitionBatch::gather(&data, &idx, ds, da).unwrap();
    map.normalizer = Normalizer::fit(map.raw(batch.s_prev.view(), batch.a_prev.view()).view());
    let pairs: Vec<_> = (0..3)
        .map(|_| {
            (
                sample_mask(&arch, 0.9, true, &mut r).unwrap(),
                sample_mask(&arch, 0.9, true, &mut r).unwrap(),
            )
        })
        .collect();
    let penalties = Penalties {
        weight_decay: 1e-3,
        logvar_bound: 0.01,
    };
    let loss = |p: &NetworkParams| total_loss(p, &map, &pairs, &batch, true, penalties).unwrap();

    let analytic = loss(&params).grads.flatten();
    let flat = params.flatten();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut bad = 0usize;
    let mut probe = params.clone();
    for i in 0..flat.len() {
        let mut f = flat.clone();
        f[i] = flat[i] + h;
        probe.set_flat(&f).unwrap();
        let up = loss(&probe).value;
        f[i] = flat[i] - h;
        probe.set_flat(&f).unwrap();
        let down = loss(&probe).value;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs();
        let rel = err / analytic[i].abs().max(numeric.abs());
        if err > 1e-7 && rel > 1e-4 {
            bad += 1;
        }
        if err > 1e-7 {
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        "gradient_correctness",
        bad == 0 && elapsed < Duration::from_secs(60),
        format!(
            "{} parameters, {bad} mismatches, worst relative error {worst:.2e} (above 1e-7 absolute), {}",
            flat.len(),
            secs(elapsed)
        ),
    )
}

// ------------------------------------------------- regression uncertainty

fn uncertainty_gap() -> (Outcome, Vec<(RegressConfig, Ensemble)>) {
    let start = Instant::now();
    let mut fitted = Vec::new();
    let mut ratios = Vec::new();
    for seed in 0..SEEDS {
        let cfg = RegressConfig {
            seed,
            ..RegressConfig::default()
        };
        let ens = fit(&cfg).unwrap();
        ratios.push(gap_ratio(&predict_grid(&ens, &cfg).unwrap()));
        fitted.push((cfg, ens));
    }
    let elapsed = start.elapsed();
    let passing = ratios.iter().filter(|r| **r >= 2.0).count();
    let o = outcome(
        "uncertainty_gap",
        passing >= 4 && elapsed < Duration::from_secs(300),
        format!(
            "gap/in-support std ratios {:?}, {passing}/5 ≥ 2, {}",
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>(),
            secs(elapsed)
        ),
    );
    (o, fitted)
}

fn repeated_prediction_std(ens: &Ensemble, x: f64, seed: u64) -> f64 {
    let mut r = rng::stream(seed, &[77]);
    let outs: Vec<f64> = (0..200).map(|_| ens.predict_mean(&[x], &[], &mut r).unwrap()[0]).collect();
    let m = outs.iter().sum::<f64>() / outs.len() as f64;
    (outs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (outs.len() - 1) as f64).sqrt()
}

/// One-sided sign-test p-value for `wins` successes out of `n`.
fn sign_test_p(wins: u64, n: u64) -> f64 {
    let b = Binomial::new(0.5, n).unwrap();
    if wins == 0 {
        1.0
    } else {
        1.0 - b.cdf(wins - 1)
    }
}

fn restriction_stability(fitted: &[(RegressConfig, Ensemble)]) -> Outcome {
    let x = -1.0;
    let mut pairs = Vec::new();
    for (cfg, ens) in fitted {
        let restricted = repeated_prediction_std(ens, x, cfg.seed);
        let mut free = ens.clone();
        free.config.dropout = DropoutMode::Fresh;
        let unrestricted = repeated_prediction_std(&free, x, cfg.seed);
        pairs.push((restricted, unrestricted));
    }
    let wins = pairs.iter().filter(|(a, b)| a <= b).count() as u64;
    let p = sign_test_p(wins, pairs.len() as u64);
    outcome(
        "restriction_stability",
        p < 0.05,
        format!(
            "std restrictive vs unrestricted {:?}, {wins}/{} seeds, sign-test p = {p:.4}",
            pairs.iter().map(|(a, b)| format!("{a:.2e}/{b:.2e}")).collect::<Vec<_>>(),
            pairs.len()
        ),
    )
}

// ------------------------------------------------------------ FEC ablation

/// Two-step samples of `x' = 0.9 x + 0.1 a + ε`.
fn linear_system(n: usize, sigma: f64, seed: u64) -> Vec<TwoStepTransition> {
    let mut r = rng::stream(seed, &[]);
    let eps = Normal::new(0.0, sigma).unwrap();
    (0..n)
        .map(|_| {
            let x0: f64 = r.random_range(-1.0..1.0);
            let a0: f64 = r.random_range(-1.0..1.0);
            let a1: f64 = r.random_range(-1.0..1.0);
            let x1 = 0.9 * x0 + 0.1 * a0 + eps.sample(&mut r);
            let x2 = 0.9 * x1 + 0.1 * a1 + eps.sample(&mut r);
            TwoStepTransition {
                s_prev: vec![x0],
                a_prev: vec![a0],
                s_mid: vec![x1],
                a_mid: vec![a1],
                s_next: vec![x2],
                episode: 0,
            }
        })
        .collect()
}

fn two_step_rmse(ens: &Ensemble, test: &[TwoStepTransition]) -> f64 {
    let s0 = Array2::from_shape_fn((test.len(), 1), |(i, _)| test[i].s_prev[0]);
    let a0 = Array2::from_shape_fn((test.len(), 1), |(i, _)| test[i].a_prev[0]);
    let a1 = Array2::from_shape_fn((test.len(), 1), |(i, _)| test[i].a_mid[0]);
    let s1 = ens.mean_model_step(s0.view(), a0.view());
    let s2 = ens.mean_model_step(s1.view(), a1.view());
    let sq: f64 = test
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let truth = 0.81 * t.s_prev[0] + 0.09 * t.a_prev[0] + 0.1 * t.a_mid[0];
            (s2[[i, 0]] - truth).powi(2)
        })
        .sum();
    (sq / test.len() as f64).sqrt()
}

fn fec_ablation() -> Outcome {
    let start = Instant::now();
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let train = linear_system(500, 0.05, seed);
        let test = linear_system(500, 0.05, 1000 + seed);
        let rmse = |two_step: bool| {
            let cfg = ModelConfig {
                hidden: vec![32, 32],
                epochs: 50,
                two_step_loss: two_step,
                ..ModelConfig::default()
            };
            let mut ens = Ensemble::new(cfg, StateEncoding::Identity, 1, 1, &mut rng::stream(seed, &[1])).unwrap();
            ens.resample_family(1, &mut rng::stream(seed, &[2])).unwrap();
            ens.train_on_dataset(&train, &mut rng::stream(seed, &[3])).unwrap();
            two_step_rmse(&ens, &test)
        };
        pairs.push((rmse(true), rmse(false)));
    }
    let elapsed = start.elapsed();
    let wins = pairs.iter().filter(|(f, n)| f <= n).count();
    outcome(
        "fec_ablation",
        wins >= 4 && elapsed < Duration::from_secs(300),
        format!(
            "2-step RMSE with vs without FEC {:?}, {wins}/5 seeds, {}",
            pairs.iter().map(|(a, b)| format!("{a:.4}/{b:.4}")).collect::<Vec<_>>(),
            secs(elapsed)
        ),
    )
}

// ----------------------------------------------------- aleatoric filtering

fn aleatoric_filtering() -> Outcome {
    let horizon = 25;
    let mut mean_only = vec![0.0; horizon];
    let mut sampled = vec![0.0; horizon];
    for seed in 0..SEEDS {
        let run = RunConfig {
            seed,
            noise_factor: 0.05,
            ..RunConfig::default()
        };
        let data: Vec<TwoStepTransition> = (0..4).flat_map(|k| run_episode(&run, k, Policy::Random).1).collect();
        let cfg = ModelConfig {
            hidden: vec![32, 32],
            epochs: 30,
            ..ModelConfig::default()
        };
        let mut ens =
            Ensemble::new(cfg, StateEncoding::LeadingAngle, 2, 1, &mut rng::stream(seed, &[1])).unwrap();
        ens.resample_family(1, &mut rng::stream(seed, &[2])).unwrap();
        ens.train_on_dataset(&data, &mut rng::stream(seed, &[3])).unwrap();
        ens.resample_family(2, &mut rng::stream(seed, &[4])).unwrap();

        let mut r = rng::stream(seed, &[5]);
        let actions = Array2::from_shape_fn((horizon, 1), |_| r.random_range(-2.0..2.0));
        let bundle = init_bundle(&ens, &[std::f64::consts::PI, 0.0], 4, &mut r).unwrap();
        let spread = |mode| {
            propagate_trajectory(&ens, &bundle, actions.view(), mode, &mut rng::stream(seed, &[6]))
                .unwrap()
                .iter()
                .map(|s| mean_pairwise_distance(s.view()))
                .collect::<Vec<f64>>()
        };
        for (acc, v) in mean_only.iter_mut().zip(spread(PropagationMode::MeanOnly)) {
            *acc += v / SEEDS as f64;
        }
        for (acc, v) in sampled.iter_mut().zip(spread(PropagationMode::Sampled)) {
            *acc += v / SEEDS as f64;
        }
    }
    let violations: Vec<usize> = (0..horizon).filter(|&h| mean_only[h] > sampled[h]).map(|h| h + 1).collect();
    outcome(
        "aleatoric_filtering",
        violations.is_empty(),
        format!(
            "spread at h=1: {:.4} vs {:.4}, h=25: {:.4} vs {:.4} (mean-only vs sampled), violations at h = {violations:?}",
            mean_only[0], sampled[0], mean_only[horizon - 1], sampled[horizon - 1]
        ),
    )
}

// -------------------------------------------------------------------- CEM

fn cem_sanity() -> Outcome {
    let b = ActionBounds::new(vec![-1.0], vec![1.0]).unwrap();
    let cfg = CemConfig {
        population: 400,
        elites: 40,
        iterations: 5,
        ..CemConfig::default()
    };
    let quadratic = |target: f64| {
        move |cs: &[Array2<f64>]| -> Vec<f64> {
            cs.iter().map(|c| -c.iter().map(|x| (x - target).powi(2)).sum::<f64>()).collect()
        }
    };
    let start = PlanState::initial(5, &b, cfg.init_std_fraction);
    let q = cem_optimize(quadratic(0.3), &start, &b, &cfg, &mut rng::stream(1, &[])).unwrap();
    let q_err = q.plan.iter().map(|v| (v - 0.3).abs()).fold(0.0, f64::max);

    let mut warm = PlanState::initial(5, &b, cfg.init_std_fraction);
    warm.mean = Array2::from_shape_vec((5, 1), vec![0.5, -0.2, 0.0, 0.9, -0.7]).unwrap();
    let frozen = CemConfig { alpha: 1.0, ..cfg.clone() };
    let c = cem_optimize(|cs: &[Array2<f64>]| vec![1.0; cs.len()], &warm, &b, &frozen, &mut rng::stream(2, &[])).unwrap();
    let constant_ok = c.plan == warm.mean;

    let s = cem_optimize(quadratic(2.0), &start, &b, &cfg, &mut rng::stream(3, &[])).unwrap();
    let s_err = s.plan.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let bounded = s.plan.iter().all(|v| *v <= 1.0);

    outcome(
        "cem_sanity",
        q_err <= 1e-2 && constant_ok && s_err <= 1e-2 && bounded,
        format!("quadratic max error {q_err:.2e}, constant objective keeps warm start: {constant_ok}, saturation error {s_err:.2e}"),
    )
}

// --------------------------------------------------------------- swing-up

/// Harness settings shared by the swing-up, noise and ablation checks.
fn swing_up_config(seed: u64, noise_factor: f64, ablation: Ablation, episodes: usize) -> RunConfig {
    RunConfig {
        env: EnvKind::Pendulum,
        seed,
        episodes,
        steps: 200,
        warmup_episodes: 1,
        noise_factor,
        ablation,
        model: ModelSection {
            hidden: vec![32, 32],
            ensemble_size: 5,
            family_size: 5,
            subset_size: 3,
            epochs: 200,
            learning_rate: 1e-3,
            ..ModelSection::default()
        },
        planner: PlannerSection {
            horizon: 25,
            particles: 4,
            population: 100,
            elites: 10,
            iterations: 3,
            ..PlannerSection::default()
        },
        ..RunConfig::default()
    }
}

const MAX_LEARNING_EPISODES: usize = 60;
const WINDOW: usize = 5;
const BUDGET: Duration = Duration::from_secs(45 * 60);

/// Share of the oracle's performance, measured between a random policy
/// and the oracle: 1 matches the oracle, 0 is no better than random.
fn normalized(ret: f64, random: f64, oracle: f64) -> f64 {
    (ret - random) / (oracle - random)
}

struct Reference {
    oracle: f64,
    random: f64,
}

fn reference_returns(seed: u64) -> Reference {
    let cfg = swing_up_config(seed, 0.0, Ablation::Full, 0);
    let oracle = (1..=WINDOW).map(|k| oracle_episode(&cfg, k).total_return).sum::<f64>() / WINDOW as f64;
    let random = (1..=WINDOW)
        .map(|k| run_episode(&cfg, k, Policy::Random).0.total_return)
        .sum::<f64>()
        / WINDOW as f64;
    Reference { oracle, random }
}

/// Learns until the last `WINDOW` learning episodes reach `target`
/// (normalized), the episode budget runs out, or `budget` has elapsed.
fn learn_until(cfg: RunConfig, reference: &Reference, target: f64, budget: Duration) -> (bool, usize, f64) {
    let start = Instant::now();
    let mut learner = Learner::new(cfg, None).unwrap();
    let mut returns = Vec::new();
    let mut best = f64::NEG_INFINITY;
    while !learner.is_done() && start.elapsed() < budget {
        let log = learner.step_episode().unwrap();
        if log.warmup {
            continue;
        }
        returns.push(log.total_return);
        println!("     episode {:>2}: return {:.1}, {}", log.episode, log.total_return, secs(start.elapsed()));
        if returns.len() >= WINDOW {
            let mean = returns[returns.len() - WINDOW..].iter().sum::<f64>() / WINDOW as f64;
            let score = normalized(mean, reference.random, reference.oracle);
            best = best.max(score);
            if score >= target {
                return (true, returns.len(), score);
            }
        }
    }
    (false, returns.len(), best)
}

fn swing_up() -> Vec<Outcome> {
    let start = Instant::now();
    let seed = 0;
    let reference = reference_returns(seed);
    println!(
        "     oracle return {:.1}, random-policy return {:.1}",
        reference.oracle, reference.random
    );
    let (ok, episodes, score) = learn_until(
        swing_up_config(seed, 0.0, Ablation::Full, MAX_LEARNING_EPISODES),
        &reference,
        0.85,
        BUDGET.saturating_sub(start.elapsed()),
    );
    let elapsed = start.elapsed();
    let clean = outcome(
        "swing_up",
        ok && elapsed < BUDGET,
        format!("{score:.3} of oracle after {episodes} learning episodes (target 0.85), {}", secs(elapsed)),
    );
    let start = Instant::now();
    let (ok, episodes, score) = learn_until(
        swing_up_config(seed, 0.05, Ablation::Full, MAX_LEARNING_EPISODES),
        &reference,
        0.70,
        BUDGET,
    );
    let elapsed = start.elapsed();
    let noisy = outcome(
        "swing_up_noisy",
        ok && elapsed < BUDGET,
        format!(
            "{score:.3} of noiseless oracle after {episodes} learning episodes at noise 0.05 (target 0.70), {}",
            secs(elapsed)
        ),
    );
    vec![clean, noisy]
}

// ---------------------------------------------------------------- ablation

fn expected_sites(a: Ablation) -> BTreeSet<&'static str> {
    let masks = match a {
        Ablation::Mc => site::MASKS_FRESH,
        Ablation::Be => site::MASKS_DISABLED,
        _ => site::MASKS_RESTRICTIVE,
    };
    let loss = if a == Ablation::NoFec {
        site::LOSS_ONE_STEP
    } else {
        site::LOSS_TWO_STEP
    };
    let propagate = if a == Ablation::NoDu {
        site::PROPAGATE_SAMPLE
    } else {
        site::PROPAGATE_MEAN
    };
    let mut s: BTreeSet<_> = [masks, loss, propagate].into_iter().collect();
    if a == Ablation::Be {
        s.insert(site::BOOTSTRAP);
    }
    s
}

fn ablation_wiring() -> Outcome {
    let start = Instant::now();
    let mut seen = Vec::new();
    let mut problems = Vec::new();
    for a in Ablation::ALL {
        let mut learner = Learner::new(swing_up_config(0, 0.0, a, 1), None).unwrap();
        let probe = Probe::recording();
        learner.set_probe(probe.clone());
        if let Err(e) = learner.run() {
            problems.push(format!("{}: {e}", a.name()));
            continue;
        }
        let sites: BTreeSet<&str> = probe.snapshot().keys().copied().collect();
        if sites != expected_sites(a) {
            problems.push(format!("{}: sites {sites:?}", a.name()));
        }
        seen.push(sites);
    }
    let distinct = seen.iter().collect::<BTreeSet<_>>().len() == Ablation::ALL.len();
    outcome(
        "ablation_wiring",
        problems.is_empty() && distinct,
        format!(
            "{} modes completed, distinct probe signatures: {distinct}, problems {problems:?}, {}",
            seen.len(),
            secs(start.elapsed())
        ),
    )
}

// ------------------------------------------------------------ determinism

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        seed: 9,
        episodes: 2,
        steps: 30,
        model: ModelSection {
            hidden: vec![16, 16],
            ensemble_size: 3,
            epochs: 3,
            ..ModelSection::default()
        },
        planner: PlannerSection {
            horizon: 8,
            particles: 2,
            population: 20,
            elites: 4,
            iterations: 2,
            ..PlannerSection::default()
        },
        ..RunConfig::default()
    };
    let curve = |name: &str, parallel: usize| {
        let out = dir.path().join(name);
        run_trials(&cfg, 3, &out, parallel).unwrap();
        std::fs::read(out.join("learning_curve.csv")).unwrap()
    };
    let a = curve("a", 1);
    let b = curve("b", 1);
    let c = curve("c", 3);
    outcome(
        "determinism",
        a == b && a == c && !a.is_empty(),
        format!("repeat identical: {}, parallel-trials 3 identical: {}", a == b, a == c),
    )
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("DPETS_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |name: &str| only.as_ref().is_none_or(|o| o.iter().any(|n| n == name));

    let mut results = Vec::new();
    if wanted("gradient_correctness") {
        results.push(gradient_correctness());
    }
    if wanted("uncertainty_gap") || wanted("restriction_stability") {
        let (gap, fitted) = uncertainty_gap();
        results.push(gap);
        results.push(restriction_stability(&fitted));
    }
    if wanted("fec_ablation") {
        results.push(fec_ablation());
    }
    if wanted("aleatoric_filtering") {
        results.push(aleatoric_filtering());
    }
    if wanted("cem_sanity") {
        results.push(cem_sanity());
    }
    if wanted("swing_up") {
        results.extend(swing_up());
    }
    if wanted("ablation_wiring") {
        results.push(ablation_wiring());
    }
    if wanted("determinism") {
        results.push(determinism());
    }

    let failed: Vec<&str> = results.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        if std::env::var_os("DPETS_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
