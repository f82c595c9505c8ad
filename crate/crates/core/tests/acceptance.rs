//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed. Runs with `harness = false` so the
//! lines are visible under plain `cargo test`.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::dab::{adapted_forward, AdaptorSet, Configuration};
use tta_core::harness::{
    calibrate, generate, prepare, run_tta, Calibration, Dataset, PipelineConfig, RunOptions, RunReport, SplitName,
};
use tta_core::metrics::{mae, mse, psnr, ssim, PsnrMax, SSIM_C1, SSIM_C2};
use tta_core::search::{
    backward_elimination, bayesian_search, forward_selection, grid_search, random_search, search, FnObjective,
    SearchResult, Strategy, TpeConfig,
};
use tta_core::stats::{bonferroni, bonferroni_threshold, wilcoxon_exact};
use tta_core::{Member, ReconSuite, Tape, TaskModel, Tensor, Var};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T>(r: tta_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Shared trained fixture

struct Fixture {
    cfg: PipelineConfig,
    data: Dataset,
    task: TaskModel,
    suite: ReconSuite,
    calibration: Calibration,
    task_checksum: String,
    suite_checksum: String,
    prepare_time: Duration,
}

struct Runs {
    grid: RunReport,
    static_all: RunReport,
    run_time: Duration,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();
static RUNS: OnceLock<Runs> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let start = Instant::now();
        let cfg = PipelineConfig::default();
        let data = generate(&cfg.data).expect("dataset");
        let p = prepare(&cfg, &data).expect("training");
        let prepare_time = start.elapsed();
        Fixture {
            task_checksum: p.task.checksum(),
            suite_checksum: p.suite.checksum(),
            cfg,
            data,
            task: p.task,
            suite: p.suite,
            calibration: p.calibration,
            prepare_time,
        }
    })
}

fn runs() -> &'static Runs {
    RUNS.get_or_init(|| {
        let f = fixture();
        let start = Instant::now();
        let mut opts = RunOptions::from_config(&f.cfg);
        opts.strategy = Strategy::Grid;
        opts.keep_outputs = true;
        let grid = run_tta(&f.task, &f.suite, &f.data, &f.calibration, &opts).expect("grid run");
        opts.strategy = Strategy::StaticAll;
        opts.keep_outputs = false;
        let static_all = run_tta(&f.task, &f.suite, &f.data, &f.calibration, &opts).expect("static-all run");
        Runs { grid, static_all, run_time: start.elapsed() }
    })
}

fn input_of(data: &Dataset, split: SplitName, id: u64) -> &Tensor {
    let s = data.split(split);
    let i = s.ids.iter().position(|&x| x == id).expect("id in split");
    &s.inputs[i]
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient checks

const FD_STEP: f32 = 5e-3;
const INSTANCES: usize = 20;

type Build = dyn Fn(&mut Tape, &[Var]) -> tta_core::Result<Var>;

/// Scalar loss: the output itself when scalar, otherwise its dot product with
/// fixed random weights.
fn loss_of(inputs: &[Tensor], weights: &Option<Tensor>, build: &Build) -> tta_core::Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &vars)?;
    let loss = match weights {
        Some(w) => {
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv)?;
            tape.sum(p)?
        }
        None => y,
    };
    Ok((tape, vars, loss))
}

/// Compares analytic gradients against central differences on up to 12
/// random elements per input. Returns the number of elements checked.
fn fd_check(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, build: &Build) -> Result<usize, String> {
    let mut probe = Tape::new();
    let pv: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone(), true)).collect();
    let y = ok(build(&mut probe, &pv))?;
    let shape = probe.value(y).shape().to_vec();
    let weights = (probe.value(y).numel() > 1).then(|| Tensor::uniform(&shape, -1.0, 1.0, rng));

    let (mut tape, vars, loss) = ok(loss_of(&inputs, &weights, build))?;
    ok(tape.backward(loss))?;
    let mut checked = 0;
    for (t_idx, v) in vars.iter().enumerate() {
        let grad = tape.grad(*v).ok_or("input received no gradient")?;
        let n = inputs[t_idx].numel();
        for _ in 0..n.min(12) {
            let e = rng.random_range(0..n);
            let eval = |delta: f32| -> Result<f64, String> {
                let mut shifted = inputs.clone();
                shifted[t_idx].data_mut()[e] += delta;
                let (tape, _, loss) = ok(loss_of(&shifted, &weights, build))?;
                Ok(tape.value(loss).item() as f64)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP as f64);
            let an = grad.data()[e] as f64;
            let tol = (1e-2 * fd.abs()).max(1e-3);
            check!((an - fd).abs() <= tol, "input {t_idx} element {e}: analytic {an:.6} vs numeric {fd:.6}");
            checked += 1;
        }
    }
    Ok(checked)
}

/// Values with magnitude in `[0.05, 1]`, away from kinks at zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.05, 1.0, rng);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut total = 0;
    let mut ops = 0;
    let mut run = |name: &str,
                   rng: &mut ChaCha8Rng,
                   make: &dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)|
     -> Result<(), String> {
        for i in 0..INSTANCES {
            let (inputs, build) = make(rng);
            total += fd_check(rng, inputs, &*build).map_err(|e| format!("{name} instance {i}: {e}"))?;
        }
        ops += 1;
        Ok(())
    };
    let dims = |rng: &mut ChaCha8Rng| (rng.random_range(1..=3), rng.random_range(3..=6), rng.random_range(3..=6));

    run("conv2d", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        let o = rng.random_range(1..=3);
        let kk = if rng.random::<bool>() { 3 } else { 1 };
        let stride = rng.random_range(1..=2);
        let pad = if kk == 3 { rng.random_range(0..=1) } else { 0 };
        let bias = rng.random::<bool>();
        let mut inputs = vec![Tensor::randn(&[c, h, w], 1.0, rng), Tensor::randn(&[o, c, kk, kk], 0.5, rng)];
        if bias {
            inputs.push(Tensor::randn(&[o], 0.5, rng));
        }
        (inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)))
    })?;
    run("conv1x1", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        let o = rng.random_range(1..=3);
        let inputs =
            vec![Tensor::randn(&[c, h, w], 1.0, rng), Tensor::randn(&[o, c, 1, 1], 0.5, rng), Tensor::randn(&[o], 0.5, rng)];
        (inputs, Box::new(|t, v| t.conv1x1(v[0], v[1], v[2])))
    })?;
    run("upsample2x", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        (vec![Tensor::randn(&[c, h, w], 1.0, rng)], Box::new(|t, v| t.upsample2x(v[0])))
    })?;
    run("leaky_relu", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        (vec![away_from_zero(&[c, h, w], rng)], Box::new(|t, v| t.leaky_relu(v[0], 0.2)))
    })?;
    run("tanh", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        (vec![Tensor::randn(&[c, h, w], 1.0, rng)], Box::new(|t, v| t.tanh(v[0])))
    })?;
    run("sigmoid", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        (vec![Tensor::randn(&[c, h, w], 1.0, rng)], Box::new(|t, v| t.sigmoid(v[0])))
    })?;
    run("scale", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        let f = rng.random_range(-2.0..2.0f32);
        (vec![Tensor::randn(&[c, h, w], 1.0, rng)], Box::new(move |t, v| t.scale(v[0], f)))
    })?;
    run("concat_channels", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        let c2 = rng.random_range(1..=3);
        let inputs = vec![Tensor::randn(&[c, h, w], 1.0, rng), Tensor::randn(&[c2, h, w], 1.0, rng)];
        (inputs, Box::new(|t, v| t.concat_channels(v[0], v[1])))
    })?;
    run("add", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        let inputs = vec![Tensor::randn(&[c, h, w], 1.0, rng), Tensor::randn(&[c, h, w], 1.0, rng)];
        (inputs, Box::new(|t, v| t.add(v[0], v[1])))
    })?;
    run("mul", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        let inputs = vec![Tensor::randn(&[c, h, w], 1.0, rng), Tensor::randn(&[c, h, w], 1.0, rng)];
        (inputs, Box::new(|t, v| t.mul(v[0], v[1])))
    })?;
    run("sum", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        (vec![Tensor::randn(&[c, h, w], 1.0, rng)], Box::new(|t, v| t.sum(v[0])))
    })?;
    run("l1", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        let a = Tensor::randn(&[c, h, w], 1.0, rng);
        let gap = away_from_zero(&[c, h, w], rng);
        let b = Tensor::new(a.shape().to_vec(), a.data().iter().zip(gap.data()).map(|(x, g)| x + g).collect())
            .expect("shape");
        (vec![a, b], Box::new(|t, v| t.l1(v[0], v[1])))
    })?;
    run("mse", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        let inputs = vec![Tensor::randn(&[c, h, w], 1.0, rng), Tensor::randn(&[c, h, w], 1.0, rng)];
        (inputs, Box::new(|t, v| t.mse(v[0], v[1])))
    })?;
    run("conv-leaky-tanh chain", &mut rng, &|rng| {
        let (c, h, w) = dims(rng);
        let inputs = vec![
            Tensor::randn(&[c, h, w], 1.0, rng),
            Tensor::randn(&[2, c, 3, 3], 0.4, rng),
            Tensor::randn(&[1, 2, 3, 3], 0.4, rng),
        ];
        (
            inputs,
            Box::new(|t, v| {
                let a = t.conv2d(v[0], v[1], None, 1, 1)?;
                let a = t.tanh(a)?;
                let u = t.upsample2x(a)?;
                let b = t.conv2d(u, v[2], None, 2, 1)?;
                t.sigmoid(b)
            }),
        )
    })?;
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(30), "gradient suite took {elapsed:?}");
    Ok(format!("{ops} ops x {INSTANCES} instances, {total} elements checked in {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 2. Identity and gating invariants

fn criterion_identity_gating() -> Outcome {
    let f = fixture();
    let k = f.task.levels();
    let all: Vec<Configuration> = (1u32..(1 << k)).map(|m| Configuration::from_mask(m, k).unwrap()).collect();
    let mut identity_checks = 0;
    for (i, x) in f.data.ood_test.inputs.iter().take(8).enumerate() {
        let plain = ok(f.task.translate(x))?;
        for &omega in &all {
            let adaptors = ok(AdaptorSet::init(&f.task, 1000 + i as u64))?;
            let (trace, _) = ok(adapted_forward(&f.task, &f.suite, &adaptors, omega, x))?;
            check!(trace.output().bitwise_eq(plain.output()), "fresh adaptors changed the output under {omega}");
            for d in 1..=f.task.depth_count() {
                check!(
                    ok(trace.feature(d))?.bitwise_eq(ok(plain.feature(d))?),
                    "fresh adaptors changed feature {d} under {omega}"
                );
            }
            identity_checks += 1;
        }
    }

    let r = runs();
    let mut untriggered = 0;
    for (row, out) in r.grid.rows.iter().zip(&r.grid.outputs) {
        if row.triggered {
            continue;
        }
        let plain = ok(f.task.translate(input_of(&f.data, row.split, row.sample_id)))?;
        check!(out.bitwise_eq(plain.output()), "untriggered sample {} output changed", row.sample_id);
        check!(
            row.configs_evaluated == 0 && row.adapt_steps_total == 0 && row.forwards_total == 0,
            "untriggered sample {} has a nonzero budget",
            row.sample_id
        );
        check!(row.omega_star.is_empty(), "untriggered sample {} has a configuration", row.sample_id);
        check!(row.mae_tta.to_bits() == row.mae_no_tta.to_bits(), "untriggered sample {} MAE differs", row.sample_id);
        untriggered += 1;
    }
    check!(untriggered > 0, "no untriggered samples to check");
    check!(f.task.checksum() == f.task_checksum, "task checksum changed");
    check!(f.suite.checksum() == f.suite_checksum, "suite checksum changed");
    Ok(format!(
        "{identity_checks} fresh-adaptor passes bitwise identical, {untriggered} untriggered samples untouched, checksums unchanged"
    ))
}

// ---------------------------------------------------------------------------
// 3. Monotone safety

fn criterion_monotone_safety() -> Outcome {
    let f = fixture();
    let r = runs();
    let ry = ok(f.suite.member(Member::Output))?;
    let mut n = 0;
    for (row, out) in r.grid.rows.iter().zip(&r.grid.outputs) {
        if row.split != SplitName::OodTest || !row.triggered {
            continue;
        }
        let plain = ok(f.task.translate(input_of(&f.data, row.split, row.sample_id)))?;
        let before = ok(ry.error(plain.output()))?;
        let after = ok(ry.error(out))?;
        check!(before == row.eps_unadapted, "sample {}: unadapted error not reproducible", row.sample_id);
        check!(after <= before, "sample {}: reported {after} > unadapted {before}", row.sample_id);
        check!(row.eps_best <= row.eps_unadapted, "sample {}: eps_best above unadapted", row.sample_id);
        n += 1;
    }
    check!(n > 0, "no triggered OOD samples");
    Ok(format!("{n}/{n} triggered OOD samples have reported eps_y <= unadapted eps_y"))
}

// ---------------------------------------------------------------------------
// 4. Search correctness on mock objectives

/// Non-empty level subsets of 1..=k in canonical order: size, then lexicographic.
fn subsets(k: usize) -> Vec<Vec<usize>> {
    let mut all: Vec<Vec<usize>> =
        (1u32..(1 << k)).map(|m| (1..=k).filter(|&l| m & (1 << (l - 1)) != 0).collect()).collect();
    all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    all
}

/// Random table over subsets, rounded so ties occur.
fn random_table(k: usize, rng: &mut ChaCha8Rng) -> HashMap<Vec<usize>, f64> {
    subsets(k).into_iter().map(|s| (s, (rng.random::<f64>() * 20.0).round() / 20.0)).collect()
}

fn objective(k: usize, table: &HashMap<Vec<usize>, f64>) -> FnObjective<impl FnMut(Configuration) -> f64 + '_> {
    FnObjective { levels: k, steps: 5, f: move |c: Configuration| table[&c.levels()] }
}

/// Earliest strict minimum of `cands` under `table`.
fn argmin<'a>(cands: &'a [Vec<usize>], table: &HashMap<Vec<usize>, f64>) -> (&'a Vec<usize>, f64) {
    let mut best = (&cands[0], table[&cands[0]]);
    for c in &cands[1..] {
        if table[c] < best.1 {
            best = (c, table[c]);
        }
    }
    best
}

struct Reference {
    winner: Vec<usize>,
    eps: f64,
    evaluated: Vec<Vec<usize>>,
}

fn greedy_forward(k: usize, table: &HashMap<Vec<usize>, f64>) -> Reference {
    let mut current: Vec<usize> = Vec::new();
    let mut best = f64::INFINITY;
    let mut evaluated = Vec::new();
    while current.len() < k {
        let cands: Vec<Vec<usize>> = (1..=k)
            .filter(|l| !current.contains(l))
            .map(|l| {
                let mut c = current.clone();
                c.push(l);
                c.sort();
                c
            })
            .collect();
        evaluated.extend(cands.iter().cloned());
        let (c, e) = argmin(&cands, table);
        if e < best {
            best = e;
            current = c.clone();
        } else {
            break;
        }
    }
    Reference { winner: current, eps: best, evaluated }
}

fn greedy_backward(k: usize, table: &HashMap<Vec<usize>, f64>) -> Reference {
    let mut current: Vec<usize> = (1..=k).collect();
    let mut best = table[&current];
    let mut evaluated = vec![current.clone()];
    while current.len() > 1 {
        let cands: Vec<Vec<usize>> =
            current.iter().map(|l| current.iter().copied().filter(|x| x != l).collect()).collect();
        evaluated.extend(cands.iter().cloned());
        let (c, e) = argmin(&cands, table);
        if e < best {
            best = e;
            current = c.clone();
        } else {
            break;
        }
    }
    Reference { winner: current, eps: best, evaluated }
}

fn matches_reference(name: &str, got: &SearchResult, want: &Reference) -> Result<(), String> {
    let levels: Vec<Vec<usize>> = got.history.iter().map(|(c, _)| c.levels()).collect();
    check!(levels == want.evaluated, "{name}: evaluation order {levels:?} vs reference {:?}", want.evaluated);
    check!(got.omega_star.map(|c| c.levels()) == Some(want.winner.clone()), "{name}: winner differs");
    check!(got.eps_best == want.eps, "{name}: best error differs");
    Ok(())
}

fn criterion_search() -> Outcome {
    let start = Instant::now();
    let mut tpe_hits = HashMap::new();
    for k in [3usize, 4] {
        let space = subsets(k);
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial * 31 + k as u64);
            let table = random_table(k, &mut rng);
            let (brute, brute_eps) = argmin(&space, &table);

            let grid = ok(grid_search(&mut objective(k, &table)))?;
            check!(grid.omega_star.map(|c| c.levels()).as_ref() == Some(brute), "k={k} trial {trial}: grid winner");
            check!(grid.eps_best == brute_eps, "k={k} trial {trial}: grid error");

            for n in [space.len(), space.len() + 3, 64] {
                let rand = ok(random_search(&mut objective(k, &table), n, trial))?;
                check!(
                    rand.omega_star == grid.omega_star && rand.eps_best == grid.eps_best,
                    "k={k} trial {trial}: rand{n} differs from grid"
                );
            }
            matches_reference("fs", &ok(forward_selection(&mut objective(k, &table)))?, &greedy_forward(k, &table))
                .map_err(|e| format!("k={k} trial {trial}: {e}"))?;
            matches_reference("be", &ok(backward_elimination(&mut objective(k, &table)))?, &greedy_backward(k, &table))
                .map_err(|e| format!("k={k} trial {trial}: {e}"))?;

            let tpe = ok(bayesian_search(&mut objective(k, &table), &TpeConfig::default(), trial))?;
            check!(tpe.history.len() <= 20, "tpe used {} trials", tpe.history.len());
            if tpe.eps_best == brute_eps {
                *tpe_hits.entry(k).or_insert(0) += 1;
            }
        }
    }
    for k in [3, 4] {
        let hits = tpe_hits.get(&k).copied().unwrap_or(0);
        check!(hits >= 80, "tpe found the optimum in {hits}/100 runs at k={k}");
    }
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(60), "search checks took {elapsed:?}");
    Ok(format!(
        "200 objectives: grid=brute force, rand>=|Omega| = grid, fs/be = greedy references; tpe {}/100 (k=3), {}/100 (k=4)",
        tpe_hits[&3], tpe_hits[&4]
    ))
}

// ---------------------------------------------------------------------------
// 5. Budget accounting

fn criterion_budget() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut checks = 0;
    for k in 1..=6usize {
        let omega = (1usize << k) - 1;
        for m in [1usize, 3, 5] {
            let table = random_table(k, &mut rng);
            let mut obj = FnObjective { levels: k, steps: m, f: |c: Configuration| table[&c.levels()] };
            let g = ok(search(&mut obj, Strategy::Grid, 0))?;
            check!(g.budget.configs_evaluated == omega, "grid k={k}: {} configs", g.budget.configs_evaluated);
            check!(g.budget.adapt_steps_total == omega * m, "grid k={k} M={m}: {} steps", g.budget.adapt_steps_total);
            for n in 1..=omega + 2 {
                let r = ok(search(&mut obj, Strategy::Random { n_config: n }, n as u64))?;
                check!(r.budget.configs_evaluated == n.min(omega), "rand{n} k={k}: configs");
                check!(r.budget.adapt_steps_total == n.min(omega) * m, "rand{n} k={k} M={m}: steps");
            }
            let fs = ok(search(&mut obj, Strategy::ForwardSelection, 0))?;
            check!(fs.budget.configs_evaluated <= k * (k + 1) / 2, "fs k={k}: {} configs", fs.budget.configs_evaluated);
            check!(fs.budget.adapt_steps_total == fs.budget.configs_evaluated * m, "fs k={k}: steps");
            let be = ok(search(&mut obj, Strategy::BackwardElimination, 0))?;
            check!(be.budget.configs_evaluated <= 1 + k * (k + 1) / 2, "be k={k}: {} configs", be.budget.configs_evaluated);
            check!(be.budget.adapt_steps_total == be.budget.configs_evaluated * m, "be k={k}: steps");
            checks += 1;
        }
    }

    // The same formulas on real adaptation with the default M.
    let f = fixture();
    let r = runs();
    let omega = (1usize << f.task.levels()) - 1;
    let m = f.cfg.adapt.steps;
    let mut triggered = 0;
    for row in r.grid.rows.iter().filter(|r| r.triggered) {
        check!(row.configs_evaluated == omega, "sample {}: {} configs", row.sample_id, row.configs_evaluated);
        check!(row.adapt_steps_total == omega * m, "sample {}: {} steps", row.sample_id, row.adapt_steps_total);
        triggered += 1;
    }
    Ok(format!(
        "{checks} (k, M) mock cases exact; {triggered} triggered grid samples used exactly {omega}x{m} = {} steps",
        omega * m
    ))
}

// ---------------------------------------------------------------------------
// 6. Metrics and statistics

/// Two-sided exact p-value by enumerating every sign assignment.
fn sign_enumeration_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let mut abs: Vec<(f64, usize)> = d.iter().enumerate().map(|(i, v)| (v.abs(), i)).collect();
    abs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs[j + 1].0 == abs[i].0 {
            j += 1;
        }
        for item in &abs[i..=j] {
            ranks[item.1] = (i + j + 2) as f64 / 2.0;
        }
        i = j + 1;
    }
    let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for signs in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|b| signs & (1 << b) != 0).map(|b| ranks[b]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64) / total).min(1.0)
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let x = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let s = ok(ssim(&x, &x, SSIM_C1, SSIM_C2))?;
        check!((s - 1.0).abs() <= 1e-6, "SSIM(x, x) = {s}");
    }
    let flat = Tensor::full(&[1, 8, 8], 0.3);
    check!((ok(ssim(&flat, &flat, SSIM_C1, SSIM_C2))? - 1.0).abs() <= 1e-6, "SSIM of a flat image with itself");

    let p = ok(psnr(&Tensor::full(&[1, 8, 8], 0.5), &Tensor::zeros(&[1, 8, 8]), PsnrMax::Range))?;
    check!((p - 6.0206).abs() <= 1e-3, "PSNR closed form gave {p}");

    for _ in 0..20 {
        let a = Tensor::uniform(&[1, 9, 7], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[1, 9, 7], 0.0, 1.0, &mut rng);
        let (mut sa, mut sq) = (0.0f64, 0.0f64);
        for i in 0..a.numel() {
            let d = a.data()[i] as f64 - b.data()[i] as f64;
            sa += d.abs();
            sq += d * d;
        }
        let n = a.numel() as f64;
        check!((ok(mae(&a, &b))? - sa / n).abs() <= 1e-6, "MAE oracle");
        check!((ok(mse(&a, &b))? - sq / n).abs() <= 1e-6, "MSE oracle");
    }

    let mut cases = 0;
    for n in 1..=12usize {
        for trial in 0..10 {
            // Rounded values so some trials contain ties and zeros.
            let a: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).round() / 4.0).collect();
            let b: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).round() / 4.0).collect();
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            if d.iter().all(|v| *v == 0.0) {
                continue;
            }
            let got = ok(wilcoxon_exact(&a, &b))?.p_value;
            let want = sign_enumeration_p(&d);
            check!((got - want).abs() <= 1e-12, "n={n} trial {trial}: p {got} vs enumeration {want}");
            cases += 1;
        }
    }

    let (alpha, m) = (0.05, 4);
    let cut = bonferroni_threshold(alpha, m);
    check!(cut == alpha / m as f64, "threshold {cut}");
    let flags = ok(bonferroni(&[cut, cut * 0.999, cut * 1.001, 0.0], alpha))?;
    let sig: Vec<bool> = flags.iter().map(|c| c.significant).collect();
    check!(sig == [false, true, false, true], "Bonferroni flags {sig:?}");
    Ok(format!("SSIM/PSNR/MAE/MSE oracles hold; {cases} exact Wilcoxon cases match enumeration; Bonferroni strict"))
}

// ---------------------------------------------------------------------------
// 7. Shift-proxy property

fn criterion_shift_proxy() -> Outcome {
    let f = fixture();
    let start = Instant::now();
    let cal = ok(calibrate(&f.task, &f.suite, &f.data, 95.0, false))?;
    let calib_time = f.prepare_time + start.elapsed();
    check!(cal.tau == f.calibration.tau, "calibration is not reproducible");
    let ry = ok(f.suite.member(Member::Output))?;
    let eps = |split: SplitName| -> Result<Vec<f64>, String> {
        f.data.split(split).inputs.iter().map(|x| ok(ry.error(ok(f.task.translate(x))?.output()))).collect()
    };
    let (id, ood) = (eps(SplitName::IdTest)?, eps(SplitName::OodTest)?);
    let frac = |v: &[f64]| v.iter().filter(|&&e| e > cal.tau).count() as f64 / v.len() as f64;
    let (m_id, m_ood) = (mean(id.iter().copied()), mean(ood.iter().copied()));
    let (f_id, f_ood) = (frac(&id), frac(&ood));
    let detail = format!(
        "mean eps_y ID {m_id:.4} OOD {m_ood:.4}; tau {:.4}; triggered ID {:.1}% OOD {:.1}%; train+calibrate {:.0}s",
        cal.tau,
        100.0 * f_id,
        100.0 * f_ood,
        calib_time.as_secs_f64()
    );
    check!(m_ood > m_id, "OOD mean not above ID mean: {detail}");
    check!(f_id <= 0.10, "ID triggered fraction too high: {detail}");
    check!(f_ood >= 0.50, "OOD triggered fraction too low: {detail}");
    check!(calib_time < Duration::from_secs(300), "calibration run too slow: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. Directional reproduction

fn criterion_directional() -> Outcome {
    let f = fixture();
    let r = runs();
    let b: Vec<_> = r.grid.rows_of(SplitName::OodTest).filter(|r| r.triggered).collect();
    check!(!b.is_empty(), "OOD subset B is empty");
    let (b_no, b_tta) = (mean(b.iter().map(|r| r.mae_no_tta)), mean(b.iter().map(|r| r.mae_tta)));

    let quiet: Vec<_> = r.grid.rows_of(SplitName::IdTest).filter(|r| !r.triggered).collect();
    check!(!quiet.is_empty(), "no untriggered ID samples");
    let (q_no, q_tta) = (mean(quiet.iter().map(|r| r.mae_no_tta)), mean(quiet.iter().map(|r| r.mae_tta)));

    let grid_id = mean(r.grid.rows_of(SplitName::IdTest).map(|r| r.mae_tta));
    let static_id = mean(r.static_all.rows_of(SplitName::IdTest).map(|r| r.mae_tta));
    let total = f.prepare_time + r.run_time;
    let detail = format!(
        "(a) B MAE {b_no:.4} -> {b_tta:.4} over {} samples; (b) untriggered ID MAE {q_no:.6} = {q_tta:.6}; \
         (c) ID MAE static-all {static_id:.4} vs grid {grid_id:.4}; {:.0}s",
        b.len(),
        total.as_secs_f64()
    );
    check!(b_tta < b_no, "(a) failed: {detail}");
    check!(q_tta.to_bits() == q_no.to_bits(), "(b) failed: {detail}");
    check!(static_id > grid_id, "(c) failed: {detail}");
    check!(total < Duration::from_secs(600), "full run too slow: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. Threshold sweep

fn criterion_sweep() -> Outcome {
    let f = fixture();
    let r = runs();
    let mut opts = RunOptions::from_config(&f.cfg);
    opts.strategy = Strategy::Grid;
    let mut sizes = Vec::new();
    for p in [85.0, 90.0, 95.0, 98.0] {
        let report = if p == f.calibration.percentile {
            r.grid.clone()
        } else {
            let cal = ok(f.calibration.at(p))?;
            ok(run_tta(&f.task, &f.suite, &f.data, &cal, &opts))?
        };
        check!(report.rows.len() == f.data.id_test.len() + f.data.ood_test.len(), "p{p}: incomplete run");
        sizes.push((p, report.rows.iter().filter(|r| r.triggered).count()));
    }
    let text: Vec<String> = sizes.iter().map(|(p, n)| format!("p{p}: {n}")).collect();
    for w in sizes.windows(2) {
        check!(w[1].1 <= w[0].1, "triggered set grows with the percentile: {}", text.join(", "));
    }
    Ok(format!("triggered set sizes {}", text.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient suite", criterion_gradients),
        ("2 identity and gating invariants", criterion_identity_gating),
        ("3 monotone safety", criterion_monotone_safety),
        ("4 search correctness", criterion_search),
        ("5 budget accounting", criterion_budget),
        ("6 metrics and statistics", criterion_metrics),
        ("7 shift proxy", criterion_shift_proxy),
        ("8 directional reproduction", criterion_directional),
        ("9 threshold sweep", criterion_sweep),
    ];
    // Tests filtered by name from `cargo test <filter>` are honoured loosely.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
