//! Acceptance checks, one line per criterion. Exits non-zero if any fails.

use std::process::ExitCode;
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lgmnet::checkpoint::{load_checkpoint, save_checkpoint};
use lgmnet::data::{permute_support, SplitSide, TaskInstance};
use lgmnet::eval::baseline::{compare_sources, BASELINE_LR, BASELINE_STEPS};
use lgmnet::eval::weights::{export_weight_distribution, permutation_test, separation};
use lgmnet::eval::{evaluate, mean_and_half_width, sample_variance, EvalRequest, Plain};
use lgmnet::gradcheck::{check_ops, check_pipeline, TOLERANCE};
use lgmnet::metanet::{standard_normal, ContextDraw, MetaNet, NormMode};
use lgmnet::tape::Tape;
use lgmnet::tensor::Tensor;
use lgmnet::training::{lr_at, sample_seeded_task, BatchStats, ModelState, TrainConfig};
use lgmnet::Result;

const TRAIN_BATCHES: u64 = 20_000;
const MIN_ACCURACY: f64 = 0.97;
const EVAL_TASKS: usize = 500;
const WN_TOL: f32 = 1e-5;
const ORDER_TOL: f32 = 1e-6;
const BASELINE_MARGIN: f64 = 0.10;
const CHANCE_SIGMAS: f64 = 3.0;
const SIGNIFICANCE: f64 = 0.05;
const ITN_MEAN_TOL: f64 = 1e-5;
const ITN_VAR_TOL: f64 = 1e-4;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn trained(dataset: &str, n_way: usize) -> Result<ModelState> {
    let mut state = ModelState::new(TrainConfig {
        dataset: dataset.into(),
        n_way,
        k_shot: 1,
        tasks_per_batch: 16,
        total_batches: TRAIN_BATCHES,
        ..TrainConfig::default()
    })?;
    state.train_until(TRAIN_BATCHES, |_| {})?;
    Ok(state)
}

fn test_tasks(state: &ModelState, n: usize, n_way: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = &state.config;
    (0..n)
        .map(|_| {
            sample_seeded_task(
                &state.dataset,
                state.split.side(SplitSide::Test),
                n_way,
                c.k_shot,
                c.n_query,
                &mut rng,
            )
        })
        .collect()
}

fn generalization(models: &[(String, ModelState)]) -> Result<Outcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, state) in models {
        let req = EvalRequest {
            side: SplitSide::Test,
            n_tasks: EVAL_TASKS,
            n_way: state.config.n_way,
            k_shot: 1,
            n_query: state.config.n_query,
            seed: 0,
        };
        let report = evaluate(state, &req, &Plain)?;
        passed &= report.mean_accuracy >= MIN_ACCURACY;
        parts.push(format!("{name} {:.4}", report.mean_accuracy));
    }
    outcome(passed, format!("{} (need >= {MIN_ACCURACY})", parts.join(", ")))
}

fn gradients() -> Result<Outcome> {
    let (mut op, mut op_name) = (0.0f64, String::new());
    let (mut pipe, mut pipe_name) = (0.0f64, String::new());
    let mut itn = 0.0f64;
    for seed in 0..20 {
        for r in check_ops(seed)? {
            if r.rel_error > op {
                op = r.rel_error;
                op_name = r.name;
            }
        }
        let p = check_pipeline(seed, false)?;
        let w = p.worst();
        if w.rel_error > pipe {
            pipe = w.rel_error;
            pipe_name = w.name.clone();
        }
        itn = itn.max(check_pipeline(seed, true)?.overall);
    }
    outcome(
        op <= TOLERANCE && pipe <= TOLERANCE && itn <= TOLERANCE,
        format!(
            "20 seeds: worst op {op:.2e} ({op_name}), worst pipeline tensor {pipe:.2e} ({pipe_name}), \
             pipeline with ITN (whole gradient) {itn:.2e}; tolerance {TOLERANCE:.0e}"
        ),
    )
}

fn weight_norm(net: &MetaNet) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let c = standard_normal(net.config.latent_dim, &mut rng);
        for (w, _) in &net.weights_from_context(&c)?.layers {
            let cols = w.shape()[1];
            for row in w.data().chunks(cols) {
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                worst = worst.max((norm - 1.0).abs());
            }
        }
    }
    outcome(
        worst <= WN_TOL,
        format!("100 contexts: max |row norm - 1| = {worst:.2e} (tolerance {WN_TOL:.0e})"),
    )
}

fn rel_diff(a: &[f32], b: &[f32]) -> f32 {
    let scale = a.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn order_invariance(state: &ModelState) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f32;
    for task in test_tasks(state, 50, state.config.n_way, 4)? {
        let base = state.net.task_context(&task.support, &ContextDraw::Mean)?;
        let mut perm: Vec<usize> = (0..task.support_labels.len()).collect();
        for _ in 0..10 {
            perm.shuffle(&mut rng);
            let ctx = state
                .net
                .task_context(&permute_support(&task, &perm)?.support, &ContextDraw::Mean)?;
            worst = worst
                .max(rel_diff(&base.mu, &ctx.mu))
                .max(rel_diff(&base.sigma, &ctx.sigma));
        }
    }
    outcome(
        worst <= ORDER_TOL,
        format!(
            "50 tasks x 10 permutations: max relative change in (mu, sigma) {worst:.2e} (tolerance {ORDER_TOL:.0e})"
        ),
    )
}

fn clusters(state: &ModelState) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tasks = test_tasks(state, 5, state.config.n_way, 5)?;
    let cloud = export_weight_distribution(&state.net, &tasks, 12, false, &mut rng)?;
    let sep = separation(&cloud.rows_f64(), &cloud.task_ids);

    let base = &tasks[0];
    let n = base.support_labels.len();
    let variants = [
        (0..n).collect::<Vec<_>>(),
        (0..n).rev().collect(),
        (1..n).chain([0]).collect(),
    ];
    let permuted = variants
        .iter()
        .map(|p| permute_support(base, p))
        .collect::<Result<Vec<_>>>()?;
    let same = export_weight_distribution(&state.net, &permuted, 12, false, &mut rng)?;
    let p = permutation_test(&same.rows_f64(), &same.task_ids, 999, &mut rng)?;
    outcome(
        sep.intra < sep.inter && p >= SIGNIFICANCE,
        format!(
            "5 tasks x 12 samples: intra {:.4} < inter {:.4}; permuted copies p = {p:.3} (need >= {SIGNIFICANCE})",
            sep.intra, sep.inter
        ),
    )
}

fn baseline(state: &ModelState) -> Result<Outcome> {
    let tasks = test_tasks(state, 100, 3, 6)?;
    let c = &state.config;
    let cmp = compare_sources(
        &tasks,
        &state.net.config.target,
        c.latent_dim,
        !c.no_wn,
        Some(&state.net),
        BASELINE_STEPS,
        BASELINE_LR,
    )?;
    let (gen, _) = mean_and_half_width(&cmp.generated);
    let (direct, _) = mean_and_half_width(&cmp.direct_train);
    let (prior, _) = mean_and_half_width(&cmp.random_prior);
    let se = (sample_variance(&cmp.random_prior) / cmp.random_prior.len() as f64).sqrt();
    let chance = 1.0 / 3.0;
    let z = (prior - chance).abs() / se;
    outcome(
        gen - direct >= BASELINE_MARGIN && z <= CHANCE_SIGMAS,
        format!(
            "circles 100 tasks: generated {gen:.4} - direct-train {direct:.4} = {:.4} (need >= {BASELINE_MARGIN}); \
             random prior {prior:.4} vs chance {chance:.4}, {z:.1} standard errors (need <= {CHANCE_SIGMAS})",
            gen - direct
        ),
    )
}

fn schedule() -> Result<Outcome> {
    let got = [lr_at(0), lr_at(1500), lr_at(3000)];
    outcome(got == [1e-3, 9e-4, 8.1e-4], format!("lr_at(0, 1500, 3000) = {:?}", got))
}

fn loss_bits(log: &[BatchStats]) -> Vec<(u64, u64, u32, u32)> {
    log.iter()
        .map(|s| {
            (
                s.batch,
                s.lr.to_bits(),
                s.mean_loss.to_bits(),
                s.mean_train_acc.to_bits(),
            )
        })
        .collect()
}

fn run(state: &mut ModelState, until: u64) -> Result<Vec<BatchStats>> {
    let mut log = Vec::new();
    state.train_until(until, |s| log.push(*s))?;
    Ok(log)
}

fn determinism() -> Result<Outcome> {
    let config = TrainConfig {
        seed: 7,
        tasks_per_batch: 4,
        ..TrainConfig::default()
    };
    let mut a = ModelState::new(config.clone())?;
    let mut b = ModelState::new(config.clone())?;
    let log_a = run(&mut a, 1100)?;
    let log_b = run(&mut b, 1100)?;
    let identical = loss_bits(&log_a) == loss_bits(&log_b);

    let mut c = ModelState::new(config)?;
    run(&mut c, 1000)?;
    let dir = tempfile::tempdir().map_err(|e| lgmnet::Error::io("tempdir", e))?;
    let path = dir.path().join("resume.ckpt");
    save_checkpoint(&c, &path)?;
    let mut resumed = load_checkpoint(&path)?;
    let tail = run(&mut resumed, 1100)?;
    let resumed_ok = loss_bits(&tail) == loss_bits(&log_a[1000..])
        && resumed.net.fingerprint() == a.net.fingerprint()
        && lgmnet::checkpoint::to_bytes(&resumed) == lgmnet::checkpoint::to_bytes(&a);
    outcome(
        identical && resumed_ok,
        format!("two runs bitwise identical: {identical}; resume at 1000 + 100 matches uninterrupted: {resumed_ok}"),
    )
}

/// Normalized (pre scale/shift) ITN features for every hidden layer over
/// the pooled support rows of `tasks`.
fn itn_features(net: &MetaNet, tasks: &[TaskInstance]) -> Result<Vec<Tensor>> {
    let enc = net.encoder.as_ref().expect("encoder enabled");
    let mut tape = Tape::new();
    let parts: Vec<_> = tasks.iter().map(|t| tape.constant(t.support.clone())).collect();
    let mut h = tape.concat_rows(&parts)?;
    let mut out = Vec::new();
    for (d, itn) in enc.layers.iter().zip(&enc.itn) {
        let w = tape.param(&net.params, d.weight);
        let b = tape.param(&net.params, d.bias);
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        let (y, _) = itn.forward(&mut tape, &net.params, h, NormMode::Train)?;
        let gamma = net.params.get(itn.gamma).data();
        let beta = net.params.get(itn.beta).data();
        let y_val = tape.value(y);
        let cols = gamma.len();
        let xhat: Vec<f32> = y_val
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - beta[i % cols]) / gamma[i % cols])
            .collect();
        out.push(Tensor::new(y_val.shape().to_vec(), xhat)?);
        h = tape.relu(y)?;
    }
    Ok(out)
}

fn itn_semantics(state: &ModelState) -> Result<Outcome> {
    let tasks = test_tasks(state, 16, state.config.n_way, 9)?;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for feats in itn_features(&state.net, &tasks)? {
        let (rows, cols) = feats.dims2()?;
        for j in 0..cols {
            let col: Vec<f64> = (0..rows).map(|i| f64::from(feats.row(i)[j])).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }

    let net = &state.net;
    let mut isolated = true;
    for i in 0..tasks.len() {
        let mut tape = Tape::new();
        let (alone, _) = net.encode_tasks(&mut tape, &[&tasks[i].support], NormMode::Inference)?;
        let all: Vec<&Tensor> = tasks.iter().map(|t| &t.support).collect();
        let (together, _) = net.encode_tasks(&mut tape, &all, NormMode::Inference)?;
        for (a, b) in [(alone[0].0, together[i].0), (alone[0].1, together[i].1)] {
            isolated &= tape.value(a).data() == tape.value(b).data();
        }
    }
    outcome(
        worst_mean < ITN_MEAN_TOL && worst_var < ITN_VAR_TOL && isolated,
        format!(
            "training mode: max |mean| {worst_mean:.2e} (< {ITN_MEAN_TOL:.0e}), max |var - 1| {worst_var:.2e} \
             (< {ITN_VAR_TOL:.0e}); inference alone == alongside others: {isolated}"
        ),
    )
}

fn report(index: usize, name: &str, started: Instant, result: Result<Outcome>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(o) => {
            println!(
                "[{}] {index}. {name}: {} ({secs:.1}s)",
                if o.passed { "PASS" } else { "FAIL" },
                o.detail
            );
            o.passed
        }
        Err(e) => {
            println!("[FAIL] {index}. {name}: error: {e} ({secs:.1}s)");
            false
        }
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let jobs = [("blobs", 5), ("lines", 5), ("spirals", 5), ("circles", 3)];
    let handles: Vec<_> = jobs
        .iter()
        .map(|&(name, n_way)| thread::spawn(move || trained(name, n_way).map(|s| (name.to_string(), s))))
        .collect();

    let mut results = Vec::new();
    let t = Instant::now();
    results.push(report(2, "gradient correctness", t, gradients()));
    let t = Instant::now();
    results.push(report(7, "learning-rate schedule", t, schedule()));
    let t = Instant::now();
    results.push(report(8, "determinism and persistence", t, determinism()));

    let models: Result<Vec<(String, ModelState)>> = handles
        .into_iter()
        .map(|h| h.join().expect("training thread panicked"))
        .collect();
    let models = match models {
        Ok(m) => m,
        Err(e) => {
            println!("[FAIL] training for criteria 1, 3-6, 9 failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!(
        "trained {} models in {:.1}s",
        models.len(),
        started.elapsed().as_secs_f64()
    );
    let blobs = &models[0].1;
    let circles = &models[3].1;

    let t = Instant::now();
    results.push(report(1, "synthetic generalization", t, generalization(&models)));
    let t = Instant::now();
    results.push(report(3, "weight-normalization invariant", t, weight_norm(&blobs.net)));
    let t = Instant::now();
    results.push(report(4, "order invariance", t, order_invariance(blobs)));
    let t = Instant::now();
    results.push(report(5, "cluster structure", t, clusters(blobs)));
    let t = Instant::now();
    results.push(report(6, "baseline comparison", t, baseline(circles)));
    let t = Instant::now();
    results.push(report(9, "ITN semantics", t, itn_semantics(blobs)));

    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.1}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
