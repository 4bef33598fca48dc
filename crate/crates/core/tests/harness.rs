use structlora::autodiff::Tape;
use structlora::harness::{
    inference_path, render_report, run_experiment, total_loss, train, Checkpoint, ExperimentConfig,
    Network, PenaltyWeights, RunResult, TaskKind, ToyTask, Variant, CSV_HEADER,
};
use structlora::ib::{GateMode, GateState};
use structlora::matrix::Matrix;
use structlora::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> ExperimentConfig {
    ExperimentConfig {
        variant,
        layers: 4,
        d: 4,
        k: 4,
        r: 2,
        steps: 40,
        n_train: 64,
        n_test: 32,
        batch_size: 16,
        ..ExperimentConfig::default()
    }
}

#[test]
fn total_loss_without_weights_is_task_loss() {
    let tape = Tape::new();
    let task = tape.constant(Matrix::scalar(1.25)).unwrap();
    let rows: Vec<_> = (0..3)
        .map(|l| tape.constant(Matrix::row_vector(&[l as f64, 1.0])).unwrap())
        .collect();
    for variant in Variant::ALL {
        let total =
            total_loss(&tape, task, variant, &PenaltyWeights::default(), &[], &rows).unwrap();
        assert_eq!(tape.scalar(total).unwrap(), 1.25);
    }
}

#[test]
fn zero_mean_gaussian_gates_add_nothing() {
    let tape = Tape::new();
    let task = tape.constant(Matrix::scalar(0.5)).unwrap();
    let state = GateState::new(GateMode::Gaussian, vec![0.0; 3], 0.1, 0.5, 0.01, 0.5).unwrap();
    let mu = tape.leaf(Matrix::column(&state.mu)).unwrap();
    let weights = PenaltyWeights {
        lambda_ib: 0.3,
        ..Default::default()
    };
    let total = total_loss(
        &tape,
        task,
        Variant::Structlora,
        &weights,
        &[(&state, mu)],
        &[],
    )
    .unwrap();
    assert_eq!(tape.scalar(total).unwrap(), 0.5);
}

#[test]
fn mixed_penalties_are_rejected() {
    let tape = Tape::new();
    let task = tape.constant(Matrix::scalar(0.5)).unwrap();
    let weights = PenaltyWeights {
        lambda_ib: 0.1,
        lambda_cos: 0.1,
        lambda_lap: 0.0,
    };
    let err = total_loss(&tape, task, Variant::LoraCos, &weights, &[], &[]).unwrap_err();
    assert!(
        matches!(err, Error::Config(ref m) if m.contains("lambda_ib")),
        "{err}"
    );
}

fn param_slices(net: &mut Network) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for l in &mut net.layers {
        out.push(l.a.data_mut());
        out.push(l.b.data_mut());
    }
    for g in &mut net.gates {
        out.push(g.mu.as_mut_slice());
    }
    if let Some(c) = &mut net.coordinator {
        for t in &mut c.theta {
            out.push(t.data_mut());
        }
        out.push(c.w_out.data_mut());
    }
    out
}

/// Central-difference check of the full training loss against the tape
/// gradient, for every trainable entry of one variant.
fn max_rel_grad_error(variant: Variant) -> f64 {
    let cfg = ExperimentConfig {
        lambda_ib: 1e-4,
        lambda_cos: 1e-3,
        lambda_lap: 1e-3,
        alpha: 2.0,
        ..small(variant)
    };
    let task = ToyTask::generate(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let mut net = Network::new(&cfg, &task).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for l in &mut net.layers {
        l.b = Matrix::random_normal(l.b.rows(), l.b.cols(), 0.1, &mut rng);
    }
    if let Some(c) = &mut net.coordinator {
        for t in &mut c.theta {
            *t = Matrix::random_normal(t.rows(), t.cols(), 0.1, &mut rng);
        }
    }
    let x = Matrix::random_normal(4, 6, 1.0, &mut rng);
    let y = net
        .training_forward(&x)
        .unwrap()
        .add(&Matrix::random_normal(4, 6, 0.05, &mut rng))
        .unwrap();
    let weights = cfg.active_weights();

    let tape = Tape::new();
    let rec = net.record(&tape, &weights, &x, &y, None, true).unwrap();
    let grads = tape.backward(rec.total).unwrap();
    let mut vars = Vec::new();
    for a in &rec.adapters {
        vars.push(a.a);
        vars.push(a.b);
    }
    vars.extend(rec.mu.iter().copied());
    if let Some(c) = &rec.coordinator {
        vars.extend(c.theta.iter().copied());
        vars.push(c.w_out);
    }
    let analytic: Vec<Matrix> = vars
        .iter()
        .map(|v| grads.get(*v).unwrap().clone())
        .collect();

    let eval = |n: &Network| {
        let t = Tape::new();
        let r = n.record(&t, &weights, &x, &y, None, false).unwrap();
        t.scalar(r.total).unwrap()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (p, g) in analytic.iter().enumerate() {
        for e in 0..g.len() {
            let mut plus = net.clone();
            param_slices(&mut plus)[p][e] += h;
            let mut minus = net.clone();
            param_slices(&mut minus)[p][e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (g.data()[e] - fd).abs() / fd.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn total_loss_gradients_match_central_differences() {
    for variant in Variant::ALL {
        let err = max_rel_grad_error(variant);
        assert!(err < 1e-5, "{variant}: {err:e}");
    }
}

#[test]
fn steps_zero_returns_initial_metrics_only() {
    let mut cfg = small(Variant::Structlora);
    cfg.steps = 0;
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.steps, vec![0]);
    assert_eq!(r.energy_trace.len(), 1);
    // B starts at zero, so every update and the energy vanish.
    assert_eq!(r.final_energy, 0.0);
    assert_eq!(r.final_cos_adj, None);
}

#[test]
fn traces_have_one_row_per_interval() {
    let mut cfg = small(Variant::LoraCos);
    cfg.steps = 35;
    cfg.log_every = 10;
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.steps, vec![0, 10, 20, 30, 35]);
    assert_eq!(r.task_loss_trace.len(), 5);
    assert_eq!(r.cos_adj_trace.len(), 5);
    assert_eq!(r.csv_rows().len(), 5);
    assert_eq!(CSV_HEADER, "step,variant,seed,task_loss,energy,cos_adj");
    assert!(r.csv_rows()[1].starts_with("10,lora_cos,0,"));
}

#[test]
fn same_seed_runs_are_bit_identical() {
    for variant in Variant::ALL {
        let a = run_experiment(&small(variant)).unwrap();
        let b = run_experiment(&small(variant)).unwrap();
        assert!(a.same_traces(&b), "{variant}");
    }
}

#[test]
fn variants_share_data_and_adapter_budget() {
    let runs: Vec<RunResult> = Variant::ALL
        .iter()
        .map(|v| run_experiment(&small(*v)).unwrap())
        .collect();
    let adapter = runs[0].params.adapter;
    assert_eq!(adapter, 4 * (4 * 2 + 2 * 4));
    for r in &runs {
        assert_eq!(r.params.adapter, adapter);
        assert_eq!(
            r.overhead.inference_flops_per_sample,
            runs[0].overhead.inference_flops_per_sample
        );
        // Identical data and base weights give identical initial task loss.
        assert_eq!(
            r.task_loss_trace[0].to_bits(),
            runs[0].task_loss_trace[0].to_bits()
        );
    }
    let st = &runs[3];
    assert_eq!(st.params.gates, 4 * 2);
    assert_eq!(st.params.coordinator, 2 * 16 * 16);
    assert!(st.overhead.per_step.coordination > 0 && st.overhead.per_step.gating > 0);
    assert_eq!(runs[0].overhead.per_step.coordination, 0);
}

#[test]
fn inference_path_matches_training_forward() {
    for variant in Variant::ALL {
        let run = train(&small(variant)).unwrap();
        let merged = run.network.merged().unwrap();
        let x = Matrix::random_normal(4, 50, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let fast = inference_path(&merged, &x).unwrap();
        let slow = run.network.training_forward(&x).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10, "{variant}");
    }
}

#[test]
fn zero_updates_give_base_network_output() {
    let cfg = small(Variant::Structlora);
    let task = ToyTask::generate(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let net = Network::new(&cfg, &task).unwrap();
    let merged = net.merged().unwrap();
    for (m, w0) in merged.weights.iter().zip(&task.base_weights) {
        assert_eq!(m, w0);
    }
}

#[test]
fn classification_task_trains() {
    let cfg = ExperimentConfig {
        task: TaskKind::TwoMoonsClassification,
        steps: 300,
        ..small(Variant::Structlora)
    };
    let r = run_experiment(&cfg).unwrap();
    assert!((0.0..=1.0).contains(&r.final_task_score));
    assert!(r.task_loss_trace.last().unwrap() < &r.task_loss_trace[0]);
}

#[test]
fn divergence_reports_step() {
    let cfg = ExperimentConfig {
        eta_lr: 1e6,
        ..small(Variant::Lora)
    };
    match run_experiment(&cfg) {
        Err(Error::Divergence { step, .. }) => assert!(step < cfg.steps),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trips() {
    let cfg = small(Variant::Structlora);
    let run = train(&cfg).unwrap();
    let ck = Checkpoint::capture(&cfg, &run.network).unwrap();
    let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    assert_eq!(back, ck);
    let mut bad: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
    bad["version"] = 99.into();
    assert!(Checkpoint::from_json(&bad.to_string()).is_err());
}

#[test]
fn report_is_deterministic_and_one_row_per_variant() {
    let runs: Vec<RunResult> = Variant::ALL
        .iter()
        .map(|v| run_experiment(&small(*v)).unwrap())
        .collect();
    let table = render_report(&runs);
    assert_eq!(table.lines().count(), 5);
    let mut reversed = runs.clone();
    reversed.reverse();
    assert_eq!(render_report(&reversed), table);
    assert_eq!(render_report(&runs[..1]).lines().count(), 2);
}
