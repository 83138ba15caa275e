use crwn::datasets::{LabeledSet, TaskSpec};
use crwn::harness::{
    evaluate, metrics, run_sequence, task_logits, train_task, write_artifacts, ExperimentConfig,
    InMemorySource, Schedule, TaskSequence,
};
use crwn::nets::{predict, Architecture, Model, ModelSpec, TrainMode};
use crwn::neuromod::read_checkpoint;
use crwn::optim::OptimizerConfig;
use crwn::rngcore::RngStream;
use ndarray::Array2;

const SHAPE: [usize; 3] = [1, 4, 4];

/// Noisy class prototypes; a different seed gives a different task.
fn blobs(seed: u64, n: usize, classes: usize) -> (LabeledSet, LabeledSet) {
    let mut rng = RngStream::new(seed, 1);
    let protos: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..16).map(|_| rng.next_f64() as f32).collect())
        .collect();
    let mut images = Array2::zeros((n, 16));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.below(classes as u64) as usize;
        labels.push(c);
        for j in 0..16 {
            let v = protos[c][j] + 0.15 * (rng.next_normal() as f32);
            images[[i, j]] = v.clamp(0.0, 1.0);
        }
    }
    let set = LabeledSet::new(images, SHAPE, labels, classes).unwrap();
    let cut = n * 5 / 7;
    (
        set.select(&(0..cut).collect::<Vec<_>>()).unwrap(),
        set.select(&(cut..n).collect::<Vec<_>>()).unwrap(),
    )
}

fn source(tasks: u32) -> InMemorySource {
    let specs = (0..tasks).map(TaskSpec::rotated).collect();
    let data = (0..tasks as u64)
        .map(|t| blobs(100 + t, 420, 3))
        .collect();
    InMemorySource::new(specs, data).unwrap()
}

fn config(arch: Architecture, tasks: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::mnist_protocol(
        arch,
        TaskSequence::RotatedMnist { tasks },
        5,
    );
    cfg.schedule = Schedule::batches(60);
    cfg.batch_size = 32;
    cfg.eval_batch = 50;
    cfg.log_every = 10;
    cfg
}

fn spec(arch: &Architecture) -> ModelSpec {
    ModelSpec {
        arch: arch.clone(),
        input_shape: SHAPE,
        d_out: 3,
        seed: 5,
    }
}

fn flynet() -> Architecture {
    Architecture::Flynet {
        expansion: 4,
        n_in: 3,
        gamma: 1.0,
    }
}

fn mlp() -> Architecture {
    Architecture::Mlp { hidden: vec![12] }
}

#[test]
fn single_task_matrix() {
    let cfg = config(flynet(), 1);
    let run = run_sequence::<f64>(&cfg, spec(&cfg.arch), &source(1), None).unwrap();
    assert_eq!(run.matrix.len(), 1);
    assert_eq!(run.metrics.acc, run.matrix.get(0, 0).unwrap());
    assert!(run.metrics.acc > 0.8, "acc {}", run.metrics.acc);
}

#[test]
fn columns_constant_and_no_forgetting() {
    let cfg = config(mlp(), 4);
    let run = run_sequence::<f32>(&cfg, spec(&cfg.arch), &source(4), None).unwrap();
    for j in 0..4 {
        let first = run.matrix.get(j, j).unwrap();
        for i in j..4 {
            assert_eq!(run.matrix.get(i, j).unwrap().to_bits(), first.to_bits());
        }
    }
    assert_eq!(run.metrics.forgetting, 0.0);
    assert_eq!(run.store.len(), 4);
}

#[test]
fn zero_gain_and_rate_give_label_zero_rate() {
    let mut cfg = config(flynet(), 2);
    cfg.alpha0 = 0.0;
    cfg.optimizer = OptimizerConfig::rmsprop(0.0);
    let src = source(2);
    let run = run_sequence::<f64>(&cfg, spec(&cfg.arch), &src, None).unwrap();
    for t in 0..2 {
        let test = crwn::harness::TaskSource::test(&src, t).unwrap();
        let zeros = test.labels().iter().filter(|&&l| l == 0).count() as f64 / test.len() as f64;
        assert_eq!(run.metrics.final_row[t], zeros);
    }
}

#[test]
fn evaluate_matches_per_sample_loop() {
    let cfg = config(mlp(), 1);
    let src = source(1);
    let run = run_sequence::<f64>(&cfg, spec(&cfg.arch), &src, None).unwrap();
    let test = crwn::harness::TaskSource::test(&src, 0).unwrap().truncate(100).unwrap();
    let ctx = run.store.get(0).unwrap();
    let mut correct = 0;
    for i in 0..test.len() {
        let x = test.image(i).mapv(f64::from).insert_axis(ndarray::Axis(0));
        let logits = run.model.logits(x.view(), ctx).unwrap();
        if predict(logits.view())[0] == test.labels()[i] {
            correct += 1;
        }
    }
    let acc = evaluate(&run.model, &run.store, 0, &test, 7).unwrap();
    assert_eq!(acc, correct as f64 / 100.0);
    assert_eq!(acc, evaluate(&run.model, &run.store, 0, &test, 64).unwrap());
    assert!(evaluate(&run.model, &run.store, 9, &test, 7).is_err());
}

#[test]
fn runs_are_reproducible() {
    let cfg = config(flynet(), 2);
    let a = run_sequence::<f32>(&cfg, spec(&cfg.arch), &source(2), None).unwrap();
    let b = run_sequence::<f32>(&cfg, spec(&cfg.arch), &source(2), None).unwrap();
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.store.to_bytes(), b.store.to_bytes());
    assert_eq!(a.log, b.log);
}

#[test]
fn training_order_does_not_change_task_results() {
    let cfg = config(mlp(), 3);
    let src = source(3);
    let fwd = run_sequence::<f64>(&cfg, spec(&cfg.arch), &src, None).unwrap();
    let rev = run_sequence::<f64>(&cfg, spec(&cfg.arch), &src, Some(&[2, 0, 1])).unwrap();
    for id in 0..3u32 {
        assert_eq!(
            fwd.store.get(id).unwrap().to_bytes(),
            rev.store.get(id).unwrap().to_bytes()
        );
    }
    let diag = |r: &crwn::harness::RunResult<f64>, id: u32| {
        let p = r.matrix.task_ids.iter().position(|&t| t == id).unwrap();
        r.matrix.get(p, p).unwrap()
    };
    for id in 0..3 {
        assert_eq!(diag(&fwd, id), diag(&rev, id));
    }
}

#[test]
fn local_only_keeps_initial_gain() {
    let mut cfg = config(mlp(), 2);
    cfg.mode = TrainMode::LocalOnly;
    cfg.alpha0 = 1.25;
    let run = run_sequence::<f64>(&cfg, spec(&cfg.arch), &source(2), None).unwrap();
    for ctx in run.store.contexts() {
        assert_eq!(ctx.alpha.to_bits(), 1.25f64.to_bits());
    }
}

#[test]
fn pretrained_bases_freeze_after_first_task() {
    let mut cfg = config(mlp(), 3);
    cfg.mode = TrainMode::Pretrained;
    let src = source(3);
    let mut model = Model::<f64>::build(spec(&cfg.arch)).unwrap();
    let seeded = model.basis_values();
    let mut store = model.new_store();
    let mut after_first = None;
    for pos in 0..3 {
        let data = crwn::harness::TaskSource::train(&src, pos).unwrap();
        train_task(&cfg, &mut model, &mut store, pos as u32, pos, &data).unwrap();
        match &after_first {
            None => after_first = Some(model.basis_values()),
            Some(b) => assert_eq!(b, &model.basis_values()),
        }
    }
    let trained = after_first.unwrap();
    assert_ne!(trained, seeded);
    assert_eq!(store.trained_bases().unwrap(), trained.as_slice());
    let m = metrics(&crwn::harness::AccuracyMatrix::new(vec![0]), &store);
    assert!(m.is_err());
}

#[test]
fn logits_survive_later_tasks_bitwise() {
    let cfg = config(flynet(), 4);
    let src = source(4);
    let mut model = Model::<f32>::build(spec(&cfg.arch)).unwrap();
    let mut store = model.new_store();
    let test0 = crwn::harness::TaskSource::test(&src, 0).unwrap();
    let mut first = None;
    for pos in 0..4 {
        let data = crwn::harness::TaskSource::train(&src, pos).unwrap();
        train_task(&cfg, &mut model, &mut store, pos as u32, pos, &data).unwrap();
        let logits = task_logits(&model, &store, 0, &test0, 33).unwrap();
        let bits: Vec<u32> = logits.iter().map(|v| v.to_bits()).collect();
        match &first {
            None => first = Some(bits),
            Some(b) => assert_eq!(b, &bits),
        }
    }
}

#[test]
fn artifacts_written() {
    let cfg = config(flynet(), 2);
    let run = run_sequence::<f32>(&cfg, spec(&cfg.arch), &source(2), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(dir.path(), &cfg, &run).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    for key in ["acc", "forgetting", "params_per_task"] {
        assert!(metrics.get(key).is_some(), "missing {key}");
    }
    let csv = std::fs::read_to_string(dir.path().join("accuracy_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let log = std::fs::read_to_string(dir.path().join("runlog.csv")).unwrap();
    assert!(log.starts_with("task,step,loss,lr\n0,0,"));
    let store = read_checkpoint::<f32>(&dir.path().join("checkpoint.crwn")).unwrap();
    assert_eq!(store.to_bytes(), run.store.to_bytes());
    let names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.iter().all(|n| !n.ends_with(".tmp")));
    assert!(names.contains(&"resolved_config.json".to_string()));
}
