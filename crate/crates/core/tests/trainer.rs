use ndarray::Array2;
use swingnet::nn::{task_features, Architecture, Mode, MultitaskNet};
use swingnet::policy::{continuation_table, DecisionPolicy};
use swingnet::trainer::{train_policy, NetPolicy, TrainConfig};
use swingnet::{ContractSpec, FactorModel, QGrid, StateProcess, VolumeConstraints};

fn small() -> (FactorModel, ContractSpec) {
    let m = FactorModel::uniform(vec![4.0], vec![0.7], vec![vec![1.0]], 20.0, 0.0, 1.0, 8).unwrap();
    (m, ContractSpec::take_or_pay(20.0, VolumeConstraints::firm(0, 1, 3, 5, 8)))
}

fn quick() -> TrainConfig {
    TrainConfig {
        iterations: 20,
        batch_size: 128,
        pool_size: 1024,
        width: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn continuation_tables_unroll_one_step_at_a_time() {
    let (m, c) = small();
    let grid = QGrid::new(c.volume).unwrap();
    let policy = train_policy(&m, &c, &quick()).unwrap().policy;
    let paths = m.sample_paths(9, 300, 0).unwrap();
    for k in 0..7 {
        let direct = continuation_table(&m, &c, &grid, &policy, &paths, k).unwrap();
        let later = continuation_table(&m, &c, &grid, &policy, &paths, k + 1).unwrap();
        let states = paths.states(k + 1);
        let unrolled = later.step_back(&c, &grid, &policy, states, &m.spots(k + 1, states)).unwrap();
        let diff = (direct.values() - unrolled.values()).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
        assert!(diff <= 1e-10, "date {k}: {diff}");
    }
}

#[test]
fn global_loss_is_the_weighted_task_sum() {
    let tasks = 4;
    let mut net = MultitaskNet::new(Architecture::multitask(2, 6, tasks), 1).unwrap();
    net.set_mode(Mode::Train);
    let states = Array2::from_shape_fn((64, 2), |(r, c)| ((r * 7 + c * 3) as f64).sin());
    let pp = Array2::from_shape_fn((64, tasks), |(r, i)| ((r + i) as f64).cos() * 3.0);
    let pm = Array2::from_shape_fn((64, tasks), |(r, i)| ((r * i) as f64).sin());
    let w = [0.2, 1.7, 0.6, 1.5];
    let features = task_features(&[0.0, 0.3, 0.6, 1.0]);
    let out = net.loss_and_gradients(states.view(), &features, pp.view(), pm.view(), &w, true).unwrap();
    let weighted: f64 = out.task_losses.iter().zip(&w).map(|(l, w)| l * w).sum();
    assert!((out.global_loss - weighted).abs() <= 1e-10);
}

#[test]
fn training_is_reproducible() {
    let (m, c) = small();
    let a = train_policy(&m, &c, &quick()).unwrap();
    let b = train_policy(&m, &c, &quick()).unwrap();
    assert_eq!(a.log, b.log);
    let other = train_policy(&m, &c, &TrainConfig { seed: 1, ..quick() }).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn checkpoint_round_trip_preserves_decisions() {
    let (m, c) = small();
    let grid = QGrid::new(c.volume).unwrap();
    let policy = train_policy(&m, &c, &quick()).unwrap().policy;
    let dir = tempfile::tempdir().unwrap();
    policy.save(dir.path(), &serde_json::json!({"note": "test"})).unwrap();
    let loaded = NetPolicy::load(dir.path()).unwrap();
    let paths = m.sample_paths(4, 200, 0).unwrap();
    for k in 0..8 {
        let tasks = grid.tasks(k);
        if tasks.is_empty() {
            continue;
        }
        let states = paths.states(k);
        let spots = m.spots(k, states);
        assert_eq!(
            policy.decide_levels(k, states, &spots, &tasks).unwrap(),
            loaded.decide_levels(k, states, &spots, &tasks).unwrap()
        );
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(NetPolicy::load(dir.path()).is_err());
}

#[test]
fn strictly_better_branch_is_learned() {
    // Zero strike: at the last date buying is worth S > 0 more at every
    // level below the cap.
    let m = FactorModel::uniform(vec![4.0], vec![0.3], vec![vec![1.0]], 20.0, 0.0, 1.0, 8).unwrap();
    let c = ContractSpec::take_or_pay(0.0, VolumeConstraints::firm(0, 1, 3, 5, 8));
    let grid = QGrid::new(c.volume).unwrap();
    let policy = train_policy(&m, &c, &TrainConfig { iterations: 100, learning_rate: 0.01, ..quick() }).unwrap().policy;
    let paths = m.sample_paths(2, 500, 7).unwrap();
    let states = paths.states(7);
    let tasks = grid.tasks(7);
    let d = policy.decide_levels(7, states, &m.spots(7, states), &tasks).unwrap();
    assert!(d.iter().all(|x| *x));
}

#[test]
fn single_date_trains_the_scalar_network() {
    let m = FactorModel::uniform(vec![4.0], vec![0.7], vec![vec![1.0]], 20.0, 0.5, 1.0, 1).unwrap();
    let c = ContractSpec::take_or_pay(20.0, VolumeConstraints::firm(0, 1, 0, 1, 1));
    let out = train_policy(&m, &c, &quick()).unwrap();
    let d = out.policy.date_net(0).unwrap();
    assert_eq!(d.levels, vec![0]);
    assert_eq!(d.net.task_count(), 1);
}
