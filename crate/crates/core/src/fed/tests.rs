use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{make_synthetic, split_validation, Split};
use crate::losses::cross_entropy;
use crate::model_zoo::ArchId;
use crate::nn::{backward, LayerSpec, ModelGraph};
use crate::tensor::Tensor;

fn p1(v: &[f64]) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
    p
}

fn tiny_arch() -> ModelArch {
    let d = |inputs, outputs| LayerSpec::Dense { inputs, outputs };
    ModelArch {
        id: ArchId::MnistMlp,
        graph: ModelGraph::new(vec![8], vec![d(8, 12), LayerSpec::Relu, d(12, 10)]).unwrap(),
        num_classes: 10,
    }
}

fn synthetic(classes: usize, per_class: usize, seed: u64) -> Dataset {
    make_synthetic(classes, per_class, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn sim(cfg: FedConfig, mode: PartitionMode, seed: u64) -> Simulation {
    let all = synthetic(10, 40, 99);
    let (train, val) = split_validation(&all, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let test = synthetic(10, 5, 99)
        .subset(&(0..50).collect::<Vec<_>>(), Split::Test)
        .unwrap();
    Simulation::new(cfg, tiny_arch(), train, mode, val, test, seed).unwrap()
}

fn small_cfg() -> FedConfig {
    FedConfig {
        rounds: 6,
        batch_size: 16,
        eval_every: 2,
        schedule: FixedSchedule {
            lr: 0.05,
            iterations: 5,
            ..FixedSchedule::default()
        },
        ..FedConfig::default()
    }
}

#[test]
fn full_participation_selects_everyone() {
    let ids = select_clients(10, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(ids, (0..10).collect::<Vec<_>>());
}

#[test]
fn half_participation_selects_five_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let ids = select_clients(10, 0.5, &mut rng).unwrap();
        assert_eq!(ids.len(), 5);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn selection_frequencies_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let mut counts = [0usize; 10];
    for _ in 0..n {
        for id in select_clients(10, 0.5, &mut rng).unwrap() {
            counts[id] += 1;
        }
    }
    let sd = (n as f64 * 0.25).sqrt();
    for c in counts {
        assert!((c as f64 - 0.5 * n as f64).abs() <= 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn empty_selection_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(select_clients(10, 0.0, &mut rng).is_err());
    assert!(select_clients(10, 0.01, &mut rng).is_err());
    assert!(select_clients(10, 1.5, &mut rng).is_err());
}

#[test]
fn schedule_halves_each_third() {
    let s = FixedSchedule::default();
    assert_eq!(s.at(1, 200), (0.1, 50));
    assert_eq!(s.at(67, 200), (0.1, 50));
    assert_eq!(s.at(68, 200).0, 0.05);
    assert_eq!(s.at(200, 200).0, 0.025);
}

#[test]
fn aggregation_examples() {
    let w0 = p1(&[0.0]);
    let (a, b) = (p1(&[1.0]), p1(&[3.0]));
    let lit = AggregationMode::Literal;
    assert_eq!(aggregate(&w0, &[(&a, 5), (&b, 5)], 10, lit).unwrap(), p1(&[2.0]));
    assert_eq!(aggregate(&w0, &[(&a, 1), (&b, 3)], 4, lit).unwrap(), p1(&[2.5]));
    let c = p1(&[2.0]);
    assert_eq!(aggregate(&w0, &[(&c, 5)], 10, lit).unwrap(), p1(&[1.0]));
    let renorm = aggregate(&w0, &[(&c, 5)], 10, AggregationMode::Renormalized).unwrap();
    assert_eq!(renorm, p1(&[2.0]));
    assert!(aggregate(&w0, &[(&c, 11)], 10, lit).is_err());
    assert!(aggregate(&w0, &[], 10, lit).is_err());
    assert!(aggregate(&w0, &[(&p1(&[1.0, 2.0]), 5)], 10, lit).is_err());
}

#[test]
fn unchanged_locals_leave_model_unchanged() {
    let w = p1(&[0.3, -1.7, 2.2]);
    for mode in [AggregationMode::Literal, AggregationMode::Renormalized] {
        let out = aggregate(&w, &[(&w, 3), (&w, 4)], 20, mode).unwrap();
        assert_eq!(out, w);
    }
}

#[test]
fn renormalized_equals_literal_at_full_participation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = tiny_arch();
    let w0 = arch.graph.init_params(&mut rng);
    let locals: Vec<ParamSet> = (0..4).map(|_| arch.graph.init_params(&mut rng)).collect();
    let sizes = [7, 13, 2, 9];
    let pairs: Vec<(&ParamSet, usize)> = locals.iter().zip(sizes).collect();
    let a = aggregate(&w0, &pairs, 31, AggregationMode::Literal).unwrap();
    let b = aggregate(&w0, &pairs, 31, AggregationMode::Renormalized).unwrap();
    assert_eq!(a.flat_values(), b.flat_values());
}

fn client(data: Dataset, seed: u64, model: &ModelContext) -> ClientState {
    let n = data.len();
    let theta = model.decoder.init_theta(&mut ChaCha8Rng::seed_from_u64(seed));
    ClientState::new(0, Arc::new(data), (0..n).collect(), theta, seed).unwrap()
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let model = ModelContext::new(tiny_arch(), true).unwrap();
    let w = tiny_arch().graph.init_params(&mut ChaCha8Rng::seed_from_u64(4));
    let mut c = client(synthetic(3, 10, 1), 4, &model);
    let loss = LossConfig {
        use_matching: true,
        use_wd: true,
        ..LossConfig::default()
    };
    let u = train_client(&mut c, &model, &w, 0.0, 3, 8, &loss).unwrap();
    assert_eq!(u.w_local.flat_values(), w.flat_values());
    assert!(!u.whole_shard);
}

#[test]
fn one_iteration_equals_hand_sgd_step() {
    let model = ModelContext::new(tiny_arch(), true).unwrap();
    let graph = &model.arch.graph;
    let w = graph.init_params(&mut ChaCha8Rng::seed_from_u64(5));
    let data = synthetic(3, 4, 2);
    let mut c = client(data.clone(), 5, &model);
    let loss = LossConfig {
        use_er: false,
        ..LossConfig::default()
    };
    // 12 samples and batch 64: the whole shard is one batch
    let u = train_client(&mut c, &model, &w, 0.3, 1, 64, &loss).unwrap();
    assert!(u.whole_shard);
    let all: Vec<usize> = (0..12).collect();
    let (x, y) = data.batch(&all).unwrap();
    let trace = forward(graph, &w, &x).unwrap();
    let (_, dz) = cross_entropy(trace.output(), &y).unwrap();
    let (g, _) = backward(graph, &w, &trace, &dz).unwrap();
    let want = ParamSet::linear_combination(&[(1.0, &w), (-0.3, &g)]).unwrap();
    assert_eq!(u.w_local.flat_values(), want.flat_values());
}

#[test]
fn matching_updates_theta_persistently() {
    let model = ModelContext::new(tiny_arch(), true).unwrap();
    let w = tiny_arch().graph.init_params(&mut ChaCha8Rng::seed_from_u64(6));
    let mut c = client(synthetic(3, 10, 1), 6, &model);
    let before = c.theta.clone();
    let loss = LossConfig {
        use_matching: true,
        ..LossConfig::default()
    };
    train_client(&mut c, &model, &w, 0.1, 2, 8, &loss).unwrap();
    assert_ne!(c.theta, before);
    let mut plain = client(synthetic(3, 10, 1), 6, &model);
    train_client(&mut plain, &model, &w, 0.1, 2, 8, &LossConfig::default()).unwrap();
    assert_eq!(plain.theta, before);
}

#[test]
fn epochs_cover_the_shard_without_replacement() {
    let model = ModelContext::new(tiny_arch(), true).unwrap();
    let mut c = client(synthetic(2, 10, 1), 7, &model);
    let mut first: Vec<usize> = (0..5).flat_map(|_| c.next_batch(4)).collect();
    first.sort_unstable();
    assert_eq!(first, (0..20).collect::<Vec<_>>());
    let straddle = c.next_batch(30);
    assert_eq!(straddle.len(), 20);
}

#[test]
fn evaluation_examples() {
    let arch = tiny_arch();
    let data = synthetic(10, 2, 3);
    let zero = arch.graph.init_params(&mut ChaCha8Rng::seed_from_u64(0)).zeros_like();
    let e = evaluate(&arch, &zero, &data).unwrap();
    assert!((e.loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn evaluation_matches_loop_oracle() {
    let arch = tiny_arch();
    let data = synthetic(10, 2, 4);
    let w = arch.graph.init_params(&mut ChaCha8Rng::seed_from_u64(8));
    let got = evaluate_loss(&arch, &w, &data).unwrap();
    let p = w.tensors();
    let mut want = 0.0;
    for i in 0..20 {
        let x = data.samples.row(i);
        let h: Vec<f64> = (0..12)
            .map(|o| (p[1].data()[o] + (0..8).map(|k| p[0].data()[o * 8 + k] * x[k]).sum::<f64>()).max(0.0))
            .collect();
        let z: Vec<f64> = (0..10)
            .map(|o| p[3].data()[o] + (0..12).map(|k| p[2].data()[o * 12 + k] * h[k]).sum::<f64>())
            .collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - z[data.labels[i]];
    }
    want /= 20.0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn perfect_predictor_has_near_zero_loss() {
    let arch = ModelArch {
        id: ArchId::MnistMlp,
        graph: ModelGraph::new(
            vec![10],
            vec![LayerSpec::Dense {
                inputs: 10,
                outputs: 10,
            }],
        )
        .unwrap(),
        num_classes: 10,
    };
    let x = Tensor::from_fn(&[10, 10], |i| if i / 10 == i % 10 { 1.0 } else { 0.0 });
    let data = Dataset::new(x, (0..10).collect(), Split::Test).unwrap();
    let mut w = ParamSet::new();
    w.push(
        "0.weight",
        Tensor::from_fn(&[10, 10], |i| if i / 10 == i % 10 { 100.0 } else { 0.0 }),
    );
    w.push("0.bias", Tensor::zeros(&[10]));
    let e = evaluate(&arch, &w, &data).unwrap();
    assert!(e.loss < 1e-30);
    assert_eq!(e.accuracy, 1.0);
}

#[test]
fn null_round_changes_nothing() {
    let cfg = FedConfig {
        tuning: true,
        grid: GridConfig {
            learning_rate: Some(vec![0.0]),
            ..GridConfig::default()
        },
        tuner: TunerConfig {
            freeze_precision: true,
            ..TunerConfig::default()
        },
        ..small_cfg()
    };
    let mut s = sim(cfg, PartitionMode::Iid, 1);
    let (w0, d0) = (s.server.w.clone(), s.server.dist.clone());
    for _ in 0..3 {
        let r = s.run_round().unwrap();
        assert_eq!(r.loss_after, r.loss_before);
        assert_eq!(r.reward, 0.0);
    }
    assert_eq!(s.server.w, w0);
    assert_eq!(s.server.dist, d0);
}

#[test]
fn a_round_reduces_loss_and_reward_is_consistent() {
    let mut s = sim(small_cfg(), PartitionMode::Iid, 2);
    let r = s.run_round().unwrap();
    assert!(r.loss_after < r.loss_before);
    assert_eq!(r.reward, (r.loss_before - r.loss_after) / r.loss_before);
    assert_eq!(r.clients.len(), 10);
    assert_eq!(r.h, None);
}

#[test]
fn tuned_rounds_record_the_distribution() {
    let cfg = FedConfig {
        tuning: true,
        client_fraction: 0.5,
        ..small_cfg()
    };
    let mut s = sim(cfg, PartitionMode::NonIid, 3);
    let r = s.run_round().unwrap();
    assert_eq!(r.selected.len(), 5);
    assert_eq!(r.mu, Some(vec![0.0, 0.0]));
    let raw = r.mu_raw.unwrap();
    assert!((raw[0] - 0.035).abs() < 1e-12 && (raw[1] - 40.0).abs() < 1e-12);
    let h = r.h.unwrap();
    let grid = &s.grid;
    assert!(grid.axes()[0].coords().contains(&h[0]));
    assert_eq!(s.server.window.len(), 1);
    let r2 = s.run_round().unwrap();
    assert_eq!(s.server.window.len(), 2);
    assert!(r2.mu.is_some());
}

#[test]
fn zero_rounds_is_a_no_op() {
    let cfg = FedConfig {
        rounds: 0,
        ..small_cfg()
    };
    let mut s = sim(cfg, PartitionMode::Iid, 4);
    let w0 = s.server.w.clone();
    let mut sink = MemorySink::default();
    let out = s.run(&mut sink).unwrap();
    assert!(sink.rounds.is_empty());
    assert_eq!(sink.evals.len(), 1);
    assert_eq!(out.rounds, 0);
    assert_eq!(s.server.w, w0);
}

fn full_run(cfg: FedConfig, seed: u64) -> (MemorySink, ParamSet) {
    let mut s = sim(cfg, PartitionMode::NonIid, seed);
    let mut sink = MemorySink::default();
    s.run(&mut sink).unwrap();
    (sink, s.server.w.clone())
}

#[test]
fn runs_are_deterministic_and_parallel_matches_serial() {
    let cfg = FedConfig {
        tuning: true,
        client_fraction: 0.5,
        // the summed reconstruction error is too stiff for the largest default rates
        grid: GridConfig {
            learning_rate: Some(vec![0.005, 0.01, 0.02]),
            ..GridConfig::default()
        },
        loss: LossConfig {
            use_matching: true,
            ..LossConfig::default()
        },
        ..small_cfg()
    };
    let (a, wa) = full_run(cfg.clone(), 5);
    let (b, wb) = full_run(cfg.clone(), 5);
    let (c, wc) = full_run(FedConfig { parallel: true, ..cfg }, 5);
    assert_eq!(a.rounds, b.rounds);
    assert_eq!(a.rounds, c.rounds);
    assert_eq!(a.evals, c.evals);
    assert_eq!(wa.flat_values(), wb.flat_values());
    assert_eq!(wa.flat_values(), wc.flat_values());
    assert_eq!(a.rounds.len(), 6);
    assert_eq!(a.evals.len(), 4);
}

#[test]
fn different_seeds_differ() {
    let (a, _) = full_run(small_cfg(), 6);
    let (b, _) = full_run(small_cfg(), 7);
    assert_ne!(a.rounds, b.rounds);
}

#[test]
fn config_validation_names_fields() {
    let bad = FedConfig {
        client_fraction: 0.0,
        ..FedConfig::default()
    };
    assert!(bad.validate().unwrap_err().to_string().contains("(C)"));
    let bad = FedConfig {
        eval_every: 0,
        ..FedConfig::default()
    };
    assert!(bad.validate().unwrap_err().to_string().contains("eval_every"));
}
