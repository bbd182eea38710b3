mod common;

use common::*;
use mabsa_core::codec::{build_aoe_target, build_downstream_target, item_to_candidate, RegionMaskPlan, Task};
use mabsa_core::corpus::{Span, SyntheticConfig};
use mabsa_core::graph::cross_entropy;
use mabsa_core::model::{Model, ModelConfig, ModelParams};
use mabsa_core::trainer::*;
use mabsa_core::vocab::{tokenize, Special, Vocabulary};
use mabsa_core::{Error, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent per-step oracle: run the decoder on every prefix separately
/// and add up the cross-entropy of the chosen candidates.
fn stepwise_pointer_loss(
    params: &ModelParams,
    ex: &Prepared,
    task: Task,
    items: &[mabsa_core::codec::TargetItem],
    steps: &[usize],
) -> f64 {
    let mut total = 0.0;
    for &s in steps {
        let mut g = Graph::new();
        let model = Model::bind(&mut g, params, false);
        let enc = model.encode(&mut g, &ex.input()).unwrap();
        let cands = model.candidates(&mut g, &enc, task).unwrap();
        let prefix = model.pointer_decoder_input(&mut g, &cands, &items[..s]).unwrap();
        let h = model.decode_step(&mut g, &enc, prefix).unwrap();
        let logits = model.pointer_logits(&mut g, &cands, h).unwrap();
        let target = item_to_candidate(task, ex.text_len(), items[s]).unwrap();
        total += cross_entropy(g.value(logits).row(0), target).unwrap();
    }
    total
}

fn loss_of(params: &ModelParams, ex: &Prepared, task: Task) -> f64 {
    let mut g = Graph::new();
    let model = Model::bind(&mut g, params, false);
    let l = example_loss(&model, &mut g, ex, task, &TrainConfig::default(), &mut rng(0)).unwrap();
    g.value(l).item()
}

#[test]
fn aoe_loss_sums_over_six_steps() {
    let cfg = tiny_config(8, 1);
    let params = ModelParams::init(cfg.clone(), 1).unwrap();
    let mut ex = supervised(&mut rng(2), &cfg, 7);
    ex.aspects = Some(vec![mabsa_core::corpus::AspectLabel { span: Span::new(5, 6), sentiment: None }]);
    ex.opinions = Some(vec![Span::new(1, 1)]);
    let y = build_aoe_target(&[Span::new(5, 6)], &[Span::new(1, 1)]).unwrap();
    assert_eq!(y.len(), 6);
    let oracle = stepwise_pointer_loss(&params, &ex, Task::Aoe, &y.items, &(0..6).collect::<Vec<_>>());
    let got = loss_of(&params, &ex, Task::Aoe);
    assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
}

#[test]
fn masc_loss_covers_sentiment_slots_only() {
    let cfg = tiny_config(8, 1);
    let params = ModelParams::init(cfg.clone(), 3).unwrap();
    let ex = supervised(&mut rng(4), &cfg, 6);
    let y = build_downstream_target(Task::Masc, ex.aspects.as_ref().unwrap()).unwrap();
    assert_eq!(y.len(), 7);
    let oracle = stepwise_pointer_loss(&params, &ex, Task::Masc, &y.items, &[2, 5]);
    assert!((loss_of(&params, &ex, Task::Masc) - oracle).abs() < 1e-10);
    let full = stepwise_pointer_loss(
        &params,
        &ex,
        Task::Jmasa,
        &build_downstream_target(Task::Jmasa, ex.aspects.as_ref().unwrap()).unwrap().items,
        &(0..7).collect::<Vec<_>>(),
    );
    assert!((loss_of(&params, &ex, Task::Jmasa) - full).abs() < 1e-10);
}

#[test]
fn uniform_sentiment_head_costs_ln3() {
    let cfg = tiny_config(8, 1);
    let mut params = ModelParams::init(cfg.clone(), 5).unwrap();
    for name in ["msp_head.fc2.weight", "msp_head.fc2.bias"] {
        params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let ex = supervised(&mut rng(6), &cfg, 5);
    assert!((loss_of(&params, &ex, Task::Msp) - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn region_loss_vanishes_when_prediction_matches() {
    let cfg = tiny_config(8, 1);
    let params = ModelParams::init(cfg.clone(), 7).unwrap();
    let mut ex = supervised(&mut rng(8), &cfg, 5);
    let plan = RegionMaskPlan::from_masked(cfg.regions, vec![1]).unwrap();

    // oracle batch: detector distributions set to the model's own prediction
    let predicted = {
        let mut g = Graph::new();
        let model = Model::bind(&mut g, &params, false);
        let mut zeroed = ex.input();
        zeroed.regions.row_mut(1).iter_mut().for_each(|x| *x = 0.0);
        let enc = model.encode(&mut g, &zeroed).unwrap();
        let p = model.mrm_predict(&mut g, &enc, &plan).unwrap();
        g.value(p).row(0).to_vec()
    };
    let mut q = ex.class_dists.clone().unwrap();
    q.row_mut(1).copy_from_slice(&predicted);
    ex.class_dists = Some(q.clone());

    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, false);
    let l = mrm_loss(&model, &mut g, &ex, &q, &plan).unwrap();
    assert!(g.value(l).item().abs() <= 1e-9);

    let other = RegionMaskPlan::from_masked(cfg.regions, vec![0, 2]).unwrap();
    let l = mrm_loss(&model, &mut g, &ex, &q, &other).unwrap();
    assert!(g.value(l).item() > 0.0);
}

#[test]
fn every_task_loss_is_nonnegative() {
    let cfg = tiny_config(8, 1);
    let mut r = rng(9);
    for seed in 0..5 {
        let params = ModelParams::init(cfg.clone(), seed).unwrap();
        let ex = supervised(&mut r, &cfg, 6);
        for task in [Task::Mlm, Task::Aoe, Task::Mrm, Task::Aog, Task::Msp, Task::Jmasa, Task::Mate, Task::Masc] {
            assert!(loss_of(&params, &ex, task) >= 0.0, "{task}");
        }
    }
}

#[test]
fn missing_supervision_is_a_config_error() {
    let cfg = tiny_config(8, 1);
    let params = ModelParams::init(cfg.clone(), 10).unwrap();
    let mut ex = supervised(&mut rng(11), &cfg, 5);
    ex.sentiment = None;
    ex.anp_ids = None;
    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, false);
    for task in [Task::Msp, Task::Aog] {
        let r = example_loss(&model, &mut g, &ex, task, &TrainConfig::default(), &mut rng(0));
        assert!(matches!(r, Err(Error::Config(_))), "{task}");
    }
    ex.anp_ids = Some(vec![Special::COUNT]);
    let mut p = params.clone();
    let r = pretrain(&mut p, &[ex], &TrainConfig { pretrain_epochs: 1, ..Default::default() }, |_, _, _| Ok(()));
    assert!(matches!(r, Err(Error::Config(m)) if m.contains("sentiment")));
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut params = vec![Tensor::vector(vec![1.0, -2.0]), Tensor::scalar(0.5)];
    let names = vec!["a".to_string(), "b".to_string()];
    let mut state = OptimizerState::new(&params);
    let g1 = vec![Tensor::vector(vec![0.3, 0.1]), Tensor::scalar(-1.0)];
    optimizer_step(&mut params, &names, &g1, &mut state, Adam::new(0.01)).unwrap();
    let before = params.clone();
    let m_before = state.first.clone();
    let zeros = vec![Tensor::zeros(&[2]), Tensor::zeros(&[])];
    optimizer_step(&mut params, &names, &zeros, &mut state, Adam::new(0.01)).unwrap();
    assert_eq!(params, before);
    assert_eq!(state.first[0].data()[0], 0.9 * m_before[0].data()[0]);
    assert_eq!(state.step, 2);
}

#[test]
fn adam_converges_on_a_quadratic() {
    let target = 3.0;
    let mut x = vec![Tensor::scalar(-1.0)];
    let names = vec!["x".to_string()];
    let mut state = OptimizerState::new(&x);
    for _ in 0..200 {
        let grad = vec![Tensor::scalar(2.0 * (x[0].item() - target))];
        optimizer_step(&mut x, &names, &grad, &mut state, Adam::new(0.1)).unwrap();
    }
    assert!((x[0].item() - target).abs() < 1e-2, "{}", x[0].item());
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut params = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
    let names = vec!["first".to_string(), "decoder.0.ffn.fc1.weight".to_string()];
    let mut state = OptimizerState::new(&params);
    let grads = vec![Tensor::scalar(0.0), Tensor::scalar(f64::NAN)];
    let err = optimizer_step(&mut params, &names, &grads, &mut state, Adam::new(0.1)).unwrap_err();
    assert!(matches!(&err, Error::Training(m) if m.contains("decoder.0.ffn.fc1.weight")), "{err}");
    assert_eq!(params[1].item(), 2.0);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = vec![Tensor::vector(vec![3.0, 0.0]), Tensor::scalar(4.0)];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].item() - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::scalar(0.5)];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].item(), 0.5);
}

fn small_corpus(n: usize, seed: u64) -> (Vec<Prepared>, ModelConfig) {
    let syn =
        SyntheticConfig { examples: n, region_count: 6, feature_dim: 8, class_count: 5, seed, ..Default::default() }
            .generate()
            .unwrap();
    let mut texts: Vec<Vec<String>> = syn.examples.iter().map(|e| tokenize(&e.text).unwrap()).collect();
    texts.extend(syn.anps.entries().iter().map(|a| tokenize(a).unwrap()));
    let vocab = Vocabulary::build(&texts, 1).unwrap();
    let prepared = prepare_all(&syn.examples, &vocab, Some(&syn.anps), 8).unwrap();
    let mut cfg = ModelConfig::desk(vocab.len(), 6, 5, 8);
    cfg.hidden = 16;
    cfg.ffn = 32;
    (prepared, cfg)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        pretrain_epochs: epochs,
        finetune_epochs: epochs,
        pretrain_batch: 8,
        finetune_batch: 4,
        learning_rate: 2e-3,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn round_robin_visits_every_task_each_epoch() {
    let (data, cfg) = small_corpus(12, 1);
    let mut params = ModelParams::init(cfg, 1).unwrap();
    let mut epochs_seen = Vec::new();
    let history = pretrain(&mut params, &data, &quick(2), |e, _, _| {
        epochs_seen.push(e);
        Ok(())
    })
    .unwrap();
    assert_eq!(epochs_seen, vec![1, 2]);
    // 12 examples in batches of 8: two rounds per epoch, five tasks each
    assert_eq!(history.len(), 2 * 2 * 5);
    for (i, r) in history.iter().enumerate() {
        assert_eq!(r.task, Task::PRETRAIN[i % 5]);
        assert_eq!(r.step, i + 1);
    }
    for epoch in 1..=2 {
        for t in Task::PRETRAIN {
            let n = history.iter().filter(|r| r.epoch == epoch && r.task == t).count();
            assert_eq!(n, 2);
        }
    }
}

#[test]
fn pretraining_is_deterministic() {
    let (data, cfg) = small_corpus(10, 2);
    let run = || {
        let mut params = ModelParams::init(cfg.clone(), 4).unwrap();
        let h = pretrain(&mut params, &data, &quick(2), |_, _, _| Ok(())).unwrap();
        (h, params)
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
}

#[test]
fn lambda_scales_only_the_weighted_loss() {
    let (data, cfg) = small_corpus(8, 3);
    let base = ModelParams::init(cfg, 5).unwrap();
    let mut tc = quick(1);
    let first = |tc: &TrainConfig| {
        let mut p = base.clone();
        pretrain(&mut p, &data, tc, |_, _, _| Ok(())).unwrap()
    };
    let h1 = first(&tc);
    tc.lambdas.mlm = 2.0;
    let h2 = first(&tc);
    assert_eq!(h1[0].loss, h2[0].loss);
    assert_eq!(h2[0].weighted, 2.0 * h1[0].weighted);

    // λ = 0 on the only enabled task: parameters never move
    let mut p = base.clone();
    let tc =
        TrainConfig { tasks: vec![Task::Msp], lambdas: LossWeights { msp: 0.0, ..Default::default() }, ..quick(2) };
    let h = pretrain(&mut p, &data, &tc, |_, _, _| Ok(())).unwrap();
    assert_eq!(p, base);
    assert!(h.iter().all(|r| r.weighted == 0.0 && r.loss > 0.0));
}

#[test]
fn pretraining_losses_fall() {
    let (data, cfg) = small_corpus(64, 4);
    let mut params = ModelParams::init(cfg, 6).unwrap();
    let tc =
        TrainConfig { pretrain_epochs: 10, pretrain_batch: 16, learning_rate: 2e-3, seed: 7, ..Default::default() };
    let history = pretrain(&mut params, &data, &tc, |_, _, _| Ok(())).unwrap();
    let means = epoch_means(&history);
    for t in Task::PRETRAIN {
        let at = |e: usize| means.iter().find(|m| m.0 == e && m.1 == t).unwrap().2;
        assert!(at(10) < at(1), "{t}: epoch 1 {} epoch 10 {}", at(1), at(10));
    }
}

#[test]
fn single_steps_reduce_head_losses() {
    let cfg = tiny_config(8, 1);
    let mut params = ModelParams::init(cfg.clone(), 8).unwrap();
    let ex = supervised(&mut rng(9), &cfg, 5);
    let tc = TrainConfig { learning_rate: 1e-2, ..Default::default() };
    let mut state = OptimizerState::new(params.tensors());
    let before = loss_of(&params, &ex, Task::Msp);
    train_step(&mut params, &mut state, &[&ex], Task::Msp, 1.0, &tc, &mut rng(0)).unwrap();
    assert!(loss_of(&params, &ex, Task::Msp) < before);

    let plan = RegionMaskPlan::from_masked(cfg.regions, vec![0, 1]).unwrap();
    let q = ex.class_dists.clone().unwrap();
    let kl = |p: &ModelParams| {
        let mut g = Graph::new();
        let m = Model::bind(&mut g, p, false);
        let l = mrm_loss(&m, &mut g, &ex, &q, &plan).unwrap();
        g.value(l).item()
    };
    let mut last = kl(&params);
    for _ in 0..3 {
        let mut g = Graph::new();
        let m = Model::bind(&mut g, &params, true);
        let l = mrm_loss(&m, &mut g, &ex, &q, &plan).unwrap();
        let mut grads = g.backward(l).unwrap();
        let gs: Vec<Tensor> = m
            .vars()
            .iter()
            .zip(params.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let names = params.names().to_vec();
        optimizer_step(params.tensors_mut(), &names, &gs, &mut state, Adam::new(1e-2)).unwrap();
        let now = kl(&params);
        assert!(now < last, "{now} >= {last}");
        last = now;
    }
}

#[test]
fn finetuning_keeps_history_and_best_epoch() {
    let (data, cfg) = small_corpus(12, 5);
    let mut params = ModelParams::init(cfg, 7).unwrap();
    let (train, dev) = data.split_at(8);
    let mut seen = 0;
    let out = finetune(Task::Jmasa, &mut params, train, dev, &quick(3), |_, _| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(out.history.len(), 3);
    assert_eq!(seen, 3);
    let best = out.history.iter().map(|r| selection_score(r.dev.as_ref().unwrap())).fold(f64::MIN, f64::max);
    assert_eq!(selection_score(out.history[out.best_epoch - 1].dev.as_ref().unwrap()), best);
    let again = evaluate_task(&out.best, dev, Task::Jmasa, false).unwrap();
    assert_eq!(selection_score(&again), best);
    assert!(finetune(Task::Msp, &mut params, train, dev, &quick(1), |_, _| Ok(())).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { pretrain_epochs: 0, ..Default::default() },
        TrainConfig { finetune_batch: 0, ..Default::default() },
        TrainConfig { lambdas: LossWeights { aoe: -1.0, ..Default::default() }, ..Default::default() },
        TrainConfig { tasks: vec![Task::Mlm, Task::Mlm], ..Default::default() },
        TrainConfig { tasks: vec![Task::Jmasa], ..Default::default() },
        TrainConfig { learning_rate: 0.0, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}
