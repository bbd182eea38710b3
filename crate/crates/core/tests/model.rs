mod common;

use common::*;
use mabsa_core::codec::{parse_target, valid_next_mask, Grammar, RegionMaskPlan, TargetItem, Task};
use mabsa_core::corpus::Span;
use mabsa_core::model::{generate, Model, ModelInput, ModelParams};
use mabsa_core::trainer::{example_loss, TrainConfig};
use mabsa_core::vocab::Special;
use mabsa_core::{grad_check, Error, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Var {
    let wv = g.constant(w.clone());
    let p = g.mul(x, wv).unwrap();
    g.sum(p)
}

fn row_sums_are_one(t: &Tensor) -> bool {
    (0..t.rows()).all(|i| (t.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9 && t.row(i).iter().all(|&p| p >= 0.0))
}

#[test]
fn encoder_gradients_one_layer() {
    let cfg = tiny_config(8, 1);
    let params = ModelParams::init(cfg.clone(), 3).unwrap();
    let input = random_input(&mut rng(4), &cfg, 4);
    let probe = Tensor::uniform(&[cfg.regions + 4 + 4, 8], 1.0, &mut rng(5));
    let err = grad_check(
        |g, vars| {
            let model = Model::from_vars(g, &params, vars.to_vec())?;
            let enc = model.encode(g, &input)?;
            Ok(weighted_sum(g, enc.hidden, &probe))
        },
        params.tensors(),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-3, "max relative error {err}");
}

#[test]
fn decoder_gradients_one_layer() {
    let cfg = tiny_config(8, 1);
    let params = ModelParams::init(cfg.clone(), 6).unwrap();
    let input = random_input(&mut rng(7), &cfg, 3);
    let items = [TargetItem::Index(2), TargetItem::Index(3), TargetItem::Special(Special::Neg)];
    let probe = Tensor::uniform(&[items.len() + 2, 8], 1.0, &mut rng(8));
    let err = grad_check(
        |g, vars| {
            let model = Model::from_vars(g, &params, vars.to_vec())?;
            let enc = model.encode(g, &input)?;
            let cands = model.candidates(g, &enc, Task::Jmasa)?;
            let dec_in = model.pointer_decoder_input(g, &cands, &items)?;
            let h = model.decode(g, &enc, dec_in)?;
            Ok(weighted_sum(g, h, &probe))
        },
        params.tensors(),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-3, "max relative error {err}");
}

#[test]
fn every_loss_has_correct_gradients_two_layers() {
    let mut cfg = tiny_config(16, 2);
    cfg.regions = 2;
    let params = ModelParams::init(cfg.clone(), 9).unwrap();
    let ex = supervised(&mut rng(10), &cfg, 4);
    let train = TrainConfig::default();
    let err = grad_check(
        |g, vars| {
            let model = Model::from_vars(g, &params, vars.to_vec())?;
            let mut r = rng(11);
            let mut total = None;
            for task in [Task::Mlm, Task::Aoe, Task::Mrm, Task::Aog, Task::Msp, Task::Jmasa] {
                let l = example_loss(&model, g, &ex, task, &train, &mut r)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.unwrap())
        },
        params.tensors(),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-3, "max relative error {err}");
}

#[test]
fn head_distributions_are_valid() {
    let cfg = tiny_config(8, 1);
    let mut r = rng(12);
    for seed in 0..20 {
        let params = ModelParams::init(cfg.clone(), seed).unwrap();
        let mut g = Graph::new();
        let model = Model::bind(&mut g, &params, false);
        let input = random_input(&mut r, &cfg, 10);
        let enc = model.encode(&mut g, &input).unwrap();
        assert_eq!(g.value(enc.hidden).shape(), &[cfg.regions + 10 + 4, 8]);

        let cands = model.candidates(&mut g, &enc, Task::Jmasa).unwrap();
        let prefix = model.task_prefix(&mut g, Task::Jmasa).unwrap();
        let h = model.decode_step(&mut g, &enc, prefix).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 8]);
        let p = model.pointer_distribution(&mut g, &cands, h).unwrap();
        assert_eq!(g.value(p).cols(), 14);
        assert!(row_sums_are_one(g.value(p)));

        let lm = model.lm_distribution(&mut g, h).unwrap();
        assert_eq!(g.value(lm).cols(), cfg.vocab_size);
        assert!(row_sums_are_one(g.value(lm)));

        let plan = RegionMaskPlan::from_masked(cfg.regions, vec![0, 2]).unwrap();
        let mrm = model.mrm_predict(&mut g, &enc, &plan).unwrap();
        assert_eq!(g.value(mrm).shape(), &[2, cfg.classes]);
        assert!(row_sums_are_one(g.value(mrm)));

        let msp = model.msp_predict(&mut g, &enc).unwrap();
        assert_eq!(g.value(msp).shape(), &[1, 3]);
        assert!(row_sums_are_one(g.value(msp)));
    }
}

#[test]
fn decoder_is_causal() {
    let cfg = tiny_config(8, 2);
    let params = ModelParams::init(cfg.clone(), 13).unwrap();
    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, false);
    let enc = model.encode(&mut g, &random_input(&mut rng(14), &cfg, 6)).unwrap();
    let cands = model.candidates(&mut g, &enc, Task::Aoe).unwrap();
    let short = [TargetItem::Index(1)];
    let long = [TargetItem::Index(1), TargetItem::Index(4), TargetItem::Special(Special::Sep)];
    let a = model.pointer_decoder_input(&mut g, &cands, &short).unwrap();
    let b = model.pointer_decoder_input(&mut g, &cands, &long).unwrap();
    let ha = model.decode(&mut g, &enc, a).unwrap();
    let hb = model.decode(&mut g, &enc, b).unwrap();
    for i in 0..3 {
        for (x, y) in g.value(ha).row(i).iter().zip(g.value(hb).row(i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn regions_are_permutation_equivariant_without_positions() {
    let mut cfg = tiny_config(8, 2);
    cfg.region_positions = false;
    let params = ModelParams::init(cfg.clone(), 15).unwrap();
    let input = random_input(&mut rng(16), &cfg, 5);
    let mut swapped = input.clone();
    let (r0, r1) = (input.regions.row(0).to_vec(), input.regions.row(1).to_vec());
    swapped.regions.row_mut(0).copy_from_slice(&r1);
    swapped.regions.row_mut(1).copy_from_slice(&r0);

    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, false);
    let a = model.encode(&mut g, &input).unwrap();
    let b = model.encode(&mut g, &swapped).unwrap();
    let (ha, hb) = (g.value(a.hidden), g.value(b.hidden));
    let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-10);
    assert!(close(ha.row(1), hb.row(2)));
    assert!(close(ha.row(2), hb.row(1)));
    for i in (0..ha.rows()).filter(|&i| i != 1 && i != 2) {
        assert!(close(ha.row(i), hb.row(i)), "row {i}");
    }
}

#[test]
fn lm_head_reads_the_input_embedding_table() {
    let cfg = tiny_config(8, 1);
    let mut params = ModelParams::init(cfg.clone(), 17).unwrap();
    let h = Tensor::matrix(1, 8, vec![0.5, -1.0, 0.25, 2.0, 0.0, 1.0, -0.5, 0.75]).unwrap();
    let target = Special::COUNT + 3;
    {
        let table = params.token_embedding_mut();
        table.data_mut().iter_mut().for_each(|x| *x = 0.0);
        table.row_mut(target).copy_from_slice(h.row(0));
        table.row_mut(target + 1)[4] = 3.0;
    }
    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, true);
    let hv = g.constant(h.clone());
    let logits = model.lm_logits(&mut g, hv).unwrap();
    let l = g.value(logits);
    let dot: f64 = h.row(0).iter().map(|x| x * x).sum();
    assert_eq!(l.get(0, target), dot);
    assert_eq!(l.get(0, target + 1), 0.0);
    let p = model.lm_distribution(&mut g, hv).unwrap();
    let best = g.value(p).row(0).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(best, target);

    // gradient reaches the shared table through the output head
    let loss = g.cross_entropy(logits, &[target + 1]).unwrap();
    let grads = g.backward(loss).unwrap();
    let table_var = model.vars()[params.names().iter().position(|n| n == "embed.tokens").unwrap()];
    assert!(grads.get(table_var).unwrap().data().iter().any(|&x| x != 0.0));
}

#[test]
fn zero_sentiment_head_is_uniform() {
    let cfg = tiny_config(8, 1);
    let mut params = ModelParams::init(cfg.clone(), 18).unwrap();
    for name in ["msp_head.fc2.weight", "msp_head.fc2.bias"] {
        params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, false);
    let enc = model.encode(&mut g, &random_input(&mut rng(19), &cfg, 4)).unwrap();
    let p = model.msp_predict(&mut g, &enc).unwrap();
    for &x in g.value(p).data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn pointer_logits_are_dot_products() {
    let cfg = tiny_config(8, 1);
    let params = ModelParams::init(cfg.clone(), 20).unwrap();
    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, false);
    let enc = model.encode(&mut g, &random_input(&mut rng(21), &cfg, 10)).unwrap();
    let cands = model.candidates(&mut g, &enc, Task::Jmasa).unwrap();
    assert_eq!(cands.len(), 14);

    let zero = g.constant(Tensor::zeros(&[1, 8]));
    let p = model.pointer_distribution(&mut g, &cands, zero).unwrap();
    assert!(g.value(p).data().iter().all(|&x| (x - 1.0 / 14.0).abs() < 1e-15));

    let h = g.constant(Tensor::uniform(&[1, 8], 1.0, &mut rng(22)));
    let h2 = g.scale(h, 2.0);
    let p1 = model.pointer_distribution(&mut g, &cands, h).unwrap();
    let p2 = model.pointer_distribution(&mut g, &cands, h2).unwrap();
    let argmax = |t: &Tensor| t.row(0).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let (a1, a2) = (argmax(g.value(p1)), argmax(g.value(p2)));
    assert_eq!(a1, a2);
    assert!(g.value(p2).row(0)[a2] >= g.value(p1).row(0)[a1]);

    // the candidate rows are the averaged token representation
    let avg = g.value(enc.text_average).clone();
    let emb = g.value(enc.text_embeddings).clone();
    let st = g.value(enc.text_states).clone();
    for (i, x) in avg.data().iter().enumerate() {
        assert_eq!(*x, (emb.data()[i] + st.data()[i]) * 0.5);
    }
}

#[test]
fn masc_generation_follows_the_gold_spans() {
    let mut cfg = tiny_config(8, 1);
    cfg.regions = 2;
    let params = ModelParams::init(cfg.clone(), 23).unwrap();
    let input = random_input(&mut rng(24), &cfg, 10);
    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, false);
    let spans = [Span::new(9, 9), Span::new(1, 2)];
    let out = generate(&model, &mut g, &input, Task::Masc, Some(&spans)).unwrap();
    assert!(out.complete);
    let items = &out.pointer().unwrap().items;
    assert_eq!(items.len(), 7);
    assert_eq!(&items[..2], &[TargetItem::Index(1), TargetItem::Index(2)]);
    assert_eq!(&items[3..5], &[TargetItem::Index(9), TargetItem::Index(9)]);
    assert_eq!(items[6], TargetItem::Special(Special::Eos));
    for i in [2, 5] {
        assert!(matches!(items[i], TargetItem::Special(Special::Pos | Special::Neu | Special::Neg)));
    }
    assert!(generate(&model, &mut g, &input, Task::Masc, None).is_err());
}

#[test]
fn untrained_generation_always_parses() {
    let cfg = tiny_config(8, 1);
    let mut r = rng(25);
    for seed in 0..10 {
        let params = ModelParams::init(cfg.clone(), seed).unwrap();
        for task in [Task::Jmasa, Task::Mate, Task::Aoe] {
            let input = random_input(&mut r, &cfg, 7);
            let mut g = Graph::new();
            let model = Model::bind(&mut g, &params, false);
            let out = generate(&model, &mut g, &input, task, None).unwrap();
            let y = out.pointer().unwrap();
            let parsed = parse_target(task, &y.items, 7);
            if out.complete {
                assert!(parsed.defects.is_empty(), "{task}: {:?} -> {:?}", y.items, parsed.defects);
            } else {
                // a truncated prefix was still accepted step by step
                let grammar = Grammar::for_task(task, None).unwrap();
                for k in 0..y.items.len() {
                    let mask = valid_next_mask(&grammar, &y.items[..k], 7).unwrap();
                    let c = mabsa_core::codec::item_to_candidate(task, 7, y.items[k]).unwrap();
                    assert!(mask[c]);
                }
            }
        }
    }
}

#[test]
fn generation_reports_truncation() {
    let mut cfg = tiny_config(8, 1);
    cfg.max_generation_len = 2;
    let params = ModelParams::init(cfg.clone(), 26).unwrap();
    let input = random_input(&mut rng(27), &cfg, 5);
    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, false);
    let spans = [Span::new(1, 1), Span::new(3, 4)];
    let out = generate(&model, &mut g, &input, Task::Masc, Some(&spans)).unwrap();
    assert!(!out.complete);
    assert_eq!(out.pointer().unwrap().items.len(), 2);
    let tokens = generate(&model, &mut g, &input, Task::Aog, None).unwrap();
    assert!(matches!(&tokens.output, mabsa_core::model::GenerationOutput::Tokens(t) if t.len() <= 2));
}

#[test]
fn capacity_and_usage_errors() {
    let mut cfg = tiny_config(8, 1);
    cfg.max_positions = 10;
    let params = ModelParams::init(cfg.clone(), 28).unwrap();
    let mut g = Graph::new();
    let model = Model::bind(&mut g, &params, false);
    let long = random_input(&mut rng(29), &cfg, 4);
    assert!(matches!(model.encode(&mut g, &long), Err(Error::Capacity(_))));
    let ok = random_input(&mut rng(30), &cfg, 3);
    let enc = model.encode(&mut g, &ok).unwrap();
    let empty = g.constant(Tensor::zeros(&[0, 8]));
    assert!(matches!(model.decode(&mut g, &enc, empty), Err(Error::Usage(_))));
    assert!(RegionMaskPlan::from_masked(3, vec![]).is_err());
    let text_only = ModelInput { token_ids: vec![], regions: Tensor::zeros(&[3, 5]) };
    assert!(model.encode(&mut g, &text_only).is_err());
}

#[test]
fn parameters_round_trip_by_name() {
    let cfg = tiny_config(8, 2);
    let params = ModelParams::init(cfg.clone(), 31).unwrap();
    assert_eq!(params, ModelParams::init(cfg.clone(), 31).unwrap());
    assert_ne!(params, ModelParams::init(cfg.clone(), 32).unwrap());
    let named: Vec<(String, Tensor)> = params.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let back = ModelParams::from_named(cfg.clone(), named.clone()).unwrap();
    assert_eq!(back, params);
    let mut bad = named;
    bad[0].1 = Tensor::zeros(&[1, 1]);
    assert!(ModelParams::from_named(cfg, bad).is_err());
}
