//! Built-in verification suites: finite-difference gradient checks and the
//! structural oracles (exhaustive permutations, recurrence vs single pass).
//! Each check prints one line; any failure exits nonzero.

use anyhow::{bail, Result};

use permlm_core::gradcheck::{finite_difference_grad, max_rel_error};
use permlm_core::graph::{Graph, NodeId};
use permlm_core::mask::{
    build_attention_masks, sample_factorization_order, select_prediction_targets, Permutation,
};
use permlm_core::model::{
    forward_content, forward_two_stream, plm_loss, Bindings, LayerMemory, ModelConfig,
    ModelParams, PlmRow, SegmentInput,
};
use permlm_core::rng::Rng;
use permlm_core::tensor::{BoolMat, Tensor};

const TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * 0.5).collect()).unwrap()
}

fn check_op(
    name: &str,
    points: &[Tensor],
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
) -> Result<()> {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = build(&mut g, &ids);
        let loss = g.sum_all(y);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = build(&mut g, &ids);
    let loss = g.sum_all(y);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, point) in points.iter().enumerate() {
        let analytic = g.grad(ids[i]).expect("gradient");
        let numeric = finite_difference_grad(
            |p| {
                let mut probe: Vec<Tensor> = points.to_vec();
                probe[i] = p.clone();
                Ok(eval(&probe))
            },
            point,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_error(analytic, numeric.data()));
    }
    let ok = worst < TOL;
    println!("grad-check {name}: max relative error {worst:.3e} ... {}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        bail!("gradient check failed for {name}");
    }
    Ok(())
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        head_dim: 4,
        ffn_dim: 16,
        vocab_size: 12,
        mem_len: 2,
        k: 2.0,
        dropout: 0.0,
        attn_dropout: 0.0,
        seq_len: 4,
    }
}

pub fn grad_check(seed: u64) -> Result<()> {
    let mut rng = Rng::derive(seed, &[0xF0]);

    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    check_op("matmul", &[a, b], &|g, ids| g.matmul(ids[0], ids[1]).unwrap())?;

    let a = random_tensor(&[2, 3, 4], &mut rng);
    let b = random_tensor(&[2, 4, 2], &mut rng);
    check_op("bmm", &[a, b], &|g, ids| g.bmm(ids[0], ids[1]).unwrap())?;

    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    check_op("add", &[a, b], &|g, ids| g.add(ids[0], ids[1]).unwrap())?;

    let a = random_tensor(&[2, 3, 1], &mut rng);
    let b = random_tensor(&[1, 3, 4], &mut rng);
    check_op("mul", &[a, b], &|g, ids| g.mul(ids[0], ids[1]).unwrap())?;

    let a = random_tensor(&[5], &mut rng);
    check_op("scale", &[a], &|g, ids| g.scale(ids[0], -2.5))?;

    let a = random_tensor(&[3, 5], &mut rng);
    let mut mask = BoolMat::new(3, 5, true);
    mask.set(0, 2, false);
    mask.set(1, 0, false);
    check_op("masked_softmax", &[a], &move |g, ids| {
        let s = g.softmax_masked(ids[0], Some(&mask), false).unwrap();
        let w = g.constant(Tensor::new(vec![5], vec![0.9, -0.3, 0.7, 1.3, -1.1]).unwrap());
        g.mul(s, w).unwrap()
    })?;

    let a = random_tensor(&[4, 6], &mut rng);
    check_op("log_softmax", &[a], &|g, ids| {
        let s = g.log_softmax(ids[0]).unwrap();
        let w = g.constant(Tensor::new(vec![6], vec![1.0, 0.2, -0.4, 0.8, -1.2, 0.5]).unwrap());
        g.mul(s, w).unwrap()
    })?;

    let x = random_tensor(&[3, 6], &mut rng);
    let gain = random_tensor(&[6], &mut rng);
    let bias = random_tensor(&[6], &mut rng);
    check_op("layer_norm", &[x, gain, bias], &|g, ids| {
        let y = g.layer_norm(ids[0], ids[1], ids[2]).unwrap();
        let w = g.constant(Tensor::new(vec![6], vec![0.3, 1.1, -0.7, 0.9, 0.2, -1.4]).unwrap());
        g.mul(y, w).unwrap()
    })?;

    let a = random_tensor(&[7], &mut rng);
    check_op("gelu", &[a], &|g, ids| g.gelu(ids[0]))?;

    let table = random_tensor(&[6, 4], &mut rng);
    check_op("embedding", &[table], &|g, ids| g.embedding(ids[0], &[0, 3, 3, 5]).unwrap())?;

    let a = random_tensor(&[2, 3], &mut rng);
    let b = random_tensor(&[2, 2], &mut rng);
    check_op("concat", &[a, b], &|g, ids| g.concat(&[ids[0], ids[1]], 1).unwrap())?;

    let c = random_tensor(&[4, 5], &mut rng);
    check_op("slice", &[c], &|g, ids| g.slice(ids[0], 0, 1, 2).unwrap())?;

    let a = random_tensor(&[2, 3, 4], &mut rng);
    check_op("permute", std::slice::from_ref(&a), &|g, ids| g.permute(ids[0], &[2, 0, 1]).unwrap())?;
    check_op("reshape", std::slice::from_ref(&a), &|g, ids| g.reshape(ids[0], &[4, 6]).unwrap())?;
    check_op("sum_axis", &[a], &|g, ids| g.sum_axis(ids[0], 1).unwrap())?;

    let a = random_tensor(&[2, 3, 5], &mut rng);
    let idx: Vec<u32> = vec![4, 0, 1, 2, 2, 3, 0, 0, 4];
    check_op("rel_gather", &[a], &move |g, ids| g.rel_gather(ids[0], &idx, 3).unwrap())?;

    let b = random_tensor(&[3, 4], &mut rng);
    check_op("pick", &[b], &|g, ids| g.pick(ids[0], &[2, 0, 3]).unwrap())?;

    // full two-layer two-stream model against central differences
    let config = toy_config();
    let params = ModelParams::init(config.clone(), &mut rng)?;
    let perm = Permutation::from_order(vec![3, 1, 4, 2])?;
    let input = SegmentInput {
        tokens: vec![5, 9, 7, 11],
        seg_ids: vec![0, 0, 1, 1],
        positions: vec![2, 3, 4, 5],
        n_real: 4,
        doc_id: 0,
    };
    let mut memory = LayerMemory::empty(config.n_layers, 0);
    memory.positions = vec![0, 1];
    memory.seg_ids = vec![0, 1];
    memory.levels = (0..config.n_layers)
        .map(|_| Tensor::trunc_normal(&[2, config.d_model], 0.5, &mut rng))
        .collect();

    let loss_of = |p: &ModelParams| -> f64 {
        let mut graph = Graph::new();
        let bind = Bindings::bind(&mut graph, p);
        let targets = select_prediction_targets(&perm, config.k).unwrap();
        let row = PlmRow { input: &input, memory: &memory, perm: perm.clone(), targets };
        let out =
            plm_loss(&mut graph, &bind, &config, std::slice::from_ref(&row), None).unwrap();
        graph.value(out.loss).item()
    };

    let mut graph = Graph::new();
    let bind = Bindings::bind(&mut graph, &params);
    let targets = select_prediction_targets(&perm, config.k)?;
    let row = PlmRow { input: &input, memory: &memory, perm: perm.clone(), targets };
    let out = plm_loss(&mut graph, &bind, &config, std::slice::from_ref(&row), None)?;
    graph.backward(out.loss).map_err(permlm_core::model::ModelError::from)?;
    let grads = bind.grads(&graph);

    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for (name, base) in params.named() {
        let numeric = finite_difference_grad(
            |probe| {
                let mut p = params.clone();
                p.visit_mut(|n, t| {
                    if n == name {
                        *t = probe.clone();
                    }
                });
                Ok(loss_of(&p))
            },
            &base,
            FD_STEP,
        )?;
        let err = max_rel_error(&grads[&name], numeric.data());
        if err > worst {
            worst = err;
            worst_name = name.clone();
        }
    }
    let ok = worst < TOL;
    println!(
        "grad-check full-model: max relative error {worst:.3e} ({worst_name}) ... {}",
        if ok { "PASS" } else { "FAIL" }
    );
    if !ok {
        bail!("full-model gradient check failed");
    }
    println!("grad-check: all checks passed");
    Ok(())
}

pub fn oracle_check(seed: u64) -> Result<()> {
    let mut rng = Rng::derive(seed, &[0xE0]);

    // exhaustive permutations vs Monte-Carlo on a length-4 toy model
    let t = 4;
    let config = ModelConfig { seq_len: t, mem_len: 0, k: 1.0, ..toy_config() };
    let params = ModelParams::init(config.clone(), &mut rng)?;
    let input = SegmentInput::plain(vec![5, 8, 6, 11], 0, 0);
    let memory = LayerMemory::empty(config.n_layers, 0);

    let loss_for = |order: Vec<usize>| -> f64 {
        let perm = Permutation::from_order(order).unwrap();
        let targets = select_prediction_targets(&perm, 1.0).unwrap();
        let mut graph = Graph::new();
        let bind = Bindings::bind(&mut graph, &params);
        let row = PlmRow { input: &input, memory: &memory, perm, targets };
        let out =
            plm_loss(&mut graph, &bind, &config, std::slice::from_ref(&row), None).unwrap();
        graph.value(out.loss).item()
    };

    let mut losses = std::collections::HashMap::new();
    let mut orders = vec![vec![]];
    for _ in 0..t {
        let mut next = Vec::new();
        for head in &orders {
            for p in 1..=t {
                if !head.contains(&p) {
                    let mut h: Vec<usize> = head.clone();
                    h.push(p);
                    next.push(h);
                }
            }
        }
        orders = next;
    }
    for order in &orders {
        losses.insert(order.clone(), loss_for(order.clone()));
    }
    let exact: f64 = losses.values().sum::<f64>() / orders.len() as f64;
    let variance =
        losses.values().map(|&l| (l - exact) * (l - exact)).sum::<f64>() / orders.len() as f64;
    let n = 10_000;
    let std_err = (variance / n as f64).sqrt();
    let mut acc = 0.0;
    let mut mc_rng = Rng::derive(seed, &[0xE1]);
    for _ in 0..n {
        let perm = sample_factorization_order(t, &mut mc_rng)?;
        acc += losses[&perm.order().to_vec()];
    }
    let mc = acc / n as f64;
    let ok = (mc - exact).abs() <= 3.0 * std_err;
    println!(
        "oracle-check exhaustive-permutations: exact {exact:.6} vs MC {mc:.6} (3SE {:.2e}) ... {}",
        3.0 * std_err,
        if ok { "PASS" } else { "FAIL" }
    );
    if !ok {
        bail!("permutation expectation oracle failed");
    }

    // recurrence vs a single pass under a hand-built block mask
    let config = ModelConfig { seq_len: t, mem_len: t, k: 1.0, ..toy_config() };
    let params = ModelParams::init(config.clone(), &mut rng)?;
    let order_a = Permutation::from_order(vec![3, 1, 4, 2])?;
    let order_b = Permutation::from_order(vec![2, 4, 1, 3])?;
    let tokens_a = vec![5usize, 6, 7, 8];
    let tokens_b = vec![9usize, 10, 11, 9];

    let mut graph = Graph::new();
    let bind = Bindings::bind(&mut graph, &params);
    let masks_a =
        build_attention_masks(&order_a, &select_prediction_targets(&order_a, 1.0)?, 0)?;
    let input_a = SegmentInput::plain(tokens_a.clone(), 0, 0);
    let fwd_a = forward_two_stream(
        &mut graph,
        &bind,
        &config,
        &input_a,
        &LayerMemory::empty(config.n_layers, 0),
        &masks_a,
        (0..t).collect(),
        None,
    )?;
    let masks_b =
        build_attention_masks(&order_b, &select_prediction_targets(&order_b, 1.0)?, t)?;
    let input_b = SegmentInput::plain(tokens_b.clone(), t, 0);
    let fwd_b = forward_two_stream(
        &mut graph,
        &bind,
        &config,
        &input_b,
        &fwd_a.new_memory,
        &masks_b,
        (0..t).collect(),
        None,
    )?;

    let mut block = BoolMat::new(2 * t, 2 * t, false);
    for i in 0..t {
        for j in 0..t {
            block.set(i, j, order_a.rank0(j) <= order_a.rank0(i));
            block.set(t + i, j, true);
            block.set(t + i, t + j, order_b.rank0(j) <= order_b.rank0(i));
        }
    }
    let mut single_graph = Graph::new();
    let single_bind = Bindings::bind(&mut single_graph, &params);
    let mut both = tokens_a;
    both.extend(&tokens_b);
    let input_all = SegmentInput::plain(both, 0, 0);
    let fwd_all = forward_content(
        &mut single_graph,
        &single_bind,
        &config,
        &input_all,
        &LayerMemory::empty(config.n_layers, 0),
        &block,
        None,
    )?;

    let mut max_diff = 0.0f64;
    for level in 1..=config.n_layers {
        let recurrent = graph.value(fwd_b.h_levels[level]);
        let single = single_graph.value(fwd_all.levels[level]);
        for i in 0..t {
            for c in 0..config.d_model {
                max_diff = max_diff.max((recurrent.at(&[i, c]) - single.at(&[t + i, c])).abs());
            }
        }
    }
    let ok = max_diff < 1e-8;
    println!(
        "oracle-check recurrence-vs-single-pass: max difference {max_diff:.3e} ... {}",
        if ok { "PASS" } else { "FAIL" }
    );
    if !ok {
        bail!("recurrence oracle failed");
    }
    println!("oracle-check: all checks passed");
    Ok(())
}
