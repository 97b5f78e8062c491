//! Autodiff-vs-finite-difference checks: every primitive, then the whole
//! two-layer two-stream model. Central differences are the independent
//! oracle; the tolerance is 1e-4 maximum relative error in 64-bit.

use permlm_core::gradcheck::{finite_difference_grad, max_rel_error};
use permlm_core::graph::{Graph, NodeId};
use permlm_core::mask::{select_prediction_targets, Permutation};
use permlm_core::model::{
    plm_loss, Bindings, LayerMemory, ModelConfig, ModelParams, PlmRow, SegmentInput,
};
use permlm_core::rng::Rng;
use permlm_core::tensor::{BoolMat, Tensor};

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * 0.5).collect()).unwrap()
}

/// Fixed mixing weights so the scalarized loss has non-uniform sensitivity.
fn mix_weights(shape: &[usize]) -> Tensor {
    let mut rng = Rng::new(999);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| 0.5 + rng.uniform()).collect()).unwrap()
}

/// Compare analytic gradients against central differences for every input.
fn check<F>(name: &str, points: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = build(&mut g, &ids);
        let w = g.constant(mix_weights(g.value(y).shape()));
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum_all(prod);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = build(&mut g, &ids);
    let w = g.constant(mix_weights(g.value(y).shape()));
    let prod = g.mul(y, w).unwrap();
    let loss = g.sum_all(prod);
    g.backward(loss).unwrap();

    for (i, point) in points.iter().enumerate() {
        let analytic = g.grad(ids[i]).unwrap_or_else(|| panic!("{name}: input {i} missing grad"));
        let numeric = finite_difference_grad(
            |p| {
                let mut probe: Vec<Tensor> = points.to_vec();
                probe[i] = p.clone();
                Ok(eval(&probe))
            },
            point,
            FD_STEP,
        )
        .unwrap();
        let err = max_rel_error(analytic, numeric.data());
        assert!(err < TOL, "{name}: input {i} max relative error {err:.3e} >= {TOL:e}");
    }
}

#[test]
fn grad_matmul() {
    let mut rng = Rng::new(1);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    check("matmul", &[a, b], |g, ids| g.matmul(ids[0], ids[1]).unwrap());
}

#[test]
fn grad_bmm() {
    let mut rng = Rng::new(2);
    let a = random_tensor(&[2, 3, 4], &mut rng);
    let b = random_tensor(&[2, 4, 2], &mut rng);
    check("bmm", &[a, b], |g, ids| g.bmm(ids[0], ids[1]).unwrap());
}

#[test]
fn grad_add_broadcast() {
    let mut rng = Rng::new(3);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    check("add", &[a, b], |g, ids| g.add(ids[0], ids[1]).unwrap());
    let a = random_tensor(&[2, 3, 4], &mut rng);
    let b = random_tensor(&[2, 1, 4], &mut rng);
    check("add_mid", &[a, b], |g, ids| g.add(ids[0], ids[1]).unwrap());
}

#[test]
fn grad_mul_broadcast() {
    let mut rng = Rng::new(4);
    let a = random_tensor(&[2, 3, 1], &mut rng);
    let b = random_tensor(&[1, 3, 4], &mut rng);
    check("mul", &[a, b], |g, ids| g.mul(ids[0], ids[1]).unwrap());
}

#[test]
fn grad_scale() {
    let mut rng = Rng::new(5);
    let a = random_tensor(&[5], &mut rng);
    check("scale", &[a], |g, ids| g.scale(ids[0], -2.5));
}

#[test]
fn grad_softmax_plain_and_masked() {
    let mut rng = Rng::new(6);
    let a = random_tensor(&[3, 5], &mut rng);
    check("softmax", std::slice::from_ref(&a), |g, ids| g.softmax(ids[0]).unwrap());

    let mut mask = BoolMat::new(3, 5, true);
    mask.set(0, 2, false);
    mask.set(1, 0, false);
    mask.set(1, 4, false);
    check("masked_softmax", std::slice::from_ref(&a), move |g, ids| {
        g.softmax_masked(ids[0], Some(&mask), false).unwrap()
    });

    // fully masked row with the zero-row policy: gradient must vanish there
    let mut empty_row = BoolMat::new(3, 5, true);
    for c in 0..5 {
        empty_row.set(1, c, false);
    }
    check("masked_softmax_empty_row", &[a], move |g, ids| {
        g.softmax_masked(ids[0], Some(&empty_row), true).unwrap()
    });
}

#[test]
fn grad_log_softmax() {
    let mut rng = Rng::new(7);
    let a = random_tensor(&[4, 6], &mut rng);
    check("log_softmax", &[a], |g, ids| g.log_softmax(ids[0]).unwrap());
}

#[test]
fn grad_layer_norm() {
    let mut rng = Rng::new(8);
    let x = random_tensor(&[3, 6], &mut rng);
    let gain = random_tensor(&[6], &mut rng);
    let bias = random_tensor(&[6], &mut rng);
    check("layer_norm", &[x, gain, bias], |g, ids| {
        g.layer_norm(ids[0], ids[1], ids[2]).unwrap()
    });
}

#[test]
fn grad_gelu() {
    let mut rng = Rng::new(9);
    let a = random_tensor(&[7], &mut rng);
    check("gelu", &[a], |g, ids| g.gelu(ids[0]));
}

#[test]
fn grad_embedding() {
    let mut rng = Rng::new(10);
    let table = random_tensor(&[6, 4], &mut rng);
    // repeated id: gradients must accumulate on the shared row
    check("embedding", &[table], |g, ids| g.embedding(ids[0], &[0, 3, 3, 5]).unwrap());
}

#[test]
fn grad_concat_slice() {
    let mut rng = Rng::new(11);
    let a = random_tensor(&[2, 3], &mut rng);
    let b = random_tensor(&[2, 2], &mut rng);
    check("concat", &[a.clone(), b], |g, ids| g.concat(&[ids[0], ids[1]], 1).unwrap());
    let c = random_tensor(&[4, 5], &mut rng);
    check("slice", &[c], |g, ids| g.slice(ids[0], 0, 1, 2).unwrap());
}

#[test]
fn grad_permute_reshape() {
    let mut rng = Rng::new(12);
    let a = random_tensor(&[2, 3, 4], &mut rng);
    check("permute", std::slice::from_ref(&a), |g, ids| g.permute(ids[0], &[2, 0, 1]).unwrap());
    check("reshape", &[a], |g, ids| g.reshape(ids[0], &[4, 6]).unwrap());
}

#[test]
fn grad_reductions() {
    let mut rng = Rng::new(13);
    let a = random_tensor(&[3, 4], &mut rng);
    check("sum_all", std::slice::from_ref(&a), |g, ids| g.sum_all(ids[0]));
    check("mean_all", std::slice::from_ref(&a), |g, ids| g.mean_all(ids[0]));
    check("sum_axis", &[a], |g, ids| g.sum_axis(ids[0], 0).unwrap());
    let b = random_tensor(&[2, 3, 4], &mut rng);
    check("sum_axis_mid", &[b], |g, ids| g.sum_axis(ids[0], 1).unwrap());
}

#[test]
fn grad_rel_gather_and_pick() {
    let mut rng = Rng::new(14);
    let a = random_tensor(&[2, 3, 5], &mut rng);
    let idx: Vec<u32> = vec![4, 0, 1, 2, 2, 3, 0, 0, 4]; // 3 rows x 3 cols
    check("rel_gather", &[a], move |g, ids| g.rel_gather(ids[0], &idx, 3).unwrap());
    let b = random_tensor(&[3, 4], &mut rng);
    check("pick", &[b], |g, ids| g.pick(ids[0], &[2, 0, 3]).unwrap());
}

// ---- full model ------------------------------------------------------------

fn toy_config(mem_len: usize, k: f64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        head_dim: 4,
        ffn_dim: 16,
        vocab_size: 12,
        mem_len,
        k,
        dropout: 0.0,
        attn_dropout: 0.0,
        seq_len: 4,
    }
}

/// Permutation-LM loss of the toy model as a function of one named tensor.
fn model_loss(
    params: &ModelParams,
    input: &SegmentInput,
    memory: &LayerMemory,
    perm: &Permutation,
    k: f64,
) -> f64 {
    let mut graph = Graph::new();
    let bind = Bindings::bind(&mut graph, params);
    let targets = select_prediction_targets(perm, k).unwrap();
    let row = PlmRow { input, memory, perm: perm.clone(), targets };
    let out = plm_loss(&mut graph, &bind, &params.config, std::slice::from_ref(&row), None)
        .unwrap();
    graph.value(out.loss).item()
}

fn full_model_check(mem_len: usize, k: f64, order: Vec<usize>, seed: u64) {
    let config = toy_config(mem_len, k);
    let mut rng = Rng::new(seed);
    let params = ModelParams::init(config.clone(), &mut rng).unwrap();
    let input = SegmentInput {
        tokens: vec![5, 9, 7, 11],
        seg_ids: vec![0, 0, 1, 1],
        positions: vec![mem_len, mem_len + 1, mem_len + 2, mem_len + 3],
        n_real: 4,
        doc_id: 0,
    };
    let memory = if mem_len > 0 {
        let mut m = LayerMemory::empty(config.n_layers, 0);
        m.positions = (0..mem_len).collect();
        m.seg_ids = (0..mem_len).map(|i| (i % 2) as u32).collect();
        m.levels = (0..config.n_layers)
            .map(|_| Tensor::trunc_normal(&[mem_len, config.d_model], 0.5, &mut rng))
            .collect();
        m
    } else {
        LayerMemory::empty(config.n_layers, 0)
    };
    let perm = Permutation::from_order(order).unwrap();

    // analytic gradients for every parameter
    let mut graph = Graph::new();
    let bind = Bindings::bind(&mut graph, &params);
    let targets = select_prediction_targets(&perm, k).unwrap();
    let row = PlmRow { input: &input, memory: &memory, perm: perm.clone(), targets };
    let out =
        plm_loss(&mut graph, &bind, &config, std::slice::from_ref(&row), None).unwrap();
    graph.backward(out.loss).unwrap();
    let grads = bind.grads(&graph);

    let mut worst = (0.0f64, String::new());
    for (name, base) in params.named() {
        let numeric = finite_difference_grad(
            |probe| {
                let mut p = params.clone();
                p.visit_mut(|n, t| {
                    if n == name {
                        *t = probe.clone();
                    }
                });
                Ok(model_loss(&p, &input, &memory, &perm, k))
            },
            &base,
            FD_STEP,
        )
        .unwrap();
        let err = max_rel_error(&grads[&name], numeric.data());
        if err > worst.0 {
            worst = (err, name.clone());
        }
        assert!(err < TOL, "{name}: max relative error {err:.3e} >= {TOL:e}");
    }
    eprintln!("full model (mem={mem_len}, k={k}): worst {:.3e} at {}", worst.0, worst.1);
}

#[test]
fn grad_full_two_stream_model_with_memory() {
    full_model_check(2, 2.0, vec![3, 1, 4, 2], 42);
}

#[test]
fn grad_full_two_stream_model_no_memory_all_targets() {
    // K=1 with no memory exercises the zero-attention first-rank query row
    full_model_check(0, 1.0, vec![2, 4, 1, 3], 43);
}
