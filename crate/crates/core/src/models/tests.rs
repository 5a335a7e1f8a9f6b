use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check, GradCheckConfig, Linear, ParamStore, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Random rooted tree on `n` nodes, root 0, every parent index below its child.
fn random_parents(n: usize, max_children: usize, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    let mut parent = vec![None];
    let mut count = vec![0usize; n];
    for i in 1..n {
        let open: Vec<usize> = (0..i).filter(|&p| count[p] < max_children).collect();
        let p = open[rng.random_range(0..open.len())];
        count[p] += 1;
        parent.push(Some(p));
    }
    parent
}

fn dfs_postorder(parent: &[Option<usize>]) -> Vec<usize> {
    fn visit(j: usize, parent: &[Option<usize>], out: &mut Vec<usize>) {
        for k in 0..parent.len() {
            if parent[k] == Some(j) {
                visit(k, parent, out);
            }
        }
        out.push(j);
    }
    let root = parent.iter().position(Option::is_none).unwrap();
    let mut out = Vec::new();
    visit(root, parent, &mut out);
    out
}

fn batch_with(tape: &mut Tape, x: &Tensor, parent: &[Option<usize>], postorder: Vec<usize>) -> GraphBatch {
    let child_to_parent: Vec<(usize, usize)> = parent
        .iter()
        .enumerate()
        .filter_map(|(c, p)| p.map(|p| (c, p)))
        .collect();
    let parent_to_child = child_to_parent.iter().map(|&(c, p)| (p, c)).collect();
    let b = GraphBatch {
        node_features: tape.constant(x.clone()),
        num_nodes: parent.len(),
        child_to_parent,
        parent_to_child,
        postorder,
        is_null: vec![false; parent.len()],
    };
    b.validate().unwrap();
    b
}

fn batch(tape: &mut Tape, x: &Tensor, parent: &[Option<usize>]) -> GraphBatch {
    batch_with(tape, x, parent, dfs_postorder(parent))
}

fn affine(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.tensor(lin.weight);
    (0..lin.out_dim)
        .map(|j| {
            let mut s: f64 = (0..lin.in_dim).map(|i| x[i] * w.get(i, j)).sum();
            if let Some(b) = lin.bias {
                s += store.tensor(b).get(0, j);
            }
            s
        })
        .collect()
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|r| t.row_slice(r).to_vec()).collect()
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

fn gate_pre(store: &ParamStore, g: &Gate, x: &[f64], h: &[f64]) -> Vec<f64> {
    add(&affine(store, &g.input, x), &affine(store, &g.hidden, h))
}

fn gru_oracle(store: &ParamStore, gru: &GruCell, xs: &[Vec<f64>]) -> Vec<f64> {
    let mut h = vec![0.0; gru.hidden];
    for x in xs {
        let z: Vec<f64> = gate_pre(store, &gru.update, x, &h).into_iter().map(sig).collect();
        let r: Vec<f64> = gate_pre(store, &gru.reset, x, &h).into_iter().map(sig).collect();
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = gate_pre(store, &gru.candidate, x, &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        h = (0..h.len()).map(|k| (1.0 - z[k]) * h[k] + z[k] * cand[k]).collect();
    }
    h
}

fn lstm_oracle(store: &ParamStore, cell: &LstmCell, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; cell.hidden];
    let mut c = vec![0.0; cell.hidden];
    let mut out = Vec::new();
    for x in xs {
        let i: Vec<f64> = gate_pre(store, &cell.input_gate, x, &h).into_iter().map(sig).collect();
        let f: Vec<f64> = gate_pre(store, &cell.forget_gate, x, &h).into_iter().map(sig).collect();
        let o: Vec<f64> = gate_pre(store, &cell.output_gate, x, &h).into_iter().map(sig).collect();
        let u: Vec<f64> = gate_pre(store, &cell.cell, x, &h).into_iter().map(f64::tanh).collect();
        c = (0..c.len()).map(|k| i[k] * u[k] + f[k] * c[k]).collect();
        h = (0..c.len()).map(|k| o[k] * c[k].tanh()).collect();
        out.push(h.clone());
    }
    out
}

fn conv_oracle(store: &ParamStore, conv: &TransformerConv, x: &[Vec<f64>], edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    assert_eq!(conv.heads.len(), 1);
    let head = &conv.heads[0];
    let d = conv.out_dim as f64;
    (0..x.len())
        .map(|i| {
            let mut out = affine(store, &head.root, &x[i]);
            let q = affine(store, &head.query, &x[i]);
            let incoming: Vec<usize> = edges.iter().filter(|e| e.1 == i).map(|e| e.0).collect();
            if incoming.is_empty() {
                return out;
            }
            let scores: Vec<f64> = incoming
                .iter()
                .map(|&j| {
                    let k = affine(store, &head.key, &x[j]);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (idx, &j) in incoming.iter().enumerate() {
                let v = affine(store, &head.value, &x[j]);
                for k in 0..out.len() {
                    out[k] += e[idx] / z * v[k];
                }
            }
            out
        })
        .collect()
}

#[test]
fn conv_without_edges_and_identity_root_is_identity() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let conv = TransformerConv::new(&mut store, "c", 3, 3, 1, &mut r).unwrap();
    let (w, b) = conv.root_params();
    store.set_tensor(w, identity(3)).unwrap();
    store.set_tensor(b.unwrap(), Tensor::zeros(&[1, 3])).unwrap();
    let x = random_tensor(4, 3, &mut r);
    let mut tape = Tape::default();
    let xv = tape.constant(x.clone());
    let y = conv.forward(&mut tape, &store, xv, &[]).unwrap();
    assert!(tape.value(y).bitwise_eq(&x));
}

#[test]
fn conv_single_neighbour_gets_full_weight() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let conv = TransformerConv::new(&mut store, "c", 3, 2, 1, &mut r).unwrap();
    let x = random_tensor(2, 3, &mut r);
    let mut tape = Tape::default();
    let xv = tape.constant(x.clone());
    let y = conv.forward(&mut tape, &store, xv, &[(1, 0)]).unwrap();
    let head = &conv.heads[0];
    let want = add(&affine(&store, &head.root, x.row_slice(0)), &affine(&store, &head.value, x.row_slice(1)));
    assert!(max_diff(tape.value(y).row_slice(0), &want) < 1e-12);
    let root_only = affine(&store, &head.root, x.row_slice(1));
    assert!(max_diff(tape.value(y).row_slice(1), &root_only) < 1e-12);
}

#[test]
fn conv_equal_keys_split_attention_evenly() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let conv = TransformerConv::new(&mut store, "c", 2, 2, 1, &mut r).unwrap();
    // Key weights zeroed: every neighbour has the same key.
    let head = &conv.heads[0];
    store.set_tensor(head.key.weight, Tensor::zeros(&[2, 2])).unwrap();
    let x = random_tensor(3, 2, &mut r);
    let mut tape = Tape::default();
    let xv = tape.constant(x.clone());
    let y = conv.forward(&mut tape, &store, xv, &[(1, 0), (2, 0)]).unwrap();
    let v1 = affine(&store, &head.value, x.row_slice(1));
    let v2 = affine(&store, &head.value, x.row_slice(2));
    let root = affine(&store, &head.root, x.row_slice(0));
    let want: Vec<f64> = (0..2).map(|k| root[k] + 0.5 * v1[k] + 0.5 * v2[k]).collect();
    assert!(max_diff(tape.value(y).row_slice(0), &want) < 1e-12);
}

#[test]
fn conv_matches_oracle_on_random_graph() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let conv = TransformerConv::new(&mut store, "c", 4, 3, 1, &mut r).unwrap();
    let x = random_tensor(6, 4, &mut r);
    let edges = vec![(1, 0), (2, 0), (3, 0), (4, 2), (5, 2), (0, 5)];
    let mut tape = Tape::default();
    let xv = tape.constant(x.clone());
    let y = conv.forward(&mut tape, &store, xv, &edges).unwrap();
    let want = conv_oracle(&store, &conv, &rows(&x), &edges);
    for (i, w) in want.iter().enumerate() {
        assert!(max_diff(tape.value(y).row_slice(i), w) < 1e-12);
    }
}

#[test]
fn multi_head_conv_has_requested_width() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let conv = TransformerConv::new(&mut store, "c", 4, 3, 2, &mut r).unwrap();
    assert!(store.id("c.head1.query.weight").is_some());
    assert!(store.id("c.merge.weight").is_some());
    let x = random_tensor(3, 4, &mut r);
    let mut tape = Tape::default();
    let xv = tape.constant(x);
    let y = conv.forward(&mut tape, &store, xv, &[(1, 0), (2, 0)]).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 3]);
}

#[test]
fn bidirectional_mix_extremes_and_midpoint() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let layer = BiLayer::new(&mut store, "l", 3, 2, 1, &mut r).unwrap();
    assert_eq!(store.tensor(layer.mix).item(), Some(0.5));
    let x = random_tensor(3, 3, &mut r);
    let c2p = vec![(1, 0), (2, 0)];
    let p2c = vec![(0, 1), (0, 2)];
    for (p, pick_cp) in [(1.0, true), (0.0, false)] {
        store.set_tensor(layer.mix, Tensor::scalar(p)).unwrap();
        let mut tape = Tape::default();
        let xv = tape.constant(x.clone());
        let out = layer.forward(&mut tape, &store, xv, &c2p, &p2c).unwrap();
        let want = if pick_cp { out.child_to_parent } else { out.parent_to_child };
        assert!(tape.value(out.mixed).bitwise_eq(tape.value(want)));
    }

    store.set_tensor(layer.mix, Tensor::scalar(0.5)).unwrap();
    let mut tape = Tape::default();
    let a = tape.constant(Tensor::row(&[2.0, 0.0]));
    let b = tape.constant(Tensor::row(&[0.0, 2.0]));
    let m = mix(&mut tape, &store, layer.mix, a, b).unwrap();
    assert_eq!(tape.value(m).data(), &[1.0, 1.0]);
}

#[test]
fn two_directions_use_disjoint_parameters() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let layer = BiLayer::new(&mut store, "l", 3, 2, 1, &mut r).unwrap();
    let (a, _) = layer.child_to_parent.root_params();
    let (b, _) = layer.parent_to_child.root_params();
    assert_ne!(a, b);
    assert_eq!(store.len(), 2 * 8 + 1);
}

#[test]
fn gru_zero_inputs_stay_at_zero() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "g", 3, 4, &mut r).unwrap();
    for g in [&gru.update, &gru.reset, &gru.candidate] {
        store.set_tensor(g.input.bias.unwrap(), Tensor::zeros(&[1, 4])).unwrap();
    }
    let mut tape = Tape::default();
    let xs = tape.constant(Tensor::zeros(&[5, 3]));
    let h = gru.last(&mut tape, &store, xs).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_matches_scalar_loop() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "g", 3, 4, &mut r).unwrap();
    for n in [1, 6] {
        let x = random_tensor(n, 3, &mut r);
        let post: Vec<usize> = (0..n).rev().collect();
        let mut tape = Tape::default();
        let xv = tape.constant(x.clone());
        let h = gru_aggregate(&mut tape, &store, &gru, xv, &post).unwrap();
        let seq: Vec<Vec<f64>> = post.iter().map(|&i| x.row_slice(i).to_vec()).collect();
        assert!(max_diff(tape.value(h).data(), &gru_oracle(&store, &gru, &seq)) < 1e-12);
    }
    let mut tape = Tape::default();
    let xv = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(gru_aggregate(&mut tape, &store, &gru, xv, &[]).is_err());
}

#[test]
fn lstm_matches_scalar_loop_and_zero_fixed_point() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let lstm = LstmCell::new(&mut store, "l", 3, 2, &mut r).unwrap();
    let x = random_tensor(4, 3, &mut r);
    let mut tape = Tape::default();
    let xv = tape.constant(x.clone());
    let states = lstm.run(&mut tape, &store, xv).unwrap();
    let want = lstm_oracle(&store, &lstm, &rows(&x));
    for (s, w) in states.iter().zip(&want) {
        assert!(max_diff(tape.value(*s).data(), w) < 1e-12);
    }

    for g in [&lstm.input_gate, &lstm.forget_gate, &lstm.output_gate, &lstm.cell] {
        store.set_tensor(g.input.bias.unwrap(), Tensor::zeros(&[1, 2])).unwrap();
    }
    let mut tape = Tape::default();
    let xv = tape.constant(Tensor::zeros(&[3, 3]));
    let h = lstm.last(&mut tape, &store, xv).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_weights_are_a_distribution() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let att = AttentiveLstm::new(&mut store, "a", 3, 4, &mut r).unwrap();

    let x = random_tensor(1, 3, &mut r);
    let mut tape = Tape::default();
    let xv = tape.constant(x);
    let (pooled, weights) = att.forward(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.value(weights).data(), &[1.0]);
    let h1 = att.lstm.last(&mut tape, &store, xv).unwrap();
    assert!(tape.value(pooled).max_abs_diff(tape.value(h1)) < 1e-15);

    let x = random_tensor(7, 3, &mut r);
    let mut tape = Tape::default();
    let xv = tape.constant(x.clone());
    let (pooled, weights) = att.forward(&mut tape, &store, xv).unwrap();
    let w = tape.value(weights).data();
    assert!(w.iter().all(|&a| a >= 0.0));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let hs = lstm_oracle(&store, &att.lstm, &rows(&x));
    let want: Vec<f64> = (0..4).map(|k| hs.iter().zip(w).map(|(h, a)| a * h[k]).sum()).collect();
    assert!(max_diff(tape.value(pooled).data(), &want) < 1e-12);
}

fn tree_lstm_oracle(
    store: &ParamStore,
    m: &ChildSumTreeLstm,
    x: &[Vec<f64>],
    parent: &[Option<usize>],
) -> Vec<f64> {
    let n = x.len();
    let mut h = vec![vec![0.0; m.hidden]; n];
    let mut c = vec![vec![0.0; m.hidden]; n];
    let order = dfs_postorder(parent);
    for &j in &order {
        let kids: Vec<usize> = (0..n).filter(|&k| parent[k] == Some(j)).collect();
        let mut hbar = vec![0.0; m.hidden];
        for &k in &kids {
            hbar = add(&hbar, &h[k]);
        }
        let pre = |w: &Linear, u: &Linear, hv: &[f64]| add(&affine(store, w, &x[j]), &affine(store, u, hv));
        let i: Vec<f64> = pre(&m.w_i, &m.u_i, &hbar).into_iter().map(sig).collect();
        let o: Vec<f64> = pre(&m.w_o, &m.u_o, &hbar).into_iter().map(sig).collect();
        let u: Vec<f64> = pre(&m.w_u, &m.u_u, &hbar).into_iter().map(f64::tanh).collect();
        let mut cj: Vec<f64> = (0..m.hidden).map(|q| i[q] * u[q]).collect();
        for &k in &kids {
            let f: Vec<f64> = pre(&m.w_f, &m.u_f, &h[k]).into_iter().map(sig).collect();
            for q in 0..m.hidden {
                cj[q] += f[q] * c[k][q];
            }
        }
        h[j] = (0..m.hidden).map(|q| o[q] * cj[q].tanh()).collect();
        c[j] = cj;
    }
    h[*order.last().unwrap()].clone()
}

fn run_tree_lstm(store: &ParamStore, m: &ChildSumTreeLstm, x: &Tensor, parent: &[Option<usize>]) -> Vec<f64> {
    let mut tape = Tape::default();
    let b = batch(&mut tape, x, parent);
    let h = m
        .forward(&mut tape, store, b.node_features, &b.children(), &b.postorder)
        .unwrap();
    tape.value(h).data().to_vec()
}

#[test]
fn tree_lstm_matches_oracle_and_ignores_child_order() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let m = ChildSumTreeLstm::new(&mut store, "t", 3, 4, &mut r).unwrap();
    let x = random_tensor(3, 3, &mut r);
    let parent = [None, Some(0), Some(0)];
    let got = run_tree_lstm(&store, &m, &x, &parent);
    assert!(max_diff(&got, &tree_lstm_oracle(&store, &m, &rows(&x), &parent)) < 1e-12);

    // Same tree with the two children stored in the opposite order.
    let swapped = Tensor::from_rows(&[x.row_slice(0).to_vec(), x.row_slice(2).to_vec(), x.row_slice(1).to_vec()])
        .unwrap();
    assert!(max_diff(&got, &run_tree_lstm(&store, &m, &swapped, &parent)) < 1e-12);

    let x = random_tensor(8, 3, &mut r);
    let parent = random_parents(8, 3, &mut r);
    let got = run_tree_lstm(&store, &m, &x, &parent);
    assert!(max_diff(&got, &tree_lstm_oracle(&store, &m, &rows(&x), &parent)) < 1e-12);
}

#[test]
fn tree_lstm_leaf_is_one_lstm_step() {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let m = ChildSumTreeLstm::new(&mut store, "t", 3, 4, &mut r).unwrap();
    let mut lstore = ParamStore::new();
    let lstm = LstmCell::new(&mut lstore, "t", 3, 4, &mut r).unwrap();
    copy_by_name(&store, &mut lstore);
    let x = random_tensor(1, 3, &mut r);
    let got = run_tree_lstm(&store, &m, &x, &[None]);
    assert!(max_diff(&got, &lstm_oracle(&lstore, &lstm, &rows(&x))[0]) < 1e-12);
}

fn copy_by_name(from: &ParamStore, to: &mut ParamStore) {
    let pairs: Vec<_> = to
        .iter()
        .map(|(id, p)| (id, from.id(&p.name).unwrap_or_else(|| panic!("missing {}", p.name))))
        .collect();
    for (dst, src) in pairs {
        to.set_tensor(dst, from.tensor(src).clone()).unwrap();
    }
}

#[test]
fn tree_lstm_on_a_chain_equals_lstm() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let m = ChildSumTreeLstm::new(&mut store, "t", 3, 4, &mut r).unwrap();
    let mut lstore = ParamStore::new();
    let lstm = LstmCell::new(&mut lstore, "t", 3, 4, &mut r).unwrap();
    copy_by_name(&store, &mut lstore);
    let n = 6;
    let parent: Vec<Option<usize>> = (0..n).map(|i: usize| i.checked_sub(1)).collect();
    let x = random_tensor(n, 3, &mut r);
    let tree_h = run_tree_lstm(&store, &m, &x, &parent);

    let mut tape = Tape::default();
    let xv = tape.constant(x);
    let seq = tape.gather_rows(xv, dfs_postorder(&parent)).unwrap();
    let h = lstm.last(&mut tape, &lstore, seq).unwrap();
    assert!(max_diff(&tree_h, tape.value(h).data()) < 1e-12);
}

fn tcnn_oracle(store: &ParamStore, layers: &[TreeConvLayer], x: &[Vec<f64>], parent: &[Option<usize>]) -> Vec<f64> {
    let n = x.len();
    let kids: Vec<Vec<usize>> = (0..n).map(|j| (0..n).filter(|&k| parent[k] == Some(j)).collect()).collect();
    let mut cur = x.to_vec();
    for layer in layers {
        let zero = vec![0.0; cur[0].len()];
        cur = (0..n)
            .map(|j| {
                let l = kids[j].first().map_or(&zero, |&k| &cur[k]);
                let r = kids[j].get(1).map_or(&zero, |&k| &cur[k]);
                let s = add(
                    &add(&affine(store, &layer.parent, &cur[j]), &affine(store, &layer.left, l)),
                    &affine(store, &layer.right, r),
                );
                s.into_iter().map(|v| v.max(0.0)).collect()
            })
            .collect();
    }
    (0..cur[0].len())
        .map(|q| cur.iter().map(|row| row[q]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn tcnn_model(store: &mut ParamStore, input: usize, layers: usize, r: &mut ChaCha8Rng) -> TreeModel {
    let mut cfg = ModelConfig::new(ModelKind::TreeCnn);
    cfg.layers = layers;
    cfg.hidden = input;
    TreeModel::new(store, &cfg, input, r).unwrap()
}

fn tcnn_layers(m: &TreeModel) -> &[TreeConvLayer] {
    match &m.body {
        Body::TreeCnn(l) => l,
        _ => unreachable!(),
    }
}

#[test]
fn tcnn_single_node_identity_is_relu() {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let m = tcnn_model(&mut store, 3, 1, &mut r);
    let layer = &tcnn_layers(&m)[0];
    store.set_tensor(layer.parent.weight, identity(3)).unwrap();
    store.set_tensor(layer.parent.bias.unwrap(), Tensor::zeros(&[1, 3])).unwrap();
    let x = Tensor::row(&[0.5, -1.0, 2.0]);
    let mut tape = Tape::default();
    let b = batch(&mut tape, &x, &[None]);
    let y = m.forward(&mut tape, &store, &b, &mut Mode::eval()).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.0, 2.0]);
}

#[test]
fn tcnn_matches_oracle_on_binary_tree() {
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let m = tcnn_model(&mut store, 4, 2, &mut r);
    let parent = random_parents(7, 2, &mut r);
    let x = random_tensor(7, 4, &mut r);
    let mut tape = Tape::default();
    let b = batch(&mut tape, &x, &parent);
    let y = m.forward(&mut tape, &store, &b, &mut Mode::eval()).unwrap();
    let want = tcnn_oracle(&store, tcnn_layers(&m), &rows(&x), &parent);
    assert!(max_diff(tape.value(y).data(), &want) < 1e-12);
}

#[test]
fn tcnn_padding_children_contribute_nothing() {
    let mut r = rng(17);
    let mut store = ParamStore::new();
    let m = tcnn_model(&mut store, 3, 2, &mut r);
    let x = random_tensor(2, 3, &mut r);
    let mut tape = Tape::default();
    let plain = batch(&mut tape, &x, &[None, Some(0)]);
    let y = m.forward(&mut tape, &store, &plain, &mut Mode::eval()).unwrap();

    // Root with a real left child and a padding right child carrying junk features.
    let padded_x = Tensor::from_rows(&[x.row_slice(0).to_vec(), x.row_slice(1).to_vec(), vec![9.0, -7.0, 5.0]]).unwrap();
    let mut tape2 = Tape::default();
    let mut padded = batch(&mut tape2, &padded_x, &[None, Some(0), Some(0)]);
    padded.is_null[2] = true;
    let y2 = m.forward(&mut tape2, &store, &padded, &mut Mode::eval()).unwrap();
    assert!(tape.value(y).max_abs_diff(tape2.value(y2)) < 1e-15);
}

#[test]
fn tcnn_rejects_unbinarized_plans() {
    let mut r = rng(18);
    let mut store = ParamStore::new();
    let m = tcnn_model(&mut store, 3, 1, &mut r);
    let x = random_tensor(4, 3, &mut r);
    let mut tape = Tape::default();
    let b = batch(&mut tape, &x, &[None, Some(0), Some(0), Some(0)]);
    assert!(m.forward(&mut tape, &store, &b, &mut Mode::eval()).is_err());
}

#[test]
fn addpool_sums_rows_in_any_order() {
    let mut tape = Tape::default();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let y = addpool_aggregate(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 6.0]);
    let single = tape.constant(Tensor::row(&[5.0, -1.0]));
    let y = addpool_aggregate(&mut tape, single).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, -1.0]);

    let mut r = rng(19);
    let x = random_tensor(6, 3, &mut r);
    let xv = tape.constant(x.clone());
    let base = addpool_aggregate(&mut tape, xv).unwrap();
    let perm = tape.gather_rows(xv, vec![3, 0, 5, 1, 4, 2]).unwrap();
    let permuted = addpool_aggregate(&mut tape, perm).unwrap();
    assert!(tape.value(base).max_abs_diff(tape.value(permuted)) < 1e-12);
}

#[test]
fn gru_aggregate_depends_on_order() {
    let mut r = rng(20);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "g", 3, 4, &mut r).unwrap();
    let x = random_tensor(4, 3, &mut r);
    let mut tape = Tape::default();
    let xv = tape.constant(x);
    let a = gru_aggregate(&mut tape, &store, &gru, xv, &[0, 1, 2, 3]).unwrap();
    let b = gru_aggregate(&mut tape, &store, &gru, xv, &[1, 0, 2, 3]).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) > 1e-6);
}

fn small_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        layers: 2,
        hidden: 4,
        heads: 1,
        dropout: 0.0,
    }
}

fn embed(model: &TreeModel, store: &ParamStore, x: &Tensor, parent: &[Option<usize>], post: Vec<usize>) -> Tensor {
    let mut tape = Tape::default();
    let b = batch_with(&mut tape, x, parent, post);
    let y = model.forward(&mut tape, store, &b, &mut Mode::eval()).unwrap();
    tape.value(y).clone()
}

#[test]
fn bigg_is_invariant_to_node_relabeling() {
    let mut r = rng(21);
    for trial in 0..10 {
        let n = 3 + trial % 6;
        let mut store = ParamStore::new();
        let model = TreeModel::new(&mut store, &small_config(ModelKind::Bigg), 5, &mut r).unwrap();
        let parent = random_parents(n, 3, &mut r);
        let x = random_tensor(n, 5, &mut r);
        let base = embed(&model, &store, &x, &parent, dfs_postorder(&parent));

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        // Old row i moves to row perm[i].
        let mut px = vec![Vec::new(); n];
        let mut pparent = vec![None; n];
        for i in 0..n {
            px[perm[i]] = x.row_slice(i).to_vec();
            pparent[perm[i]] = parent[i].map(|p| perm[p]);
        }
        let ppost = dfs_postorder(&parent).into_iter().map(|i| perm[i]).collect();
        let moved = embed(&model, &store, &Tensor::from_rows(&px).unwrap(), &pparent, ppost);
        assert!(base.max_abs_diff(&moved) <= 1e-9, "trial {trial}");
    }
}

#[test]
fn bigg_with_p_one_reduces_to_child_to_parent_stack() {
    let mut r = rng(22);
    let mut bstore = ParamStore::new();
    let bigg = TreeModel::new(&mut bstore, &small_config(ModelKind::Bigg), 5, &mut r).unwrap();
    for layer in bigg.bi_layers() {
        bstore.set_tensor(layer.mix, Tensor::scalar(1.0)).unwrap();
    }
    let mut sstore = ParamStore::new();
    let single = TreeModel::new(&mut sstore, &small_config(ModelKind::GnnGruSingle), 5, &mut r).unwrap();
    copy_by_name(&bstore, &mut sstore);

    let parent = random_parents(7, 3, &mut r);
    let x = random_tensor(7, 5, &mut r);
    // Separate tapes: parameter nodes are cached per store id.
    let run = |model: &TreeModel, store: &ParamStore| {
        let mut tape = Tape::default();
        let b = batch(&mut tape, &x, &parent);
        let s = model.node_states(&mut tape, store, &b, &mut Mode::eval()).unwrap();
        let e = model.forward(&mut tape, store, &b, &mut Mode::eval()).unwrap();
        (tape.value(s).clone(), tape.value(e).clone())
    };
    let (a, ea) = run(&bigg, &bstore);
    let (s, es) = run(&single, &sstore);
    assert!(a.bitwise_eq(&s));
    assert!(ea.bitwise_eq(&es));
}

#[test]
fn zero_layers_is_gru_over_raw_features() {
    let mut r = rng(23);
    let mut cfg = small_config(ModelKind::Bigg);
    cfg.layers = 0;
    let mut store = ParamStore::new();
    let model = TreeModel::new(&mut store, &cfg, 3, &mut r).unwrap();
    let mut gstore = ParamStore::new();
    let gru_model = TreeModel::new(&mut gstore, &small_config(ModelKind::Gru), 3, &mut r).unwrap();

    let parent = random_parents(5, 2, &mut r);
    let x = random_tensor(5, 3, &mut r);
    let post = dfs_postorder(&parent);
    let seq: Vec<Vec<f64>> = post.iter().map(|&i| x.row_slice(i).to_vec()).collect();
    let got = embed(&model, &store, &x, &parent, post.clone());
    let want = gru_oracle(&store, model.readout_gru().unwrap(), &seq);
    assert!(max_diff(got.data(), &want) < 1e-12);
    let got = embed(&gru_model, &gstore, &x, &parent, post);
    let want = gru_oracle(&gstore, gru_model.readout_gru().unwrap(), &seq);
    assert!(max_diff(got.data(), &want) < 1e-12);
}

#[test]
fn undirected_nodes_see_each_other() {
    let mut r = rng(24);
    let x = random_tensor(2, 3, &mut r);
    let mut moved = x.clone();
    moved.data_mut()[0] += 1.0; // perturb the root (row 0)
    let parent = [None, Some(0)];
    let child_state = |kind: ModelKind, r: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        let mut cfg = small_config(kind);
        cfg.layers = 1;
        let model = TreeModel::new(&mut store, &cfg, 3, r).unwrap();
        let mut out = Vec::new();
        for feats in [&x, &moved] {
            let mut tape = Tape::default();
            let b = batch(&mut tape, feats, &parent);
            let s = model.node_states(&mut tape, &store, &b, &mut Mode::eval()).unwrap();
            out.push(tape.value(s).row_slice(1).to_vec());
        }
        max_diff(&out[0], &out[1])
    };
    assert_eq!(child_state(ModelKind::GnnGruSingle, &mut r), 0.0);
    assert!(child_state(ModelKind::GnnGruUndirected, &mut r) > 0.0);
}

#[test]
fn every_kind_produces_hidden_width() {
    let mut r = rng(25);
    let parent = [None, Some(0), Some(0), Some(1), Some(1)];
    let x = random_tensor(5, 6, &mut r);
    for kind in ModelKind::ALL {
        let mut store = ParamStore::new();
        let mut cfg = ModelConfig::new(kind);
        cfg.hidden = 7;
        let model = TreeModel::new(&mut store, &cfg, 6, &mut r).unwrap();
        let y = embed(&model, &store, &x, &parent, dfs_postorder(&parent));
        assert_eq!(y.shape(), &[1, 7], "{kind}");
        assert!(y.is_finite());
        assert_eq!(model.output_dim(), 7);
    }
}

#[test]
fn kind_names_round_trip_and_unknown_is_rejected() {
    for kind in ModelKind::ALL {
        assert_eq!(kind.as_str().parse::<ModelKind>().unwrap(), kind);
    }
    let err = "bigger".parse::<ModelKind>().unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("bigger") && msg.contains("tree_cnn"), "{msg}");
    assert_eq!(ModelKind::Bigg.label(), "Bidirectional GNN + GRU");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut r = rng(26);
    let mut cfg = small_config(ModelKind::BiggAddpool);
    cfg.layers = 0;
    assert!(TreeModel::new(&mut ParamStore::new(), &cfg, 3, &mut r).is_err());
    let mut cfg = small_config(ModelKind::Bigg);
    cfg.dropout = 1.0;
    assert!(TreeModel::new(&mut ParamStore::new(), &cfg, 3, &mut r).is_err());
}

#[test]
fn dropout_only_in_training_mode() {
    let mut r = rng(27);
    let mut cfg = small_config(ModelKind::Bigg);
    cfg.dropout = 0.5;
    let mut store = ParamStore::new();
    let model = TreeModel::new(&mut store, &cfg, 3, &mut r).unwrap();
    let parent = random_parents(5, 2, &mut r);
    let x = random_tensor(5, 3, &mut r);
    let a = embed(&model, &store, &x, &parent, dfs_postorder(&parent));
    let b = embed(&model, &store, &x, &parent, dfs_postorder(&parent));
    assert!(a.bitwise_eq(&b));
    let mut tape = Tape::default();
    let g = batch(&mut tape, &x, &parent);
    let mut drng = rng(99);
    let mut mode = Mode::train(0.5, &mut drng);
    assert!(mode.is_training());
    let t = model.forward(&mut tape, &store, &g, &mut mode).unwrap();
    assert!(tape.value(t).max_abs_diff(&a) > 0.0);
}

#[test]
fn every_kind_passes_grad_check() {
    let mut r = rng(28);
    for kind in ModelKind::ALL {
        for n in [3, 5, 8] {
            let mut store = ParamStore::new();
            let cfg = ModelConfig {
                kind,
                layers: 2,
                hidden: 3,
                heads: 1,
                dropout: 0.0,
            };
            let model = TreeModel::new(&mut store, &cfg, 4, &mut r).unwrap();
            let max_children = if kind.needs_binary_tree() { 2 } else { 3 };
            let parent = random_parents(n, max_children, &mut r);
            let x = random_tensor(n, 4, &mut r);
            let c = random_tensor(1, 3, &mut r);
            let report = grad_check(
                |tape, store| {
                    let b = batch(tape, &x, &parent);
                    let y = model.forward(tape, store, &b, &mut Mode::eval())?;
                    let cv = tape.constant(c.clone());
                    let prod = tape.mul(y, cv)?;
                    tape.sum(prod)
                },
                &store,
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(
                report.passed,
                "{kind} n={n}: {:.3e} at {:?}",
                report.max_relative_error, report.offending_parameter
            );
        }
    }
}
