use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seal_autodiff::gradcheck::check;
use seal_autodiff::{AdamW, Graph, Mat, ParamStore, StepGroup, Var};

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn assert_grad<F: Fn(&mut Graph, &[Var]) -> Var>(inputs: &[Mat], f: F) {
    let res = check(inputs, 1e-5, 1e-6, f);
    assert!(res.max_rel_err < 1e-4, "rel err {:?}", res);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_mat(&mut rng, 3, 4);
    let b = rand_mat(&mut rng, 3, 4).mapv(|v| v.abs() + 0.5);
    let row = rand_mat(&mut rng, 1, 4);
    let col = rand_mat(&mut rng, 3, 1);
    assert_grad(&[a.clone(), b.clone()], |g, v| {
        let x = g.add(v[0], v[1]);
        let y = g.mul(x, v[0]);
        let z = g.div(y, v[1]);
        let w = g.sub(z, v[0]);
        let t = g.tanh(w);
        g.sum(t)
    });
    assert_grad(&[a.clone(), row.clone(), col.clone()], |g, v| {
        let x = g.add(v[0], v[1]);
        let y = g.mul(x, v[2]);
        let z = g.div(y, v[1]);
        let s = g.sigmoid(z);
        let q = g.square(s);
        g.sum(q)
    });
    assert_grad(&[a.clone()], |g, v| {
        let e = g.exp(v[0]);
        let l = g.add_scalar(e, 1.0);
        let l = g.log(l);
        let s = g.softplus(l);
        let r = g.sqrt(s);
        let ge = g.gelu(v[0]);
        let m = g.mul(r, ge);
        let ab = g.abs(v[0]);
        let m = g.add(m, ab);
        let m = g.scale(m, 0.3);
        g.mean(m)
    });
}

#[test]
fn matrix_and_structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_mat(&mut rng, 3, 4);
    let b = rand_mat(&mut rng, 4, 2);
    assert_grad(&[a.clone(), b.clone()], |g, v| {
        let m = g.matmul(v[0], v[1]);
        let t = g.transpose(m);
        let sr = g.sum_rows(t);
        let sc = g.sum_cols(t);
        let q = g.square(sr);
        let w = g.square(sc);
        let x = g.sum(q);
        let y = g.sum(w);
        g.add(x, y)
    });
    assert_grad(&[a.clone()], |g, v| {
        let ls = g.log_softmax(v[0]);
        let picked = g.gather_rows(ls, &[2, 0, 2]);
        let sl = g.slice_cols(picked, 1, 3);
        let c = g.concat_rows(&[sl, sl]);
        let d = g.concat_cols(&[c, c]);
        let s = g.square(d);
        g.sum(s)
    });
}

#[test]
fn fused_layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_mat(&mut rng, 5, 4);
    let gamma = rand_mat(&mut rng, 1, 4);
    let beta = rand_mat(&mut rng, 1, 4);
    let w = rand_mat(&mut rng, 5, 4);
    assert_grad(&[x.clone(), gamma.clone(), beta.clone(), w.clone()], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
        let p = g.mul(y, v[3]);
        g.sum(p)
    });
    assert_grad(&[x.clone(), gamma.clone(), beta.clone(), w.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5);
        let p = g.mul(y, v[3]);
        g.sum(p)
    });
    assert_grad(&[x.clone(), w.clone()], |g, v| {
        let y = g.normalize_rows(v[0]);
        let z = g.normalize_cols(v[0], 1e-8);
        let p = g.mul(y, v[1]);
        let q = g.mul(z, v[1]);
        let s = g.add(p, q);
        g.sum(s)
    });
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (batch, tokens, width) = (2, 3, 4);
    let q = rand_mat(&mut rng, batch * tokens, width);
    let k = rand_mat(&mut rng, batch * tokens, width);
    let v = rand_mat(&mut rng, batch * tokens, width);
    let w = rand_mat(&mut rng, batch * tokens, width);
    assert_grad(&[q, k, v, w], |g, x| {
        let o = g.attention(x[0], x[1], x[2], batch, tokens, 2);
        let p = g.mul(o, x[3]);
        g.sum(p)
    });
}

#[test]
fn grl_is_identity_forward_and_negated_backward() {
    let x = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let r = g.grl(v, 0.7);
    assert_eq!(g.value(r), &x);
    let sq = g.square(r);
    let s = g.sum(sq);
    let grads = g.backward(s);
    let expect = x.mapv(|t| -0.7 * 2.0 * t);
    assert_eq!(grads.get(v).unwrap(), &expect);
}

#[test]
fn frozen_params_get_no_gradient_and_are_not_updated() {
    let mut store = ParamStore::new();
    let w = store.add("w", Array2::from_elem((2, 2), 0.5), true);
    let f = store.add("f", Array2::from_elem((2, 2), 0.25), false);
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let fv = g.param(&store, f);
    assert_eq!(g.param(&store, w), wv);
    let p = g.mul(wv, fv);
    let s = g.sum(p);
    let grads = g.backward(s);
    assert!(grads.get(fv).is_none());
    let pg = grads.param_grads(&g);
    assert_eq!(pg.len(), 1);
    let mut opt = AdamW::default();
    let before = store.value(f).clone();
    opt.step(&mut store, &pg, |_| StepGroup { lr: 0.1, weight_decay: 0.0 });
    assert_eq!(store.value(f), &before);
    assert!(store.value(w)[[0, 0]] < 0.5);
}
