use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seal_autodiff::gradcheck;
use seal_autodiff::{Graph, ParamStore};
use seal_core::nn::{Mode, Session};
use seal_core::omics::*;

fn rand_vec(rng: &mut ChaCha8Rng, d: usize, s: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-s..s)).collect()
}

/// Determinant by Gaussian elimination with partial pivoting.
fn det(mut a: Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[[i, c]].abs().partial_cmp(&a[[j, c]].abs()).unwrap()).unwrap();
        if a[[p, c]] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                a.swap([p, k], [c, k]);
            }
            d = -d;
        }
        d *= a[[c, c]];
        for r in c + 1..n {
            let f = a[[r, c]] / a[[c, c]];
            for k in c..n {
                a[[r, k]] -= f * a[[c, k]];
            }
        }
    }
    d
}

fn fd_jacobian(z: &[f64], p: &PlanarFlowParams) -> Array2<f64> {
    let d = z.len();
    let h = 1e-6;
    let mut j = Array2::zeros((d, d));
    for c in 0..d {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[c] += h;
        zm[c] -= h;
        let (fp, _) = planar_flow_step(&zp, p).unwrap();
        let (fm, _) = planar_flow_step(&zm, p).unwrap();
        for r in 0..d {
            j[[r, c]] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}

#[test]
fn reparameterize_examples() {
    let p = GaussianPosterior {
        mu: vec![0.3, -1.0],
        log_var: vec![0.0, 0.0],
    };
    assert_eq!(reparameterize(&p, &[0.0, 0.0]).unwrap(), p.mu);
    assert_eq!(reparameterize(&p, &[1.0, 2.0]).unwrap(), vec![1.3, 1.0]);
    let p = GaussianPosterior {
        mu: vec![0.0, 0.0],
        log_var: vec![2.0 * 2f64.ln(); 2],
    };
    let z = reparameterize(&p, &[1.0, -1.0]).unwrap();
    assert!((z[0] - 2.0).abs() < 1e-12 && (z[1] + 2.0).abs() < 1e-12);
    assert!(reparameterize(&p, &[1.0]).is_err());
}

#[test]
fn flow_step_examples() {
    let z = vec![0.4, -0.2, 1.1];
    let id = PlanarFlowParams {
        u: vec![0.0; 3],
        w: vec![0.7, -0.1, 0.3],
        b: 0.2,
    };
    let (zn, ld) = planar_flow_step(&z, &id).unwrap();
    assert_eq!(zn, z);
    assert_eq!(ld, 0.0);

    let p = PlanarFlowParams {
        u: vec![0.5, 0.0],
        w: vec![1.0, 0.0],
        b: 0.0,
    };
    let (zn, ld) = planar_flow_step(&[0.0, 0.0], &p).unwrap();
    assert_eq!(zn, vec![0.0, 0.0]);
    assert!((ld - 1.5f64.ln()).abs() < 1e-12);
    assert!((ld - 0.405465).abs() < 1e-6);
    let j = fd_jacobian(&[0.0, 0.0], &p);
    assert!((det(j) - 1.5).abs() < 1e-6);

    let sing = PlanarFlowParams {
        u: vec![-1.0, 0.0],
        w: vec![1.0, 0.0],
        b: 0.0,
    };
    assert!(planar_flow_step(&[0.0, 0.0], &sing).is_err());
    assert!(planar_flow_step(&[0.0], &p).is_err());
}

#[test]
fn log_det_matches_numerical_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let d = rng.random_range(1..=5);
        let p = PlanarFlowParams::projected(&rand_vec(&mut rng, d, 1.5), &rand_vec(&mut rng, d, 1.5), rng.random_range(-1.0..1.0));
        let z = rand_vec(&mut rng, d, 2.0);
        let (_, ld) = planar_flow_step(&z, &p).unwrap();
        let oracle = det(fd_jacobian(&z, &p)).abs();
        assert!((ld.exp() - oracle).abs() / oracle < 1e-5, "{} vs {oracle}", ld.exp());
    }
}

#[test]
fn apply_flows_examples() {
    let z0 = vec![0.1, 0.2, 0.3];
    let r = apply_flows(&z0, &[]).unwrap();
    assert_eq!((r.z_k.clone(), r.sum_log_det), (z0.clone(), 0.0));
    let r = apply_flows(&z0, &[PlanarFlowParams::identity(3), PlanarFlowParams::identity(3)]).unwrap();
    assert_eq!((r.z_k, r.sum_log_det), (z0.clone(), 0.0));
    let p = PlanarFlowParams::projected(&[0.3, -0.2, 0.5], &[0.4, 0.1, -0.6], 0.1);
    let (z1, ld) = planar_flow_step(&z0, &p).unwrap();
    let r = apply_flows(&z0, std::slice::from_ref(&p)).unwrap();
    assert_eq!((r.z_k, r.sum_log_det), (z1.clone(), ld));
    let r2 = apply_flows(&z0, &[p.clone(), p.clone()]).unwrap();
    let (z2, ld2) = planar_flow_step(&z1, &p).unwrap();
    assert_eq!(r2.z_k, z2);
    assert!((r2.sum_log_det - (ld + ld2)).abs() < 1e-15);
}

#[test]
fn regularizer_examples() {
    let flat = |mu: Vec<f64>| GaussianPosterior {
        log_var: vec![0.0; mu.len()],
        mu,
    };
    let none = |z: &[f64]| FlowResult {
        z_k: z.to_vec(),
        sum_log_det: 0.0,
    };
    assert_eq!(variational_regularizer(&flat(vec![0.0, 0.0]), &none(&[0.0, 0.0]), &[0.0, 0.0], 0), 0.0);
    assert!((variational_regularizer(&flat(vec![1.0, 0.0]), &none(&[1.0, 0.0]), &[1.0, 0.0], 0) - 0.5).abs() < 1e-15);

    // one identity flow: free energy equals the Monte Carlo KL estimate log q(z0) − log p(z0)
    let p = GaussianPosterior {
        mu: vec![0.4, -0.3, 1.0],
        log_var: vec![0.2, -0.5, 0.1],
    };
    let eps = [0.7, -1.2, 0.05];
    let z0 = reparameterize(&p, &eps).unwrap();
    let fr = apply_flows(&z0, &[PlanarFlowParams::identity(3)]).unwrap();
    let mc: f64 = (0..3)
        .map(|j| {
            let s2 = p.log_var[j].exp();
            let lq = -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * (z0[j] - p.mu[j]).powi(2) / s2;
            let lp = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z0[j] * z0[j];
            lq - lp
        })
        .sum();
    assert!((variational_regularizer(&p, &fr, &z0, 1) - mc).abs() < 1e-12);
}

#[test]
fn batched_graph_agrees_with_scalar_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, d) = (4, 3);
    let mu = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
    let lv = Array2::from_shape_fn((b, d), |_| rng.random_range(-0.5..0.5));
    let eps = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
    let raw: Vec<(Vec<f64>, Vec<f64>, f64)> =
        (0..2).map(|_| (rand_vec(&mut rng, d, 1.0), rand_vec(&mut rng, d, 1.0), rng.random_range(-0.5..0.5))).collect();

    let mut g = Graph::new();
    let muv = g.constant(mu.clone());
    let lvv = g.constant(lv.clone());
    let half = g.scale(lvv, 0.5);
    let sig = g.exp(half);
    let e = g.constant(eps.clone());
    let n = g.mul(sig, e);
    let mut z = g.add(muv, n);
    let mut total = None;
    for (u, w, bb) in &raw {
        let u = g.constant(Array2::from_shape_vec((1, d), u.clone()).unwrap());
        let w = g.constant(Array2::from_shape_vec((1, d), w.clone()).unwrap());
        let bb = g.constant_scalar(*bb);
        let uh = project_u_graph(&mut g, u, w);
        let (zn, ld) = planar_flow_graph(&mut g, z, uh, w, bb).unwrap();
        z = zn;
        total = Some(match total {
            Some(t) => g.add(t, ld),
            None => ld,
        });
    }
    let reg = regularizer_graph(&mut g, muv, lvv, &eps, z, total);

    let flows: Vec<PlanarFlowParams> = raw.iter().map(|(u, w, bb)| PlanarFlowParams::projected(u, w, *bb)).collect();
    let mut mean = 0.0;
    for i in 0..b {
        let p = GaussianPosterior {
            mu: mu.row(i).to_vec(),
            log_var: lv.row(i).to_vec(),
        };
        let z0 = reparameterize(&p, eps.row(i).as_slice().unwrap()).unwrap();
        let fr = apply_flows(&z0, &flows).unwrap();
        for j in 0..d {
            assert!((g.value(z)[[i, j]] - fr.z_k[j]).abs() < 1e-12);
        }
        mean += variational_regularizer(&p, &fr, &z0, flows.len()) / b as f64;
    }
    assert!((g.scalar(reg) - mean).abs() < 1e-10);

    let mut g = Graph::new();
    let muv = g.constant(mu.clone());
    let lvv = g.constant(lv.clone());
    let kl = regularizer_graph(&mut g, muv, lvv, &eps, muv, None);
    let oracle: f64 = (0..b)
        .map(|i| {
            let p = GaussianPosterior {
                mu: mu.row(i).to_vec(),
                log_var: lv.row(i).to_vec(),
            };
            variational_regularizer(&p, &FlowResult { z_k: p.mu.clone(), sum_log_det: 0.0 }, &p.mu, 0)
        })
        .sum::<f64>()
        / b as f64;
    assert!((g.scalar(kl) - oracle).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for d in [1usize, 3, 8] {
        let b = 3;
        let eps = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let inputs = vec![
            Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((b, d), |_| rng.random_range(-0.5..0.5)),
            Array2::from_shape_fn((1, d), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((1, d), |_| rng.random_range(-1.0..1.0)),
            Array2::from_elem((1, 1), 0.3),
        ];
        let target = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        for with_flow in [true, false] {
            let r = gradcheck::check(&inputs, 1e-5, 1e-6, |g, v| {
                let half = g.scale(v[1], 0.5);
                let sig = g.exp(half);
                let e = g.constant(eps.clone());
                let n = g.mul(sig, e);
                let z0 = g.add(v[0], n);
                let (zk, sld) = if with_flow {
                    let uh = project_u_graph(g, v[2], v[3]);
                    let (z1, l1) = planar_flow_graph(g, z0, uh, v[3], v[4]).unwrap();
                    let (z2, l2) = planar_flow_graph(g, z1, uh, v[3], v[4]).unwrap();
                    let l = g.add(l1, l2);
                    (z2, Some(l))
                } else {
                    (z0, None)
                };
                let reg = regularizer_graph(g, v[0], v[1], &eps, zk, sld);
                let t = g.constant(target.clone());
                let diff = g.sub(zk, t);
                let sq = g.square(diff);
                let rec = g.mean(sq);
                g.add(reg, rec)
            });
            assert!(r.max_rel_err < 1e-4, "d={d} flow={with_flow}: {r:?}");
        }
    }
}

fn tiny_model(n_flows: usize, hidden: Vec<usize>, seed: u64) -> (OmicsVae, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = *hidden.last().unwrap();
    let cfg = VaeConfig {
        input_dim: 7,
        hidden_dims: hidden,
        latent_dim: d,
        n_flows,
        encoder_dropout: 0.0,
        decoder_dropout: 0.0,
        beta_kl: 1e-2,
    };
    let m = OmicsVae::new(cfg, &mut store, "omics", &mut rng).unwrap();
    (m, store)
}

#[test]
fn zero_weights_give_standard_posterior_and_bias_output() {
    let (m, mut store) = tiny_model(2, vec![6, 4], 1);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get(id);
        if p.name.ends_with(".weight") || p.name.ends_with(".bias") {
            let shape = p.value.dim();
            store.set_value(id, Array2::zeros(shape));
        }
    }
    let out_bias = store.find("omics.out.bias").unwrap();
    store.set_value(out_bias, Array2::from_elem((1, 7), 0.25));
    let x = Array2::from_shape_fn((3, 7), |(i, j)| (i + j) as f64);
    for mode in [Mode::Train, Mode::Eval] {
        for p in m.posteriors(&store, &x, mode).unwrap() {
            assert_eq!(p.mu.len(), 4);
            assert!(p.mu.iter().chain(&p.log_var).all(|v| *v == 0.0));
        }
    }
    let mut s = Session::new(&store, Mode::Eval, 0);
    let z = s.graph.constant(Array2::from_shape_fn((2, 4), |(i, j)| (i * j) as f64));
    let y = m.decode(&mut s, z).unwrap();
    assert!(s.graph.value(y).iter().all(|v| *v == 0.25));
}

#[test]
fn eval_mode_is_deterministic_and_shapes_hold() {
    let (m, store) = tiny_model(3, vec![5, 3], 2);
    let row = Array1::from_vec(vec![0.5, 1.0, 0.0, 2.0, 0.1, 0.0, 3.0]);
    let x = Array2::from_shape_fn((4, 7), |(_, j)| row[j]);
    let ps = m.posteriors(&store, &x, Mode::Eval).unwrap();
    assert!(ps.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(ps[0].log_var.len(), 3);
    let e1 = m.embed(&store, &x).unwrap();
    let e2 = m.embed(&store, &x).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.dim(), (4, 3));
    let bad = Array2::zeros((2, 6));
    assert!(m.posteriors(&store, &bad, Mode::Eval).is_err());
}

#[test]
fn no_flows_leaves_z0_untouched() {
    let (m, store) = tiny_model(0, vec![4], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array2::from_shape_fn((5, 7), |_| rng.random_range(0.0..2.0));
    let eps = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
    let mut s = Session::new(&store, Mode::Train, 0);
    let xv = s.graph.constant(x);
    let out = m.forward(&mut s, xv, &eps).unwrap();
    assert!(out.sum_log_det.is_none());
    let (a, b) = (s.graph.value(out.z0), s.graph.value(out.z_k));
    assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(!s.buffer_updates.is_empty());
}

#[test]
fn config_validation() {
    let mut c = VaeConfig::new(100, 16);
    assert_eq!(c.hidden_dims, vec![1024, 16]);
    assert!(c.validate().is_ok());
    c.hidden_dims = vec![32];
    assert!(c.validate().is_err());
    c.hidden_dims = vec![16];
    c.encoder_dropout = 1.0;
    assert!(c.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn projected_flows_are_injective(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PlanarFlowParams::projected(&rand_vec(&mut rng, d, 4.0), &rand_vec(&mut rng, d, 4.0), rng.random_range(-2.0..2.0));
        let wu: f64 = p.u.iter().zip(&p.w).map(|(a, b)| a * b).sum();
        prop_assert!(wu >= -1.0 - 1e-12);
        let zs: Vec<Vec<f64>> = (0..40).map(|_| rand_vec(&mut rng, d, 3.0)).collect();
        let outs: Vec<Vec<f64>> = zs.iter().map(|z| planar_flow_step(z, &p).unwrap().0).collect();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        for i in 0..zs.len() {
            for j in i + 1..zs.len() {
                if dist(&zs[i], &zs[j]) > 1e-6 {
                    prop_assert!(dist(&outs[i], &outs[j]) > 1e-9);
                }
            }
        }
    }
}
