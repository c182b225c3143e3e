use proptest::prelude::*;

use super::*;
use crate::netcore::{dense_backprop, evaluate, Affine, Layer, LayerSpec};
use crate::rng::{below, gaussian_matrix};

fn random_batch(n_in: usize, classes: usize, size: usize, seed: u64) -> Batch {
    let mut rng = stream(seed);
    let labels = (0..size).map(|_| below(&mut rng, classes)).collect();
    Batch::new(gaussian_matrix(n_in, size, seed ^ 0x5eed), labels).unwrap()
}

fn low_rank_net(widths: &[usize], ranks: &[usize], seed: u64) -> Network {
    let spec = NetworkSpec::mlp(widths, true).with_ranks(ranks).unwrap();
    let mut net = Network::build(&spec, seed).unwrap();
    for (k, l) in net.layers.iter_mut().enumerate() {
        let a = l.affine_mut().unwrap();
        a.bias = gaussian_matrix(a.bias.len(), 1, seed + 31 + k as u64).scaled(0.2).into_vec();
    }
    net
}

fn factors(net: &Network, k: usize) -> &LowRankFactors {
    net.layers[k].affine().unwrap().weight.as_low_rank().unwrap()
}

/// Same network with every low-rank weight replaced by its dense product.
fn densified(net: &Network) -> Network {
    let layers = net
        .layers
        .iter()
        .map(|l| match l {
            Layer::Linear(a) => Layer::Linear(Affine {
                weight: Weight::Dense(a.weight.to_dense()),
                bias: a.bias.clone(),
                activation: a.activation,
            }),
            other => other.clone(),
        })
        .collect();
    Network { layers }
}

fn dense_grads(net: &Network, batch: &Batch) -> Vec<Option<DenseGradient>> {
    let (_, tape) = forward(net, &batch.inputs, true).unwrap();
    dense_backprop(net, &tape.unwrap(), &batch.labels).unwrap()
}

#[test]
fn factor_gradients_are_projections_of_the_full_gradient() {
    let net = low_rank_net(&[7, 6, 5, 3], &[3, 2], 1);
    let batch = random_batch(7, 3, 9, 2);
    let full = dense_grads(&net, &batch);
    let kg = k_gradients(&net, &batch).unwrap();
    let lg = l_gradients(&net, &batch).unwrap();
    let sg = s_gradients(&net, &batch).unwrap();
    for k in [0, 1] {
        let f = factors(&net, k);
        let g = &full[k].as_ref().unwrap().weight;
        let want_k = g.matmul(&f.v).unwrap();
        let want_l = g.t_matmul(&f.u).unwrap();
        let want_s = f.u.t_matmul(&g.matmul(&f.v).unwrap()).unwrap();
        assert!(kg.layers[k].as_ref().unwrap().factor.max_abs_diff(&want_k) < 1e-10);
        assert!(lg.layers[k].as_ref().unwrap().factor.max_abs_diff(&want_l) < 1e-10);
        assert!(sg.layers[k].as_ref().unwrap().factor.max_abs_diff(&want_s) < 1e-10);
        let bias = &kg.layers[k].as_ref().unwrap().bias;
        for (a, b) in bias.iter().zip(&full[k].as_ref().unwrap().bias) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(kg.layers[2].is_none());
}

fn loss_of(net: &Network, batch: &Batch) -> f64 {
    evaluate(net, batch).unwrap().0
}

#[test]
fn k_and_s_gradients_match_finite_differences() {
    let net = low_rank_net(&[5, 6, 4, 3], &[3, 2], 3);
    let batch = random_batch(5, 3, 6, 4);
    let kg = k_gradients(&net, &batch).unwrap();
    let sg = s_gradients(&net, &batch).unwrap();
    let eps = 1e-6;
    for k in [0, 1] {
        let f = factors(&net, k).clone();
        let kmat = f.u.matmul(&f.s).unwrap();
        let r = f.rank();
        for i in 0..kmat.rows() {
            for j in 0..r {
                let perturbed = |h: f64| {
                    let mut n2 = net.clone();
                    let g = n2.layers[k].affine_mut().unwrap().weight.as_low_rank_mut().unwrap();
                    let mut km = kmat.clone();
                    km.row_mut(i)[j] += h;
                    g.u = km;
                    g.s = Matrix::identity(r);
                    loss_of(&n2, &batch)
                };
                let fd = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
                let an = kg.layers[k].as_ref().unwrap().factor[(i, j)];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "K[{i},{j}] fd {fd} vs {an}");
            }
        }
        for i in 0..r {
            for j in 0..r {
                let perturbed = |h: f64| {
                    let mut n2 = net.clone();
                    n2.layers[k].affine_mut().unwrap().weight.as_low_rank_mut().unwrap().s.row_mut(i)[j] += h;
                    loss_of(&n2, &batch)
                };
                let fd = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
                let an = sg.layers[k].as_ref().unwrap().factor[(i, j)];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "S[{i},{j}] fd {fd} vs {an}");
            }
        }
    }
}

#[test]
fn full_rank_euler_step_equals_dense_sgd_on_square_layers() {
    let lr = 0.1;
    let mut net = low_rank_net(&[6, 6, 6, 3], &[6, 6], 5);
    let batch = random_batch(6, 3, 10, 6);
    let dense = densified(&net);
    let grads = dense_grads(&dense, &batch);
    let mut states = OptimizerStates::new();
    dlrt_step(&mut net, &batch, &TruncationPolicy::Fixed, &IntegratorKind::euler(lr), &mut states).unwrap();
    for (k, layer) in net.layers.iter().enumerate() {
        let a = layer.affine().unwrap();
        let g = grads[k].as_ref().unwrap();
        let want = dense.layers[k].affine().unwrap().weight.to_dense().sub(&g.weight.scaled(lr)).unwrap();
        let diff = a.weight.to_dense().max_abs_diff(&want);
        assert!(diff < 1e-8, "layer {k}: {diff}");
    }
    assert_eq!(net.ranks(), vec![6, 6]);
}

#[test]
fn adaptive_basis_augmentation_preserves_the_weight() {
    let f = LowRankFactors::random(9, 7, Some(3), 8).unwrap();
    let k_new = gaussian_matrix(9, 3, 9);
    let l_new = gaussian_matrix(7, 3, 10);
    let b = basis_update(&f, &k_new, &l_new, true).unwrap();
    assert_eq!(b.u.shape(), (9, 6));
    assert_eq!(b.v.shape(), (7, 6));
    assert!(orthonormality_defect(&b.u) < 1e-12 && orthonormality_defect(&b.v) < 1e-12);
    let s_tilde = s_init(&f.s, &b.m, &b.n).unwrap();
    let w = b.u.matmul(&s_tilde).unwrap().matmul_t(&b.v).unwrap();
    assert!(w.max_abs_diff(&f.effective_weight()) < 1e-12);
}

#[test]
fn augmentation_caps_at_the_layer_dimension() {
    let f = LowRankFactors::random(5, 8, Some(4), 11).unwrap();
    let b = basis_update(&f, &gaussian_matrix(5, 4, 12), &gaussian_matrix(8, 4, 13), true).unwrap();
    assert_eq!(b.u.shape(), (5, 5));
    assert_eq!(b.v.shape(), (8, 8));
    let s_tilde = s_init(&f.s, &b.m, &b.n).unwrap();
    assert_eq!(s_tilde.shape(), (5, 8));
    let t = truncate(&s_tilde, &b.u, &b.v, RankSelection::Threshold { tau: 1e-3, r_min: 2, r_max: 5 }).unwrap();
    assert!(t.rank() <= 5);
}

#[test]
fn non_adaptive_basis_update_spans_k_and_l() {
    let f = LowRankFactors::random(8, 6, Some(3), 14).unwrap();
    let k_new = gaussian_matrix(8, 3, 15);
    let l_new = gaussian_matrix(6, 3, 16);
    let b = basis_update(&f, &k_new, &l_new, false).unwrap();
    assert_eq!(b.u.shape(), (8, 3));
    let proj = b.u.matmul(&b.u.t_matmul(&k_new).unwrap()).unwrap();
    assert!(proj.max_abs_diff(&k_new) < 1e-12);
    let proj = b.v.matmul(&b.v.t_matmul(&l_new).unwrap()).unwrap();
    assert!(proj.max_abs_diff(&l_new) < 1e-12);
}

#[test]
fn basis_update_rejects_mismatched_shapes() {
    let f = LowRankFactors::random(8, 6, Some(3), 17).unwrap();
    assert!(basis_update(&f, &gaussian_matrix(8, 2, 1), &gaussian_matrix(6, 3, 2), true).is_err());
    assert!(s_init(&f.s, &Matrix::zeros(3, 2), &Matrix::identity(3)).is_err());
}

#[test]
fn truncation_of_a_diagonal_core() {
    let s = Matrix::from_diag(&[1.0, 0.1, 0.01]);
    let norm = (1.0f64 + 0.01 + 0.0001).sqrt();
    let tau = 0.05 / norm;
    let eye = Matrix::identity(3);
    let t = truncate(&s, &eye, &eye, RankSelection::Threshold { tau, r_min: 1, r_max: 3 }).unwrap();
    assert_eq!(t.rank(), 2);
    assert!((t.threshold - 0.05).abs() < 1e-15);
    assert_eq!(t.s, Matrix::from_diag(&[1.0, 0.1]));
    let floor = truncate(&s, &eye, &eye, RankSelection::Threshold { tau: 0.5, r_min: 2, r_max: 3 }).unwrap();
    assert_eq!(floor.rank(), 2);
    let exact = truncate(&s, &eye, &eye, RankSelection::Exact(1)).unwrap();
    assert_eq!(exact.rank(), 1);
    assert!(truncate(&s, &eye, &eye, RankSelection::Exact(4)).is_err());
}

#[test]
fn rank_for_threshold_edges() {
    assert_eq!(rank_for_threshold(&[3.0, 2.0, 1.0], 0.0), 3);
    assert_eq!(rank_for_threshold(&[3.0, 2.0, 1.0], 1.0), 2);
    assert_eq!(rank_for_threshold(&[3.0, 2.0, 1.0], 5f64.sqrt()), 1);
    assert_eq!(rank_for_threshold(&[3.0, 2.0, 1.0], 100.0), 0);
    assert_eq!(rank_for_threshold(&[1.0, 0.0, 0.0], 0.0), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_error_is_bounded_by_the_threshold(
        rows in 2usize..9, cols in 2usize..9, seed in 0u64..10_000, tau in 0.01f64..0.9
    ) {
        let s = gaussian_matrix(rows, cols, seed);
        let (u, _) = qr_reduced(&gaussian_matrix(rows + 3, rows, seed + 1)).unwrap();
        let (v, _) = qr_reduced(&gaussian_matrix(cols + 2, cols, seed + 2)).unwrap();
        let k = rows.min(cols);
        let t = truncate(&s, &u, &v, RankSelection::Threshold { tau, r_min: 1, r_max: k }).unwrap();
        let before = u.matmul(&s).unwrap().matmul_t(&v).unwrap();
        let after = t.u.matmul(&t.s).unwrap().matmul_t(&t.v).unwrap();
        prop_assert!(after.sub(&before).unwrap().frobenius_norm() <= t.threshold + 1e-10);
        prop_assert!(orthonormality_defect(&t.u) < 1e-10 && orthonormality_defect(&t.v) < 1e-10);
        prop_assert!((1..=k).contains(&t.rank()));
    }
}

#[test]
fn fixed_rank_euler_descends_at_every_step() {
    let spec = NetworkSpec::mlp(&[8, 10, 10, 4], true).with_ranks(&[4, 4]).unwrap();
    let mut spec = spec;
    for l in spec.layers.iter_mut().take(2) {
        if let LayerSpec::Linear { activation, .. } = l {
            *activation = crate::netcore::Activation::Identity;
        }
    }
    let mut net = Network::build(&spec, 40).unwrap();
    let batch = random_batch(8, 4, 64, 41);
    let mut states = OptimizerStates::new();
    let mut prev = loss_of(&net, &batch);
    for step in 0..50 {
        dlrt_step(&mut net, &batch, &TruncationPolicy::Fixed, &IntegratorKind::euler(0.01), &mut states).unwrap();
        let loss = loss_of(&net, &batch);
        assert!(loss < prev, "step {step}: {loss} !< {prev}");
        assert_eq!(net.ranks(), vec![4, 4]);
        prev = loss;
    }
}

#[test]
fn adaptive_training_descends_and_keeps_invariants() {
    let mut net = low_rank_net(&[10, 12, 12, 4], &[6, 6], 18);
    let batch = random_batch(10, 4, 32, 19);
    let mut states = OptimizerStates::new();
    let policy = TruncationPolicy::Adaptive { tau: 0.05 };
    let initial = loss_of(&net, &batch);
    for _ in 0..50 {
        dlrt_step(&mut net, &batch, &policy, &IntegratorKind::euler(0.05), &mut states).unwrap();
        for k in net.low_rank_layers() {
            let f = factors(&net, k);
            assert!(orthonormality_defect(&f.u) < 1e-10 && orthonormality_defect(&f.v) < 1e-10);
            assert!((f.r_min..=f.r_max).contains(&f.rank()));
            assert_eq!(f.s.shape(), (f.rank(), f.rank()));
        }
    }
    let trained = loss_of(&net, &batch);
    assert!(trained < initial, "{trained} !< {initial}");
}

#[test]
fn adam_steps_with_rank_changes_stay_finite() {
    let mut net = low_rank_net(&[10, 12, 4], &[6], 20);
    let batch = random_batch(10, 4, 16, 21);
    let mut states = OptimizerStates::new();
    let policy = TruncationPolicy::Adaptive { tau: 0.3 };
    for _ in 0..10 {
        dlrt_step(&mut net, &batch, &policy, &IntegratorKind::adam(1e-2), &mut states).unwrap();
        let r = net.ranks()[0];
        let k_state = states.get(ParamId::new(0, ParamTag::K));
        assert!(k_state.is_none_or(|s| s.shape == (12, r) || s.shape.1 != r));
    }
    assert!(net.is_finite());
}

#[test]
fn zero_gradient_leaves_the_network_unchanged() {
    let mut net = low_rank_net(&[4, 5, 3], &[2], 22);
    // Saturate the head so the softmax is exactly one-hot on class 1 for every input.
    let head = net.layers[1].affine_mut().unwrap();
    head.weight = Weight::Dense(Matrix::zeros(3, 5));
    head.bias = vec![0.0, 1e3, 0.0];
    let batch = Batch::new(gaussian_matrix(4, 6, 23), vec![1; 6]).unwrap();
    let before = net.clone();
    let mut states = OptimizerStates::new();
    for policy in [TruncationPolicy::Fixed, TruncationPolicy::Adaptive { tau: 1e-9 }] {
        dlrt_step(&mut net, &batch, &policy, &IntegratorKind::euler(0.5), &mut states).unwrap();
        let w0 = before.layers[0].affine().unwrap().weight.to_dense();
        assert!(net.layers[0].affine().unwrap().weight.to_dense().max_abs_diff(&w0) < 1e-12);
        assert_eq!(net.layers[0].affine().unwrap().bias, before.layers[0].affine().unwrap().bias);
        assert_eq!(net.layers[1], before.layers[1]);
        assert_eq!(net.ranks(), vec![2]);
    }
}

#[test]
fn non_finite_gradients_are_reported() {
    let mut net = low_rank_net(&[4, 5, 3], &[2], 24);
    let mut inputs = gaussian_matrix(4, 3, 25);
    inputs.row_mut(0)[0] = f64::NAN;
    let batch = Batch::new(inputs, vec![0, 1, 2]).unwrap();
    let err = dlrt_step(
        &mut net,
        &batch,
        &TruncationPolicy::Fixed,
        &IntegratorKind::euler(0.1),
        &mut OptimizerStates::new(),
    );
    assert!(err.is_err());
}

#[test]
fn invalid_tau_is_rejected() {
    for tau in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(TruncationPolicy::Adaptive { tau }.validate().is_err());
    }
}

#[test]
fn factor_constructors_validate() {
    let f = LowRankFactors::random(6, 4, None, 26).unwrap();
    assert_eq!(f.rank(), 2);
    assert_eq!((f.r_min, f.r_max), (2, 4));
    assert!(LowRankFactors::random(6, 4, Some(5), 1).is_err());
    assert!(LowRankFactors::random(6, 4, Some(0), 1).is_err());
    let bad_u = gaussian_matrix(6, 2, 3);
    assert!(LowRankFactors::from_parts(bad_u, f.s.clone(), f.v.clone(), 1, 4).is_err());
    assert!(LowRankFactors::from_parts(f.u.clone(), f.s.clone(), f.v.clone(), 3, 4).is_err());
    let ok = LowRankFactors::from_parts(f.u.clone(), f.s.clone(), f.v.clone(), 1, 4).unwrap();
    assert_eq!(ok.effective_weight(), f.effective_weight());
}

#[test]
fn from_dense_keeps_the_leading_spectrum() {
    let w = gaussian_matrix(7, 5, 27);
    let f = LowRankFactors::from_dense(&w, 5).unwrap();
    assert!(f.effective_weight().max_abs_diff(&w) < 1e-10);
    let f2 = LowRankFactors::from_dense(&w, 2).unwrap();
    let svd = svd_small(&w);
    let tail = (svd.sigma[2..].iter().map(|x| x * x).sum::<f64>()).sqrt();
    let err = f2.effective_weight().sub(&w).unwrap().frobenius_norm();
    assert!((err - tail).abs() < 1e-10);
}

#[test]
fn parameter_counts_for_a_small_stack() {
    let spec = NetworkSpec::mlp(&[10, 8, 6, 3], true).with_ranks(&[4, 2]).unwrap();
    let c = parameter_counts(&spec);
    assert_eq!(c.full, 80 + 48 + 18);
    assert_eq!(c.eval, 4 * 18 + 2 * 14 + 18);
    assert_eq!(c.train, (2 * 4 * 18 + 64) + (2 * 2 * 14 + 16) + 18);
    assert!((c.eval_compression() - (1.0 - 118.0 / 146.0)).abs() < 1e-15);
    assert_eq!(step_cost_model(&spec), 16 * 18 + 4 * 14 + 18);
}

#[test]
fn deploy_form_matches_factored_logits() {
    let net = low_rank_net(&[9, 7, 6, 3], &[3, 2], 50);
    let deploy = net.to_deploy();
    assert_eq!(deploy.spec(), net.spec());
    let x = gaussian_matrix(9, 5, 51);
    let (a, _) = forward(&net, &x, false).unwrap();
    let (b, _) = forward(&deploy, &x, false).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-10);
    let batch = random_batch(9, 3, 4, 52);
    let mut d = deploy.clone();
    let err = dlrt_step(&mut d, &batch, &TruncationPolicy::Fixed, &IntegratorKind::euler(0.1), &mut OptimizerStates::new());
    assert!(err.is_err());
}
