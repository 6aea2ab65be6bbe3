mod common;

use common::*;
use graphpose_core::model::aggregate::{gap_forward, FusedDims, Ltsa, PjMhsa};
use graphpose_core::model::head::{GraphBlock, MlpHead};
use graphpose_core::model::layers::{ChebConv, LayerNorm, Mhsa};
use graphpose_core::model::network::Head;
use graphpose_core::model::{graph_head_param_count, Aggregator, HeadKind, ModelConfig, Network, ParamStore};
use graphpose_core::skeleton::SkeletonGraph;
use graphpose_core::training::grad_check_network;
use rand::RngExt;

fn default_net(config: ModelConfig, seed: u64) -> Network<f64> {
    Network::new(config, SkeletonGraph::default_skeleton(), seed).unwrap()
}

fn tiny_net(config: ModelConfig, seed: u64) -> Network<f64> {
    let j = config.joints;
    Network::new(config, chain(j), seed).unwrap()
}

fn dims(d: usize, j: usize, a: usize, w: usize) -> FusedDims {
    FusedDims {
        channels: d,
        joints: j,
        antennas: a,
        steps: w,
    }
}

#[test]
fn encoder_default_shape_and_sharing() {
    let net = default_net(ModelConfig::default(), 1);
    let mut r = rng(2);
    let plane = normals(&mut r, 114 * 10);
    let z: Vec<f64> = plane.iter().chain(&plane).chain(&plane).copied().collect();
    let enc = net.encode(&z).unwrap();
    assert_eq!(enc.len(), 128 * 3 * 17 * 5);
    // (D1, A, J, W): identical slices give identical antenna outputs
    let jw = 17 * 5;
    for d in 0..128 {
        let base = &enc[(d * 3) * jw..(d * 3 + 1) * jw];
        for a in 1..3 {
            assert_eq!(base, &enc[(d * 3 + a) * jw..(d * 3 + a + 1) * jw]);
        }
    }
}

#[test]
fn encoder_with_zero_parameters_is_zero() {
    let c = ModelConfig::tiny();
    let mut net = tiny_net(c.clone(), 0);
    for p in net.params_mut().iter_mut() {
        p.value.fill(0.0);
    }
    let z = normals(&mut rng(3), net.input_len());
    assert!(net.encode(&z).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_rejects_wrong_input() {
    let net = tiny_net(ModelConfig::tiny(), 0);
    assert!(net.encode(&[0.0; 7]).is_err());
    assert!(net.forward(&[0.0; 7]).is_err());
}

#[test]
fn fusion_identity_and_bias() {
    let c = ModelConfig {
        fused_channels: 8,
        ..ModelConfig::tiny()
    };
    let mut net = tiny_net(c.clone(), 0);
    let fuse = net.fuse_layer().clone();
    {
        let w = net.params_mut().get_mut(fuse.weight);
        w.fill(0.0);
        for i in 0..8 {
            w[i * 8 + i] = 1.0;
        }
        net.params_mut().get_mut(fuse.bias).fill(0.0);
    }
    let (a, j, w) = (c.antennas, c.joints, c.compressed_frames);
    let enc = normals(&mut rng(4), 8 * a * j * w);
    let f1 = net.fuse_antennas(&enc);
    let fd = dims(8, j, a, w);
    for d in 0..8 {
        for ai in 0..a {
            for ji in 0..j {
                for wi in 0..w {
                    assert_eq!(f1[fd.at(d, ji, ai, wi)], enc[((d * a + ai) * j + ji) * w + wi]);
                }
            }
        }
    }
    net.params_mut().get_mut(fuse.weight).fill(0.0);
    let bias: Vec<f64> = (0..8).map(|d| d as f64 - 2.5).collect();
    net.params_mut().get_mut(fuse.bias).copy_from_slice(&bias);
    let f1 = net.fuse_antennas(&enc);
    for d in 0..8 {
        for i in 0..a * j * w {
            assert_eq!(f1[d * a * j * w + i], bias[d]);
        }
    }
}

fn ltsa_with(seed: u64) -> (ParamStore<f64>, Ltsa) {
    let mut store = ParamStore::new();
    let l = Ltsa::new(&mut store);
    store.initialize(seed);
    // non-zero biases too
    store.get_mut(l.temporal_bias)[0] = 0.3;
    store.get_mut(l.spatial_bias)[0] = -0.7;
    (store, l)
}

#[test]
fn temporal_attention_properties() {
    let (p, l) = ltsa_with(5);
    let mut r = rng(6);
    let fd = dims(6, 4, 3, 5);
    // constant along W
    let mut f1 = vec![0.0; fd.len()];
    for d in 0..6 {
        for j in 0..4 {
            for a in 0..3 {
                let v = normal(&mut r);
                for w in 0..5 {
                    f1[fd.at(d, j, a, w)] = v;
                }
            }
        }
    }
    let (ft, alpha, _) = l.temporal(&p, &f1, fd);
    assert!(alpha.iter().all(|&x| (x - 0.2).abs() < 1e-12));
    for d in 0..6 {
        for j in 0..4 {
            for a in 0..3 {
                assert!((ft[(d * 4 + j) * 3 + a] - f1[fd.at(d, j, a, 0)]).abs() < 1e-12);
            }
        }
    }
    // random input: normalization and loop oracle
    let f1 = normals(&mut r, fd.len());
    let (ft, alpha, _) = l.temporal(&p, &f1, fd);
    for row in alpha.chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&x| x >= 0.0));
    }
    for d in 0..6 {
        for j in 0..4 {
            for a in 0..3 {
                let mut s = 0.0;
                for w in 0..5 {
                    s += alpha[(j * 3 + a) * 5 + w] * f1[fd.at(d, j, a, w)];
                }
                assert!((s - ft[(d * 4 + j) * 3 + a]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn spatial_attention_properties() {
    let (p, l) = ltsa_with(7);
    let mut r = rng(8);
    let (dc, nj, na) = (5, 4, 3);
    let mut ft = vec![0.0; dc * nj * na];
    for d in 0..dc {
        for j in 0..nj {
            let v = normal(&mut r);
            for a in 0..na {
                ft[(d * nj + j) * na + a] = v;
            }
        }
    }
    let (_, beta, _) = l.spatial(&p, &ft, dc, nj, na);
    assert!(beta.iter().all(|&b| (b - 1.0 / 3.0).abs() < 1e-12));
    let ft = normals(&mut r, dc * nj * na);
    let (f2, beta, _) = l.spatial(&p, &ft, dc, nj, na);
    for row in beta.chunks(na) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    for d in 0..dc {
        for j in 0..nj {
            let s: f64 = (0..na).map(|a| beta[j * na + a] * ft[(d * nj + j) * na + a]).sum();
            assert!((s - f2[d * nj + j]).abs() < 1e-6);
        }
    }
}

#[test]
fn gap_matches_loop_and_uniform_ltsa() {
    let mut r = rng(9);
    let fd = dims(4, 3, 2, 5);
    let f1 = normals(&mut r, fd.len());
    let g = gap_forward(&f1, fd);
    assert_eq!(g.len(), 4 * 3);
    for d in 0..4 {
        for j in 0..3 {
            let mut s = 0.0;
            for a in 0..2 {
                for w in 0..5 {
                    s += f1[fd.at(d, j, a, w)];
                }
            }
            assert!((s / 10.0 - g[d * 3 + j]).abs() < 1e-6);
        }
    }
    // zero attention weights give constant logits, hence uniform weights
    let (mut p, l) = ltsa_with(1);
    p.get_mut(l.temporal_weight)[0] = 0.0;
    p.get_mut(l.spatial_weight)[0] = 0.0;
    let (f2, _) = l.forward(&p, &f1, fd);
    assert!(max_abs_diff(&f2, &g) < 1e-12);
}

#[test]
fn pj_mhsa_single_token_and_permutation_invariance() {
    let mut r = rng(10);
    let mut store = ParamStore::<f64>::new();
    let m = PjMhsa::new(&mut store, 4, 2);
    store.initialize(11);
    // single token: residual projection of V
    let fd = dims(4, 2, 1, 1);
    let f1 = normals(&mut r, fd.len());
    let (f2, _) = m.forward(&store, &f1, fd);
    for j in 0..2 {
        let x: Vec<f64> = (0..4).map(|d| f1[fd.at(d, j, 0, 0)]).collect();
        let v = m.attn.v.forward(&store, &x);
        let o = m.attn.o.forward(&store, &v);
        for d in 0..4 {
            assert!((f2[d * 2 + j] - (x[d] + o[d])).abs() < 1e-12);
        }
    }
    // permuting antenna-time tokens leaves the pooled output unchanged
    let fd = dims(4, 3, 2, 3);
    let f1 = normals(&mut r, fd.len());
    let (f2, _) = m.forward(&store, &f1, fd);
    assert_eq!(f2.len(), 4 * 3);
    let perm = random_permutation(&mut r, 6);
    let mut g1 = vec![0.0; fd.len()];
    for d in 0..4 {
        for j in 0..3 {
            for t in 0..6 {
                let (a, w) = (t / 3, t % 3);
                let (pa, pw) = (perm[t] / 3, perm[t] % 3);
                g1[fd.at(d, j, pa, pw)] = f1[fd.at(d, j, a, w)];
            }
        }
    }
    let (g2, _) = m.forward(&store, &g1, fd);
    assert!(max_abs_diff(&f2, &g2) < 1e-9);
}

#[test]
fn joint_embedding_is_layer_norm() {
    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut store, "embed", 64);
    store.initialize(0);
    let x = normals(&mut rng(12), 17 * 64);
    let (y, _) = ln.forward(&store, &x);
    assert_eq!(y.len(), 17 * 64);
    for row in y.chunks(64) {
        let m = row.iter().sum::<f64>() / 64.0;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4);
    }
    let (y, _) = ln.forward(&store, &[2.5; 64]);
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn cheb_conv_examples() {
    // K=1, identity weights, no bias
    let mut store = ParamStore::<f64>::new();
    let c = ChebConv::new(&mut store, "c", 1, 3, 3, false);
    for i in 0..3 {
        store.get_mut(c.theta)[i * 3 + i] = 1.0;
    }
    let g = chain(4);
    let x = normals(&mut rng(13), 12);
    let (y, _) = c.forward(&store, &g.cheb_basis(1).unwrap().to_scalar(), &x);
    assert_eq!(y, x);

    // K=2 on the two-node path
    let mut store = ParamStore::<f64>::new();
    let c = ChebConv::new(&mut store, "c", 2, 2, 2, false);
    store.get_mut(c.theta).copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    let g = chain(2);
    let (y, _) = c.forward(&store, &g.cheb_basis(2).unwrap().to_scalar(), &[1.0, 0.0, 0.0, 1.0]);
    assert!(max_abs_diff(&y, &[1.0, -1.0, -1.0, 1.0]) < 1e-12);
}

#[test]
fn cheb_conv_matches_spectral_evaluation() {
    let mut r = rng(14);
    for _ in 0..20 {
        let j = r.random_range(2..=10);
        let k = r.random_range(1..=5);
        let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
        let g = random_graph(&mut r, j);
        let mut store = ParamStore::<f64>::new();
        let c = ChebConv::new(&mut store, "c", k, cin, cout, false);
        store.initialize(r.random_range(0..1000));
        let x = normals(&mut r, j * cin);
        let (y, _) = c.forward(&store, &g.cheb_basis(k).unwrap().to_scalar(), &x);
        let xm = nalgebra::DMatrix::from_row_slice(j, cin, &x);
        let theta = store.get(c.theta);
        let mut expect = nalgebra::DMatrix::<f64>::zeros(j, cout);
        for (kk, tk) in spectral_cheb(g.rescaled_laplacian(), k).iter().enumerate() {
            let th = nalgebra::DMatrix::from_row_slice(cin, cout, &theta[kk * cin * cout..(kk + 1) * cin * cout]);
            expect += tk * &xm * th;
        }
        for r_ in 0..j {
            for o in 0..cout {
                assert!((y[r_ * cout + o] - expect[(r_, o)]).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn mhsa_examples() {
    let mut r = rng(15);
    let mut store = ParamStore::<f64>::new();
    let m = Mhsa::new(&mut store, "m", 8, 2);
    store.initialize(16);
    let x = normals(&mut r, 8);
    let (y, cache) = m.forward(&store, &x);
    assert!(cache.attention().iter().all(|a| a == &vec![1.0]));
    let o = m.o.forward(&store, &m.v.forward(&store, &x));
    for i in 0..8 {
        assert!((y[i] - x[i] - o[i]).abs() < 1e-12);
    }
    let x = normals(&mut r, 6 * 8);
    let (y, cache) = m.forward(&store, &x);
    for a in cache.attention() {
        for row in a.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let perm = random_permutation(&mut r, 6);
    let (yp, _) = m.forward(&store, &permute_rows(&x, 8, &perm));
    assert!(max_abs_diff(&yp, &permute_rows(&y, 8, &perm)) < 1e-9);
}

#[test]
fn zero_branches_make_a_block_the_identity() {
    let mut store = ParamStore::<f64>::new();
    let b = GraphBlock::new(&mut store, "b", 2, 16, 4, true);
    store.initialize(17);
    for id in [b.cheb1.theta, b.cheb2.theta, b.attn.o.weight] {
        store.get_mut(id).fill(0.0);
    }
    let g = chain(5);
    let x = normals(&mut rng(18), 5 * 16);
    let (y, _) = b.forward(&store, &g.cheb_basis(2).unwrap().to_scalar(), &x);
    assert_eq!(y, x);
}

#[test]
fn block_has_global_receptive_field() {
    let mut r = rng(19);
    let mut store = ParamStore::<f64>::new();
    let b = GraphBlock::new(&mut store, "b", 2, 128, 4, true);
    store.initialize(20);
    let g = SkeletonGraph::default_skeleton();
    let basis = g.cheb_basis(2).unwrap().to_scalar();
    let x = normals(&mut r, 17 * 128);
    let (y, _) = b.forward(&store, &basis, &x);
    assert_eq!(y.len(), 17 * 128);
    for _ in 0..100 {
        let src = r.random_range(0..17);
        let mut xp = x.clone();
        xp[src * 128 + r.random_range(0..128)] += 0.5;
        let (yp, _) = b.forward(&store, &basis, &xp);
        // every joint reacts, including those outside the 1-hop neighborhood
        for dst in 0..17 {
            let d = max_abs_diff(&y[dst * 128..(dst + 1) * 128], &yp[dst * 128..(dst + 1) * 128]);
            assert!(d > 0.0, "joint {dst} ignored a change at {src}");
        }
    }
}

#[test]
fn graph_head_counts_and_equivariance() {
    let net = default_net(ModelConfig::desk(), 21);
    assert_eq!(net.head().cheb_applications(), 10);
    let (y, trace) = net.forward_trace(&normals(&mut rng(22), net.input_len())).unwrap();
    assert_eq!(y.len(), 17 * 3);
    assert_eq!(trace.cheb_applications, 10);
    assert_eq!(trace.block_states.len(), 5);

    let mut r = rng(23);
    let g = net.graph();
    let f3 = normals(&mut r, 17 * 16);
    let base = net.head_forward(net.basis(), &f3);
    for _ in 0..20 {
        let perm = random_permutation(&mut r, 17);
        let gp = SkeletonGraph::new(17, &permute_edges(g.edges(), &perm)).unwrap();
        let basis_p = gp.cheb_basis(2).unwrap().to_scalar();
        let yp = net.head_forward(&basis_p, &permute_rows(&f3, 16, &perm));
        assert!(max_abs_diff(&yp, &permute_rows(&base, 3, &perm)) < 1e-6);
    }
}

#[test]
fn forward_is_deterministic_and_traced() {
    let net = default_net(ModelConfig::default(), 24);
    let z = normals(&mut rng(25), net.input_len());
    let (y, t) = net.forward_trace(&z).unwrap();
    assert_eq!(y.len(), 51);
    assert!(y.iter().all(|v| v.is_finite()));
    assert_eq!(y, net.forward(&z).unwrap());
    assert_eq!(t.fa.len(), 3 * 128 * 17 * 5);
    assert_eq!(t.f1.len(), 64 * 17 * 3 * 5);
    assert_eq!(t.alpha.as_ref().unwrap().len(), 17 * 3 * 5);
    assert_eq!(t.ft.as_ref().unwrap().len(), 64 * 17 * 3);
    assert_eq!(t.beta.as_ref().unwrap().len(), 17 * 3);
    assert_eq!(t.f2.len(), 64 * 17);
    assert_eq!(t.f3.len(), 17 * 64);
    assert!(t.block_states.iter().all(|s| s.len() == 17 * 128));
    for row in t.beta.unwrap().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    // same seed, same parameters
    let again = default_net(ModelConfig::default(), 24);
    assert_eq!(again.forward(&z).unwrap(), y);
}

#[test]
fn mlp_head_parity_and_bias_only_output() {
    let c = ModelConfig {
        head: HeadKind::Mlp,
        ..ModelConfig::default()
    };
    let net = default_net(c.clone(), 26);
    let graph = graph_head_param_count(&c);
    let mlp = net.head_param_count();
    assert!((mlp as f64 - graph as f64).abs() <= 0.1 * graph as f64, "{mlp} vs {graph}");
    assert_eq!(net.head().cheb_applications(), 0);

    let mut net = tiny_net(
        ModelConfig {
            head: HeadKind::Mlp,
            ..ModelConfig::tiny()
        },
        27,
    );
    let Head::Mlp(h) = net.head().clone() else { panic!("mlp head expected") };
    let bias: Vec<f64> = (0..15).map(|i| i as f64).collect();
    net.params_mut().get_mut(h.output.weight).fill(0.0);
    net.params_mut().get_mut(h.output.bias).copy_from_slice(&bias);
    let y = net.forward(&normals(&mut rng(28), net.input_len())).unwrap();
    assert_eq!(y, bias);
    assert!(MlpHead::width_for(10_000, 17, 64) >= 1);
}

#[test]
fn parameter_counts() {
    assert_eq!(ParamStore::<f32>::new().count(), 0);
    let net = default_net(ModelConfig::default(), 0);
    let brute: usize = net.params().iter().map(|p| p.value.shape().iter().product::<usize>()).sum();
    assert_eq!(brute, net.param_count());
    let f32net: Network<f32> = net.cast();
    assert_eq!(f32net.param_count(), net.param_count());
}

#[test]
fn gradients_match_finite_differences_for_every_variant() {
    for (agg, head) in [
        (Aggregator::Ltsa, HeadKind::Graph),
        (Aggregator::Gap, HeadKind::Graph),
        (Aggregator::PjMhsa, HeadKind::Graph),
        (Aggregator::Ltsa, HeadKind::Mlp),
    ] {
        let c = ModelConfig {
            aggregator: agg,
            head,
            ..ModelConfig::tiny()
        };
        let r = grad_check_network(c, 3, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{agg:?}/{head:?}: {} at {:?}", r.max_rel_error, r.worst);
    }
}
