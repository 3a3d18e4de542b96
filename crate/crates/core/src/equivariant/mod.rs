//! O(3)-equivariant layers: Vector-ReLU, feature mixing, radial-kernel
//! point convolution, GRU/vector aggregation, and stacked message passing.

pub mod geometry;
mod layers;
mod mp;

pub use layers::{
    default_means, inject_vn_fault, vn_fault, vn_relu, Gru, Linear, Mlp, ParamBuilder, RbfKernel,
    VnFault, VnLayer, VnMlp, VN_EPS,
};
pub use mp::{
    aggregate, aggregate_messages, messages, mix_features, AggParams, MessageParams, MfMpLayer,
    MfMpStack, MixParams, Mixed, MpConfig, MpGraph, NodeState,
};

#[cfg(test)]
mod tests {
    use super::geometry::{rotate_spatial, translate_rows, RigidTransform};
    use super::*;
    use crate::tensorcore::{
        finite_diff_check_with_params, ParamStore, Tape, Tensor, TensorError, Var,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn small_cfg() -> MpConfig {
        MpConfig {
            n_h: 6,
            n_v: 3,
            layers: 2,
            hidden: 8,
            vn_depth: 2,
        }
    }

    #[test]
    fn vn_relu_parallel_passes_and_antiparallel_vanishes() {
        let t = Tape::new();
        // One node, one channel, identity W; U = +1 or -1.
        let v = t.leaf(Tensor::new(vec![1, 3, 1], vec![0.3, -0.4, 1.2]).unwrap());
        let w = t.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let par = vn_relu(
            &t,
            v,
            w,
            t.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap()),
        )
        .unwrap();
        assert_eq!(par.value().data(), &[0.3, -0.4, 1.2]);
        let anti = vn_relu(
            &t,
            v,
            w,
            t.leaf(Tensor::new(vec![1, 1], vec![-1.0]).unwrap()),
        )
        .unwrap();
        assert!(anti.value().data().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn vn_relu_zero_key_passes_through() {
        let t = Tape::new();
        let v = t.leaf(Tensor::new(vec![1, 3, 1], vec![0.3, -0.4, 1.2]).unwrap());
        let w = t.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let out = vn_relu(
            &t,
            v,
            w,
            t.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap()),
        )
        .unwrap();
        assert_eq!(out.value().data(), &[0.3, -0.4, 1.2]);
    }

    #[test]
    fn vn_mlp_single_layer_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let one = VnMlp::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            "vn",
            &[4, 5],
        );
        let x = rand_tensor(&[3, 3, 4], &mut rng);
        let t = Tape::with_params(&store);
        let a = one.forward(&t, t.leaf(x.clone())).unwrap().value();
        let l = &one.layers[0];
        let b = vn_relu(&t, t.leaf(x), t.param(l.w), t.param(l.u))
            .unwrap()
            .value();
        assert_eq!(a, b);
        let z = one
            .forward(&t, t.leaf(Tensor::zeros(&[2, 3, 4])))
            .unwrap()
            .value();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rbf_peaks_at_mean_and_decays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let k = RbfKernel::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            "k",
            &default_means(),
            7,
        );
        let t = Tape::with_params(&store);
        let b = k
            .basis(&t, t.leaf(Tensor::vector(vec![1.5, 40.0])))
            .unwrap()
            .value();
        assert_eq!(b.data()[2], 1.0);
        assert!(b.data()[10..].iter().all(|&x| x < 1e-300));
        assert_eq!(
            k.forward(&t, t.leaf(Tensor::vector(vec![0.7])))
                .unwrap()
                .shape(),
            vec![1, 7]
        );
    }

    fn mp_fixture(seed: u64) -> (ParamStore, MfMpStack, MpGraph, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = small_cfg();
        let stack = MfMpStack::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            "mp",
            &cfg,
        );
        let g = MpGraph::from_undirected(5, &[(0, 1), (1, 2), (2, 3), (1, 4), (3, 4)]);
        let coords = Tensor::new(
            vec![5, 3],
            (0..15).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let h = rand_tensor(&[5, cfg.n_h], &mut rng);
        let v = rand_tensor(&[5, 3, cfg.n_v], &mut rng);
        (store, stack, g, coords, h, v)
    }

    fn run_stack(
        store: &ParamStore,
        stack: &MfMpStack,
        g: &MpGraph,
        c: &Tensor,
        h: &Tensor,
        v: &Tensor,
    ) -> (Tensor, Tensor) {
        let t = Tape::with_params(store);
        let s = NodeState {
            h: t.leaf(h.clone()),
            v: t.leaf(v.clone()),
        };
        let out = stack.forward(&t, g, t.leaf(c.clone()), s, true).unwrap();
        (out.h.value(), out.v.value())
    }

    /// Executable form of the layer lemma: invariant `h~`, equivariant `v~`.
    #[test]
    fn stack_is_e3_equivariant() {
        let (store, stack, g, c, h, v) = mp_fixture(9);
        let (h0, v0) = run_stack(&store, &stack, &g, &c, &h, &v);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let tr = RigidTransform::random(&mut rng, 5.0, None);
            let c2 = translate_rows(&rotate_spatial(&c, &tr.q), tr.t);
            let v2 = rotate_spatial(&v, &tr.q);
            let (h1, v1) = run_stack(&store, &stack, &g, &c2, &h, &v2);
            assert!(h1.max_abs_diff(&h0) < 1e-9);
            assert!(v1.max_abs_diff(&rotate_spatial(&v0, &tr.q)) < 1e-9);
        }
    }

    #[test]
    fn empty_edge_set_updates_by_gru_only() {
        let (store, stack, _, c, h, v) = mp_fixture(4);
        let g = MpGraph::from_undirected(5, &[]);
        let t = Tape::with_params(&store);
        let l = &stack.layers[0];
        let s = NodeState {
            h: t.leaf(h.clone()),
            v: t.leaf(v.clone()),
        };
        let out = l.forward(&t, &g, t.leaf(c), s, true).unwrap();
        let zero = t.leaf(Tensor::zeros(&[5, 6]));
        let want = l.agg.gru.forward(&t, t.leaf(h), zero).unwrap();
        assert_eq!(out.h.value(), want.value());
    }

    #[test]
    fn neighbour_order_is_irrelevant() {
        let (store, stack, g, c, h, v) = mp_fixture(12);
        let (h0, v0) = run_stack(&store, &stack, &g, &c, &h, &v);
        let rev = MpGraph {
            n: g.n,
            src: g.src.iter().rev().copied().collect(),
            dst: g.dst.iter().rev().copied().collect(),
        };
        let (h1, v1) = run_stack(&store, &stack, &rev, &c, &h, &v);
        assert!(h1.max_abs_diff(&h0) < 1e-12 && v1.max_abs_diff(&v0) < 1e-12);
    }

    #[test]
    fn coincident_nodes_drop_geometric_term() {
        let (store, stack, _, _, h, v) = mp_fixture(13);
        let g = MpGraph::from_undirected(2, &[(0, 1)]);
        let t = Tape::with_params(&store);
        let l = &stack.layers[0];
        let st = NodeState {
            h: t.leaf(h.clone()).narrow(0, 0, 2).unwrap(),
            v: t.leaf(v.clone()).narrow(0, 0, 2).unwrap(),
        };
        let mixed = mix_features(&t, &l.mix, st, true).unwrap();
        let c = t.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
        let (_, mv) = messages(&t, &l.msg, &g, &mixed, c).unwrap().unwrap();
        let d0 = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let k2 = l.msg.ker2.forward(&t, d0).unwrap();
        let want = k2
            .expand(1, 3)
            .unwrap()
            .mul(&mixed.v1.gather(&g.src).unwrap())
            .unwrap();
        assert!(mv.value().max_abs_diff(&want.value()) < 1e-15);
    }

    #[test]
    fn mix_with_zero_v() {
        let (store, stack, _, _, h, _) = mp_fixture(14);
        let t = Tape::with_params(&store);
        let st = NodeState {
            h: t.leaf(h),
            v: t.leaf(Tensor::zeros(&[5, 3, 3])),
        };
        let m = mix_features(&t, &stack.layers[0].mix, st, true).unwrap();
        assert!(m.v1.value().data().iter().all(|&x| x == 0.0));
    }

    type Loss = dyn for<'t> Fn(&'t Tape<'t>, Var<'t>) -> Result<Var<'t>, TensorError>;

    /// Gradient check that retries fresh inputs when one lands within 1e-3
    /// of the Vector-ReLU kink.
    fn check_away_from_kink(store: &ParamStore, f: &Loss, shape: &[usize], seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let x = rand_tensor(shape, &mut rng);
            let (err, margin) = finite_diff_check_with_params(store, f, &x, 1e-5).unwrap();
            if margin > 1e-3 {
                return err;
            }
        }
        panic!("no input found away from the kink");
    }

    fn fixed(shape: &[usize], seed: u64) -> Tensor {
        rand_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let (store, stack, g, c, h, v) = mp_fixture(21);
        let l = stack.layers[0].clone();
        let (hc, vc) = (h.clone(), v.clone());

        let lv = l.clone();
        let vn: Box<Loss> = Box::new(move |t, x| {
            let y = lv.agg.vn4.forward(t, x)?;
            y.mul(&t.leaf(fixed(&[5, 3, 3], 1)))?.sum()
        });
        assert!(check_away_from_kink(&store, vn.as_ref(), &[5, 3, 6], 1) < 1e-4);

        let lm = l.clone();
        let hm = hc.clone();
        let mix: Box<Loss> = Box::new(move |t, x| {
            let m = mix_features(
                t,
                &lm.mix,
                NodeState {
                    h: t.leaf(hm.clone()),
                    v: x,
                },
                true,
            )?;
            let a = m.h1.mul(&t.leaf(fixed(&[5, 6], 2)))?.sum()?;
            let b = m.h2.mul(&t.leaf(fixed(&[5, 3], 3)))?.sum()?;
            let c = m.v1.mul(&t.leaf(fixed(&[5, 3, 3], 4)))?.sum()?;
            a.add(&b)?.add(&c)
        });
        assert!(check_away_from_kink(&store, mix.as_ref(), &[5, 3, 3], 2) < 1e-4);

        let (lg, gg, hg, vg) = (l.clone(), g.clone(), hc.clone(), vc.clone());
        let msg: Box<Loss> = Box::new(move |t, x| {
            let m = mix_features(
                t,
                &lg.mix,
                NodeState {
                    h: t.leaf(hg.clone()),
                    v: t.leaf(vg.clone()),
                },
                true,
            )?;
            let (mh, mv) = messages(t, &lg.msg, &gg, &m, x)?.unwrap();
            let a = mh.mul(&t.leaf(fixed(&[10, 6], 5)))?.sum()?;
            a.add(&mv.mul(&t.leaf(fixed(&[10, 3, 3], 6)))?.sum()?)
        });
        assert!(check_away_from_kink(&store, msg.as_ref(), &[5, 3], 3) < 1e-4);

        let (la, ga, ca, va) = (l.clone(), g.clone(), c.clone(), vc.clone());
        let agg: Box<Loss> = Box::new(move |t, x| {
            let s = NodeState {
                h: x,
                v: t.leaf(va.clone()),
            };
            let out = la.forward(t, &ga, t.leaf(ca.clone()), s, true)?;
            let a = out.h.mul(&t.leaf(fixed(&[5, 6], 7)))?.sum()?;
            a.add(&out.v.mul(&t.leaf(fixed(&[5, 3, 3], 8)))?.sum()?)
        });
        assert!(check_away_from_kink(&store, agg.as_ref(), &[5, 6], 4) < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn vn_relu_is_o3_equivariant(seed in any::<u64>(), reflect in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = rand_tensor(&[4, 3, 5], &mut rng);
            let w = rand_tensor(&[5, 6], &mut rng);
            let u = rand_tensor(&[5, 6], &mut rng);
            let tr = RigidTransform::random(&mut rng, 0.0, Some(reflect));
            let t = Tape::new();
            let run = |x: &Tensor| vn_relu(&t, t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(u.clone())).unwrap().value();
            let a = rotate_spatial(&run(&v), &tr.q);
            let b = run(&rotate_spatial(&v, &tr.q));
            prop_assert!(a.max_abs_diff(&b) < 1e-10);
        }

        #[test]
        fn mixing_and_messages_transform_correctly(seed in any::<u64>()) {
            let (store, stack, g, c, h, v) = mp_fixture(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
            let tr = RigidTransform::random(&mut rng, 4.0, None);
            let l = &stack.layers[0];
            let eval = |c: &Tensor, v: &Tensor| {
                let t = Tape::with_params(&store);
                let s = NodeState { h: t.leaf(h.clone()), v: t.leaf(v.clone()) };
                let m = mix_features(&t, &l.mix, s, true).unwrap();
                let (mh, mv) = messages(&t, &l.msg, &g, &m, t.leaf(c.clone())).unwrap().unwrap();
                (m.h1.value(), m.h2.value(), m.v1.value(), mh.value(), mv.value())
            };
            let base = eval(&c, &v);
            let moved = eval(&translate_rows(&rotate_spatial(&c, &tr.q), tr.t), &rotate_spatial(&v, &tr.q));
            prop_assert!(moved.0.max_abs_diff(&base.0) < 1e-10);
            prop_assert!(moved.1.max_abs_diff(&base.1) < 1e-10);
            prop_assert!(moved.2.max_abs_diff(&rotate_spatial(&base.2, &tr.q)) < 1e-10);
            prop_assert!(moved.3.max_abs_diff(&base.3) < 1e-10);
            prop_assert!(moved.4.max_abs_diff(&rotate_spatial(&base.4, &tr.q)) < 1e-10);
        }
    }
}
