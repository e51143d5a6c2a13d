use super::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn zero_mlp(dims: &[usize]) -> MlpParams {
    let layers = dims
        .windows(2)
        .map(|d| LayerParams {
            w: Array2::zeros((d[0], d[1])),
            b: Array2::zeros((1, d[1])),
        })
        .collect();
    MlpParams { layers }
}

#[test]
fn zero_params_give_zero_raw_output() {
    let actor = ActorNet { mlp: zero_mlp(&[STATE_DIM, HIDDEN, HIDDEN, 2]), bounds: ActionBounds::default() };
    let mut state = [0.0; STATE_DIM];
    for (i, v) in state.iter_mut().enumerate() {
        *v = (i as f64) * 0.3 - 5.0;
    }
    let raw = actor.forward_raw(&RLState(state));
    assert_eq!(raw, [0.0, 0.0]);
    // Squash of zero lands at the box center.
    let u = actor.squash(raw);
    assert_eq!(u.delta, 0.0);
    assert!((u.a - (-0.75)).abs() < 1e-15);
}

#[test]
fn single_unit_elu_fixture() {
    // x=0.6 -> w=0.5, b=-1 -> elu(-0.7) -> w=2, b=0.1.
    // elu(-0.7) = exp(-0.7) - 1, evaluated independently to 17 digits.
    let mlp = MlpParams {
        layers: vec![
            LayerParams {
                w: Array2::from_elem((1, 1), 0.5),
                b: Array2::from_elem((1, 1), -1.0),
            },
            LayerParams {
                w: Array2::from_elem((1, 1), 2.0),
                b: Array2::from_elem((1, 1), 0.1),
            },
        ],
    };
    let y = mlp.forward(&[0.6]).unwrap();
    assert!((y[0] - (-0.90682939241718097)).abs() < 1e-15);
}

#[test]
fn forward_rejects_wrong_dimension() {
    let mlp = zero_mlp(&[4, 8, 2]);
    assert!(matches!(
        mlp.forward(&[1.0, 2.0, 3.0]),
        Err(NnError::DimMismatch { got: 3, want: 4 })
    ));
}

#[test]
fn actor_output_always_in_bounds() {
    let bounds = ActionBounds::default();
    let mut r = rng(5);
    let actor = ActorNet::init(&mut r, bounds);
    for _ in 0..10_000 {
        let mut s = [0.0; STATE_DIM];
        for v in &mut s {
            *v = r.random_range(-120.0..120.0);
        }
        let u = actor.act(&RLState(s));
        assert!(u.delta.abs() <= bounds.delta_max);
        assert!(u.a >= bounds.a_min && u.a <= bounds.a_max);
    }
}

#[test]
fn tape_gradient_of_half_squared_norm_is_identity() {
    let mut r = rng(7);
    let w = Array2::from_shape_fn((4, 3), |_| r.random_range(-2.0..2.0));
    let mut tape = Tape::new();
    let leaf = tape.leaf(w.clone());
    let sq = tape.square(leaf);
    let sum = tape.sum_all(sq);
    let loss = tape.scale(sum, 0.5);
    let mut grads = tape.backward(loss);
    let g = grads.take_or_zeros(leaf, (4, 3));
    assert_eq!(g, w);
}

#[test]
fn tape_gradient_of_constant_loss_is_zero() {
    let mut tape = Tape::new();
    let p = tape.leaf(Array2::from_elem((2, 2), 3.0));
    let c = tape.constant_scalar(5.0);
    let loss = tape.scale(c, 2.0);
    let grads = tape.backward(loss);
    assert!(grads.get(p).is_none());
}

#[test]
fn relu_subgradient_at_kink_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array2::from_elem((1, 1), 0.0));
    let y = tape.relu(x);
    let loss = tape.sum_all(y);
    let mut grads = tape.backward(loss);
    let g = grads.take_or_zeros(x, (1, 1));
    assert_eq!(g[[0, 0]], 0.0);
}

/// Central finite difference of a scalar function of a flat parameter
/// vector.
fn central_fd(mut f: impl FnMut(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(at.len());
    let mut p = at.to_vec();
    for k in 0..at.len() {
        let save = p[k];
        p[k] = save + h;
        let up = f(&p);
        p[k] = save - h;
        let dn = f(&p);
        p[k] = save;
        g.push((up - dn) / (2.0 * h));
    }
    g
}

#[test]
fn mlp_tape_gradient_matches_finite_differences() {
    let dims = [4usize, 8, 8, 2];
    let mut r = rng(11);
    let mlp = MlpParams::init(&dims, &mut r);
    let input = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));

    let loss_of = |v: &[f64]| {
        let mut m = mlp.clone();
        m.set_from_vector(v);
        let mut tape = Tape::new();
        let leaves = m.leaves(&mut tape);
        let x = tape.constant(input.clone());
        let y = m.forward_tape(&mut tape, &leaves, x);
        let t = tape.tanh(y);
        let sq = tape.square(t);
        let loss = tape.mean_all(sq);
        tape.scalar(loss)
    };

    let base = mlp.to_vector();
    let fd = central_fd(loss_of, &base, 1e-6);

    let mut tape = Tape::new();
    let leaves = mlp.leaves(&mut tape);
    let x = tape.constant(input.clone());
    let y = mlp.forward_tape(&mut tape, &leaves, x);
    let t = tape.tanh(y);
    let sq = tape.square(t);
    let loss = tape.mean_all(sq);
    let mut grads = tape.backward(loss);

    let mut ad: Vec<f64> = Vec::new();
    for (li, l) in mlp.layers.iter().enumerate() {
        let gw = grads.take_or_zeros(leaves[2 * li], l.w.dim());
        let gb = grads.take_or_zeros(leaves[2 * li + 1], l.b.dim());
        ad.extend(gw.iter());
        ad.extend(gb.iter());
    }
    assert_eq!(ad.len(), fd.len());
    for (k, (a, f)) in ad.iter().zip(fd.iter()).enumerate() {
        let tol = 1e-6 * a.abs().max(1.0);
        assert!((a - f).abs() < tol, "param {k}: ad {a} fd {f}");
    }
}

#[test]
fn odd_ops_gradients_match_finite_differences() {
    // div, sqrt_guard, min, clamp, abs, wrap, elu, sin, cos away from kinks.
    let a0 = [0.3, -0.8, 1.7, -1.2, 0.9];
    let b0 = [1.1, 0.6, -0.9, 2.0, -1.4];
    let f = |v: &[f64]| {
        let (av, bv) = v.split_at(5);
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::from_shape_vec((5, 1), av.to_vec()).unwrap());
        let b = tape.leaf(Array2::from_shape_vec((5, 1), bv.to_vec()).unwrap());
        let q = tape.div(a, b);
        let s1 = tape.square(a);
        let s2 = tape.square(b);
        let s = tape.add(s1, s2);
        let s = tape.offset(s, 0.1);
        let root = tape.sqrt_guard(s);
        let m = tape.min(a, b);
        let cl = tape.clamp(a, -0.5, 0.7);
        let ab = tape.abs(b);
        let sc = tape.scale(b, 1.3);
        let w = tape.wrap_angle(sc);
        let e = tape.elu(a);
        let sn = tape.sin(a);
        let cs = tape.cos(b);
        let mut acc = q;
        for t in [root, m, cl, ab, w, e, sn, cs] {
            acc = tape.add(acc, t);
        }
        let sq = tape.square(acc);
        let loss = tape.mean_all(sq);
        tape.scalar(loss)
    };
    let base: Vec<f64> = a0.iter().chain(b0.iter()).cloned().collect();
    let fd = central_fd(f, &base, 1e-7);

    let mut tape = Tape::new();
    let a = tape.leaf(Array2::from_shape_vec((5, 1), a0.to_vec()).unwrap());
    let b = tape.leaf(Array2::from_shape_vec((5, 1), b0.to_vec()).unwrap());
    let q = tape.div(a, b);
    let s1 = tape.square(a);
    let s2 = tape.square(b);
    let s = tape.add(s1, s2);
    let s = tape.offset(s, 0.1);
    let root = tape.sqrt_guard(s);
    let m = tape.min(a, b);
    let cl = tape.clamp(a, -0.5, 0.7);
    let ab = tape.abs(b);
    let sc = tape.scale(b, 1.3);
    let w = tape.wrap_angle(sc);
    let e = tape.elu(a);
    let sn = tape.sin(a);
    let cs = tape.cos(b);
    let mut acc = q;
    for t in [root, m, cl, ab, w, e, sn, cs] {
        acc = tape.add(acc, t);
    }
    let sq = tape.square(acc);
    let loss = tape.mean_all(sq);
    let mut grads = tape.backward(loss);
    let ga = grads.take_or_zeros(a, (5, 1));
    let gb = grads.take_or_zeros(b, (5, 1));
    let ad: Vec<f64> = ga.iter().chain(gb.iter()).cloned().collect();
    for (k, (x, y)) in ad.iter().zip(fd.iter()).enumerate() {
        let tol = 1e-5 * x.abs().max(1.0);
        assert!((x - y).abs() < tol, "coord {k}: ad {x} fd {y}");
    }
}

#[test]
fn adam_zero_gradients_leave_params_and_decay_moments() {
    let mut r = rng(3);
    let mut p = MlpParams::init(&[3, 4, 1], &mut r);
    let zeros: Vec<Array2<f64>> = p
        .layers
        .iter()
        .flat_map(|l| [Array2::zeros(l.w.dim()), Array2::zeros(l.b.dim())])
        .collect();

    // Fresh state: zero gradients move nothing and leave the moments zero.
    let mut st = AdamState::new(&p);
    let snapshot = p.to_vector();
    adam_update(&mut p, &zeros, &mut st, 1e-3);
    for (a, b) in p.to_vector().iter().zip(snapshot.iter()) {
        assert_eq!(a, b);
    }
    assert!(st.m.iter().all(|m| m.iter().all(|x| *x == 0.0)));

    // Charged state: zero gradients decay both moments by their betas.
    let grads: Vec<Array2<f64>> = p
        .layers
        .iter()
        .flat_map(|l| {
            [
                Array2::from_elem(l.w.dim(), 0.5),
                Array2::from_elem(l.b.dim(), -0.25),
            ]
        })
        .collect();
    adam_update(&mut p, &grads, &mut st, 1e-3);
    let m_before = st.m[0][[0, 0]];
    let v_before = st.v[0][[0, 0]];
    adam_update(&mut p, &zeros, &mut st, 1e-3);
    assert!((st.m[0][[0, 0]] - 0.9 * m_before).abs() < 1e-15);
    assert!((st.v[0][[0, 0]] - 0.999 * v_before).abs() < 1e-18);
}

#[test]
fn adam_first_step_closed_form() {
    let mut p = zero_mlp(&[2, 1]);
    p.set_from_vector(&[0.3, -0.7, 0.1]);
    let mut st = AdamState::new(&p);
    let g = [0.2, -1.5, 0.0];
    let grads = vec![
        Array2::from_shape_vec((2, 1), vec![g[0], g[1]]).unwrap(),
        Array2::from_elem((1, 1), g[2]),
    ];
    let lr = 1e-2;
    adam_update(&mut p, &grads, &mut st, lr);
    let got = p.to_vector();
    // First step: m_hat = g, v_hat = g^2, so dp = -lr*g/(|g|+eps).
    let want = [
        0.3 - lr * g[0] / (g[0].abs() + 1e-8),
        -0.7 - lr * g[1] / (g[1].abs() + 1e-8),
        0.1,
    ];
    for (a, b) in got.iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    assert_eq!(st.step, 1);
}

#[test]
fn adam_is_deterministic() {
    let mut r = rng(9);
    let p0 = MlpParams::init(&[5, 6, 2], &mut r);
    let grads: Vec<Array2<f64>> = p0
        .layers
        .iter()
        .flat_map(|l| {
            [
                Array2::from_shape_fn(l.w.dim(), |(i, j)| ((i * 7 + j) as f64).sin()),
                Array2::from_shape_fn(l.b.dim(), |(_, j)| (j as f64).cos()),
            ]
        })
        .collect();
    let run = || {
        let mut p = p0.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_update(&mut p, &grads, &mut st, 3e-4);
        }
        p.to_vector()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn lr_schedule_endpoints_and_midpoint() {
    assert_eq!(lr_schedule(0, 200_000, 3e-4, 1e-5), 3e-4);
    assert_eq!(lr_schedule(200_000, 200_000, 3e-4, 1e-5), 1e-5);
    let mid = lr_schedule(100_000, 200_000, 3e-4, 1e-5);
    assert!((mid - 1.55e-4).abs() < 1e-18);
    // Clamped beyond the total.
    assert_eq!(lr_schedule(300_000, 200_000, 3e-4, 1e-5), 1e-5);
}

proptest! {
    #[test]
    fn squash_preserves_ordering(a in -4.0f64..4.0, b in -4.0f64..4.0) {
        let actor = ActorNet { mlp: zero_mlp(&[STATE_DIM, 4, 2]), bounds: ActionBounds::default() };
        let ua = actor.squash([a, a]);
        let ub = actor.squash([b, b]);
        if a < b {
            prop_assert!(ua.delta < ub.delta);
            prop_assert!(ua.a < ub.a);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_arch_guard() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut r = rng(21);
    let actor = ActorNet::init(&mut r, ActionBounds::default());
    let critic = CriticNet::init(&mut r);
    let mut aa = AdamState::new(&actor.mlp);
    aa.step = 42;
    let ac = AdamState::new(&critic.mlp);

    let ckpt = Checkpoint::new(&actor, &critic, &aa, &ac, 1.331, 30_000);
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.rho, 1.331);
    assert_eq!(loaded.iteration, 30_000);
    let (a2, c2, aa2, _) = loaded.restore().unwrap();
    assert_eq!(a2.mlp.to_vector(), actor.mlp.to_vector());
    assert_eq!(c2.mlp.to_vector(), critic.mlp.to_vector());
    assert_eq!(aa2.step, 42);

    // A tampered architecture must fail loudly.
    let text = std::fs::read_to_string(&path).unwrap();
    let bad = text.replace("\"input\":41", "\"input\":40");
    std::fs::write(&path, bad).unwrap();
    match Checkpoint::load(&path) {
        Err(NnError::ArchMismatch(_)) => {}
        other => panic!("expected ArchMismatch, got {other:?}"),
    }
}

#[test]
fn state_scale_is_positive_and_total() {
    let s = state_scale();
    assert_eq!(s.len(), STATE_DIM);
    assert!(s.iter().all(|x| x.is_finite() && *x > 0.0));
}
