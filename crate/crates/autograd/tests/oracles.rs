#![cfg(not(feature = "f32"))]

//! Every differentiable op checked against central finite differences and
//! naive loop implementations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teddn_autograd::{
    adam_step, finite_difference_grad, max_relative_error, AdamConfig, AdamState,
    ElementwiseOp, ParamStore, Tape, Tensor, TensorError, Var,
};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5))
}

/// Random tensor whose entries stay at least 0.05 away from zero, so kinked
/// ops (relu, abs) are never probed at the kink.
fn random_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Checks d(sum(w ⊙ f(inputs)))/d(inputs) for a random weighting `w`,
/// which exercises non-uniform upstream gradients.
fn check(
    seed: u64,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
) {
    let eval = |xs: &[Tensor], weights: Option<&Tensor>| -> (Tape, Vec<Var>, Var, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let w = weights.cloned().unwrap_or_else(|| {
            let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            random(&mut wrng, tape.shape(out))
        });
        let wv = tape.input(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        (tape, vars, loss, w)
    };
    let (tape, vars, loss, w) = eval(&inputs, None);
    let grads = tape.gradients(loss).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let numeric = finite_difference_grad(
            |x| {
                let mut xs = inputs.clone();
                xs[k] = x.clone();
                let (t, _, l, _) = eval(&xs, Some(&w));
                Ok::<_, TensorError>(t.value(l).item().unwrap())
            },
            &inputs[k],
            H,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(
            err < REL_TOL,
            "seed {seed}, input {k}: relative error {err:e}\nanalytic {analytic:?}\nnumeric {numeric:?}"
        );
    }
}

#[test]
fn unary_ops_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_off_kink(&mut rng, &[3, 4]);
        check(seed, vec![x.clone()], |t, v| Ok(t.sigmoid(v[0])));
        check(seed, vec![x.clone()], |t, v| Ok(t.tanh(v[0])));
        check(seed, vec![x.clone()], |t, v| Ok(t.relu(v[0])));
        check(seed, vec![x.clone()], |t, v| Ok(t.abs(v[0])));
        check(seed, vec![x.clone()], |t, v| Ok(t.neg(v[0])));
        check(seed, vec![x.clone()], |t, v| {
            let s = t.scale(v[0], 2.5);
            Ok(t.shift(s, -0.3))
        });
        let pos = x.map(|v| v.abs() + 0.2);
        check(seed, vec![pos], |t, v| Ok(t.sqrt(v[0])));
    }
}

#[test]
fn binary_ops_with_broadcasting_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 3, 4]);
        let b = random(&mut rng, &[3, 1]);
        let c = random(&mut rng, &[4]);
        check(seed, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check(seed, vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check(seed, vec![a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]));
        let denom = b.map(|v| v.abs() + 0.5);
        check(seed, vec![a.clone(), denom], |t, v| t.div(v[0], v[1]));
        check(seed, vec![b.clone(), c.clone()], |t, v| {
            t.elementwise(ElementwiseOp::Mul, v[0], Some(v[1]))
        });
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 3, 4]);
        let b = random(&mut rng, &[2, 2, 4]);
        let m = random(&mut rng, &[4, 3]);
        let batch_m = random(&mut rng, &[2, 4, 5]);
        let sq = random(&mut rng, &[3, 3]);
        check(seed, vec![a.clone(), m.clone()], |t, v| t.matmul(v[0], v[1]));
        check(seed, vec![a.clone(), batch_m.clone()], |t, v| t.matmul(v[0], v[1]));
        check(seed, vec![sq.clone(), a.clone()], |t, v| t.matmul(v[0], v[1]));
        check(seed, vec![a.clone()], |t, v| t.mean(v[0], &[0, 2]));
        check(seed, vec![a.clone()], |t, v| t.sum(v[0], &[1]));
        check(seed, vec![a.clone()], |t, v| t.mean_all(v[0]));
        check(seed, vec![a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1], v[0]], 1));
        check(seed, vec![a.clone()], |t, v| t.narrow(v[0], 1, 1, 2));
        check(seed, vec![a.clone()], |t, v| t.permute(v[0], &[2, 0, 1]));
        check(seed, vec![a.clone()], |t, v| t.reshape(v[0], &[6, 4]));
        check(seed, vec![m.clone()], |t, v| t.broadcast_to(v[0], &[2, 4, 3]));
        check(seed, vec![m.clone()], |t, v| t.gather(v[0], &[3, 0, 3, 1]));
        check(seed, vec![a.clone()], |t, v| {
            let parts = t.split(v[0], 2, &[1, 3])?;
            t.mul(parts[1], parts[0])
        });
    }
}

#[test]
fn sigmoid_composition_matches_backward_absolutely() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[5]);
        let w = random(&mut rng, &[5, 5]);
        let build = |t: &mut Tape, xv: Var| {
            let wv = t.input(w.clone());
            let x2 = t.reshape(xv, &[1, 5]).unwrap();
            let s = t.sigmoid(x2);
            let h = t.matmul(s, wv).unwrap();
            let s2 = t.sigmoid(h);
            t.sum_all(s2).unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let loss = build(&mut tape, xv);
        let analytic = tape.gradients(loss).unwrap().wrt(xv);
        let numeric = finite_difference_grad(
            |p| {
                let mut t = Tape::new();
                let v = t.input(p.clone());
                let l = build(&mut t, v);
                Ok::<_, TensorError>(t.value(l).item().unwrap())
            },
            &x,
            H,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() < 1e-6, "seed {seed}: {a} vs {n}");
        }
    }
}

#[test]
fn backward_trivial_cases_and_accumulation() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let loss = tape.sum_all(wv).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), &[1.0, 1.0, 1.0]);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), &[2.0, 2.0, 2.0]);

    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let sq = tape.mul(wv, wv).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), &[2.0, 4.0]);

    // Non-scalar loss is a contract error; non-parameter leaves are ignored.
    assert!(matches!(tape.backward(sq, &mut store), Err(TensorError::Contract(_))));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let c = a.matmul(&b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..4 {
                s += a.get(&[i, p]).unwrap() * b.get(&[p, j]).unwrap();
            }
            assert!((c.get(&[i, j]).unwrap() - s).abs() < 1e-14);
        }
    }
}

#[test]
fn matmul_is_associative() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a = random(&mut rng, &[4, 4]);
        let b = random(&mut rng, &[4, 4]);
        let c = random(&mut rng, &[4, 4]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            assert!((l - r).abs() < 1e-10);
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let z = t.input(Tensor::scalar(0.0));
    let s = t.elementwise(ElementwiseOp::Sigmoid, z, None).unwrap();
    assert_eq!(t.value(s).item().unwrap(), 0.5);
    let x = t.input(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = t.elementwise(ElementwiseOp::Relu, x, None).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    assert!(t.elementwise(ElementwiseOp::Add, x, None).is_err());

    // Row broadcast against an explicit loop.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[1, 3]);
    let p = a.mul(&b).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            let want = a.get(&[i, j]).unwrap() * b.get(&[0, j]).unwrap();
            assert_eq!(p.get(&[i, j]).unwrap(), want);
        }
    }
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_vec(vec![0.0, 1.0]));
    let r = t.relu(x);
    let loss = t.sum_all(r).unwrap();
    assert_eq!(t.gradients(loss).unwrap().wrt(x).data(), &[0.0, 1.0]);
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut s = ParamStore::new();
    s.register("a", Tensor::zeros([1])).unwrap();
    assert!(s.register("a", Tensor::zeros([1])).is_err());
}

proptest! {
    #[test]
    fn concat_then_split_is_identity(
        rows in proptest::collection::vec(1usize..4, 1..4),
        cols in 1usize..4,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<Tensor> = rows.iter().map(|&r| random(&mut rng, &[r, cols])).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let joined = Tensor::concat(&refs, 0).unwrap();
        prop_assert_eq!(joined.shape()[0], rows.iter().sum::<usize>());
        let back = joined.split(0, &rows).unwrap();
        prop_assert_eq!(back, parts);
    }

    #[test]
    fn adam_fixed_point_without_gradient(values in proptest::collection::vec(-10.0f64..10.0, 1..6), steps in 1usize..5) {
        let mut store = ParamStore::new();
        store.register("p", Tensor::from_vec(values.clone())).unwrap();
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        for _ in 0..steps {
            adam_step(&mut store, &mut state, &cfg).unwrap();
        }
        prop_assert_eq!(store.by_name("p").unwrap().value.data(), &values[..]);
        prop_assert_eq!(state.step_count, steps as u64);
    }
}
