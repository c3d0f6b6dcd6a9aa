use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// Weighted sum so every output element carries a distinct gradient.
fn weighted_sum<'t>(v: Var<'t, f64>, seed: u64) -> TensorResult<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &v.shape());
    v.mul(v.tape().constant(w))?.sum()
}

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn check(name: &str, inputs: &[Tensor<f64>], f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> TensorResult<Var<'t, f64>>) {
    let err = gradcheck(f, inputs, EPS).unwrap();
    assert!(err < TOL, "{name}: relative error {err}");
}

#[test]
fn primitive_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let col = rand_tensor(&mut rng, &[2, 1, 4]);

    check("add", &[a.clone(), b.clone()], |_, v| weighted_sum(v[0].add(v[1])?, 1));
    check("add-broadcast", &[a.clone(), row.clone()], |_, v| weighted_sum(v[0].add(v[1])?, 2));
    check("sub", &[a.clone(), col.clone()], |_, v| weighted_sum(v[0].sub(v[1])?, 3));
    check("mul", &[a.clone(), b.clone()], |_, v| weighted_sum(v[0].mul(v[1])?, 4));
    check("mul-broadcast", &[a.clone(), col.clone()], |_, v| weighted_sum(v[0].mul(v[1])?, 5));
    check("scale", &[a.clone()], |_, v| weighted_sum(v[0].scale(-2.5)?, 6));
    check("add_scalar", &[a.clone()], |_, v| weighted_sum(v[0].add_scalar(0.3)?, 7));

    let m1 = rand_tensor(&mut rng, &[2, 3, 5]);
    let m2 = rand_tensor(&mut rng, &[2, 5, 4]);
    let w = rand_tensor(&mut rng, &[5, 4]);
    let wt = rand_tensor(&mut rng, &[4, 5]);
    let bt = rand_tensor(&mut rng, &[2, 4, 5]);
    check("matmul-batched", &[m1.clone(), m2], |_, v| weighted_sum(v[0].matmul(v[1])?, 8));
    check("matmul-shared", &[m1.clone(), w], |_, v| weighted_sum(v[0].matmul(v[1])?, 9));
    check("matmul_nt-shared", &[m1.clone(), wt], |_, v| weighted_sum(v[0].matmul_nt(v[1])?, 10));
    check("matmul_nt-batched", &[m1.clone(), bt], |_, v| weighted_sum(v[0].matmul_nt(v[1])?, 11));

    check("transpose", &[a.clone()], |_, v| weighted_sum(v[0].transpose()?, 12));
    check("permute", &[a.clone()], |_, v| weighted_sum(v[0].permute(&[2, 0, 1])?, 13));
    check("reshape", &[a.clone()], |_, v| weighted_sum(v[0].reshape(&[6, 4])?, 14));
    check("concat", &[a.clone(), col.clone()], |_, v| {
        weighted_sum(concat(&[v[0], v[1]], 1)?, 15)
    });
    check("slice", &[a.clone()], |_, v| weighted_sum(v[0].slice(2, 1, 2)?, 16));
    check("softmax", &[a.clone()], |_, v| weighted_sum(v[0].softmax()?, 17));
    check("gelu", &[a.clone()], |_, v| weighted_sum(v[0].gelu()?, 18));
    check("silu", &[a.clone()], |_, v| weighted_sum(v[0].silu()?, 19));
    check("exp", &[a.clone()], |_, v| weighted_sum(v[0].exp()?, 20));
    check("log", &[positive_tensor(&mut rng, &[3, 4])], |_, v| weighted_sum(v[0].ln()?, 21));
    check("sum", &[a.clone()], |_, v| v[0].mul(v[0])?.sum());
    check("mean", &[a.clone()], |_, v| v[0].mul(v[0])?.mean());

    let table = rand_tensor(&mut rng, &[4, 3]);
    check("gather_rows", &[table], |_, v| weighted_sum(v[0].gather_rows(&[2, 0, 2])?, 22));

    let logits = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let bias = Tensor::from_fn(&[2, 1, 4, 4], |_| 0.25);
    check("mix_softmax", &[logits], move |_, v| {
        weighted_sum(v[0].mix_softmax(&bias, &[0.3, 0.8])?, 23)
    });

    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, &[2, 3, 5, 4])).collect();
    let rows = Arc::new(Tensor::from_fn(&[2, 1, 5, 5], |i| 0.1 + 0.12 * (i % 5) as f64));
    check("attention", &qkv, move |_, v| {
        weighted_sum(v[0].attention(v[1], v[2], &rows, &[0.3, 0.8])?, 24)
    });
}

#[test]
fn attention_matches_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, &[2, 2, 6, 3])).collect();
    let bias = Tensor::from_fn(&[2, 2, 6, 6], |i| (1 + i % 7) as f64 / 28.0);
    let shared = Arc::new(bias.clone());
    let lambda = [0.25, 0.9];
    let run = |fused: bool| {
        let tape = Tape::new();
        let v: Vec<_> = qkv.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = if fused {
            v[0].attention(v[1], v[2], &shared, &lambda).unwrap()
        } else {
            v[0].matmul_nt(v[1]).unwrap().mix_softmax(&bias, &lambda).unwrap().matmul(v[2]).unwrap()
        };
        let g = tape.backward(weighted_sum(out, 5).unwrap()).unwrap();
        (out.value(), v.iter().map(|&x| g.get(x)).collect::<Vec<_>>())
    };
    let (fo, fg) = run(true);
    let (co, cg) = run(false);
    let close = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(&fo, &co));
    for (a, b) in fg.iter().zip(&cg) {
        assert!(close(a, b));
    }
}

#[test]
fn softmax_cross_entropy_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = rand_tensor(&mut rng, &[5, 6]);
    let mut onehot = Tensor::zeros(&[5, 6]);
    for r in 0..5 {
        onehot.data_mut()[r * 6 + (r * 7) % 6] = 1.0;
    }
    let err = gradcheck(
        move |t, v| {
            let p = v[0].softmax()?;
            let logp = p.ln()?;
            logp.mul(t.constant(onehot.clone()))?.sum()?.neg()
        },
        &[logits],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn reshape_and_slice_are_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let err = gradcheck(|_, v| v[0].reshape(&[12])?.slice(0, 2, 5)?.sum(), &[a], EPS).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[7, 33], |_| rng.random_range(-30.0..30.0)));
    let y = x.softmax().unwrap().value();
    for row in y.data().chunks(33) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::<f64>::new();
    let a = rand_tensor(&mut rng, &[4, 3]);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let out = tape.constant(eye).matmul(tape.constant(a.clone())).unwrap();
    assert_eq!(out.value(), a);
}

#[test]
fn gelu_at_zero() {
    let tape = Tape::<f64>::new();
    let y = tape.constant(Tensor::scalar(0.0)).gelu().unwrap();
    assert_eq!(y.item(), 0.0);
}

#[test]
fn square_sum_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[1], &[3.0]).unwrap());
    let loss = x.mul(x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).data(), &[6.0]);
}

#[test]
fn fan_out_accumulates() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[2], &[1.0, -4.0]).unwrap());
    let loss = x.add(x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).data(), &[2.0, 2.0]);
}

#[test]
fn disconnected_leaf_gets_zero() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let unused = tape.param(Tensor::zeros(&[3, 2]));
    let loss = x.sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(unused), Tensor::zeros(&[3, 2]));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_is_reported() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(a.add(b), Err(TensorError::ShapeMismatch { op: "add", .. })));
    assert!(matches!(a.matmul(a), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
}

#[test]
fn trap_catches_non_finite() {
    let tape = Tape::<f64>::with_non_finite_trap();
    let x = tape.constant(Tensor::from_f64(&[2], &[-1.0, 1.0]).unwrap());
    assert_eq!(x.ln().unwrap_err(), TensorError::NonFinite("log"));
    let lenient = Tape::<f64>::new();
    let y = lenient.constant(Tensor::from_f64(&[1], &[-1.0]).unwrap());
    assert!(y.ln().unwrap().item().is_nan());
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::<f32>::new();
        let a = tape.param(Tensor::from_fn(&[16, 32], |_| rng.random_range(-1.0..1.0)));
        let b = tape.param(Tensor::from_fn(&[32, 8], |_| rng.random_range(-1.0..1.0)));
        let loss = a.matmul(b).unwrap().gelu().unwrap().softmax().unwrap().ln().unwrap().mean().unwrap();
        let g = tape.backward(loss).unwrap();
        (loss.item().to_bits(), g.get(a), g.get(b))
    };
    assert_eq!(run(), run());
}

#[test]
fn mix_softmax_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(&mut rng, &[1, 2, 3, 3]);
    let bias = Tensor::from_fn(&[1, 1, 3, 3], |i| [0.2, 0.3, 0.5][i % 3]);
    let tape = Tape::<f64>::new();
    let s = tape.constant(logits);
    let plain = s.softmax().unwrap().value();
    assert_eq!(s.mix_softmax(&bias, &[0.0]).unwrap().value(), plain);
    let full = s.mix_softmax(&bias, &[1.0]).unwrap().value();
    for (i, v) in full.data().iter().enumerate() {
        assert_eq!(*v, [0.2, 0.3, 0.5][i % 3]);
    }
}

#[test]
fn shift_invariant_input_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = rand_tensor(&mut rng, &[3, 5]);
    let shift = rand_tensor(&mut rng, &[3, 1]);
    let err = gradcheck(|_, v| weighted_sum(v[0].add(v[1])?.softmax()?, 30), &[logits.clone(), shift.clone()], EPS).unwrap();
    assert!(err < TOL, "{err}");
    let tape = Tape::<f64>::new();
    let (l, s) = (tape.param(logits), tape.param(shift));
    let loss = weighted_sum(l.add(s).unwrap().softmax().unwrap(), 30).unwrap();
    let g = tape.backward(loss).unwrap().get(s);
    assert!(g.data().iter().all(|v| v.abs() < 1e-15), "{g:?}");
}
