use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// `sum(weights * out)` so every output entry carries a distinct cotangent.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, DiffError> {
    let (r, c) = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.leaf(random(&mut rng, r, c))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check_op<F>(shapes: &[(usize, usize)], op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        store.add(format!("in{i}"), random(&mut rng, r, c)).unwrap();
    }
    let report = finite_diff_check::<DiffError, _>(&store, 1e-5, |tape, p| {
        let vars = tape.bind_all(p)?;
        let out = op(tape, &vars)?;
        weighted_sum(tape, out, 99)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn vjp_matches_finite_differences_for_every_primitive() {
    check_op(&[(3, 2), (2, 4)], |t, v| t.matmul(v[0], v[1]));
    check_op(&[(3, 2), (2, 4), (1, 4)], |t, v| t.affine(v[0], v[1], v[2]));
    check_op(&[(3, 4), (1, 4)], |t, v| t.add_row(v[0], v[1]));
    check_op(&[(3, 4), (1, 4)], |t, v| t.mul_row(v[0], v[1]));
    check_op(&[(3, 2), (3, 2)], |t, v| t.add(v[0], v[1]));
    check_op(&[(3, 2), (3, 2)], |t, v| t.sub(v[0], v[1]));
    check_op(&[(3, 2), (3, 2)], |t, v| t.mul(v[0], v[1]));
    check_op(&[(3, 2)], |t, v| t.scale_shift(v[0], -1.7, 0.3));
    check_op(&[(3, 2)], |t, v| t.tanh(v[0]));
    check_op(&[(3, 2)], |t, v| t.exp(v[0]));
    check_op(&[(3, 2)], |t, v| t.square(v[0]));
    check_op(&[(3, 2)], |t, v| t.abs_pow(v[0], 3.0));
    check_op(&[(3, 2)], |t, v| t.sum(v[0]));
    check_op(&[(3, 2)], |t, v| t.mean(v[0]));
    check_op(&[(3, 5)], |t, v| t.row_sum(v[0]));
    check_op(&[(3, 2), (3, 1)], |t, v| t.concat(&[v[0], v[1]]));
    check_op(&[(3, 4)], |t, v| t.select(v[0], &[3, 0, 0]));
    check_op(&[(3, 4)], |t, v| t.gather(v[0], vec![11, 2, 2, 7, 0, 5], 2, 3));
}

#[test]
fn primitive_examples() {
    let mut t = Tape::new();
    let z = t.constant(1, 1, 0.0).unwrap();
    let th = t.tanh(z).unwrap();
    let ex = t.exp(z).unwrap();
    assert_eq!(t.value(th).item(), Some(0.0));
    assert_eq!(t.value(ex).item(), Some(1.0));

    let x = t
        .leaf(Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap())
        .unwrap();
    let eye = t.leaf(Tensor::identity(2)).unwrap();
    let zero = t.constant(1, 2, 0.0).unwrap();
    let y = t.affine(x, eye, zero).unwrap();
    assert_eq!(t.value(y), t.value(x));
}

#[test]
fn shape_errors_and_non_finite() {
    let mut t = Tape::new();
    let a = t.constant(2, 3, 1.0).unwrap();
    let b = t.constant(2, 2, 1.0).unwrap();
    assert!(matches!(t.add(a, b), Err(DiffError::ShapeMismatch { op: "add", .. })));
    assert!(t.matmul(a, a).is_err());
    let big = t.constant(1, 1, 800.0).unwrap();
    assert_eq!(t.exp(big), Err(DiffError::NonFinite { op: "exp" }));
    assert!(t.leaf(Tensor::scalar(f64::NAN)).is_err());
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
    let q = store.add("unused", Tensor::scalar(5.0)).unwrap();

    let mut t = Tape::new();
    let vars = t.bind_all(&store).unwrap();
    let s = t.sum(vars[p.index()]).unwrap();
    t.backward(s, &mut store).unwrap();
    assert_eq!(store.grad(p).data(), &[1.0, 1.0]);
    assert_eq!(store.grad(q).data(), &[0.0]);

    let mut t = Tape::new();
    let vars = t.bind_all(&store).unwrap();
    let sq = t.square(vars[p.index()]).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s, &mut store).unwrap();
    assert_eq!(store.grad(p).data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_bad_roots() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
    let mut t = Tape::new();
    let vars = t.bind_all(&store).unwrap();
    assert!(matches!(t.backward(vars[0], &mut store), Err(DiffError::NotScalar(_))));

    let mut other = Tape::new();
    let foreign = other.constant(1, 1, 1.0).unwrap();
    assert_eq!(t.backward(foreign, &mut store), Err(DiffError::ForeignVar));
}

fn build_f(t: &mut Tape, x: Var) -> Result<Var, DiffError> {
    let a = t.tanh(x)?;
    let b = t.square(a)?;
    t.sum(b)
}

fn build_g(t: &mut Tape, x: Var) -> Result<Var, DiffError> {
    let a = t.exp(x)?;
    t.mean(a)
}

#[test]
fn backward_is_linear_in_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random(&mut rng, 4, 3);
    let (a, b) = (0.7, -2.3);

    let grad_of = |which: u8| {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone()).unwrap();
        let root = match which {
            0 => build_f(&mut t, x).unwrap(),
            1 => build_g(&mut t, x).unwrap(),
            _ => {
                let f = build_f(&mut t, x).unwrap();
                let g = build_g(&mut t, x).unwrap();
                let fa = t.scale(f, a).unwrap();
                let gb = t.scale(g, b).unwrap();
                t.add(fa, gb).unwrap()
            }
        };
        t.gradients(root).unwrap().get(x).unwrap().clone()
    };
    let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for k in 0..gc.len() {
        let expect = a * gf.data()[k] + b * gg.data()[k];
        assert!((gc.data()[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }
}

#[test]
fn replaying_tape_is_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = random(&mut rng, 5, 2);
    let mut t = Tape::new();
    let x = t.leaf(x0).unwrap();
    let root = build_f(&mut t, x).unwrap();
    let g1 = t.gradients(root).unwrap().get(x).unwrap().clone();
    let g2 = t.gradients(root).unwrap().get(x).unwrap().clone();
    assert_eq!(g1.data(), g2.data());
}

#[test]
fn jvp_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::row_vector(vec![0.3, -1.0])).unwrap();
    let v = t.leaf(Tensor::row_vector(vec![2.0, 5.0])).unwrap();
    let (y, jv) = jvp(&mut t, x, v, |_, x| Ok(x)).unwrap();
    assert_eq!(y, x);
    assert_eq!(t.value(jv).data(), &[2.0, 5.0]);

    let x = t.constant(1, 1, 0.0).unwrap();
    let v = t.constant(1, 1, 1.0).unwrap();
    let (_, jv) = jvp(&mut t, x, v, |t, x| t.exp(x)).unwrap();
    assert_eq!(t.value(jv).item(), Some(1.0));

    let x = t.constant(1, 2, 0.0).unwrap();
    let v = t.constant(2, 2, 0.0).unwrap();
    assert!(jvp(&mut t, x, v, |_, x| Ok(x)).is_err());
}

#[test]
fn jvp_matches_directional_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = random(&mut rng, 3, 4);
    let v0 = random(&mut rng, 3, 4);
    let w1 = random(&mut rng, 2, 3);
    let w2 = random(&mut rng, 3, 2);
    let f = |t: &mut Tape, x: Var| -> Result<Var, DiffError> {
        let a = t.select(x, &[0, 2])?;
        let b = t.select(x, &[1, 3])?;
        let w1 = t.leaf(w1.clone())?;
        let h = t.matmul(a, w1)?;
        let h = t.tanh(h)?;
        let w2 = t.leaf(w2.clone())?;
        let h2 = t.matmul(h, w2)?;
        let e = t.exp(h2)?;
        let y = t.mul(b, e)?;
        let y2 = t.square(y)?;
        t.concat(&[a, y2])
    };
    let mut t = Tape::new();
    let x = t.leaf(x0.clone()).unwrap();
    let v = t.leaf(v0.clone()).unwrap();
    let (_, jv) = jvp(&mut t, x, v, f).unwrap();
    let jv = t.value(jv).clone();

    let h = 1e-5;
    let eval = |shift: f64| {
        let mut t = Tape::new();
        let xs = x0.zip_map(&v0, |a, b| a + shift * b);
        let x = t.leaf(xs).unwrap();
        let y = f(&mut t, x).unwrap();
        t.value(y).clone()
    };
    let (p, m) = (eval(h), eval(-h));
    for k in 0..jv.len() {
        let fd = (p.data()[k] - m.data()[k]) / (2.0 * h);
        assert!(relative_error(jv.data()[k], fd) <= 1e-5 || (jv.data()[k] - fd).abs() < 1e-9);
    }
}

#[test]
fn jvp_tangent_is_differentiable() {
    // d/dw of (d/dx tanh(w x))|_{v=1} at x: derivative of w (1 - tanh^2(w x)).
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(0.8)).unwrap();
    let xv = 0.6;
    let build = |t: &mut Tape, p: &ParamStore| -> Result<Var, DiffError> {
        let vars = t.bind_all(p)?;
        let x = t.constant(1, 1, xv)?;
        let v = t.constant(1, 1, 1.0)?;
        let wv = vars[w.index()];
        let (_, jv) = jvp(t, x, v, |t, x| {
            let wx = t.mul(x, wv)?;
            t.tanh(wx)
        })?;
        t.sum(jv)
    };
    let r = finite_diff_check(&store, 1e-5, build).unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}
