use nestdrug_core::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn loss(inputs: &[Tensor], weights: &Tensor, build: &Build, record: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = if record { Tape::new() } else { Tape::inference() };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    let l = tape.sum(p, None).unwrap();
    (tape, vars, l)
}

/// Compares tape gradients with central differences (h = 1e-4).
fn check(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, build: &Build) {
    let mut probe = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone(), false)).collect();
    let out = build(&mut probe, &vars).unwrap();
    let shape = probe.shape(out).to_vec();
    let weights = random(rng, shape[0], shape[1]);

    let (mut tape, vars, l) = loss(&inputs, &weights, build, true);
    tape.backward(l).unwrap();
    let h = 1e-4;
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).unwrap();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let (tp, _, lp) = loss(&plus, &weights, build, false);
            let (tm, _, lm) = loss(&minus, &weights, build, false);
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let a = analytic[i];
            let tol = 1e-5 + 1e-3 * a.abs().max(numeric.abs());
            assert!((a - numeric).abs() <= tol, "input {k} entry {i}: analytic {a} numeric {numeric}");
        }
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

fn run(seed: u64, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let (inputs, build) = make(&mut rng);
        check(&mut rng, inputs, build.as_ref());
    }
}

#[test]
fn matmul_grad() {
    run(1, |rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..5);
        (vec![random(rng, m, k), random(rng, k, n)], Box::new(|t, v| t.matmul(v[0], v[1])))
    });
}

#[test]
fn broadcast_binary_grads() {
    run(2, |rng| {
        let (r, c) = dims(rng);
        let (rb, cb) = match rng.gen_range(0..4) {
            0 => (r, c),
            1 => (1, c),
            2 => (r, 1),
            _ => (1, 1),
        };
        let which = rng.gen_range(0..3);
        let build: Box<Build> = Box::new(move |t, v| match which {
            0 => t.add(v[0], v[1]),
            1 => t.sub(v[0], v[1]),
            _ => t.mul(v[0], v[1]),
        });
        (vec![random(rng, r, c), random(rng, rb, cb)], build)
    });
}

#[test]
fn unary_grads() {
    run(3, |rng| {
        let (r, c) = dims(rng);
        let which = rng.gen_range(0..7);
        let build: Box<Build> = Box::new(move |t, v| match which {
            0 => t.sigmoid(v[0]),
            1 => t.tanh(v[0]),
            2 => t.relu(v[0]),
            3 => t.softplus(v[0]),
            4 => t.softmax(v[0]),
            5 => t.scale(v[0], -1.7),
            _ => t.add_scalar(v[0], 0.3),
        });
        (vec![random(rng, r, c)], build)
    });
}

#[test]
fn pow_grad() {
    run(4, |rng| {
        let (r, c) = dims(rng);
        let x = Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        (vec![x], Box::new(|t, v| t.pow(v[0], -0.5)))
    });
}

#[test]
fn reduction_grads() {
    run(5, |rng| {
        let (r, c) = dims(rng);
        let which = rng.gen_range(0..7);
        let build: Box<Build> = Box::new(move |t, v| match which {
            0 => t.sum(v[0], None),
            1 => t.sum(v[0], Some(0)),
            2 => t.sum(v[0], Some(1)),
            3 => t.mean(v[0], Some(0)),
            4 => t.mean(v[0], Some(1)),
            5 => t.max(v[0], 0),
            _ => t.max(v[0], 1),
        });
        (vec![random(rng, r, c)], build)
    });
}

#[test]
fn layout_grads() {
    run(6, |rng| {
        let (r, c) = dims(rng);
        let axis = rng.gen_range(0..2);
        let other = if axis == 0 { (rng.gen_range(1..4), c) } else { (r, rng.gen_range(1..4)) };
        let extent = if axis == 0 { r } else { c };
        let start = rng.gen_range(0..extent);
        let len = rng.gen_range(1..=extent - start);
        let slice_first = rng.gen_bool(0.5);
        let build: Box<Build> = Box::new(move |t, v| {
            if slice_first {
                t.slice(v[0], axis, start, len)
            } else {
                t.concat(&[v[0], v[1]], axis)
            }
        });
        (vec![random(rng, r, c), random(rng, other.0, other.1)], build)
    });
}

#[test]
fn row_index_grads() {
    run(7, |rng| {
        let (r, c) = dims(rng);
        let n = rng.gen_range(1..6);
        let index: Vec<usize> = (0..n).map(|_| rng.gen_range(0..r)).collect();
        let segments = rng.gen_range(1..=n);
        let mut segment: Vec<usize> = (0..segments).collect();
        segment.extend((segments..n).map(|_| rng.gen_range(0..segments)));
        let which = rng.gen_range(0..3);
        let build: Box<Build> = Box::new(move |t, v| match which {
            0 => t.gather_rows(v[0], &index),
            1 => {
                let g = t.gather_rows(v[0], &index)?;
                t.scatter_add_rows(g, &segment, segments)
            }
            _ => {
                let g = t.gather_rows(v[0], &index)?;
                let noise = t.leaf(Tensor::filled(1, 1, 0.0), false);
                let g = t.add(g, noise)?;
                t.segment_max(g, &segment, segments)
            }
        });
        (vec![random(rng, r, c)], build)
    });
}

#[test]
fn three_layer_mlp_grad() {
    run(8, |rng| {
        let b = rng.gen_range(1..4);
        let inputs = vec![
            random(rng, b, 4),
            random(rng, 4, 5),
            random(rng, 1, 5),
            random(rng, 5, 3),
            random(rng, 3, 2),
        ];
        (
            inputs,
            Box::new(|t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add(h, v[2])?;
                let h = t.tanh(h)?;
                let h = t.matmul(h, v[3])?;
                let h = t.sigmoid(h)?;
                t.matmul(h, v[4])
            }),
        )
    });
}

#[test]
fn identical_inputs_give_identical_bits() {
    let build = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let a = t.leaf(random(&mut rng, 6, 7), true);
        let b = t.leaf(random(&mut rng, 7, 3), true);
        let c = t.matmul(a, b).unwrap();
        let c = t.softmax(c).unwrap();
        let l = t.sum(c, Some(0)).unwrap();
        let l = t.max(l, 1).unwrap();
        t.backward(l).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        (bits(t.value(l).data().to_vec()), bits(t.grad(a).unwrap()), bits(t.grad(b).unwrap()))
    };
    assert_eq!(build(11), build(11));
}
