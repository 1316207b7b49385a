use mmvb::autodiff::{Tape, Var};
use mmvb::gradcheck::grad_check;
use mmvb::optim::AdamState;
use mmvb::tensor::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OPS: [&str; 22] = [
    "matmul",
    "add_bias",
    "add",
    "sub",
    "mul",
    "div",
    "mul_rows",
    "scale",
    "neg",
    "add_scalar",
    "relu",
    "sigmoid",
    "exp",
    "ln",
    "square",
    "clamp",
    "sum",
    "mean",
    "sum_rows",
    "slice_cols",
    "concat_cols",
    "log_softmax",
];

/// Values in `[-2, 2]` kept 0.1 away from 0 and ±0.5, the kinks of relu
/// and of the clamp used below.
fn smooth_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v: f64 = rng.random_range(0.1..2.0);
            if (v - 0.5).abs() < 0.1 {
                v += 0.2;
            }
            if rng.random::<bool>() {
                -v
            } else {
                v
            }
        })
        .collect()
}

fn store(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let add = |s: &mut ParamStore, name: &str, shape: &[usize], data: Vec<f64>| {
        s.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
    };
    let x = smooth_values(&mut rng, 12);
    let y = smooth_values(&mut rng, 12);
    let pos: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..2.0)).collect();
    let b = smooth_values(&mut rng, 8);
    let bias = smooth_values(&mut rng, 4);
    let w = smooth_values(&mut rng, 3);
    add(&mut s, "x", &[3, 4], x);
    add(&mut s, "y", &[3, 4], y);
    add(&mut s, "pos", &[3, 4], pos);
    add(&mut s, "b", &[4, 2], b);
    add(&mut s, "bias", &[4], bias);
    add(&mut s, "w", &[3], w);
    s
}

fn apply(tape: &mut Tape, s: &ParamStore, op: &str) -> Var {
    let p = |tape: &mut Tape, name: &str| tape.param(s, s.id(name).unwrap());
    let x = p(tape, "x");
    match op {
        "matmul" => {
            let b = p(tape, "b");
            tape.matmul(x, b)
        }
        "add_bias" => {
            let b = p(tape, "bias");
            tape.add_bias(x, b)
        }
        "add" | "sub" | "mul" | "concat_cols" => {
            let y = p(tape, "y");
            match op {
                "add" => tape.add(x, y),
                "sub" => tape.sub(x, y),
                "mul" => tape.mul(x, y),
                _ => tape.concat_cols(x, y),
            }
        }
        "div" => {
            let d = p(tape, "pos");
            tape.div(x, d)
        }
        "mul_rows" => {
            let w = p(tape, "w");
            tape.mul_rows(x, w)
        }
        "scale" => tape.scale(x, -1.7),
        "neg" => tape.neg(x),
        "add_scalar" => tape.add_scalar(x, 0.3),
        "relu" => tape.relu(x),
        "sigmoid" => tape.sigmoid(x),
        "exp" => tape.exp(x),
        "ln" => {
            let d = p(tape, "pos");
            tape.ln(d)
        }
        "square" => tape.square(x),
        "clamp" => tape.clamp(x, -0.5, 0.5),
        "sum" => tape.sum(x),
        "mean" => tape.mean(x),
        "sum_rows" => tape.sum_rows(x),
        "slice_cols" => tape.slice_cols(x, 1, 3),
        "log_softmax" => tape.log_softmax(x),
        other => unreachable!("{other}"),
    }
}

/// `Σ c ⊙ op(...)` with fixed random weights `c`, so every output entry
/// contributes to the checked scalar.
fn scalar_of(tape: &mut Tape, s: &ParamStore, op: &str, seed: u64) -> Var {
    let out = apply(tape, s, op);
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff);
    let c = tape.constant(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let weighted = tape.mul(out, c);
    tape.sum(weighted)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>()) {
        for op in OPS {
            let mut s = store(seed);
            let report = grad_check(&mut s, |tape, s| scalar_of(tape, s, op, seed), 1e-6, 1e-4, None);
            prop_assert!(report.passed(), "{op}: {report:?}");
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let s = store(seed);
        for op in OPS {
            let run = || {
                let mut tape = Tape::new();
                let v = apply(&mut tape, &s, op);
                tape.value(v).to_vec()
            };
            prop_assert_eq!(run(), run());
        }
    }

    #[test]
    fn adam_with_zero_gradients_is_a_fixed_point(seed in any::<u64>(), steps in 1usize..20) {
        let mut s = store(seed);
        let before: Vec<Vec<f64>> = s.iter().map(|(_, _, t)| t.data().to_vec()).collect();
        let mut adam = AdamState::new(&s, 1e-2);
        for _ in 0..steps {
            s.zero_grads();
            adam.step(&mut s).unwrap();
        }
        let after: Vec<Vec<f64>> = s.iter().map(|(_, _, t)| t.data().to_vec()).collect();
        prop_assert_eq!(before, after);
    }
}
