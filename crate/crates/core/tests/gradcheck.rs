//! Reverse-mode gradients against central finite differences, in f64.

use fedtraffic::model::{build, forward_graph, Architecture, ModelSpec, ParameterSet};
use fedtraffic::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks d(loss)/d(inputs) for a graph builder `f` that maps leaf vars to a scalar.
fn check_primitive(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).unwrap()).collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.value(loss).data()[0]
    };
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let a = analytic[i].data()[j];
            assert!(rel_err(a, numeric) < TOL, "{name}: input {i}[{j}] analytic {a} numeric {numeric}");
        }
    }
}

/// Weighted sum with fixed random weights, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, g.shape(y));
    let r = g.constant(r);
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

#[test]
fn primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s);

    check_primitive("matmul", vec![r(&[3, 4]), r(&[4, 2])], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y, 1)
    });
    check_primitive("batch_matmul", vec![r(&[2, 3, 4]), r(&[2, 4, 2])], |g, v| {
        let y = g.batch_matmul(v[0], v[1], false).unwrap();
        project(g, y, 2)
    });
    check_primitive("batch_matmul_t", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], |g, v| {
        let y = g.batch_matmul(v[0], v[1], true).unwrap();
        project(g, y, 3)
    });
    check_primitive("add_broadcast", vec![r(&[2, 3, 4]), r(&[3, 1])], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 4)
    });
    check_primitive("sub_broadcast", vec![r(&[4]), r(&[2, 4])], |g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        project(g, y, 5)
    });
    check_primitive("mul_broadcast", vec![r(&[2, 1, 4]), r(&[3, 1])], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, 6)
    });
    check_primitive("tanh_sigmoid", vec![r(&[5])], |g, v| {
        let a = g.tanh(v[0]);
        let b = g.sigmoid(a);
        project(g, b, 7)
    });
    check_primitive("relu_abs", vec![r(&[6])], |g, v| {
        let a = g.relu(v[0]);
        let b = g.abs(v[0]);
        let s = g.add(a, b).unwrap();
        project(g, s, 8)
    });
    check_primitive("softmax_axis1", vec![r(&[2, 3, 4])], |g, v| {
        let y = g.softmax(v[0], 1).unwrap();
        project(g, y, 9)
    });
    check_primitive("softmax_last", vec![r(&[3, 5])], |g, v| {
        let y = g.softmax(v[0], 1).unwrap();
        project(g, y, 10)
    });
    check_primitive("layer_norm", vec![r(&[3, 6])], |g, v| {
        let y = g.layer_norm(v[0], 1e-5).unwrap();
        project(g, y, 11)
    });
    check_primitive("permute_reshape", vec![r(&[2, 3, 4])], |g, v| {
        let p = g.permute(v[0], &[1, 2, 0]).unwrap();
        let y = g.reshape(p, &[12, 2]).unwrap();
        project(g, y, 12)
    });
    check_primitive("slice_concat_stack", vec![r(&[2, 5]), r(&[2, 3])], |g, v| {
        let a = g.slice(v[0], 1, 1, 3).unwrap();
        let c = g.concat(&[a, v[1]], 1).unwrap();
        let s = g.stack(&[a, v[1]], 0).unwrap();
        let p1 = project(g, c, 13);
        let p2 = project(g, s, 14);
        g.add(p1, p2).unwrap()
    });
    check_primitive("sum_axis_mean_scale", vec![r(&[3, 4])], |g, v| {
        let s = g.sum_axis(v[0], 0).unwrap();
        let s = g.scale(s, 1.7);
        let p = project(g, s, 15);
        let m = g.mean(v[0]);
        g.add(p, m).unwrap()
    });
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[4, 2]);
    let run = |which: u8| {
        let mut g = Graph::<f64>::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let y = g.matmul(xv, wv).unwrap();
        let t = g.tanh(y);
        let l1 = project(&mut g, t, 1);
        let sq = g.mul(y, y).unwrap();
        let l2 = g.sum(sq);
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss).unwrap();
        (g.grad(xv).unwrap(), g.grad(wv).unwrap())
    };
    let (a1, b1) = run(1);
    let (a2, b2) = run(2);
    let (a, b) = run(3);
    for i in 0..a.numel() {
        assert!((a.data()[i] - a1.data()[i] - a2.data()[i]).abs() < 1e-12);
    }
    for i in 0..b.numel() {
        assert!((b.data()[i] - b1.data()[i] - b2.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn flop_counter_is_deterministic() {
    let spec = ModelSpec {
        input_dim: 3,
        output_dim: 2,
        window: 4,
        hidden: 8,
        heads: 2,
        ..ModelSpec::new(Architecture::TransformerLstm)
    };
    let params = build(&spec, 0).unwrap();
    let count = || {
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g, true);
        let x = g.constant(Tensor::full(&[2, 4, 3], 0.5));
        let y = forward_graph(&mut g, &bound, &spec, x).unwrap();
        let forward = g.flops();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.flops() > forward);
        g.flops()
    };
    assert_eq!(count(), count());
}

fn model_loss(params: &ParameterSet<f64>, spec: &ModelSpec, x: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = forward_graph(&mut g, &bound, spec, xv).unwrap();
    let l = project(&mut g, y, 99);
    g.value(l).data()[0]
}

/// Full forward/backward of one architecture against central differences on
/// every parameter. Returns the worst relative error.
fn model_gradient_error(arch: Architecture, seed: u64) -> f64 {
    let spec = ModelSpec {
        input_dim: 3,
        output_dim: 2,
        window: 4,
        hidden: 8,
        conv_channels: 4,
        heads: 2,
        ..ModelSpec::new(arch)
    };
    let mut params = build(&spec, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // Non-trivial biases and gains so every path carries signal.
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let x = rand_tensor(&mut rng, &[2, spec.window, spec.input_dim]);

    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let y = forward_graph(&mut g, &bound, &spec, xv).unwrap();
    let l = project(&mut g, y, 99);
    g.backward(l).unwrap();
    let grads = params.gradients(&g, &bound);

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for j in 0..n {
            let orig = params.get(name).unwrap().data()[j];
            params.get_mut(name).unwrap().data_mut()[j] = orig + EPS;
            let up = model_loss(&params, &spec, &x);
            params.get_mut(name).unwrap().data_mut()[j] = orig - EPS;
            let down = model_loss(&params, &spec, &x);
            params.get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.get(name).unwrap().data()[j];
            let e = rel_err(analytic, numeric);
            if e >= TOL {
                eprintln!("{arch} {name}[{j}]: analytic {analytic} numeric {numeric}");
            }
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn every_architecture_matches_finite_differences() {
    for arch in Architecture::ALL {
        let worst = model_gradient_error(arch, 3);
        assert!(worst < TOL, "{arch}: worst relative error {worst:e}");
    }
}
