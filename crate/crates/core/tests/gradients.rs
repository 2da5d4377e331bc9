use memloc_core::graph::{finite_diff_coords, Bindings, Graph, NodeId, NormStats};
use memloc_core::model::{ForwardOptions, GradRequest, InputShape, LayerSpec, Model, ModelSpec, Pool};
use memloc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Projects `node` (n rows) to 3 logits and applies weighted cross-entropy.
fn scalarize(g: &mut Graph<f64>, node: NodeId, n: usize) -> Vec<usize> {
    let flat = g.flatten(node);
    let proj = g.leaf("proj", false);
    let logits = g.matmul(flat, proj);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let weights: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.25).collect();
    g.softmax_cross_entropy(logits, labels.clone(), weights);
    labels
}

/// Compares backward against central differences at up to 100 coordinates of
/// every bound leaf named in `check`.
fn check_graph(name: &str, g: &mut Graph<f64>, tensors: &[(&str, Tensor<f64>)], check: &[&str], seed: u64) {
    let mut b = Bindings::new();
    for (n, t) in tensors {
        b.insert(*n, t);
    }
    g.evaluate(&b).unwrap();
    let grads = g.backward(g.output().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for leaf in check {
        let t = &tensors.iter().find(|(n, _)| n == leaf).unwrap().1;
        let coords: Vec<usize> = if t.len() <= 100 { (0..t.len()).collect() } else { (0..100).map(|_| rng.random_range(0..t.len())).collect() };
        let fd = finite_diff_coords(g, &b, leaf, &coords, STEP).unwrap();
        let an = grads.get(leaf).unwrap();
        for (c, f) in coords.iter().zip(fd) {
            let e = rel_err(an.data()[*c], f);
            assert!(e < TOL, "{name}/{leaf}[{c}]: backward {} vs fd {f} (rel {e:.2e})", an.data()[*c]);
        }
    }
}

fn setup(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_and_add() {
    let mut r = setup(1);
    let mut g = Graph::new();
    let x = g.leaf("x", true);
    let w = g.leaf("w", true);
    let bias = g.leaf("b", true);
    let y = g.matmul(x, w);
    let y = g.add(y, bias);
    scalarize(&mut g, y, 4);
    let t = [("x", rand_tensor(&mut r, &[4, 6])), ("w", rand_tensor(&mut r, &[6, 5])), ("b", rand_tensor(&mut r, &[5])), ("proj", rand_tensor(&mut r, &[5, 3]))];
    check_graph("matmul+add", &mut g, &t, &["x", "w", "b"], 10);
}

#[test]
fn add_broadcasts_and_mul() {
    let mut r = setup(2);
    let mut g = Graph::new();
    let x = g.leaf("x", true);
    let c = g.leaf("c", true);
    let bc = g.leaf("bc", true);
    let m = g.leaf("m", true);
    let y = g.add(x, c);
    let y = g.add(y, bc);
    let y = g.mul(y, m);
    scalarize(&mut g, y, 2);
    let t = [
        ("x", rand_tensor(&mut r, &[2, 3, 2, 2])),
        ("c", rand_tensor(&mut r, &[3])),
        ("bc", rand_tensor(&mut r, &[2, 3])),
        ("m", rand_tensor(&mut r, &[2, 3, 2, 2])),
        ("proj", rand_tensor(&mut r, &[12, 3])),
    ];
    check_graph("add/mul", &mut g, &t, &["x", "c", "bc", "m"], 11);
}

#[test]
fn conv_with_stride_and_padding() {
    for (stride, pad) in [(1, 1), (2, 0), (1, 0)] {
        let mut r = setup(3 + stride as u64 * 7 + pad as u64);
        let mut g = Graph::new();
        let x = g.leaf("x", true);
        let w = g.leaf("w", true);
        let y = g.conv2d(x, w, stride, pad);
        let out = (5 + 2 * pad - 3) / stride + 1;
        scalarize(&mut g, y, 2);
        let t = [
            ("x", rand_tensor(&mut r, &[2, 2, 5, 5])),
            ("w", rand_tensor(&mut r, &[3, 2, 3, 3])),
            ("proj", rand_tensor(&mut r, &[3 * out * out, 3])),
        ];
        check_graph("conv2d", &mut g, &t, &["x", "w"], 12);
    }
}

#[test]
fn relu_gate_and_pools() {
    let mut r = setup(4);
    let mut g = Graph::new();
    let x = g.leaf("x", true);
    let gt = g.leaf("g", true);
    let y = g.relu(x);
    let y = g.gate(y, gt);
    let p = g.max_pool2(y);
    let a = g.global_avg_pool(y);
    let pf = g.flatten(p);
    let q = g.leaf("q", false);
    let pq = g.matmul(pf, q);
    let s = g.add(pq, a);
    scalarize(&mut g, s, 2);
    let t = [
        ("x", rand_tensor(&mut r, &[2, 3, 4, 4])),
        ("g", rand_tensor(&mut r, &[3])),
        ("q", rand_tensor(&mut r, &[12, 3])),
        ("proj", rand_tensor(&mut r, &[3, 3])),
    ];
    check_graph("relu/gate/pool", &mut g, &t, &["x", "g"], 13);
}

#[test]
fn batch_norm_batch_and_running() {
    for running in [false, true] {
        let mut r = setup(5 + running as u64);
        let mut g = Graph::new();
        let x = g.leaf("x", true);
        let gamma = g.leaf("gamma", true);
        let beta = g.leaf("beta", true);
        let stats = if running { NormStats::Running { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 0.9] } } else { NormStats::Batch };
        let y = g.batch_norm(x, gamma, beta, 1e-5, stats);
        scalarize(&mut g, y, 4);
        let t = [
            ("x", rand_tensor(&mut r, &[4, 3, 2, 2])),
            ("gamma", rand_tensor(&mut r, &[3])),
            ("beta", rand_tensor(&mut r, &[3])),
            ("proj", rand_tensor(&mut r, &[12, 3])),
        ];
        check_graph("batch_norm", &mut g, &t, &["x", "gamma", "beta"], 14);
    }
}

#[test]
fn cross_entropy_logits() {
    let mut r = setup(6);
    let mut g = Graph::new();
    let z = g.leaf("z", true);
    g.softmax_cross_entropy(z, vec![0, 2, 1, 1], vec![1.0, -0.5, 0.25, 2.0]);
    let t = [("z", rand_tensor(&mut r, &[4, 3]))];
    check_graph("softmax_cross_entropy", &mut g, &t, &["z"], 15);
}

fn toy_spec() -> ModelSpec {
    ModelSpec {
        input: InputShape::Image { channels: 1, height: 6, width: 6 },
        layers: vec![
            LayerSpec::conv(1, 3, 3, 1, 1).norm().relu().pool(Pool::Max2),
            LayerSpec::conv(3, 4, 3, 1, 1).relu(),
            LayerSpec::dense(36, 8).norm().relu(),
            LayerSpec::dense(8, 3),
        ],
        classes: 3,
    }
}

/// Backward through the whole model against central differences of the
/// model loss, 100 coordinates per parameter kind.
#[test]
fn toy_network_matches_finite_differences() {
    let mut model = Model::<f64>::build(&toy_spec(), 7).unwrap();
    let mut r = setup(8);
    let x = rand_tensor(&mut r, &[5, 1, 6, 6]);
    let labels = vec![0, 1, 2, 1, 0];
    let w = vec![1.0; 5];
    for (train_mode, mode) in [(true, ForwardOptions::train()), (false, ForwardOptions::eval())] {
        let out = model.run(&x, &mode, Some((&labels, &w)), GradRequest { params: true, gates: false }).unwrap();
        let kinds: [(&str, &[&str]); 4] = [
            ("conv weight", &["layer0.weight", "layer1.weight"]),
            ("dense weight", &["layer2.weight", "layer3.weight"]),
            ("bias", &["layer0.bias", "layer1.bias", "layer2.bias", "layer3.bias"]),
            ("norm affine", &["layer0.bn.gamma", "layer0.bn.beta", "layer2.bn.gamma", "layer2.bn.beta"]),
        ];
        for (kind, names) in kinds {
            for _ in 0..100 {
                let name = names[r.random_range(0..names.len())];
                let Some(p) = model.param(name) else { continue };
                let c = r.random_range(0..p.len());
                let orig = p.data()[c];
                let loss_at = |m: &mut Model<f64>, v: f64| {
                    m.param_mut(name).unwrap().data_mut()[c] = v;
                    m.run(&x, &mode, Some((&labels, &w)), GradRequest::default()).unwrap().loss.unwrap()
                };
                let fd = (loss_at(&mut model, orig + STEP) - loss_at(&mut model, orig - STEP)) / (2.0 * STEP);
                model.param_mut(name).unwrap().data_mut()[c] = orig;
                let an = out.param_grads[name].data()[c];
                if train_mode && (name == "layer0.bias" || name == "layer2.bias") {
                    // batch statistics cancel a bias that feeds a norm layer
                    assert!(an.abs() < 1e-12 && fd.abs() < 1e-8, "{name}[{c}]: {an} vs {fd}");
                    continue;
                }
                let e = rel_err(an, fd);
                assert!(e < TOL, "{kind} {name}[{c}]: backward {an} vs fd {fd} (rel {e:.2e})");
            }
        }
    }
}

#[test]
fn gate_gradients_match_finite_differences() {
    let model = Model::<f64>::build(&toy_spec(), 9).unwrap();
    let mut r = setup(10);
    let x = rand_tensor(&mut r, &[4, 1, 6, 6]);
    let labels = vec![2, 1, 0, 1];
    let w = vec![0.5, -0.25, 1.0, 0.25];
    let mut gates = model.ones_gates();
    let out = model
        .run(&x, &ForwardOptions::eval().with_gates(&gates), Some((&labels, &w)), GradRequest { params: false, gates: true })
        .unwrap();
    for u in model.list_units() {
        let base = gates.get(u).unwrap();
        let mut loss_at = |v: f64| {
            gates.set(u, v).unwrap();
            model.run(&x, &ForwardOptions::eval().with_gates(&gates), Some((&labels, &w)), GradRequest::default()).unwrap().loss.unwrap()
        };
        let fd = (loss_at(base + STEP) - loss_at(base - STEP)) / (2.0 * STEP);
        gates.set(u, base).unwrap();
        let an = out.gate_grads[u.layer][u.unit];
        assert!(rel_err(an, fd) < TOL, "{u:?}: {an} vs {fd}");
    }
}
