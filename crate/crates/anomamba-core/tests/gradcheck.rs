//! Central finite-difference validation of every backward rule, on tiny
//! well-scaled shapes. Each check builds the op output, takes a weighted
//! sum against a fixed random tensor so cotangents are non-uniform, and
//! compares analytic leaf gradients against central differences. The
//! numeric side reduces the output in f64 on the host so the comparison
//! is limited by the op's own forward precision, not by the reduction.

use anomamba_core::blocks::{css, CssConfig, CssWeights};
use anomamba_core::pyramid::PyramidSpec;
use anomamba_core::{ConvSpec, Graph, ParamStore, ScanDirection, Scope, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn dot64(y: &Tensor, w: &Tensor) -> f64 {
    assert_eq!(y.numel(), w.numel(), "loss weight shape mismatch");
    y.data().iter().zip(w.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
}

fn numeric_loss(inputs: &[Tensor], weights: &Tensor, f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let y = f(&mut g, &vars);
    dot64(g.value(y), weights)
}

/// Checks d(wsum(f(inputs)))/d(input) for every element of every input
/// against a central difference.
fn check(name: &str, inputs: &[Tensor], weights: &Tensor, f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vars);
    let w = g.input(weights);
    let p = g.mul(y, w).expect("weight shape matches output");
    let loss = g.sum_all(p);
    g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> =
        vars.iter().map(|&v| g.grad(v).expect("leaf grad").clone()).collect();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + STEP as f32;
            let up = numeric_loss(&work, weights, f);
            work[i].data_mut()[e] = orig - STEP as f32;
            let down = numeric_loss(&work, weights, f);
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i].data()[e] as f64;
            assert!(
                rel_err(a, numeric) < TOL,
                "{name}: input {i} element {e}: analytic {a}, numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2usize, 3];
    let a = rand_tensor(&mut rng, &shape, -0.5, 0.5);
    let b = rand_tensor(&mut rng, &shape, -0.5, 0.5);
    let w = rand_tensor(&mut rng, &shape, -0.3, 0.3);
    check("add", &[a.clone(), b.clone()], &w, &|g, v| g.add(v[0], v[1]).unwrap());
    check("sub", &[a.clone(), b.clone()], &w, &|g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", &[a.clone(), b.clone()], &w, &|g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", &[a.clone()], &w, &|g, v| g.scale(v[0], -1.7));
    check("silu", &[a.clone()], &w, &|g, v| g.silu(v[0]));
    check("softplus", &[a.clone()], &w, &|g, v| g.softplus(v[0]));
    check("exp", &[a.clone()], &w, &|g, v| g.exp(v[0]));
    // a composite with a shared input: silu(a * b) + exp(a)
    check("composite", &[a, b], &w, &|g, v| {
        let p = g.mul(v[0], v[1]).unwrap();
        let s = g.silu(p);
        let e = g.exp(v[0]);
        g.add(s, e).unwrap()
    });
}

#[test]
fn linear_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[4, 3], -0.5, 0.5);
    let wm = rand_tensor(&mut rng, &[2, 3], -0.4, 0.4);
    let b = rand_tensor(&mut rng, &[2], -0.3, 0.3);
    let lw = rand_tensor(&mut rng, &[4, 2], -0.3, 0.3);
    check("linear with bias", &[x.clone(), wm.clone(), b], &lw, &|g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    });
    check("linear no bias", &[x, wm], &lw, &|g, v| g.linear(v[0], v[1], None).unwrap());
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -0.5, 0.5);
    let w3 = rand_tensor(&mut rng, &[2, 2, 3, 3], -0.3, 0.3);
    let b3 = rand_tensor(&mut rng, &[2], -0.2, 0.2);
    let lw_same = rand_tensor(&mut rng, &[1, 2, 4, 4], -0.3, 0.3);
    check("conv 3x3 pad 1", &[x.clone(), w3, b3.clone()], &lw_same, &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 1, pad: 1, groups: 1 }).unwrap()
    });
    let w1 = rand_tensor(&mut rng, &[3, 2, 1, 1], -0.3, 0.3);
    let lw1 = rand_tensor(&mut rng, &[1, 3, 4, 4], -0.3, 0.3);
    check("conv 1x1", &[x.clone(), w1], &lw1, &|g, v| {
        g.conv2d(v[0], v[1], None, ConvSpec::unit()).unwrap()
    });
    let ws = rand_tensor(&mut rng, &[2, 2, 3, 3], -0.3, 0.3);
    let lws = rand_tensor(&mut rng, &[1, 2, 2, 2], -0.3, 0.3);
    check("conv stride 2", &[x.clone(), ws, b3], &lws, &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 2, pad: 1, groups: 1 }).unwrap()
    });
    let wd = rand_tensor(&mut rng, &[2, 1, 3, 3], -0.3, 0.3);
    let bd = rand_tensor(&mut rng, &[2], -0.2, 0.2);
    check("conv depthwise", &[x, wd, bd], &lw_same, &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 1, pad: 1, groups: 2 }).unwrap()
    });
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 3, 2, 2], -0.8, 0.8);
    let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[3], -0.3, 0.3);
    let lw = rand_tensor(&mut rng, &[1, 3, 2, 2], -0.2, 0.2);
    check("layer_norm", &[x, gamma, beta], &lw, &|g, v| {
        g.layer_norm(v[0], 1, v[1], v[2], 1e-5).unwrap()
    });
}

#[test]
fn shape_and_traversal_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[1, 2, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[1, 1, 3, 3], -0.5, 0.5);
    let lw_cat = rand_tensor(&mut rng, &[1, 3, 3, 3], -0.3, 0.3);
    check("concat", &[a.clone(), b.clone()], &lw_cat, &|g, v| {
        g.concat(&[v[0], v[1]], 1).unwrap()
    });
    let lw_narrow = rand_tensor(&mut rng, &[1, 2, 2, 3], -0.3, 0.3);
    check("narrow", &[a.clone()], &lw_narrow, &|g, v| g.narrow(v[0], 2, 1, 2).unwrap());
    let lw_flat = rand_tensor(&mut rng, &[18], -0.3, 0.3);
    check("reshape", &[a.clone()], &lw_flat, &|g, v| g.reshape(v[0], &[18]).unwrap());
    for dir in ScanDirection::ALL {
        let lw_seq = rand_tensor(&mut rng, &[1, 9, 2], -0.3, 0.3);
        check(&format!("seq_from_map {dir:?}"), &[a.clone()], &lw_seq, &|g, v| {
            g.seq_from_map(v[0], dir).unwrap()
        });
        let lw_map = rand_tensor(&mut rng, &[1, 2, 3, 3], -0.3, 0.3);
        let seq = rand_tensor(&mut rng, &[1, 9, 2], -0.5, 0.5);
        check(&format!("map_from_seq {dir:?}"), &[seq], &lw_map, &|g, v| {
            g.map_from_seq(v[0], dir, 3, 3).unwrap()
        });
    }
    let lw_up = rand_tensor(&mut rng, &[1, 2, 5, 6], -0.3, 0.3);
    check("bilinear", &[a], &lw_up, &|g, v| g.bilinear_resize(v[0], 5, 6).unwrap());
}

#[test]
fn losses_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let one = Tensor::scalar(1.0);
    let a = rand_tensor(&mut rng, &[2, 4], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[2, 4], -0.5, 0.5);
    check("mse", &[a.clone(), b], &one, &|g, v| g.mse(v[0], v[1]).unwrap());
    check("sum_all", &[a.clone()], &one, &|g, v| g.sum_all(v[0]));
    check("mean_all", &[a.clone()], &one, &|g, v| g.mean_all(v[0]));
    check("scaled mean", &[a], &one, &|g, v| {
        let m = g.mean_all(v[0]);
        g.scale(m, 2.5)
    });
}

#[test]
fn fused_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (batch, len, ch, n) = (1usize, 4usize, 2usize, 3usize);
    let x = rand_tensor(&mut rng, &[batch, len, ch], -0.5, 0.5);
    // keep delta comfortably positive and a negative so the finite
    // difference stays inside the valid parameter region
    let delta = rand_tensor(&mut rng, &[batch, len, ch], 0.2, 0.8);
    let bseq = rand_tensor(&mut rng, &[batch, len, n], -0.5, 0.5);
    let cseq = rand_tensor(&mut rng, &[batch, len, n], -0.5, 0.5);
    let a = rand_tensor(&mut rng, &[ch, n], -1.2, -0.2);
    let lw = rand_tensor(&mut rng, &[batch, len, ch], -0.3, 0.3);
    check("ssm_scan", &[x, delta, bseq, cseq, a], &lw, &|g, v| {
        g.ssm_scan(v[0], v[1], v[2], v[3], v[4]).unwrap()
    });
}

/// Full decoder block: all analytic parameter gradients against central
/// differences through the composed forward pass.
#[test]
fn css_block_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = CssConfig {
        channels: 2,
        state_dim: 2,
        dt_rank: 1,
        m: 1,
        pyramid: PyramidSpec { levels: 1, shared: false },
        use_global: true,
        use_local: true,
    };
    let mut store = ParamStore::new();
    let weights = CssWeights::create(&mut store, &Scope::root("css"), &cfg, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -0.5, 0.5);
    let lw = rand_tensor(&mut rng, &[1, 2, 4, 4], -0.2, 0.2);

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = css(&mut g, &store, xv, &weights, &cfg).unwrap();
    let wv = g.input(&lw);
    let p = g.mul(y, wv).unwrap();
    let loss = g.sum_all(p);
    g.backward(loss).expect("backward");
    let x_grad = g.grad(xv).expect("input grad").clone();
    let param_grads: Vec<(String, Tensor)> = store
        .trainable_ids()
        .into_iter()
        .map(|id| {
            let grad = g
                .param_grad(id)
                .unwrap_or_else(|| panic!("parameter {} received no gradient", store.name(id)));
            (store.name(id).to_string(), grad.clone())
        })
        .collect();

    let eval = |store: &ParamStore, x: &Tensor| -> f64 {
        let mut g = Graph::inference();
        let xv = g.input(x);
        let y = css(&mut g, store, xv, &weights, &cfg).unwrap();
        dot64(g.value(y), &lw)
    };

    let mut x_work = x.clone();
    for e in 0..x.numel() {
        let orig = x_work.data()[e];
        x_work.data_mut()[e] = orig + STEP as f32;
        let up = eval(&store, &x_work);
        x_work.data_mut()[e] = orig - STEP as f32;
        let down = eval(&store, &x_work);
        x_work.data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = x_grad.data()[e] as f64;
        assert!(
            rel_err(a, numeric) < TOL,
            "css input element {e}: analytic {a}, numeric {numeric}"
        );
    }

    for (id, (name, grads)) in store.trainable_ids().into_iter().zip(&param_grads) {
        for e in 0..grads.numel() {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + STEP as f32;
            let up = eval(&store, &x);
            store.value_mut(id).data_mut()[e] = orig - STEP as f32;
            let down = eval(&store, &x);
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grads.data()[e] as f64;
            assert!(
                rel_err(a, numeric) < TOL,
                "css parameter {name} element {e}: analytic {a}, numeric {numeric}"
            );
        }
    }
}
