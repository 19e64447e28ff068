//! Self-contained correctness checks that pit the numeric core against
//! independent oracles: brute-force recurrences, closed-form f64 references,
//! unrolled compositions, central finite differences, and naive metric
//! recounts. Shared between the `selftest` subcommand and the integration
//! suite; each check returns the first violated property as an error string.

use anomamba_core::blocks::{css, CssConfig, CssWeights};
use anomamba_core::metrics::{aupro, auroc, average_precision, f1_max};
use anomamba_core::pyramid::{cat, ps_recursive, ps_recursive_with, split, PsWeights, PyramidSpec};
use anomamba_core::ssm::{
    discretize_zoh, scan4, ssm_conv, ssm_kernel, ssm_recurrent, SsmParams,
};
use anomamba_core::{ConvSpec, Graph, ParamStore, ScanDirection, Scope, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<(), String>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Recurrent evaluation must match the unrolled convolution form of the
/// same discrete system.
pub fn scan_equivalence(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1);
    for trial in 0..trials {
        let ch = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=8);
        let len = rng.gen_range(2..=64);
        let batch = rng.gen_range(1..=2);
        let params = SsmParams {
            a: rand_tensor(&mut rng, &[ch, n], -3.0, -0.05),
            b: rand_tensor(&mut rng, &[ch, n], -1.0, 1.0),
            c_out: rand_tensor(&mut rng, &[ch, n], -1.0, 1.0),
            delta: rand_tensor(&mut rng, &[ch], 0.01, 1.5),
        };
        let d = discretize_zoh(&params).map_err(|e| format!("trial {trial}: {e}"))?;
        let x = rand_tensor(&mut rng, &[batch, len, ch], -1.0, 1.0);
        let y_rec = ssm_recurrent(&d, &x).map_err(|e| format!("trial {trial}: {e}"))?;
        let k = ssm_kernel(&d, len).map_err(|e| format!("trial {trial}: {e}"))?;
        let y_conv = ssm_conv(&k, &x).map_err(|e| format!("trial {trial}: {e}"))?;
        let diff = max_abs_diff(&y_rec, &y_conv);
        if diff > 1e-5 {
            return Err(format!(
                "trial {trial}: recurrent and convolution disagree by {diff} \
                 (batch {batch}, len {len}, ch {ch}, state {n})"
            ));
        }
    }
    Ok(())
}

fn scalar_system(a: f32, b: f32, delta: f32) -> SsmParams {
    SsmParams {
        a: Tensor::full(&[1, 1], a),
        b: Tensor::full(&[1, 1], b),
        c_out: Tensor::full(&[1, 1], 1.0),
        delta: Tensor::full(&[1], delta),
    }
}

/// Zero-order-hold discretization against closed-form values, small-step
/// limits, and an f64 reference across the series/exact switchover.
pub fn discretization() -> Check {
    // a = -1, delta = ln 2 halves the state and mixes in half the input
    let d = discretize_zoh(&scalar_system(-1.0, 1.0, core::f32::consts::LN_2))
        .map_err(|e| e.to_string())?;
    let (ab, bb) = (d.a_bar.data()[0], d.b_bar.data()[0]);
    if (ab - 0.5).abs() > 1e-6 {
        return Err(format!("a_bar at ln 2: expected 0.5, got {ab}"));
    }
    if (bb - 0.5).abs() > 1e-6 {
        return Err(format!("b_bar at ln 2: expected 0.5, got {bb}"));
    }
    // delta -> 0: a_bar -> 1 and b_bar -> delta * b
    let tiny = 1e-8f32;
    let d = discretize_zoh(&scalar_system(-1.0, 2.0, tiny)).map_err(|e| e.to_string())?;
    let (ab, bb) = (d.a_bar.data()[0], d.b_bar.data()[0]);
    if (ab - 1.0).abs() > 1e-6 {
        return Err(format!("a_bar at delta {tiny}: expected ~1, got {ab}"));
    }
    let expect = tiny * 2.0;
    if ((bb - expect) / expect).abs() > 1e-6 {
        return Err(format!("b_bar at delta {tiny}: expected {expect}, got {bb}"));
    }
    // both branches against the f64 closed form. The series branch is first
    // order, so its truncation error is |delta a| / 2; only points with
    // |delta a| <= 2e-6 can meet the 1e-6 bound. The exact branch is f64
    // arithmetic rounded once to f32, which meets it everywhere.
    let series_points: &[(f32, f32)] = &[(-1.0, 1e-6), (-0.5, 2e-6), (-1e-6, 1.0), (-2.0, 1e-7)];
    let exact_points: &[(f32, f32)] = &[(-1.0, 1.01e-4), (-2.5, 1e-3), (-0.5, 0.3), (-3.0, 1.0)];
    for &(a, delta) in series_points.iter().chain(exact_points) {
        let b = 1.3f32;
        let d = discretize_zoh(&scalar_system(a, b, delta)).map_err(|e| e.to_string())?;
        let reference = (delta as f64 * a as f64).exp_m1() / a as f64 * b as f64;
        let got = d.b_bar.data()[0] as f64;
        let rel = ((got - reference) / reference).abs();
        if rel > 1e-6 {
            return Err(format!(
                "b_bar at a {a}, delta {delta}: {got} vs f64 reference {reference} (rel {rel})"
            ));
        }
    }
    Ok(())
}

/// Quadrant split and reassembly must be lossless, the recursion must be
/// exact identity under an identity map operator, and the recursion must
/// match its explicit three-level unrolling with shared weights.
pub fn partition_identities(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a21);
    for trial in 0..trials {
        let shape = [
            rng.gen_range(1..=2),
            rng.gen_range(1..=4),
            2 * rng.gen_range(1..=8),
            2 * rng.gen_range(1..=8),
        ];
        let x = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let mut g = Graph::inference();
        let xv = g.input(&x);
        let q = split(&mut g, xv).map_err(|e| format!("trial {trial}: {e}"))?;
        let y = cat(&mut g, &q).map_err(|e| format!("trial {trial}: {e}"))?;
        if g.value(y).data() != x.data() {
            return Err(format!("trial {trial}: cat(split(x)) != x for shape {shape:?}"));
        }
    }
    // identity map operator: every level sees the tensor it was given and
    // the averaging collapses to the input, bit for bit
    for levels in 0..=2usize {
        let side = 4 << levels;
        let x = rand_tensor(&mut rng, &[1, 2, side, side], 0.1, 1.0);
        let mut g = Graph::inference();
        let xv = g.input(&x);
        let y = ps_recursive_with(&mut g, xv, 0, levels, &mut |_, v, _| Ok(v))
            .map_err(|e| e.to_string())?;
        if g.value(y).data() != x.data() {
            return Err(format!("identity recursion altered its input at P = {levels}"));
        }
    }
    // explicit unrolling: r(x) = s0(x)/2 + cat(s1(q))/4 + cat(cat(s2(qq)))/4
    let mut store = ParamStore::new();
    let spec = PyramidSpec { levels: 2, shared: false };
    let w = PsWeights::create(&mut store, &Scope::root("ps"), 2, 2, 1, spec, &mut rng)
        .map_err(|e| e.to_string())?;
    let x = rand_tensor(&mut rng, &[1, 2, 8, 8], -0.5, 0.5);
    let mut g = Graph::inference();
    let xv = g.input(&x);
    let recursive = ps_recursive(&mut g, &store, xv, spec, &w).map_err(|e| e.to_string())?;
    let unrolled = (|| -> anomamba_core::Result<Var> {
        let l0 = scan4(&mut g, &store, xv, w.level(0))?;
        let q = split(&mut g, xv)?;
        let mut l1 = Vec::new();
        let mut l2 = Vec::new();
        for &qi in &q {
            l1.push(scan4(&mut g, &store, qi, w.level(1))?);
            let qq = split(&mut g, qi)?;
            let mut sub = Vec::new();
            for &qj in &qq {
                sub.push(scan4(&mut g, &store, qj, w.level(2))?);
            }
            l2.push(cat(&mut g, &[sub[0], sub[1], sub[2], sub[3]])?);
        }
        let a1 = cat(&mut g, &[l1[0], l1[1], l1[2], l1[3]])?;
        let a2 = cat(&mut g, &[l2[0], l2[1], l2[2], l2[3]])?;
        let s0 = g.scale(l0, 0.5);
        let s1 = g.scale(a1, 0.25);
        let s2 = g.scale(a2, 0.25);
        let partial = g.add(s0, s1)?;
        g.add(partial, s2)
    })()
    .map_err(|e| e.to_string())?;
    let diff = max_abs_diff(g.value(recursive), g.value(unrolled));
    if diff > 1e-6 {
        return Err(format!("recursion differs from its unrolling by {diff}"));
    }
    Ok(())
}

const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn dot64(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
}

fn numeric_loss(inputs: &[Tensor], weights: &Tensor, f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let y = f(&mut g, &vars);
    dot64(g.value(y), weights)
}

/// Analytic gradient of a weighted output sum against central differences,
/// for every element of every input. The numeric reduction runs in f64 so
/// the comparison is bounded by the op's forward precision.
fn fd_check(
    name: &str,
    inputs: &[Tensor],
    weights: &Tensor,
    f: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> Check {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vars);
    let w = g.input(weights);
    let p = g.mul(y, w).map_err(|e| format!("{name}: {e}"))?;
    let loss = g.sum_all(p);
    g.backward(loss).map_err(|e| format!("{name}: {e}"))?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| g.grad(v).cloned().ok_or(format!("{name}: input {i} got no gradient")))
        .collect::<std::result::Result<_, _>>()?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + FD_STEP as f32;
            let up = numeric_loss(&work, weights, f);
            work[i].data_mut()[e] = orig - FD_STEP as f32;
            let down = numeric_loss(&work, weights, f);
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].data()[e] as f64;
            if rel_err(a, numeric) >= FD_TOL {
                return Err(format!(
                    "{name}: input {i} element {e}: analytic {a}, numeric {numeric}"
                ));
            }
        }
    }
    Ok(())
}

/// Finite-difference validation of every differentiable op.
pub fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    let shape = [2usize, 3];
    let a = rand_tensor(&mut rng, &shape, -0.5, 0.5);
    let b = rand_tensor(&mut rng, &shape, -0.5, 0.5);
    let w = rand_tensor(&mut rng, &shape, -0.3, 0.3);
    fd_check("add", &[a.clone(), b.clone()], &w, &|g, v| g.add(v[0], v[1]).unwrap())?;
    fd_check("sub", &[a.clone(), b.clone()], &w, &|g, v| g.sub(v[0], v[1]).unwrap())?;
    fd_check("mul", &[a.clone(), b.clone()], &w, &|g, v| g.mul(v[0], v[1]).unwrap())?;
    fd_check("scale", &[a.clone()], &w, &|g, v| g.scale(v[0], -1.7))?;
    fd_check("silu", &[a.clone()], &w, &|g, v| g.silu(v[0]))?;
    fd_check("softplus", &[a.clone()], &w, &|g, v| g.softplus(v[0]))?;
    fd_check("exp", &[a.clone()], &w, &|g, v| g.exp(v[0]))?;
    fd_check("composite", &[a.clone(), b], &w, &|g, v| {
        let p = g.mul(v[0], v[1]).unwrap();
        let s = g.silu(p);
        let e = g.exp(v[0]);
        g.add(s, e).unwrap()
    })?;

    let x = rand_tensor(&mut rng, &[4, 3], -0.5, 0.5);
    let wm = rand_tensor(&mut rng, &[2, 3], -0.4, 0.4);
    let bias = rand_tensor(&mut rng, &[2], -0.3, 0.3);
    let lw = rand_tensor(&mut rng, &[4, 2], -0.3, 0.3);
    fd_check("linear with bias", &[x.clone(), wm.clone(), bias], &lw, &|g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    })?;
    fd_check("linear no bias", &[x, wm], &lw, &|g, v| g.linear(v[0], v[1], None).unwrap())?;

    let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -0.5, 0.5);
    let w3 = rand_tensor(&mut rng, &[2, 2, 3, 3], -0.3, 0.3);
    let b3 = rand_tensor(&mut rng, &[2], -0.2, 0.2);
    let lw_same = rand_tensor(&mut rng, &[1, 2, 4, 4], -0.3, 0.3);
    fd_check("conv 3x3 pad 1", &[x.clone(), w3, b3.clone()], &lw_same, &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 1, pad: 1, groups: 1 }).unwrap()
    })?;
    let w1 = rand_tensor(&mut rng, &[3, 2, 1, 1], -0.3, 0.3);
    let lw1 = rand_tensor(&mut rng, &[1, 3, 4, 4], -0.3, 0.3);
    fd_check("conv 1x1", &[x.clone(), w1], &lw1, &|g, v| {
        g.conv2d(v[0], v[1], None, ConvSpec::unit()).unwrap()
    })?;
    let ws = rand_tensor(&mut rng, &[2, 2, 3, 3], -0.3, 0.3);
    let lws = rand_tensor(&mut rng, &[1, 2, 2, 2], -0.3, 0.3);
    fd_check("conv stride 2", &[x.clone(), ws, b3], &lws, &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 2, pad: 1, groups: 1 }).unwrap()
    })?;
    let wd = rand_tensor(&mut rng, &[2, 1, 3, 3], -0.3, 0.3);
    let bd = rand_tensor(&mut rng, &[2], -0.2, 0.2);
    fd_check("conv depthwise", &[x.clone(), wd, bd], &lw_same, &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 1, pad: 1, groups: 2 }).unwrap()
    })?;

    let xn = rand_tensor(&mut rng, &[1, 3, 2, 2], -0.8, 0.8);
    let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[3], -0.3, 0.3);
    let lwn = rand_tensor(&mut rng, &[1, 3, 2, 2], -0.2, 0.2);
    fd_check("layer_norm", &[xn, gamma, beta], &lwn, &|g, v| {
        g.layer_norm(v[0], 1, v[1], v[2], 1e-5).unwrap()
    })?;

    let a4 = rand_tensor(&mut rng, &[1, 2, 3, 3], -0.5, 0.5);
    let b4 = rand_tensor(&mut rng, &[1, 1, 3, 3], -0.5, 0.5);
    let lw_cat = rand_tensor(&mut rng, &[1, 3, 3, 3], -0.3, 0.3);
    fd_check("concat", &[a4.clone(), b4], &lw_cat, &|g, v| g.concat(&[v[0], v[1]], 1).unwrap())?;
    let lw_narrow = rand_tensor(&mut rng, &[1, 2, 2, 3], -0.3, 0.3);
    fd_check("narrow", &[a4.clone()], &lw_narrow, &|g, v| g.narrow(v[0], 2, 1, 2).unwrap())?;
    let lw_flat = rand_tensor(&mut rng, &[18], -0.3, 0.3);
    fd_check("reshape", &[a4.clone()], &lw_flat, &|g, v| g.reshape(v[0], &[18]).unwrap())?;
    for dir in ScanDirection::ALL {
        let lw_seq = rand_tensor(&mut rng, &[1, 9, 2], -0.3, 0.3);
        fd_check(&format!("seq_from_map {dir:?}"), &[a4.clone()], &lw_seq, &|g, v| {
            g.seq_from_map(v[0], dir).unwrap()
        })?;
        let lw_map = rand_tensor(&mut rng, &[1, 2, 3, 3], -0.3, 0.3);
        let seq = rand_tensor(&mut rng, &[1, 9, 2], -0.5, 0.5);
        fd_check(&format!("map_from_seq {dir:?}"), &[seq], &lw_map, &|g, v| {
            g.map_from_seq(v[0], dir, 3, 3).unwrap()
        })?;
    }
    let lw_up = rand_tensor(&mut rng, &[1, 2, 5, 6], -0.3, 0.3);
    fd_check("bilinear", &[a4], &lw_up, &|g, v| g.bilinear_resize(v[0], 5, 6).unwrap())?;

    let one = Tensor::scalar(1.0);
    let la = rand_tensor(&mut rng, &[2, 4], -0.5, 0.5);
    let lb = rand_tensor(&mut rng, &[2, 4], -0.5, 0.5);
    fd_check("mse", &[la.clone(), lb], &one, &|g, v| g.mse(v[0], v[1]).unwrap())?;
    fd_check("sum_all", &[la.clone()], &one, &|g, v| g.sum_all(v[0]))?;
    fd_check("mean_all", &[la], &one, &|g, v| g.mean_all(v[0]))?;

    let (batch, len, ch, n) = (1usize, 4usize, 2usize, 3usize);
    let sx = rand_tensor(&mut rng, &[batch, len, ch], -0.5, 0.5);
    let delta = rand_tensor(&mut rng, &[batch, len, ch], 0.2, 0.8);
    let bseq = rand_tensor(&mut rng, &[batch, len, n], -0.5, 0.5);
    let cseq = rand_tensor(&mut rng, &[batch, len, n], -0.5, 0.5);
    let sa = rand_tensor(&mut rng, &[ch, n], -1.2, -0.2);
    let lw_scan = rand_tensor(&mut rng, &[batch, len, ch], -0.3, 0.3);
    fd_check("ssm_scan", &[sx, delta, bseq, cseq, sa], &lw_scan, &|g, v| {
        g.ssm_scan(v[0], v[1], v[2], v[3], v[4]).unwrap()
    })?;
    Ok(())
}

/// Finite differences through the full scanning block, covering the input
/// and every trainable parameter.
pub fn gradient_css_block() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc55);
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
    let weights = CssWeights::create(&mut store, &Scope::root("css"), &cfg, &mut rng)
        .map_err(|e| e.to_string())?;
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -0.5, 0.5);
    let lw = rand_tensor(&mut rng, &[1, 2, 4, 4], -0.2, 0.2);

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = css(&mut g, &store, xv, &weights, &cfg).map_err(|e| e.to_string())?;
    let wv = g.input(&lw);
    let p = g.mul(y, wv).map_err(|e| e.to_string())?;
    let loss = g.sum_all(p);
    g.backward(loss).map_err(|e| e.to_string())?;
    let x_grad = g.grad(xv).ok_or("css input got no gradient")?.clone();
    let param_grads: Vec<(String, Tensor)> = store
        .trainable_ids()
        .into_iter()
        .map(|id| {
            g.param_grad(id)
                .map(|t| (store.name(id).to_string(), t.clone()))
                .ok_or(format!("parameter {} received no gradient", store.name(id)))
        })
        .collect::<std::result::Result<_, _>>()?;

    let eval = |store: &ParamStore, x: &Tensor| -> anomamba_core::Result<f64> {
        let mut g = Graph::inference();
        let xv = g.input(x);
        let y = css(&mut g, store, xv, &weights, &cfg)?;
        Ok(dot64(g.value(y), &lw))
    };

    let mut x_work = x.clone();
    for e in 0..x.numel() {
        let orig = x_work.data()[e];
        x_work.data_mut()[e] = orig + FD_STEP as f32;
        let up = eval(&store, &x_work).map_err(|e| e.to_string())?;
        x_work.data_mut()[e] = orig - FD_STEP as f32;
        let down = eval(&store, &x_work).map_err(|e| e.to_string())?;
        x_work.data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = x_grad.data()[e] as f64;
        if rel_err(a, numeric) >= FD_TOL {
            return Err(format!("css input element {e}: analytic {a}, numeric {numeric}"));
        }
    }
    for (id, (name, grads)) in store.trainable_ids().into_iter().zip(&param_grads) {
        for e in 0..grads.numel() {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + FD_STEP as f32;
            let up = eval(&store, &x).map_err(|e| e.to_string())?;
            store.value_mut(id).data_mut()[e] = orig - FD_STEP as f32;
            let down = eval(&store, &x).map_err(|e| e.to_string())?;
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grads.data()[e] as f64;
            if rel_err(a, numeric) >= FD_TOL {
                return Err(format!(
                    "css parameter {name} element {e}: analytic {a}, numeric {numeric}"
                ));
            }
        }
    }
    Ok(())
}

fn auroc_oracle(scores: &[f32], labels: &[bool]) -> f64 {
    let mut pairs = 0u64;
    let mut credit = 0.0f64;
    for (i, &pos) in labels.iter().enumerate() {
        if !pos {
            continue;
        }
        for (j, &other) in labels.iter().enumerate() {
            if other {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                credit += 1.0;
            } else if scores[i] == scores[j] {
                credit += 0.5;
            }
        }
    }
    credit / pairs as f64
}

fn distinct_descending(scores: &[f32]) -> Vec<f32> {
    let mut t = scores.to_vec();
    t.sort_unstable_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(scores: &[f32], labels: &[bool], threshold: f32) -> (f64, f64) {
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= threshold {
            if l {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    (tp, fp)
}

fn ap_oracle(scores: &[f32], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    for &t in &distinct_descending(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        let precision = tp / (tp + fp);
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

fn f1_oracle(scores: &[f32], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut best = 0.0f64;
    for &t in &distinct_descending(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        if tp == 0.0 {
            continue;
        }
        let f1 = 2.0 * tp / (2.0 * tp + fp + (total_pos - tp));
        best = best.max(f1);
    }
    best
}

/// 8-connected labeling by flood fill, independent of the library's
/// union-find labeling.
fn regions_oracle(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Per-threshold recount of the overlap curve, trapezoid-integrated to the
/// false-positive limit.
fn aupro_oracle(maps: &[Tensor], masks: &[Tensor], limit: f64) -> f64 {
    let mut regions: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut neg: Vec<(usize, usize)> = Vec::new();
    let mut all_scores = Vec::new();
    for (idx, (map, mask)) in maps.iter().zip(masks).enumerate() {
        let h = map.shape()[0];
        let w = map.shape()[1];
        let bits: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
        for comp in regions_oracle(&bits, h, w) {
            regions.push((idx, comp));
        }
        for (p, &b) in bits.iter().enumerate() {
            if !b {
                neg.push((idx, p));
            }
        }
        all_scores.extend_from_slice(map.data());
    }
    let mut area = 0.0f64;
    let mut prev = (0.0f64, 0.0f64);
    for &t in &distinct_descending(&all_scores) {
        let mut overlap = 0.0f64;
        for (idx, comp) in &regions {
            let hits = comp.iter().filter(|&&p| maps[*idx].data()[p] >= t).count();
            overlap += hits as f64 / comp.len() as f64;
        }
        let pro = overlap / regions.len() as f64;
        let fp = neg.iter().filter(|(idx, p)| maps[*idx].data()[*p] >= t).count();
        let fpr = fp as f64 / neg.len() as f64;
        if fpr <= limit {
            area += (fpr - prev.0) * (pro + prev.1) / 2.0;
            prev = (fpr, pro);
        } else {
            let t = (limit - prev.0) / (fpr - prev.0);
            let pro_at_limit = prev.1 + t * (pro - prev.1);
            area += (limit - prev.0) * (pro_at_limit + prev.1) / 2.0;
            break;
        }
    }
    area / limit
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<bool>) {
    loop {
        let n = rng.gen_range(8..40);
        let gridded = rng.gen_bool(0.5);
        let scores: Vec<f32> = (0..n)
            .map(|_| {
                if gridded {
                    rng.gen_range(0..=24) as f32 / 8.0
                } else {
                    rng.gen_range(0.0..3.0)
                }
            })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

/// Ranking metrics against worked examples and naive recount oracles.
pub fn metric_oracles(instances: usize) -> Check {
    let scores = [0.1f32, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    let roc = auroc(&scores, &labels).map_err(|e| e.to_string())?;
    if roc != 0.75 {
        return Err(format!("worked example: auroc {roc}, expected 0.75"));
    }
    let ap = average_precision(&scores, &labels).map_err(|e| e.to_string())?;
    if (ap - 5.0 / 6.0).abs() > 1e-12 {
        return Err(format!("worked example: average precision {ap}, expected 5/6"));
    }
    let f1 = f1_max(&scores, &labels).map_err(|e| e.to_string())?;
    if (f1 - 0.8).abs() > 1e-12 {
        return Err(format!("worked example: best f1 {f1}, expected 0.8"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    for trial in 0..instances {
        let (scores, labels) = random_instance(&mut rng);
        let pairs = [
            ("auroc", auroc(&scores, &labels), auroc_oracle(&scores, &labels)),
            ("ap", average_precision(&scores, &labels), ap_oracle(&scores, &labels)),
            ("f1_max", f1_max(&scores, &labels), f1_oracle(&scores, &labels)),
        ];
        for (name, got, want) in pairs {
            let got = got.map_err(|e| format!("trial {trial} {name}: {e}"))?;
            if (got - want).abs() > 1e-9 {
                return Err(format!(
                    "trial {trial} {name}: {got} vs oracle {want} \
                     (n = {}, scores {scores:?})",
                    scores.len()
                ));
            }
        }
    }
    Ok(())
}

/// Region-overlap curve area against the per-threshold recount oracle.
pub fn aupro_oracle_check(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa9);
    for trial in 0..instances {
        let (h, w) = (8usize, 8usize);
        let count = rng.gen_range(1..=2);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        let mut any_region = false;
        let mut any_neg = false;
        for _ in 0..count {
            let map = Tensor::new(
                &[h, w],
                (0..h * w).map(|_| rng.gen_range(0..=12) as f32 / 4.0).collect(),
            )
            .expect("valid shape");
            let mask_bits: Vec<f32> =
                (0..h * w).map(|_| if rng.gen_bool(0.25) { 1.0 } else { 0.0 }).collect();
            any_region |= mask_bits.iter().any(|&v| v > 0.5);
            any_neg |= mask_bits.iter().any(|&v| v < 0.5);
            masks.push(Tensor::new(&[h, w], mask_bits).expect("valid shape"));
            maps.push(map);
        }
        if !any_region || !any_neg {
            continue;
        }
        for limit in [0.3f64, 1.0] {
            let got = aupro(&maps, &masks, limit)
                .map_err(|e| format!("trial {trial} limit {limit}: {e}"))?;
            let want = aupro_oracle(&maps, &masks, limit);
            if (got - want).abs() > 1e-9 {
                return Err(format!(
                    "trial {trial} limit {limit}: aupro {got} vs oracle {want}"
                ));
            }
        }
    }
    Ok(())
}
