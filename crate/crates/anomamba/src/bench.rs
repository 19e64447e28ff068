//! Wall-clock throughput for the scan primitives, one row per variant and
//! size. Informational: single thread, best-effort timing, no statistics.

use std::time::{Duration, Instant};

use anomamba_core::pyramid::{ps_recursive, PsWeights, PyramidSpec};
use anomamba_core::ssm::{discretize_zoh, ssm_conv, ssm_kernel, ssm_recurrent, SsmParams};
use anomamba_core::{Graph, ParamStore, Scope, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Seconds per iteration, doubling the repeat count until the measurement
/// window is long enough to trust.
fn time_one<F: FnMut()>(mut f: F, min_window: Duration) -> f64 {
    f();
    let mut iters = 1u64;
    loop {
        let start = Instant::now();
        for _ in 0..iters {
            f();
        }
        let elapsed = start.elapsed();
        if elapsed >= min_window || iters >= 1 << 24 {
            return elapsed.as_secs_f64() / iters as f64;
        }
        iters *= 2;
    }
}

fn row(out: &mut String, variant: &str, size: &str, elements: f64, seconds: f64) {
    let eps = elements / seconds;
    out.push_str(&format!("{variant:<16}{size:>8}{eps:>16.3e}\n"));
}

/// Renders the throughput table. `quick` shrinks the timing windows for
/// smoke tests; published numbers should use `quick = false`.
pub fn table(quick: bool) -> String {
    let window = if quick { Duration::from_micros(200) } else { Duration::from_millis(200) };
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe);
    let mut out = String::new();
    out.push_str(&format!("{:<16}{:>8}{:>16}\n", "variant", "size", "elements/s"));

    let (batch, ch, n) = (1usize, 16usize, 16usize);
    let params = SsmParams {
        a: rand_tensor(&mut rng, &[ch, n], -3.0, -0.05),
        b: rand_tensor(&mut rng, &[ch, n], -1.0, 1.0),
        c_out: rand_tensor(&mut rng, &[ch, n], -1.0, 1.0),
        delta: rand_tensor(&mut rng, &[ch], 0.01, 1.0),
    };
    let d = discretize_zoh(&params).expect("stable draw");
    for &len in &[256usize, 1024, 4096] {
        let x = rand_tensor(&mut rng, &[batch, len, ch], -1.0, 1.0);
        let elements = (batch * len * ch) as f64;
        let sec = time_one(
            || {
                ssm_recurrent(&d, &x).expect("recurrent");
            },
            window,
        );
        row(&mut out, "scan_recurrent", &format!("L={len}"), elements, sec);
        let sec = time_one(
            || {
                let k = ssm_kernel(&d, len).expect("kernel");
                ssm_conv(&k, &x).expect("conv");
            },
            window,
        );
        row(&mut out, "scan_kernel", &format!("L={len}"), elements, sec);
    }

    let (channels, h, w) = (16usize, 64usize, 64usize);
    for &levels in &[0usize, 1, 2] {
        let mut store = ParamStore::new();
        let spec = PyramidSpec { levels, shared: false };
        let weights = PsWeights::create(&mut store, &Scope::root("ps"), channels, 8, 2, spec, &mut rng)
            .expect("weights");
        let x = rand_tensor(&mut rng, &[1, channels, h, w], -1.0, 1.0);
        let elements = (channels * h * w) as f64;
        let sec = time_one(
            || {
                let mut g = Graph::inference();
                let xv = g.input(&x);
                let y = ps_recursive(&mut g, &store, xv, spec, &weights).expect("pyramid");
                let _ = g.value(y);
            },
            window,
        );
        row(&mut out, "ps_recursive", &format!("P={levels}"), elements, sec);
    }
    out
}
