//! Randomized gradient verification: every differentiable op's analytic
//! backward pass is compared against central finite differences on small
//! random instances. Self-contained (own splitmix64 generator) so a fixed
//! seed reproduces the exact same cases everywhere.

use crate::gradcheck::{finite_diff_grad, max_relative_error, FD_DEFAULT_STEP};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Deterministic splitmix64 stream.
pub struct Mix64(u64);

impl Mix64 {
    pub fn new(seed: u64) -> Mix64 {
        Mix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Inclusive integer range.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }
}

fn rand_tensor(rng: &mut Mix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.range(lo, hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape")
}

/// Values with pairwise gaps far larger than the finite-difference step, so
/// max/argmax ops never sit on a tie.
fn distinct_tensor(rng: &mut Mix64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        vals.swap(i, j);
    }
    Tensor::from_vec(shape.to_vec(), vals).expect("shape")
}

/// Values bounded away from zero so the relu kink is never straddled.
fn signed_tensor(rng: &mut Mix64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.range(0.05, 1.0);
            if rng.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape")
}

/// Offsets whose fractional part stays in [0.1, 0.9]: bilinear interpolation
/// has kinks at integer positions and the checker must not straddle them.
fn offset_tensor(rng: &mut Mix64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let whole = rng.int(0, 4) as f64 - 2.0;
            whole + rng.range(0.1, 0.9)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape")
}

fn binary_tensor(rng: &mut Mix64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape")
}

/// Max normalized deviation between the tape's analytic gradient for `probe`
/// and central finite differences through the same computation.
fn probe_gradient(probe: &Tensor, build: &dyn Fn(&mut Tape, VarId) -> VarId) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(probe.clone());
    let loss = build(&mut tape, p);
    let grads = tape.backward(loss).expect("backward");
    let analytic = grads
        .get(p)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(probe.shape().to_vec()));

    let numeric = finite_diff_grad(
        |x| {
            let mut tape = Tape::new();
            let p = tape.leaf(x.clone());
            let loss = build(&mut tape, p);
            tape.value(loss).item().expect("scalar loss")
        },
        probe,
        FD_DEFAULT_STEP,
    );
    max_relative_error(&analytic, &numeric)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: String,
    pub cases: usize,
    pub max_rel_err: f64,
}

fn report(op: &str, cases: usize, max_rel_err: f64) -> GradReport {
    GradReport {
        op: op.to_string(),
        cases,
        max_rel_err,
    }
}

/// Run `cases` random gradient checks per differentiable op and report the
/// worst relative error observed for each.
pub fn run_gradient_suite(cases: usize, seed: u64) -> Vec<GradReport> {
    let mut rng = Mix64::new(seed);
    let mut out = Vec::new();

    // conv2d: gradients w.r.t. input, weight, and bias.
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, cin, cout) = (rng.int(1, 2), rng.int(1, 2), rng.int(1, 2));
        let (h, w) = (rng.int(3, 6), rng.int(3, 6));
        let k = if rng.uniform() < 0.5 { 1 } else { 3 };
        let pad = if k == 3 { rng.int(0, 1) } else { 0 };
        let stride = rng.int(1, 2);
        let x0 = rand_tensor(&mut rng, &[n, cin, h, w], -1.0, 1.0);
        let w0 = rand_tensor(&mut rng, &[cout, cin, k, k], -1.0, 1.0);
        let b0 = rand_tensor(&mut rng, &[cout], -0.5, 0.5);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let coeffs = rand_tensor(&mut rng, &[n, cout, oh, ow], -1.0, 1.0);

        let bx = |tape: &mut Tape, p: VarId| {
            let wv = tape.leaf(w0.clone());
            let bv = tape.leaf(b0.clone());
            let y = tape.conv2d(p, wv, bv, stride, pad).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &bx));
        let bw = |tape: &mut Tape, p: VarId| {
            let xv = tape.leaf(x0.clone());
            let bv = tape.leaf(b0.clone());
            let y = tape.conv2d(xv, p, bv, stride, pad).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&w0, &bw));
        let bb = |tape: &mut Tape, p: VarId| {
            let xv = tape.leaf(x0.clone());
            let wv = tape.leaf(w0.clone());
            let y = tape.conv2d(xv, wv, p, stride, pad).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&b0, &bb));
    }
    out.push(report("conv2d", cases, worst));

    // deform_conv2d: gradients w.r.t. input, weight, bias, and offsets.
    let mut worst: f64 = 0.0;
    let mut worst_off: f64 = 0.0;
    for _ in 0..cases {
        let (n, cin, cout) = (rng.int(1, 2), rng.int(1, 2), rng.int(1, 2));
        let (h, w) = (rng.int(4, 6), rng.int(4, 6));
        let k = if rng.uniform() < 0.5 { 1 } else { 3 };
        let pad = if k == 3 { 1 } else { 0 };
        let x0 = rand_tensor(&mut rng, &[n, cin, h, w], -1.0, 1.0);
        let w0 = rand_tensor(&mut rng, &[cout, cin, k, k], -1.0, 1.0);
        let b0 = rand_tensor(&mut rng, &[cout], -0.5, 0.5);
        let off0 = offset_tensor(&mut rng, &[n, 2 * k * k, h, w]);
        let coeffs = rand_tensor(&mut rng, &[n, cout, h, w], -1.0, 1.0);

        let bx = |tape: &mut Tape, p: VarId| {
            let wv = tape.leaf(w0.clone());
            let bv = tape.leaf(b0.clone());
            let ov = tape.leaf(off0.clone());
            let y = tape.deform_conv2d(p, wv, bv, ov, 1, pad).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &bx));
        let bw = |tape: &mut Tape, p: VarId| {
            let xv = tape.leaf(x0.clone());
            let bv = tape.leaf(b0.clone());
            let ov = tape.leaf(off0.clone());
            let y = tape.deform_conv2d(xv, p, bv, ov, 1, pad).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&w0, &bw));
        let bb = |tape: &mut Tape, p: VarId| {
            let xv = tape.leaf(x0.clone());
            let wv = tape.leaf(w0.clone());
            let ov = tape.leaf(off0.clone());
            let y = tape.deform_conv2d(xv, wv, p, ov, 1, pad).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&b0, &bb));
        let bo = |tape: &mut Tape, p: VarId| {
            let xv = tape.leaf(x0.clone());
            let wv = tape.leaf(w0.clone());
            let bv = tape.leaf(b0.clone());
            let y = tape.deform_conv2d(xv, wv, bv, p, 1, pad).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst_off = worst_off.max(probe_gradient(&off0, &bo));
    }
    out.push(report("deform_conv2d", cases, worst));
    out.push(report("deform_conv2d.offsets", cases, worst_off));

    // maxpool2d
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, c) = (rng.int(1, 2), rng.int(1, 2));
        let (h, w) = (2 * rng.int(1, 3), 2 * rng.int(1, 3));
        let x0 = distinct_tensor(&mut rng, &[n, c, h, w]);
        let coeffs = rand_tensor(&mut rng, &[n, c, h / 2, w / 2], -1.0, 1.0);
        let b = |tape: &mut Tape, p: VarId| {
            let y = tape.maxpool2d(p).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &b));
    }
    out.push(report("maxpool2d", cases, worst));

    // upsample_bilinear
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, c) = (rng.int(1, 2), rng.int(1, 2));
        let (h, w) = (rng.int(1, 4), rng.int(1, 4));
        let f = rng.int(2, 3);
        let x0 = rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let coeffs = rand_tensor(&mut rng, &[n, c, h * f, w * f], -1.0, 1.0);
        let b = |tape: &mut Tape, p: VarId| {
            let y = tape.upsample_bilinear(p, f).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &b));
    }
    out.push(report("upsample_bilinear", cases, worst));

    // linear
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, din, dout) = (rng.int(1, 4), rng.int(1, 5), rng.int(1, 5));
        let x0 = rand_tensor(&mut rng, &[n, din], -1.0, 1.0);
        let w0 = rand_tensor(&mut rng, &[dout, din], -1.0, 1.0);
        let b0 = rand_tensor(&mut rng, &[dout], -0.5, 0.5);
        let coeffs = rand_tensor(&mut rng, &[n, dout], -1.0, 1.0);
        let bx = |tape: &mut Tape, p: VarId| {
            let wv = tape.leaf(w0.clone());
            let bv = tape.leaf(b0.clone());
            let y = tape.linear(p, wv, bv).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &bx));
        let bw = |tape: &mut Tape, p: VarId| {
            let xv = tape.leaf(x0.clone());
            let bv = tape.leaf(b0.clone());
            let y = tape.linear(xv, p, bv).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&w0, &bw));
        let bb = |tape: &mut Tape, p: VarId| {
            let xv = tape.leaf(x0.clone());
            let wv = tape.leaf(w0.clone());
            let y = tape.linear(xv, wv, p).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&b0, &bb));
    }
    out.push(report("linear", cases, worst));

    // relu
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let shape = [rng.int(1, 3), rng.int(2, 6)];
        let x0 = signed_tensor(&mut rng, &shape);
        let coeffs = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let b = |tape: &mut Tape, p: VarId| {
            let y = tape.relu(p);
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &b));
    }
    out.push(report("relu", cases, worst));

    // sigmoid
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let shape = [rng.int(1, 3), rng.int(2, 6)];
        let x0 = rand_tensor(&mut rng, &shape, -3.0, 3.0);
        let coeffs = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let b = |tape: &mut Tape, p: VarId| {
            let y = tape.sigmoid(p);
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &b));
    }
    out.push(report("sigmoid", cases, worst));

    // batchnorm (training mode): input, gamma, beta.
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, c, h, w) = (rng.int(2, 3), rng.int(1, 2), rng.int(2, 3), rng.int(2, 3));
        let x0 = rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let g0 = rand_tensor(&mut rng, &[c], 0.5, 1.5);
        let be0 = rand_tensor(&mut rng, &[c], -0.5, 0.5);
        let coeffs = rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let bx = |tape: &mut Tape, p: VarId| {
            let g = tape.leaf(g0.clone());
            let be = tape.leaf(be0.clone());
            let (y, _, _) = tape.batchnorm_train(p, g, be).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &bx));
        let bg = |tape: &mut Tape, p: VarId| {
            let x = tape.leaf(x0.clone());
            let be = tape.leaf(be0.clone());
            let (y, _, _) = tape.batchnorm_train(x, p, be).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&g0, &bg));
        let bb = |tape: &mut Tape, p: VarId| {
            let x = tape.leaf(x0.clone());
            let g = tape.leaf(g0.clone());
            let (y, _, _) = tape.batchnorm_train(x, g, p).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&be0, &bb));
    }
    out.push(report("batchnorm", cases, worst));

    // global average pool
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, c, h, w) = (rng.int(1, 2), rng.int(1, 3), rng.int(1, 4), rng.int(1, 4));
        let x0 = rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let coeffs = rand_tensor(&mut rng, &[n, c], -1.0, 1.0);
        let b = |tape: &mut Tape, p: VarId| {
            let y = tape.global_avg_pool(p).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &b));
    }
    out.push(report("global_avg_pool", cases, worst));

    // rowmax
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (m, d) = (rng.int(1, 5), rng.int(1, 5));
        let x0 = distinct_tensor(&mut rng, &[m, d]);
        let coeffs = rand_tensor(&mut rng, &[1, d], -1.0, 1.0);
        let b = |tape: &mut Tape, p: VarId| {
            let y = tape.rowmax(p).unwrap();
            tape.dot_const(y, &coeffs).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &b));
    }
    out.push(report("rowmax", cases, worst));

    // bce_loss directly on predictions kept inside the clamp band.
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let shape = [rng.int(1, 4), rng.int(1, 4)];
        let p0 = rand_tensor(&mut rng, &shape, 0.05, 0.95);
        let target = binary_tensor(&mut rng, &shape);
        let b = |tape: &mut Tape, p: VarId| tape.bce_loss(p, &target).unwrap();
        worst = worst.max(probe_gradient(&p0, &b));
    }
    out.push(report("bce_loss", cases, worst));

    // composite: bce(sigmoid(conv2d(x))) — the whole training path in miniature.
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, cin, cout) = (rng.int(1, 2), rng.int(1, 2), 1);
        let (h, w) = (rng.int(3, 5), rng.int(3, 5));
        let x0 = rand_tensor(&mut rng, &[n, cin, h, w], -1.0, 1.0);
        let w0 = rand_tensor(&mut rng, &[cout, cin, 3, 3], -0.5, 0.5);
        let b0 = rand_tensor(&mut rng, &[cout], -0.2, 0.2);
        let target = binary_tensor(&mut rng, &[n, cout, h, w]);
        let bx = |tape: &mut Tape, p: VarId| {
            let wv = tape.leaf(w0.clone());
            let bv = tape.leaf(b0.clone());
            let y = tape.conv2d(p, wv, bv, 1, 1).unwrap();
            let s = tape.sigmoid(y);
            tape.bce_loss(s, &target).unwrap()
        };
        worst = worst.max(probe_gradient(&x0, &bx));
        let bw = |tape: &mut Tape, p: VarId| {
            let xv = tape.leaf(x0.clone());
            let bv = tape.leaf(b0.clone());
            let y = tape.conv2d(xv, p, bv, 1, 1).unwrap();
            let s = tape.sigmoid(y);
            tape.bce_loss(s, &target).unwrap()
        };
        worst = worst.max(probe_gradient(&w0, &bw));
    }
    out.push(report("bce_of_conv2d", cases, worst));

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for r in run_gradient_suite(3, 0x5eed) {
            assert!(
                r.max_rel_err < 1e-4,
                "{}: relative error {} exceeds 1e-4",
                r.op,
                r.max_rel_err
            );
        }
    }
}
