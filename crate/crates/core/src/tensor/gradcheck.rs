//! Finite-difference verification of the tape's gradients.
//!
//! Each registered check owns two implementations of the same computation: a
//! tape build (the production f32 path) and a plain-f64 scalar reference kept
//! deliberately separate from the production kernels so the two paths can
//! cross-check each other. Central differences at eps = 1e-3 on the f64
//! reference are compared against the tape's analytic gradients; running the
//! differences on the f32 path itself would drown small gradient entries in
//! ~1e-4 of float noise, which is why the reference exists.

use super::tape::{BceEntry, BoxRow, CeRow, NodeId, Tape};
use super::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct CheckCase {
    /// Leaf inputs; every element of every input is perturbed.
    pub inputs: Vec<Tensor>,
    /// Production path: build a scalar loss on the tape from the leaves.
    pub forward: Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>,
    /// Independent f64 evaluation of the same scalar.
    pub reference: Box<dyn Fn(&[Vec<f64>]) -> f64>,
}

pub struct OpCheck {
    pub name: &'static str,
    pub build: Box<dyn Fn(&mut ChaCha8Rng) -> CheckCase>,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: String,
    pub trials: usize,
    pub entries: usize,
    pub failures: usize,
    pub forward_mismatches: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.forward_mismatches == 0
    }
}

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;
// Relative-error denominator floor: entries this small are compared with an
// absolute tolerance of FD_TOL * FLOOR instead, keeping the check meaningful
// for near-zero gradients without amplifying truncation noise.
const FLOOR: f64 = 1e-2;

/// Runs one check for `trials` seeded instances. Gradient entries failing
/// `|fd - analytic| / max(|fd|, |analytic|, 0.01) >= tol` are failures, as
/// are forward values diverging from the reference by more than 1e-4
/// relative.
pub fn run_check(check: &OpCheck, trials: usize, seed: u64, eps: f64, tol: f64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        op: check.name.to_string(),
        trials,
        entries: 0,
        failures: 0,
        forward_mismatches: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..trials {
        let case = (check.build)(&mut rng);
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = match (case.forward)(&mut tape, &leaves) {
            Ok(l) => l,
            Err(_) => {
                report.failures += 1;
                continue;
            }
        };
        let f64_inputs: Vec<Vec<f64>> = case
            .inputs
            .iter()
            .map(|t| t.data.iter().map(|v| *v as f64).collect())
            .collect();
        let ref_val = (case.reference)(&f64_inputs);
        let got = tape.data(loss)[0] as f64;
        if (got - ref_val).abs() > 1e-4 * ref_val.abs().max(1.0) {
            report.forward_mismatches += 1;
        }
        if tape.backward(loss).is_err() {
            report.failures += 1;
            continue;
        }
        for (i, leaf) in leaves.iter().enumerate() {
            let analytic: Vec<f32> = tape
                .grad(*leaf)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; case.inputs[i].numel()]);
            for j in 0..case.inputs[i].numel() {
                let mut plus = f64_inputs.clone();
                plus[i][j] += eps;
                let mut minus = f64_inputs.clone();
                minus[i][j] -= eps;
                let fd = ((case.reference)(&plus) - (case.reference)(&minus)) / (2.0 * eps);
                let an = analytic[j] as f64;
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR);
                report.entries += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                }
                if rel >= tol {
                    report.failures += 1;
                }
            }
        }
    }
    report
}

/// Runs a set of checks; an empty set is an error (a silently empty registry
/// would vacuously pass).
pub fn run_checks(checks: &[OpCheck], trials: usize, seed: u64) -> Result<Vec<GradReport>> {
    if checks.is_empty() {
        return Err(Error::Usage("gradient check registry is empty".into()));
    }
    Ok(checks
        .iter()
        .enumerate()
        .map(|(i, c)| run_check(c, trials, seed.wrapping_add(i as u64), FD_EPS, FD_TOL))
        .collect())
}

/// Runs the full built-in registry.
pub fn run_all_checks(trials: usize, seed: u64) -> Result<Vec<GradReport>> {
    run_checks(&registry(), trials, seed)
}

/// Turns any failed report into an error naming the op.
pub fn assert_reports(reports: &[GradReport]) -> Result<()> {
    for r in reports {
        if !r.passed() {
            return Err(Error::GradCheck {
                op: r.op.clone(),
                max_rel_err: r.max_rel_err,
                failures: r.failures + r.forward_mismatches,
                entries: r.entries,
            });
        }
    }
    Ok(())
}

/// Scalar f64 reference implementations. Straightforward loops, no sharing
/// with the production kernels.
pub mod reference {
    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub fn silu(x: f64) -> f64 {
        x * sigmoid(x)
    }

    pub fn softmax(xs: &[f64]) -> Vec<f64> {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    pub fn l2_normalize(xs: &[f64]) -> Vec<f64> {
        let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-8 {
            vec![0.0; xs.len()]
        } else {
            xs.iter().map(|v| v / n).collect()
        }
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn linear(w: &[f64], b: Option<&[f64]>, x: &[f64], out_dim: usize) -> Vec<f64> {
        let in_dim = x.len();
        (0..out_dim)
            .map(|o| {
                let mut s = dot(&w[o * in_dim..(o + 1) * in_dim], x);
                if let Some(b) = b {
                    s += b[o];
                }
                s
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        x: &[f64],
        ci: usize,
        h: usize,
        w: usize,
        k: &[f64],
        co: usize,
        kh: usize,
        kw: usize,
        bias: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f64; co * oh * ow];
        for c_out in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|b| b[c_out]).unwrap_or(0.0);
                    for c_in in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[c_in * h * w + iy as usize * w + ix as usize]
                                    * k[((c_out * ci) + c_in) * kh * kw + ky * kw + kx];
                            }
                        }
                    }
                    out[c_out * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn pool2d(
        x: &[f64],
        c: usize,
        h: usize,
        w: usize,
        max_mode: bool,
        window: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - window) / stride + 1;
        let ow = (w + 2 * pad - window) / stride + 1;
        let mut out = vec![0.0f64; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut acc = 0.0;
                    for wy in 0..window {
                        for wx in 0..window {
                            let iy = (oy * stride + wy) as isize - pad as isize;
                            let ix = (ox * stride + wx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = x[ch * h * w + iy as usize * w + ix as usize];
                            best = best.max(v);
                            acc += v;
                        }
                    }
                    out[ch * oh * ow + oy * ow + ox] = if max_mode {
                        best
                    } else {
                        acc / (window * window) as f64
                    };
                }
            }
        }
        out
    }

    pub fn global_avg_pool(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
        (0..c)
            .map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect()
    }

    pub fn upsample_nearest(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
        let (oh, ow) = (h * f, w * f);
        let mut out = vec![0.0f64; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[ch * oh * ow + oy * ow + ox] = x[ch * h * w + (oy / f) * w + ox / f];
                }
            }
        }
        out
    }

    pub fn bce_with_logits(z: f64, t: f64) -> f64 {
        z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln()
    }

    pub fn smooth_l1(e: f64) -> f64 {
        let a = e.abs();
        if a < 1.0 {
            0.5 * e * e
        } else {
            a - 0.5
        }
    }

    pub fn cross_entropy(logits: &[f64], class: usize) -> f64 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - logits[class]
    }
}

// ---- registry ----

fn rvec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values with pairwise gaps well above 2*eps so max-pool argmaxes cannot
/// flip under the finite-difference perturbation.
fn rvec_distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut vals: Vec<f32> = (0..n)
        .map(|i| -1.0 + i as f32 * 0.08 + rng.gen_range(-0.01..0.01))
        .collect();
    // Fisher-Yates over the value slots
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    vals
}

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

macro_rules! check {
    ($name:literal, $build:expr) => {
        OpCheck {
            name: $name,
            build: Box::new($build),
        }
    };
}

/// The full op registry: every differentiable tape op plus the composite
/// paths the model trains through (gate+fusion, triplet, orthogonality).
#[allow(clippy::vec_init_then_push)]
pub fn registry() -> Vec<OpCheck> {
    let mut checks: Vec<OpCheck> = Vec::new();

    checks.push(check!("add", |rng: &mut ChaCha8Rng| {
        let n = 6;
        let (a, b, w) = (rvec(rng, n, -1.5, 1.5), rvec(rng, n, -1.5, 1.5), rvec(rng, n, -1.0, 1.0));
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], a), t(&[n], b)],
            forward: Box::new(move |tape, l| {
                let y = tape.add(l[0], l[1])?;
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                ins[0].iter().zip(&ins[1]).zip(&w64).map(|((a, b), w)| (a + b) * w).sum()
            }),
        }
    }));

    checks.push(check!("sub", |rng: &mut ChaCha8Rng| {
        let n = 6;
        let (a, b, w) = (rvec(rng, n, -1.5, 1.5), rvec(rng, n, -1.5, 1.5), rvec(rng, n, -1.0, 1.0));
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], a), t(&[n], b)],
            forward: Box::new(move |tape, l| {
                let y = tape.sub(l[0], l[1])?;
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                ins[0].iter().zip(&ins[1]).zip(&w64).map(|((a, b), w)| (a - b) * w).sum()
            }),
        }
    }));

    checks.push(check!("mul", |rng: &mut ChaCha8Rng| {
        let n = 6;
        let (a, b, w) = (rvec(rng, n, -1.5, 1.5), rvec(rng, n, -1.5, 1.5), rvec(rng, n, -1.0, 1.0));
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], a), t(&[n], b)],
            forward: Box::new(move |tape, l| {
                let y = tape.mul(l[0], l[1])?;
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                ins[0].iter().zip(&ins[1]).zip(&w64).map(|((a, b), w)| a * b * w).sum()
            }),
        }
    }));

    checks.push(check!("scale", |rng: &mut ChaCha8Rng| {
        let n = 5;
        let x = rvec(rng, n, -2.0, 2.0);
        let c = rng.gen_range(-1.5f32..1.5);
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.scale(l[0], c);
                Ok(tape.sum(y))
            }),
            reference: Box::new(move |ins| ins[0].iter().map(|v| v * c as f64).sum()),
        }
    }));

    checks.push(check!("scale_by_node", |rng: &mut ChaCha8Rng| {
        let n = 5;
        let x = rvec(rng, n, -2.0, 2.0);
        let s = rvec(rng, 1, -1.5, 1.5);
        let w = rvec(rng, n, -1.0, 1.0);
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], x), t(&[1], s)],
            forward: Box::new(move |tape, l| {
                let y = tape.scale_by(l[0], l[1])?;
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                ins[0].iter().zip(&w64).map(|(x, w)| x * ins[1][0] * w).sum()
            }),
        }
    }));

    checks.push(check!("sum", |rng: &mut ChaCha8Rng| {
        let n = 7;
        let x = rvec(rng, n, -2.0, 2.0);
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| Ok(tape.sum(l[0]))),
            reference: Box::new(move |ins| ins[0].iter().sum()),
        }
    }));

    checks.push(check!("dot", |rng: &mut ChaCha8Rng| {
        let n = 6;
        let (a, b) = (rvec(rng, n, -1.5, 1.5), rvec(rng, n, -1.5, 1.5));
        CheckCase {
            inputs: vec![t(&[n], a), t(&[n], b)],
            forward: Box::new(move |tape, l| tape.dot(l[0], l[1])),
            reference: Box::new(move |ins| reference::dot(&ins[0], &ins[1])),
        }
    }));

    checks.push(check!("square", |rng: &mut ChaCha8Rng| {
        let n = 5;
        let x = rvec(rng, n, -2.0, 2.0);
        let w = rvec(rng, n, -1.0, 1.0);
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.square(l[0]);
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| ins[0].iter().zip(&w64).map(|(x, w)| x * x * w).sum()),
        }
    }));

    checks.push(check!("sqrt_guard", |rng: &mut ChaCha8Rng| {
        let n = 5;
        let x = rvec(rng, n, 0.2, 2.5);
        let w = rvec(rng, n, -1.0, 1.0);
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.sqrt_guard(l[0]);
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                ins[0].iter().zip(&w64).map(|(x, w)| x.sqrt() * w).sum()
            }),
        }
    }));

    checks.push(check!("relu", |rng: &mut ChaCha8Rng| {
        let n = 6;
        // keep every element at least 0.1 away from the hinge
        let x: Vec<f32> = (0..n)
            .map(|_| {
                let m = rng.gen_range(0.1f32..1.5);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let w = rvec(rng, n, -1.0, 1.0);
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.relu(l[0]);
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                ins[0].iter().zip(&w64).map(|(x, w)| x.max(0.0) * w).sum()
            }),
        }
    }));

    checks.push(check!("sigmoid", |rng: &mut ChaCha8Rng| {
        let n = 6;
        let x = rvec(rng, n, -3.0, 3.0);
        let w = rvec(rng, n, -1.0, 1.0);
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.sigmoid(l[0]);
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                ins[0].iter().zip(&w64).map(|(x, w)| reference::sigmoid(*x) * w).sum()
            }),
        }
    }));

    checks.push(check!("silu", |rng: &mut ChaCha8Rng| {
        let n = 6;
        let x = rvec(rng, n, -3.0, 3.0);
        let w = rvec(rng, n, -1.0, 1.0);
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.silu(l[0]);
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                ins[0].iter().zip(&w64).map(|(x, w)| reference::silu(*x) * w).sum()
            }),
        }
    }));

    checks.push(check!("softmax", |rng: &mut ChaCha8Rng| {
        let n = 5;
        let x = rvec(rng, n, -2.0, 2.0);
        let w = rvec(rng, n, -1.0, 1.0);
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.softmax(l[0])?;
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| reference::dot(&reference::softmax(&ins[0]), &w64)),
        }
    }));

    checks.push(check!("l2_normalize", |rng: &mut ChaCha8Rng| {
        let n = 5;
        // resample until comfortably away from the zero-vector guard
        let x = loop {
            let c = rvec(rng, n, -2.0, 2.0);
            if c.iter().map(|v| v * v).sum::<f32>().sqrt() > 0.5 {
                break c;
            }
        };
        let w = rvec(rng, n, -1.0, 1.0);
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.l2_normalize(l[0])?;
                let wc = tape.constant(&[n], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| reference::dot(&reference::l2_normalize(&ins[0]), &w64)),
        }
    }));

    checks.push(check!("index", |rng: &mut ChaCha8Rng| {
        let n = 6;
        let x = rvec(rng, n, -2.0, 2.0);
        let i = rng.gen_range(0..n);
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| tape.index(l[0], i)),
            reference: Box::new(move |ins| ins[0][i]),
        }
    }));

    checks.push(check!("concat", |rng: &mut ChaCha8Rng| {
        let (na, nb) = (3, 4);
        let (a, b) = (rvec(rng, na, -1.5, 1.5), rvec(rng, nb, -1.5, 1.5));
        let w = rvec(rng, na + nb, -1.0, 1.0);
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[na], a), t(&[nb], b)],
            forward: Box::new(move |tape, l| {
                let y = tape.concat(&[l[0], l[1]])?;
                let wc = tape.constant(&[na + nb], &w);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                let cat: Vec<f64> = ins[0].iter().chain(&ins[1]).cloned().collect();
                reference::dot(&cat, &w64)
            }),
        }
    }));

    checks.push(check!("linear", |rng: &mut ChaCha8Rng| {
        let (out_d, in_d) = (3, 4);
        let x = rvec(rng, in_d, -1.5, 1.5);
        let w = rvec(rng, out_d * in_d, -1.0, 1.0);
        let b = rvec(rng, out_d, -0.5, 0.5);
        let lw = rvec(rng, out_d, -1.0, 1.0);
        let lw64: Vec<f64> = lw.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[in_d], x), t(&[out_d, in_d], w), t(&[out_d], b)],
            forward: Box::new(move |tape, l| {
                let y = tape.linear(l[0], l[1], Some(l[2]))?;
                let wc = tape.constant(&[out_d], &lw);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                let y = reference::linear(&ins[1], Some(&ins[2]), &ins[0], out_d);
                reference::dot(&y, &lw64)
            }),
        }
    }));

    // convolution variants: kernel geometry x stride x padding
    for (name, ci, h, w, co, ks, stride, pad) in [
        ("conv2d_1x1", 2usize, 4usize, 4usize, 3usize, 1usize, 1usize, 0usize),
        ("conv2d_3x3_s1p1", 2, 5, 5, 2, 3, 1, 1),
        ("conv2d_3x3_s2p1", 2, 6, 6, 2, 3, 2, 1),
    ] {
        checks.push(OpCheck {
            name,
            build: Box::new(move |rng: &mut ChaCha8Rng| {
                let x = rvec(rng, ci * h * w, -1.0, 1.0);
                let k = rvec(rng, co * ci * ks * ks, -0.7, 0.7);
                let b = rvec(rng, co, -0.3, 0.3);
                let oh = (h + 2 * pad - ks) / stride + 1;
                let ow = (w + 2 * pad - ks) / stride + 1;
                let lw = rvec(rng, co * oh * ow, -1.0, 1.0);
                let lw64: Vec<f64> = lw.iter().map(|v| *v as f64).collect();
                CheckCase {
                    inputs: vec![
                        t(&[ci, h, w], x),
                        t(&[co, ci, ks, ks], k),
                        t(&[co], b),
                    ],
                    forward: Box::new(move |tape, l| {
                        let y = tape.conv2d(l[0], l[1], Some(l[2]), stride, pad)?;
                        let wc = tape.constant(&[co, oh, ow], &lw);
                        tape.dot(y, wc)
                    }),
                    reference: Box::new(move |ins| {
                        let y = reference::conv2d(
                            &ins[0], ci, h, w, &ins[1], co, ks, ks, Some(&ins[2]), stride, pad,
                        );
                        reference::dot(&y, &lw64)
                    }),
                }
            }),
        });
    }

    for (name, max_mode, window, stride, pad) in [
        ("pool2d_max", true, 2usize, 2usize, 0usize),
        ("pool2d_avg", false, 2, 2, 0),
        ("pool2d_max_same", true, 3, 1, 1),
    ] {
        checks.push(OpCheck {
            name,
            build: Box::new(move |rng: &mut ChaCha8Rng| {
                let (c, h, w) = (2usize, 4usize, 4usize);
                let x = rvec_distinct(rng, c * h * w);
                let oh = (h + 2 * pad - window) / stride + 1;
                let ow = (w + 2 * pad - window) / stride + 1;
                let lw = rvec(rng, c * oh * ow, -1.0, 1.0);
                let lw64: Vec<f64> = lw.iter().map(|v| *v as f64).collect();
                let mode = if max_mode { super::PoolMode::Max } else { super::PoolMode::Avg };
                CheckCase {
                    inputs: vec![t(&[c, h, w], x)],
                    forward: Box::new(move |tape, l| {
                        let y = tape.pool2d(l[0], mode, window, stride, pad)?;
                        let wc = tape.constant(&[c, oh, ow], &lw);
                        tape.dot(y, wc)
                    }),
                    reference: Box::new(move |ins| {
                        let y = reference::pool2d(&ins[0], c, h, w, max_mode, window, stride, pad);
                        reference::dot(&y, &lw64)
                    }),
                }
            }),
        });
    }

    checks.push(check!("global_avg_pool", |rng: &mut ChaCha8Rng| {
        let (c, h, w) = (3, 4, 4);
        let x = rvec(rng, c * h * w, -1.5, 1.5);
        let lw = rvec(rng, c, -1.0, 1.0);
        let lw64: Vec<f64> = lw.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[c, h, w], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.global_avg_pool(l[0])?;
                let wc = tape.constant(&[c], &lw);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                reference::dot(&reference::global_avg_pool(&ins[0], c, h * w), &lw64)
            }),
        }
    }));

    checks.push(check!("upsample_nearest", |rng: &mut ChaCha8Rng| {
        let (c, h, w, f) = (2, 3, 3, 2);
        let x = rvec(rng, c * h * w, -1.5, 1.5);
        let lw = rvec(rng, c * h * f * w * f, -1.0, 1.0);
        let lw64: Vec<f64> = lw.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![t(&[c, h, w], x)],
            forward: Box::new(move |tape, l| {
                let y = tape.upsample_nearest(l[0], f)?;
                let wc = tape.constant(&[c, h * f, w * f], &lw);
                tape.dot(y, wc)
            }),
            reference: Box::new(move |ins| {
                reference::dot(&reference::upsample_nearest(&ins[0], c, h, w, f), &lw64)
            }),
        }
    }));

    checks.push(check!("masked_bce", |rng: &mut ChaCha8Rng| {
        let n = 16;
        let x = rvec(rng, n, -2.5, 2.5);
        let entries: Vec<BceEntry> = (0..6)
            .map(|_| BceEntry {
                idx: rng.gen_range(0..n as u32),
                target: rng.gen_range(0.0..1.0),
                weight: if rng.gen_bool(0.5) { 1.0 } else { 0.5 },
            })
            .collect();
        let norm = 7.3f32;
        let e2 = entries.clone();
        CheckCase {
            inputs: vec![t(&[n], x)],
            forward: Box::new(move |tape, l| tape.masked_bce(l[0], entries.clone(), norm)),
            reference: Box::new(move |ins| {
                e2.iter()
                    .map(|e| {
                        e.weight as f64
                            * reference::bce_with_logits(ins[0][e.idx as usize], e.target as f64)
                    })
                    .sum::<f64>()
                    / norm as f64
            }),
        }
    }));

    checks.push(check!("map_cross_entropy", |rng: &mut ChaCha8Rng| {
        let n = 24u32;
        let x = rvec(rng, n as usize, -2.0, 2.0);
        let rows: Vec<CeRow> = (0..3)
            .map(|_| {
                let cls_n = 4u32;
                let stride = 2u32;
                let base = rng.gen_range(0..n - (cls_n - 1) * stride);
                CeRow { base, stride, n: cls_n, class: rng.gen_range(0..cls_n) }
            })
            .collect();
        let norm = 3.1f32;
        let r2 = rows.clone();
        CheckCase {
            inputs: vec![t(&[n as usize], x)],
            forward: Box::new(move |tape, l| tape.map_cross_entropy(l[0], rows.clone(), norm)),
            reference: Box::new(move |ins| {
                r2.iter()
                    .map(|r| {
                        let logits: Vec<f64> = (0..r.n)
                            .map(|j| ins[0][(r.base + j * r.stride) as usize])
                            .collect();
                        reference::cross_entropy(&logits, r.class as usize)
                    })
                    .sum::<f64>()
                    / norm as f64
            }),
        }
    }));

    checks.push(check!("box_regression", |rng: &mut ChaCha8Rng| {
        let n = 12u32;
        let x = rvec(rng, n as usize, -1.2, 1.2);
        let mut rows = Vec::new();
        for r in 0..2u32 {
            let idx = [r * 6, r * 6 + 1, r * 6 + 2, r * 6 + 3];
            let mut target = [0.0f32; 4];
            target[0] = rng.gen_range(0.1..0.9);
            target[1] = rng.gen_range(0.1..0.9);
            for c in 2..4 {
                // keep |err| away from the smooth-L1 kink at 1
                let mut tgt = rng.gen_range(-1.5f32..1.5);
                while (x[idx[c] as usize] - tgt).abs() > 0.9 && (x[idx[c] as usize] - tgt).abs() < 1.1 {
                    tgt += 0.25;
                }
                target[c] = tgt;
            }
            rows.push(BoxRow { idx, target });
        }
        let norm = 2.0f32;
        let r2 = rows.clone();
        CheckCase {
            inputs: vec![t(&[n as usize], x)],
            forward: Box::new(move |tape, l| tape.box_regression(l[0], rows.clone(), norm)),
            reference: Box::new(move |ins| {
                r2.iter()
                    .map(|r| {
                        (0..4)
                            .map(|c| {
                                let raw = ins[0][r.idx[c] as usize];
                                let v = if c < 2 { reference::sigmoid(raw) } else { raw };
                                reference::smooth_l1(v - r.target[c] as f64)
                            })
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / norm as f64
            }),
        }
    }));

    checks.push(check!("triplet_hinge", |rng: &mut ChaCha8Rng| {
        let n = 4;
        let margin = 0.3f32;
        // resample until away from both the sqrt kinks and the hinge kink
        let (a, p, ng) = loop {
            let a = rvec(rng, n, -1.0, 1.0);
            let p = rvec(rng, n, -1.0, 1.0);
            let ng = rvec(rng, n, -1.0, 1.0);
            let a64: Vec<f64> = a.iter().map(|v| *v as f64).collect();
            let p64: Vec<f64> = p.iter().map(|v| *v as f64).collect();
            let n64: Vec<f64> = ng.iter().map(|v| *v as f64).collect();
            let dap = reference::euclid(&a64, &p64);
            let dan = reference::euclid(&a64, &n64);
            let h = dap - dan + margin as f64;
            if dap > 0.1 && dan > 0.1 && h.abs() > 0.05 {
                break (a, p, ng);
            }
        };
        let m = margin;
        CheckCase {
            inputs: vec![t(&[n], a), t(&[n], p), t(&[n], ng)],
            forward: Box::new(move |tape, l| {
                let dp = {
                    let d = tape.sub(l[0], l[1])?;
                    let sq = tape.square(d);
                    let s = tape.sum(sq);
                    tape.sqrt_guard(s)
                };
                let dn = {
                    let d = tape.sub(l[0], l[2])?;
                    let sq = tape.square(d);
                    let s = tape.sum(sq);
                    tape.sqrt_guard(s)
                };
                let diff = tape.sub(dp, dn)?;
                let mc = tape.scalar(m);
                let h = tape.add(diff, mc)?;
                Ok(tape.relu(h))
            }),
            reference: Box::new(move |ins| {
                let dap = reference::euclid(&ins[0], &ins[1]);
                let dan = reference::euclid(&ins[0], &ins[2]);
                (dap - dan + m as f64).max(0.0)
            }),
        }
    }));

    checks.push(check!("orthogonality_pair", |rng: &mut ChaCha8Rng| {
        let n = 4;
        let lam = 0.7f32;
        let far = |rng: &mut ChaCha8Rng| loop {
            let c = rvec(rng, n, -1.5, 1.5);
            if c.iter().map(|v| v * v).sum::<f32>().sqrt() > 0.5 {
                break c;
            }
        };
        let (hv, bv, hi, bi) = (far(rng), far(rng), far(rng), far(rng));
        CheckCase {
            inputs: vec![t(&[n], hv), t(&[n], bv), t(&[n], hi), t(&[n], bi)],
            forward: Box::new(move |tape, l| {
                let nhv = tape.l2_normalize(l[0])?;
                let nbv = tape.l2_normalize(l[1])?;
                let nhi = tape.l2_normalize(l[2])?;
                let nbi = tape.l2_normalize(l[3])?;
                let dv = tape.dot(nhv, nbv)?;
                let di = tape.dot(nhi, nbi)?;
                let dv2 = tape.square(dv);
                let di2 = tape.square(di);
                let di2s = tape.scale(di2, lam);
                tape.add(dv2, di2s)
            }),
            reference: Box::new(move |ins| {
                let dv = reference::dot(
                    &reference::l2_normalize(&ins[0]),
                    &reference::l2_normalize(&ins[1]),
                );
                let di = reference::dot(
                    &reference::l2_normalize(&ins[2]),
                    &reference::l2_normalize(&ins[3]),
                );
                dv * dv + lam as f64 * di * di
            }),
        }
    }));

    checks.push(check!("gate_fusion", |rng: &mut ChaCha8Rng| {
        let (c, h, w) = (2usize, 3usize, 3usize);
        let hid = 4usize;
        let frgb = rvec(rng, c * h * w, -1.0, 1.0);
        let fir = rvec(rng, c * h * w, -1.0, 1.0);
        let fc1w = rvec(rng, hid * 2 * c, -0.8, 0.8);
        let fc1b = rvec(rng, hid, -0.3, 0.3);
        let fc2w = rvec(rng, 2 * hid, -0.8, 0.8);
        let fc2b = rvec(rng, 2, -0.3, 0.3);
        let lw = rvec(rng, c * h * w, -1.0, 1.0);
        let lw64: Vec<f64> = lw.iter().map(|v| *v as f64).collect();
        CheckCase {
            inputs: vec![
                t(&[c, h, w], frgb),
                t(&[c, h, w], fir),
                t(&[hid, 2 * c], fc1w),
                t(&[hid], fc1b),
                t(&[2, hid], fc2w),
                t(&[2], fc2b),
            ],
            forward: Box::new(move |tape, l| {
                let grgb = tape.global_avg_pool(l[0])?;
                let gir = tape.global_avg_pool(l[1])?;
                let cat = tape.concat(&[grgb, gir])?;
                let h1 = tape.linear(cat, l[2], Some(l[3]))?;
                let h1a = tape.silu(h1);
                let logits = tape.linear(h1a, l[4], Some(l[5]))?;
                let gate = tape.softmax(logits)?;
                let w0 = tape.index(gate, 0)?;
                let w1 = tape.index(gate, 1)?;
                let a = tape.scale_by(l[0], w0)?;
                let b = tape.scale_by(l[1], w1)?;
                let fused = tape.add(a, b)?;
                let wc = tape.constant(&[c, h, w], &lw);
                tape.dot(fused, wc)
            }),
            reference: Box::new(move |ins| {
                let grgb = reference::global_avg_pool(&ins[0], c, h * w);
                let gir = reference::global_avg_pool(&ins[1], c, h * w);
                let cat: Vec<f64> = grgb.iter().chain(&gir).cloned().collect();
                let h1: Vec<f64> = reference::linear(&ins[2], Some(&ins[3]), &cat, hid)
                    .iter()
                    .map(|v| reference::silu(*v))
                    .collect();
                let logits = reference::linear(&ins[4], Some(&ins[5]), &h1, 2);
                let gate = reference::softmax(&logits);
                let fused: Vec<f64> = ins[0]
                    .iter()
                    .zip(&ins[1])
                    .map(|(a, b)| gate[0] * a + gate[1] * b)
                    .collect();
                reference::dot(&fused, &lw64)
            }),
        }
    }));

    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_all_ops_pass_small_run() {
        let reports = run_all_checks(5, 42).unwrap();
        assert!(reports.len() >= 25, "registry unexpectedly small: {}", reports.len());
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: {} grad failures, {} fwd mismatches, max rel {:.3e}",
                r.op,
                r.failures,
                r.forward_mismatches,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn empty_registry_is_an_error() {
        assert!(run_checks(&[], 5, 1).is_err());
    }

    #[test]
    fn corrupted_op_is_reported() {
        // tape computes silu but the reference claims sigmoid: the checker
        // must flag both the forward mismatch and the gradient error
        let bad = OpCheck {
            name: "corrupted",
            build: Box::new(|rng: &mut ChaCha8Rng| {
                let x = rvec(rng, 4, 0.5, 2.0);
                CheckCase {
                    inputs: vec![t(&[4], x)],
                    forward: Box::new(|tape, l| {
                        let y = tape.silu(l[0]);
                        Ok(tape.sum(y))
                    }),
                    reference: Box::new(|ins| ins[0].iter().map(|v| reference::sigmoid(*v)).sum()),
                }
            }),
        };
        let report = run_check(&bad, 3, 9, FD_EPS, FD_TOL);
        assert!(!report.passed());
        assert!(report.failures > 0);
        assert!(assert_reports(&[report]).is_err());
    }
}
