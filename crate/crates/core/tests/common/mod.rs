//! Oracles shared by the test targets.
#![allow(dead_code)]

use std::f64::consts::PI;

use lusk_core::fusion::{gaussian_taps, ssim_constants, Frame, SSIM_WINDOW};
use lusk_core::tensor::{Graph, Var};
use lusk_core::Result;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_frame(rows: usize, cols: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frame::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
}

/// O(N⁴) direct 2-D DFT with the same multiplier conventions, written
/// without any FFT.
pub fn dft_monogenic(f: &Frame, lambda0: f64, sigma0: f64) -> [Frame; 3] {
    let (n, m) = f.shape();
    let freq = |k: usize, len: usize| {
        let s = if 2 * k < len { k as f64 } else { k as f64 - len as f64 };
        2.0 * PI * s / len as f64
    };
    let mut spec = vec![Complex64::new(0.0, 0.0); n * m];
    for u in 0..n {
        for v in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..n {
                for c in 0..m {
                    let ang = -2.0 * PI * (u * r) as f64 / n as f64 - 2.0 * PI * (v * c) as f64 / m as f64;
                    acc += f.get(r, c) * Complex64::from_polar(1.0, ang);
                }
            }
            spec[u * m + v] = acc;
        }
    }
    let omega0 = 2.0 * PI / lambda0;
    let mut out = [Frame::filled(n, m, 0.0), Frame::filled(n, m, 0.0), Frame::filled(n, m, 0.0)];
    let mut filt = [spec.clone(), spec.clone(), spec];
    for u in 0..n {
        for v in 0..m {
            let (wr, wc) = (freq(u, n), freq(v, m));
            let mag = (wr * wr + wc * wc).sqrt();
            let g = if mag == 0.0 {
                0.0
            } else {
                (-(mag / omega0).ln().powi(2) / (2.0 * sigma0.ln().powi(2))).exp()
            };
            let i = u * m + v;
            filt[0][i] *= g;
            let (h2, h3) = if mag == 0.0 { (0.0, 0.0) } else { (wr / mag, wc / mag) };
            filt[1][i] *= Complex64::new(0.0, h2 * g);
            filt[2][i] *= Complex64::new(0.0, h3 * g);
        }
    }
    for (k, spec) in filt.iter().enumerate() {
        for r in 0..n {
            for c in 0..m {
                let mut acc = Complex64::new(0.0, 0.0);
                for u in 0..n {
                    for v in 0..m {
                        let ang = 2.0 * PI * (u * r) as f64 / n as f64 + 2.0 * PI * (v * c) as f64 / m as f64;
                        acc += spec[u * m + v] * Complex64::from_polar(1.0, ang);
                    }
                }
                out[k].set(r, c, acc.re / (n * m) as f64);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Frame, b: &Frame) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Per-window SSIM computed directly from weighted sums.
pub fn ssim_oracle(a: &Frame, b: &Frame) -> f64 {
    let taps = gaussian_taps();
    let (c1, c2) = ssim_constants();
    let (rows, cols) = a.shape();
    let mut total = 0.0;
    let mut count = 0;
    for r0 in 0..=rows - SSIM_WINDOW {
        for c0 in 0..=cols - SSIM_WINDOW {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let w = taps[i] * taps[j];
                    mx += w * a.get(r0 + i, c0 + j);
                    my += w * b.get(r0 + i, c0 + j);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let w = taps[i] * taps[j];
                    let dx = a.get(r0 + i, c0 + j) - mx;
                    let dy = b.get(r0 + i, c0 + j) - my;
                    vx += w * dx * dx;
                    vy += w * dy * dy;
                    cov += w * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn line_frame(bg: f64, row: usize, width: usize) -> Frame {
    Frame::from_fn(64, 64, |r, _| if r >= row && r < row + width { 1.0 } else { bg })
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

pub type OpFn = for<'g> fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

pub fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![2, 3, 3], vec![2, 3, 3]], |_, v| v[0].add(v[1])),
        ("add_broadcast", vec![vec![2, 3, 3], vec![1, 3, 3]], |_, v| v[0].add(v[1])),
        ("sub_broadcast", vec![vec![2, 1, 1], vec![1, 3, 4]], |_, v| v[0].sub(v[1])),
        ("mul", vec![vec![2, 3, 3], vec![2, 3, 3]], |_, v| v[0].mul(v[1])),
        ("mul_broadcast", vec![vec![4, 3, 3], vec![4, 1, 1]], |_, v| v[0].mul(v[1])),
        ("scale_shift", vec![vec![5]], |_, v| Ok(v[0].scale(-1.7).add_scalar(0.3))),
        ("relu", vec![vec![3, 4, 4]], |_, v| Ok(v[0].relu())),
        ("sigmoid", vec![vec![3, 4, 4]], |_, v| Ok(v[0].sigmoid())),
        ("exp", vec![vec![6]], |_, v| Ok(v[0].exp())),
        ("clamp", vec![vec![12]], |_, v| Ok(v[0].scale(2.0).clamp(-0.5, 0.5))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |_, v| v[0].matmul(v[1])),
        ("conv_s1", vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]], |_, v| {
            v[0].conv2d(v[1], Some(v[2]), 1, 1)
        }),
        ("conv_s2", vec![vec![2, 6, 6], vec![3, 2, 3, 3], vec![3]], |_, v| {
            v[0].conv2d(v[1], Some(v[2]), 2, 1)
        }),
        ("conv_7x7", vec![vec![2, 5, 5], vec![1, 2, 7, 7]], |_, v| v[0].conv2d(v[1], None, 1, 3)),
        ("upsample", vec![vec![2, 3, 3]], |_, v| v[0].upsample2x()),
        ("instance_norm", vec![vec![3, 4, 4]], |_, v| v[0].instance_norm(1e-5)),
        ("spatial_softmax", vec![vec![3, 4, 5]], |_, v| v[0].spatial_softmax()),
        ("sum_axes", vec![vec![3, 4, 5]], |_, v| v[0].sum_axes(&[1, 2])),
        ("mean_axes", vec![vec![3, 4, 5]], |_, v| v[0].mean_axes(&[0])),
        ("max_axes", vec![vec![3, 4, 5]], |_, v| v[0].max_axes(&[0])),
        ("concat", vec![vec![1, 3, 3], vec![2, 3, 3]], |g, v| g.concat(&[v[0], v[1]])),
        ("reshape", vec![vec![2, 6]], |_, v| v[0].reshape(&[3, 4])),
        ("mse", vec![vec![2, 3, 3], vec![2, 3, 3]], |_, v| v[0].mse(v[1])),
    ]
}
