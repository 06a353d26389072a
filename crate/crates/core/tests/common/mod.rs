//! Reference metric formulas shared by the oracle and acceptance tests.

#![allow(dead_code)]

pub fn reference_psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// Mirror index with the edge sample repeated (`-1 → 0`).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Direct 2-D windowed SSIM: for every pixel, weighted moments over the full
/// 11×11 Gaussian window.
pub fn reference_ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (u, row) in win.iter_mut().enumerate() {
        for (v, cell) in row.iter_mut().enumerate() {
            let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
            *cell = (-(du * du + dv * dv) / (2.0 * 1.5 * 1.5)).exp();
            total += *cell;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (u, row) in win.iter().enumerate() {
                for (v, &wt) in row.iter().enumerate() {
                    let p = mirror(i as isize + u as isize - 5, h) * w + mirror(j as isize + v as isize - 5, w);
                    let (x, y) = (a[p] as f64, b[p] as f64);
                    let wt = wt / total;
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    acc / (h * w) as f64
}
