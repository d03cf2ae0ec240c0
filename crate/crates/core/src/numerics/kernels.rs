//! Dense kernels. Storage is `f32`; every reduction accumulates in `f64`.

use super::tensor::AxisDims;

/// `a[m,k] · b[k,n]`.
pub fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    gemm_into(a, b, m, k, n, &mut out);
    out
}

pub fn gemm_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            let brow = &b64[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aip * bv;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn gemm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]) as f32;
        }
    }
    out
}

/// `a[s,m]ᵀ · b[s,n]`.
pub fn gemm_tn(a: &[f32], b: &[f32], s: usize, m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), s * m);
    debug_assert_eq!(b.len(), s * n);
    let mut acc = vec![0.0f64; m * n];
    let mut brow64 = vec![0.0f64; n];
    for r in 0..s {
        for (d, &v) in brow64.iter_mut().zip(&b[r * n..(r + 1) * n]) {
            *d = v as f64;
        }
        let arow = &a[r * m..(r + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            for (o, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(&brow64) {
                *o += av * bv;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Dot product with four independent `f64` accumulators.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            let i = c * 4 + l;
            lanes[l] += a[i] as f64 * b[i] as f64;
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub(crate) fn softmax_axis(x: &[f32], out: &mut [f32], dims: AxisDims) {
    let mut buf = vec![0.0f64; dims.len];
    for o in 0..dims.outer {
        for i in 0..dims.inner {
            let mut max = f32::NEG_INFINITY;
            for a in 0..dims.len {
                max = max.max(x[dims.index(o, a, i)]);
            }
            let mut z = 0.0f64;
            for (a, b) in buf.iter_mut().enumerate() {
                let e = ((x[dims.index(o, a, i)] - max) as f64).exp();
                *b = e;
                z += e;
            }
            for (a, b) in buf.iter().enumerate() {
                out[dims.index(o, a, i)] = (b / z) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        out
    }

    fn transpose(x: &[f32], r: usize, c: usize) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_triple_loop() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.7).collect();
        let expect = naive(&a, &b, m, k, n);
        let plain = gemm(&a, &b, m, k, n);
        let nt = gemm_nt(&a, &transpose(&b, k, n), m, k, n);
        let tn = gemm_tn(&transpose(&a, m, k), &b, k, m, n);
        for i in 0..m * n {
            assert!((plain[i] as f64 - expect[i]).abs() < 1e-5);
            assert!((nt[i] as f64 - expect[i]).abs() < 1e-5);
            assert!((tn[i] as f64 - expect[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(dot(&a, &a), 55.0);
    }
}
