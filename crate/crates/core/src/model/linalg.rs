//! Row-major dense helpers. `a` is `n×k`, `b` is `k×m` unless noted.

/// `a · b`
pub fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out += aᵀ · g` with `a: n×k`, `g: n×m`, `out: k×m`.
pub fn acc_at_b(a: &[f64], n: usize, k: usize, g: &[f64], m: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out += g · bᵀ` with `g: n×m`, `b: k×m`, `out: n×k`.
pub fn acc_a_bt(g: &[f64], n: usize, m: usize, b: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n * k);
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable in-place log-softmax of one row.
pub fn log_softmax(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

pub fn softmax(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, 2, 2, &b, 2), vec![19.0, 22.0, 43.0, 50.0]);
        let mut g = vec![0.0; 4];
        acc_at_b(&a, 2, 2, &b, 2, &mut g);
        assert_eq!(g, vec![26.0, 30.0, 38.0, 44.0]);
        let mut h = vec![0.0; 4];
        acc_a_bt(&a, 2, 2, &b, 2, &mut h);
        assert_eq!(h, vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
