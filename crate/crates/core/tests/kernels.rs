use tamperlens_core::tensor::kernels::*;

fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

#[test]
fn gemm_variants_agree_with_triple_loop() {
    let (m, k, n) = (5, 11, 7);
    let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
    let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 11) as f64) * 0.5 - 2.0).collect();
    let want = naive(m, k, n, &a, &b);

    let mut c = vec![0.0; m * n];
    gemm_nn(m, k, n, &a, &b, &mut c);
    assert_eq!(c, want);

    let mut c = vec![0.0; m * n];
    gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c);
    for (x, y) in c.iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }

    let mut c = vec![0.0; m * n];
    gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c);
    assert_eq!(c, want);
}
