//! Data-parallel kernels with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the row loops and
//! independent-cell maps below run on the rayon pool; without it they run
//! in order on the calling thread. Both paths perform the same floating
//! point operations in the same order per output element, so results are
//! bitwise identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work (multiply-adds) below which a matmul stays on the calling thread.
const PAR_MATMUL_MIN_WORK: usize = 1 << 15;

fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    for (p, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// Row-major `m×k` times `k×n`, single-threaded.
pub fn matmul_sequential(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 || k == 0 {
        return out;
    }
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, out_row);
    }
    out
}

/// Row-major `m×k` times `k×n`, rows distributed over the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_parallel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 || k == 0 {
        return out;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        matmul_row(&a[i * k..(i + 1) * k], b, n, out_row);
    });
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MATMUL_MIN_WORK && m > 1 {
        return matmul_parallel(a, b, m, k, n);
    }
    #[cfg(not(feature = "parallel"))]
    let _ = PAR_MATMUL_MIN_WORK;
    matmul_sequential(a, b, m, k, n)
}

/// Maps `f` over `items`, keeping input order in the output.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential counterpart of [`map`], always available for benchmarking.
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_paths_agree_bitwise() {
        let (m, k, n) = (37, 41, 29);
        let a: Vec<f64> = (0..m * k)
            .map(|i| ((i * 7919) % 101) as f64 / 13.0 - 3.0)
            .collect();
        let b: Vec<f64> = (0..k * n)
            .map(|i| ((i * 104_729) % 97) as f64 / 11.0 - 4.0)
            .collect();
        let seq = matmul_sequential(&a, &b, m, k, n);
        assert_eq!(seq, matmul(&a, &b, m, k, n));
        #[cfg(feature = "parallel")]
        assert_eq!(seq, matmul_parallel(&a, &b, m, k, n));
    }

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u32> = (0..100).collect();
        assert_eq!(map(&xs, |x| x * 2), map_sequential(&xs, |x| x * 2));
    }
}
