//! Shared kernels for group and layer normalization.
//!
//! Both normalize contiguous regions of the input; they differ only in how an
//! element maps to its scale/shift parameter.

use super::Real;

pub(crate) struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn forward<T: Real>(
    x: &[T],
    region: usize,
    param_of: impl Fn(usize, usize) -> usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormSaved<T>) {
    let regions = x.len() / region;
    let n = T::from_usize(region).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(regions);
    for r in 0..regions {
        let xs = &x[r * region..(r + 1) * region];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = (var + eps).sqrt().recip();
        inv_std.push(inv);
        for (e, &v) in xs.iter().enumerate() {
            let h = (v - mean) * inv;
            let p = param_of(r, e);
            xhat[r * region + e] = h;
            y[r * region + e] = gamma[p] * h + beta[p];
        }
    }
    (y, NormSaved { xhat, inv_std })
}

pub(crate) struct NormGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dgamma: Option<&'a mut [T]>,
    pub dbeta: Option<&'a mut [T]>,
}

pub(crate) fn backward<T: Real>(
    g: &[T],
    saved: &NormSaved<T>,
    region: usize,
    param_of: impl Fn(usize, usize) -> usize,
    gamma: &[T],
    mut out: NormGrads<'_, T>,
) {
    let n = T::from_usize(region).unwrap();
    let mut dxhat = vec![T::zero(); region];
    for (r, &inv) in saved.inv_std.iter().enumerate() {
        let gs = &g[r * region..(r + 1) * region];
        let hs = &saved.xhat[r * region..(r + 1) * region];
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for e in 0..region {
            let p = param_of(r, e);
            if let Some(dg) = out.dgamma.as_deref_mut() {
                dg[p] += gs[e] * hs[e];
            }
            if let Some(db) = out.dbeta.as_deref_mut() {
                db[p] += gs[e];
            }
            dxhat[e] = gs[e] * gamma[p];
            s1 += dxhat[e];
            s2 += dxhat[e] * hs[e];
        }
        if let Some(dx) = out.dx.as_deref_mut() {
            let dx = &mut dx[r * region..(r + 1) * region];
            let k = inv / n;
            for e in 0..region {
                dx[e] += k * (n * dxhat[e] - s1 - hs[e] * s2);
            }
        }
    }
}
