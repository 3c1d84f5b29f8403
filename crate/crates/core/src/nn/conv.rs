//! Stride-1, zero-padded 3-D convolution kernels with optional raster-causal
//! masks. Cubic odd kernels only (1 or 3 in practice). Accumulation is in
//! `f64` with a fixed summation order per output element, so results do not
//! depend on the number of worker threads.

use super::tensor::Tensor;
use crate::par;

/// Raster-causal mask type. `A` excludes the centre tap, `B` keeps it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    A,
    B,
}

/// Tap activity for a `k^3` kernel in `(kz, ky, kx)` order.
pub fn mask_taps(kind: Option<MaskKind>, k: usize) -> Vec<bool> {
    let c = (k / 2) as isize;
    let mut taps = Vec::with_capacity(k * k * k);
    for kz in 0..k as isize {
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                let rel = (kz - c, ky - c, kx - c);
                let on = match kind {
                    None => true,
                    Some(MaskKind::A) => rel < (0, 0, 0),
                    Some(MaskKind::B) => rel <= (0, 0, 0),
                };
                taps.push(on);
            }
        }
    }
    taps
}

#[derive(Clone, Copy)]
struct Geom {
    d: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geom {
    /// Valid output range `[lo, hi)` along an axis of length `n` for offset `o`.
    #[inline]
    fn range(n: usize, o: isize) -> (usize, usize) {
        let lo = (-o).max(0) as usize;
        let hi = (n as isize - o.max(0)).max(0) as usize;
        (lo.min(n), hi)
    }
}

fn kernel_size(w: &Tensor) -> (usize, usize, usize) {
    match w.shape() {
        &[co, ci, k, k2, k3] if k == k2 && k == k3 && k % 2 == 1 => (co, ci, k),
        s => panic!("conv weight must be (C_out, C_in, k, k, k) with odd k, got {s:?}"),
    }
}

/// Plane-level kernel: `out += wt * shift(inp, (dz, dy, dx))`.
#[inline]
fn axpy_shifted(out: &mut [f64], inp: &[f64], g: Geom, wt: f64, dz: isize, dy: isize, dx: isize) {
    let (z0, z1) = Geom::range(g.d, dz);
    let (y0, y1) = Geom::range(g.h, dy);
    let (x0, x1) = Geom::range(g.w, dx);
    if x0 >= x1 {
        return;
    }
    for z in z0..z1 {
        let sz = (z as isize + dz) as usize;
        for y in y0..y1 {
            let sy = (y as isize + dy) as usize;
            let o = (z * g.h + y) * g.w;
            let i = (sz * g.h + sy) * g.w;
            let dst = &mut out[o + x0..o + x1];
            let src = &inp[(i as isize + x0 as isize + dx) as usize..(i as isize + x1 as isize + dx) as usize];
            for (a, b) in dst.iter_mut().zip(src) {
                *a += wt * b;
            }
        }
    }
}

/// Dot product of `out_grad` with `shift(inp, (dz, dy, dx))` over the valid region.
#[inline]
fn dot_shifted(gout: &[f64], inp: &[f64], g: Geom, dz: isize, dy: isize, dx: isize) -> f64 {
    let (z0, z1) = Geom::range(g.d, dz);
    let (y0, y1) = Geom::range(g.h, dy);
    let (x0, x1) = Geom::range(g.w, dx);
    let mut acc = 0.0;
    if x0 >= x1 {
        return acc;
    }
    for z in z0..z1 {
        let sz = (z as isize + dz) as usize;
        for y in y0..y1 {
            let sy = (y as isize + dy) as usize;
            let o = (z * g.h + y) * g.w;
            let i = (sz * g.h + sy) * g.w;
            let a = &gout[o + x0..o + x1];
            let b = &inp[(i as isize + x0 as isize + dx) as usize..(i as isize + x1 as isize + dx) as usize];
            acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    acc
}

fn taps(k: usize) -> impl Iterator<Item = (usize, isize, isize, isize)> {
    let c = (k / 2) as isize;
    (0..k * k * k).map(move |t| {
        let kz = (t / (k * k)) as isize;
        let ky = ((t / k) % k) as isize;
        let kx = (t % k) as isize;
        (t, kz - c, ky - c, kx - c)
    })
}

/// Forward convolution. `x` is `(C_in, D, H, W)`, `w` is `(C_out, C_in, k, k, k)`,
/// `b` has `C_out` entries. Output keeps the input's spatial dims.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, mask: Option<MaskKind>) -> Tensor {
    let [cin, d, h, wd] = x.dims4();
    let (cout, wcin, k) = kernel_size(w);
    assert_eq!(cin, wcin, "conv input has {cin} channels, kernel expects {wcin}");
    assert_eq!(b.len(), cout);
    let active = mask_taps(mask, k);
    let g = Geom { d, h, w: wd, k };
    let plane = d * h * wd;
    let kk = k * k * k;
    let mut out = Tensor::zeros(&[cout, d, h, wd]);
    let (xd, wdata, bdata) = (x.data(), w.data(), b.data());
    par::chunks_mut(out.data_mut(), plane, |co, dst| {
        dst.iter_mut().for_each(|v| *v = bdata[co]);
        for ci in 0..cin {
            let src = &xd[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * kk;
            for (t, dz, dy, dx) in taps(g.k) {
                if active[t] {
                    axpy_shifted(dst, src, g, wdata[wbase + t], dz, dy, dx);
                }
            }
        }
    });
    out
}

/// Gradients of a convolution with respect to input (when `need_input`),
/// weights and bias.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    mask: Option<MaskKind>,
    gout: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [cin, d, h, wd] = x.dims4();
    let (cout, _, k) = kernel_size(w);
    let active = mask_taps(mask, k);
    let g = Geom { d, h, w: wd, k };
    let plane = d * h * wd;
    let kk = k * k * k;
    let (xd, wdata, gd) = (x.data(), w.data(), gout.data());

    let gb = Tensor::from_vec(&[cout], (0..cout).map(|co| gd[co * plane..(co + 1) * plane].iter().sum()).collect())
        .expect("bias shape");

    let mut gw = Tensor::zeros(w.shape());
    par::chunks_mut(gw.data_mut(), cin * kk, |co, dst| {
        let go = &gd[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let src = &xd[ci * plane..(ci + 1) * plane];
            for (t, dz, dy, dx) in taps(g.k) {
                if active[t] {
                    dst[ci * kk + t] = dot_shifted(go, src, g, dz, dy, dx);
                }
            }
        }
    });

    if !need_input {
        return (None, gw, gb);
    }
    let mut gx = Tensor::zeros(x.shape());
    par::chunks_mut(gx.data_mut(), plane, |ci, dst| {
        for co in 0..cout {
            let go = &gd[co * plane..(co + 1) * plane];
            let wbase = (co * cin + ci) * kk;
            for (t, dz, dy, dx) in taps(g.k) {
                if active[t] {
                    // x[q] feeds out[q - d]; transpose shifts by -d.
                    axpy_shifted(dst, go, g, wdata[wbase + t], -dz, -dy, -dx);
                }
            }
        }
    });
    (Some(gx), gw, gb)
}
