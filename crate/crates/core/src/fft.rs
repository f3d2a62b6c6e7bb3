//! FFT helpers with the toolkit's fixed conventions.
//!
//! k-space is stored *centered*: the DC sample of an axis of extent `n`
//! sits at index `n/2` (floor). Spatial transforms between image and
//! k-space are unitary, so operator adjoints stay clean. Offsets and
//! spatial coordinates follow `e^{+i2pi l.x}` with `x = index / extent`.

use std::sync::Mutex;

use ndarray::{Array3, Array4, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

static PLANNER: Mutex<Option<FftPlanner<f64>>> = Mutex::new(None);

fn plan(len: usize, dir: FftDirection) -> std::sync::Arc<dyn Fft<f64>> {
    let mut guard = PLANNER.lock().unwrap();
    let planner = guard.get_or_insert_with(FftPlanner::new);
    match dir {
        FftDirection::Forward => planner.plan_fft_forward(len),
        FftDirection::Inverse => planner.plan_fft_inverse(len),
    }
}

/// In-place FFT along one axis of a 3-D array (no normalization).
fn fft_axis3(a: &mut Array3<Complex64>, axis: usize, dir: FftDirection) {
    let len = a.shape()[axis];
    if len <= 1 {
        return;
    }
    let fft = plan(len, dir);
    let mut buf = vec![Complex64::default(); len];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for mut lane in a.lanes_mut(Axis(axis)) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
}

/// In-place FFT over all three axes (no normalization).
pub fn fft3(a: &mut Array3<Complex64>, dir: FftDirection) {
    for axis in 0..3 {
        fft_axis3(a, axis, dir);
    }
}

/// Cyclic roll: `out[(i + shift) % n] = in[i]` per axis.
pub fn roll3(a: &Array3<Complex64>, shifts: [usize; 3]) -> Array3<Complex64> {
    let dims = a.dim();
    let (nx, ny, nz) = dims;
    let mut out = Array3::zeros(dims);
    for x in 0..nx {
        let xo = (x + shifts[0]) % nx;
        for y in 0..ny {
            let yo = (y + shifts[1]) % ny;
            for z in 0..nz {
                let zo = (z + shifts[2]) % nz;
                out[(xo, yo, zo)] = a[(x, y, z)];
            }
        }
    }
    out
}

/// Move DC from index 0 to index `n/2` per axis.
pub fn fftshift3(a: &Array3<Complex64>) -> Array3<Complex64> {
    let s = a.dim();
    roll3(a, [s.0 / 2, s.1 / 2, s.2 / 2])
}

/// Inverse of [`fftshift3`].
pub fn ifftshift3(a: &Array3<Complex64>) -> Array3<Complex64> {
    let s = a.dim();
    let back = |n: usize| (n - n / 2) % n.max(1);
    roll3(a, [back(s.0), back(s.1), back(s.2)])
}

/// Unitary spatial DFT of an image volume, returned in centered k-space order.
pub fn image_to_kspace(vol: &Array3<Complex64>) -> Array3<Complex64> {
    let mut k = vol.clone();
    fft3(&mut k, FftDirection::Forward);
    let scale = 1.0 / (vol.len() as f64).sqrt();
    let mut kc = fftshift3(&k);
    kc.mapv_inplace(|v| v * scale);
    kc
}

/// Unitary inverse of [`image_to_kspace`].
pub fn kspace_to_image(kc: &Array3<Complex64>) -> Array3<Complex64> {
    let mut k = ifftshift3(kc);
    fft3(&mut k, FftDirection::Inverse);
    let scale = 1.0 / (kc.len() as f64).sqrt();
    k.mapv_inplace(|v| v * scale);
    k
}

/// Trigonometric evaluation of a centered offset spectrum: given
/// coefficients `w` placed at bins `delta mod n`, returns
/// `sum_delta w(delta) e^{+i2pi delta.x/n}` on the full grid.
pub fn eval_offset_spectrum(mut coeffs: Array3<Complex64>) -> Array3<Complex64> {
    fft3(&mut coeffs, FftDirection::Inverse);
    coeffs
}

/// Fourier-domain resampling of a complex field to `target` extents.
/// Preserves values of band-limited fields (in particular constants).
pub fn fourier_resize(vol: &Array3<Complex64>, target: [usize; 3]) -> Array3<Complex64> {
    let src = [vol.dim().0, vol.dim().1, vol.dim().2];
    if src == target {
        return vol.clone();
    }
    let mut k = vol.clone();
    fft3(&mut k, FftDirection::Forward);
    let kc = fftshift3(&k);
    let mut out_k = Array3::zeros((target[0], target[1], target[2]));
    let mut src_r = [(0usize, 0usize); 3];
    let mut dst_r = [(0usize, 0usize); 3];
    for ax in 0..3 {
        let len = src[ax].min(target[ax]);
        let ss = (src[ax] - len) / 2;
        let ds = (target[ax] - len) / 2;
        src_r[ax] = (ss, ss + len);
        dst_r[ax] = (ds, ds + len);
    }
    for x in 0..(src_r[0].1 - src_r[0].0) {
        for y in 0..(src_r[1].1 - src_r[1].0) {
            for z in 0..(src_r[2].1 - src_r[2].0) {
                out_k[(dst_r[0].0 + x, dst_r[1].0 + y, dst_r[2].0 + z)] =
                    kc[(src_r[0].0 + x, src_r[1].0 + y, src_r[2].0 + z)];
            }
        }
    }
    let mut o = ifftshift3(&out_k);
    fft3(&mut o, FftDirection::Inverse);
    let scale = 1.0 / (src[0] * src[1] * src[2]) as f64;
    o.mapv_inplace(|v| v * scale);
    o
}

/// Unitary DFT along the frame axis (axis 3) of a dynamic image array.
pub fn fft_frames_unitary(a: &mut Array4<Complex64>, dir: FftDirection) {
    let t = a.shape()[3];
    if t <= 1 {
        return;
    }
    let fft = plan(t, dir);
    let mut buf = vec![Complex64::default(); t];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let scale = 1.0 / (t as f64).sqrt();
    for mut lane in a.lanes_mut(Axis(3)) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = *b * scale;
        }
    }
}
