//! sRGB ⇄ CIE Lab (D65, 2° observer) and the scaling used for network targets.

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lightness scale: L in [0, 100] maps to [0, 1].
pub const L_SCALE: f64 = 100.0;
/// Chroma scale: a, b in roughly [-110, 110] map to roughly [-1, 1].
pub const AB_SCALE: f64 = 110.0;

// IEC 61966-2-1 linear sRGB -> XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// Planar Lab decomposition of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage<T> {
    pub width: usize,
    pub height: usize,
    pub l: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> LabImage<T> {
    pub fn new(width: usize, height: usize, l: Vec<T>, a: Vec<T>, b: Vec<T>) -> Result<Self> {
        let n = width * height;
        if l.len() != n || a.len() != n || b.len() != n {
            return Err(Error::shape(
                "LabImage::new",
                format!("{width}x{height}: planes have {}, {}, {} values", l.len(), a.len(), b.len()),
            ));
        }
        Ok(Self { width, height, l, a, b })
    }

    pub fn pixel(&self, i: usize) -> [T; 3] {
        [self.l[i], self.a[i], self.b[i]]
    }
}

struct Matrices<T> {
    to_xyz: [[T; 3]; 3],
    to_rgb: [[T; 3]; 3],
    white: [T; 3],
}

// The white point is the image of linear (1,1,1) under the same matrix, so a
// gray input lands on the neutral axis up to rounding.
fn matrices<T: Scalar>() -> Matrices<T> {
    let m = RGB_TO_XYZ.map(|r| r.map(T::lit));
    let white = [0, 1, 2].map(|i| m[i][0] + m[i][1] + m[i][2]);
    Matrices {
        to_xyz: m,
        to_rgb: invert3(&m),
        white,
    }
}

fn invert3<T: Scalar>(m: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let det = m[0][0] * adj[0][0] + m[0][1] * adj[1][0] + m[0][2] * adj[2][0];
    adj.map(|r| r.map(|v| v / det))
}

fn mat_vec<T: Scalar>(m: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    m.map(|r| r[0] * v[0] + r[1] * v[1] + r[2] * v[2])
}

pub fn srgb_to_linear<T: Scalar>(c: T) -> T {
    if c <= T::lit(0.040_45) {
        c / T::lit(12.92)
    } else {
        ((c + T::lit(0.055)) / T::lit(1.055)).powf(T::lit(2.4))
    }
}

pub fn linear_to_srgb<T: Scalar>(c: T) -> T {
    if c <= T::lit(0.003_130_8) {
        c * T::lit(12.92)
    } else {
        T::lit(1.055) * c.powf(T::lit(1.0 / 2.4)) - T::lit(0.055)
    }
}

fn lab_f<T: Scalar>(t: T) -> T {
    if t > T::lit(EPSILON) {
        t.cbrt()
    } else {
        (T::lit(KAPPA) * t + T::lit(16.0)) / T::lit(116.0)
    }
}

fn lab_f_inv<T: Scalar>(f: T) -> T {
    let f3 = f * f * f;
    if f3 > T::lit(EPSILON) {
        f3
    } else {
        (T::lit(116.0) * f - T::lit(16.0)) / T::lit(KAPPA)
    }
}

/// Converts one sRGB triple (components in [0, 1]) to Lab. Grays map to
/// `a = b = 0` up to rounding.
pub fn rgb_pixel_to_lab<T: Scalar>(rgb: [T; 3]) -> Result<[T; 3]> {
    if rgb.iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
        return Err(Error::InvalidArgument(format!(
            "sRGB components must lie in [0,1], got {rgb:?}"
        )));
    }
    let m = matrices::<T>();
    Ok(rgb_to_lab_with(&m, rgb))
}

fn rgb_to_lab_with<T: Scalar>(m: &Matrices<T>, rgb: [T; 3]) -> [T; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = mat_vec(&m.to_xyz, lin);
    let [fx, fy, fz] = [0, 1, 2].map(|i| lab_f(xyz[i] / m.white[i]));
    [
        T::lit(116.0) * fy - T::lit(16.0),
        T::lit(500.0) * (fx - fy),
        T::lit(200.0) * (fy - fz),
    ]
}

/// Inverse of [`rgb_pixel_to_lab`]; out-of-gamut results are clamped to [0, 1].
pub fn lab_pixel_to_rgb<T: Scalar>(lab: [T; 3]) -> [T; 3] {
    lab_to_rgb_with(&matrices::<T>(), lab)
}

fn lab_to_rgb_with<T: Scalar>(m: &Matrices<T>, lab: [T; 3]) -> [T; 3] {
    lab_to_linear_with(m, lab).map(|c| linear_to_srgb(c).max(T::zero()).min(T::one()))
}

fn lab_to_linear_with<T: Scalar>(m: &Matrices<T>, lab: [T; 3]) -> [T; 3] {
    let [l, a, b] = lab;
    let fy = (l + T::lit(16.0)) / T::lit(116.0);
    let fx = fy + a / T::lit(500.0);
    let fz = fy - b / T::lit(200.0);
    let xyz = [
        lab_f_inv(fx) * m.white[0],
        // the linear branch of Y is usually written in terms of L directly
        if l > T::lit(KAPPA * EPSILON) { fy * fy * fy } else { l / T::lit(KAPPA) } * m.white[1],
        lab_f_inv(fz) * m.white[2],
    ];
    mat_vec(&m.to_rgb, xyz)
}

const GAMUT_SLACK: f64 = 1e-12;

/// Whether `lab` maps to sRGB without clamping.
pub fn in_gamut<T: Scalar>(lab: [T; 3]) -> bool {
    let (lo, hi) = (T::lit(-GAMUT_SLACK), T::lit(1.0 + GAMUT_SLACK));
    lab_to_linear_with(&matrices::<T>(), lab)
        .iter()
        .all(|&c| c >= lo && c <= hi)
}

/// Pulls an out-of-gamut color toward the gray axis: the largest chroma
/// scale `s` in `[0,1]` with `(L, s·a, s·b)` in gamut, found by bisection.
/// L and hue are kept, so clamping afterwards no longer shifts lightness.
pub fn gamut_map_chroma<T: Scalar>(lab: [T; 3]) -> [T; 3] {
    let l = lab[0].max(T::zero()).min(T::lit(L_SCALE));
    let at = |s: T| [l, s * lab[1], s * lab[2]];
    if in_gamut(at(T::one())) {
        return at(T::one());
    }
    let (mut lo, mut hi) = (T::zero(), T::one());
    for _ in 0..60 {
        let mid = (lo + hi) / T::lit(2.0);
        if in_gamut(at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(lo)
}

pub fn rgb_to_lab<T: Scalar>(image: &RgbImage<T>) -> Result<LabImage<T>> {
    let m = matrices::<T>();
    let n = image.width() * image.height();
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in image.pixels() {
        if px.iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
            return Err(Error::InvalidArgument(format!(
                "sRGB components must lie in [0,1], got {px:?}"
            )));
        }
        let [lv, av, bv] = rgb_to_lab_with(&m, px);
        l.push(lv);
        a.push(av);
        b.push(bv);
    }
    LabImage::new(image.width(), image.height(), l, a, b)
}

pub fn lab_to_rgb<T: Scalar>(lab: &LabImage<T>) -> RgbImage<T> {
    let m = matrices::<T>();
    let data = (0..lab.width * lab.height)
        .flat_map(|i| lab_to_rgb_with(&m, lab.pixel(i)))
        .collect();
    RgbImage::new(lab.width, lab.height, data).expect("consistent extents")
}

/// Scales Lab planes to network range: `X_L = L/100` as `[1,H,W]` and
/// `Y_ab = (a,b)/110` as `[2,H,W]`.
pub fn normalize_lab_for_net<T: Scalar>(lab: &LabImage<T>) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (lab.height, lab.width);
    let ls = T::lit(1.0 / L_SCALE);
    let abs = T::lit(1.0 / AB_SCALE);
    let x_l = Tensor::new(&[1, h, w], lab.l.iter().map(|&v| v * ls).collect()).expect("extent");
    let y_ab = Tensor::new(
        &[2, h, w],
        lab.a.iter().chain(&lab.b).map(|&v| v * abs).collect(),
    )
    .expect("extent");
    (x_l, y_ab)
}

/// Inverse of [`normalize_lab_for_net`].
pub fn denormalize_lab<T: Scalar>(x_l: &Tensor<T>, y_ab: &Tensor<T>) -> Result<LabImage<T>> {
    let (&[1, h, w], &[2, h2, w2]) = (x_l.shape(), y_ab.shape()) else {
        return Err(Error::shape(
            "denormalize_lab",
            format!("expected [1,H,W] and [2,H,W], got {:?} and {:?}", x_l.shape(), y_ab.shape()),
        ));
    };
    if (h, w) != (h2, w2) {
        return Err(Error::shape("denormalize_lab", format!("{h}x{w} vs {h2}x{w2}")));
    }
    let ls = T::lit(L_SCALE);
    let abs = T::lit(AB_SCALE);
    let n = h * w;
    let ab = y_ab.data();
    LabImage::new(
        w,
        h,
        x_l.data().iter().map(|&v| v * ls).collect(),
        ab[..n].iter().map(|&v| v * abs).collect(),
        ab[n..].iter().map(|&v| v * abs).collect(),
    )
}
