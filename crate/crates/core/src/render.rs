//! Deterministic renderer for the synthetic multi-view corpus.
//!
//! Each identity is a lambertian-shaded primitive (box, ellipsoid or
//! triangular prism) with its own color, stripe pattern and an off-axis
//! marker blob. The marker breaks left-right symmetry so positive and
//! negative yaws are distinguishable; without it a frontal rendering of a
//! symmetric body would equal its own mirror image. Orthographic camera,
//! one directional light, background fixed at -1.

use crate::domain::Image;
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Box,
    Ellipsoid,
    Prism,
}

/// Fully determined by (corpus seed, identity id).
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub identity: usize,
    pub kind: PrimitiveKind,
    pub half_extents: [f64; 3],
    pub base_color: [f64; 3],
    pub pattern_freq: f64,
    /// Marker center in the object frame; positive x keeps it off-axis.
    pub marker_offset: [f64; 3],
    pub marker_color: [f64; 3],
}

const IDENTITY_STREAM: u64 = 0x1D;

impl IdentitySpec {
    pub fn derive(corpus_seed: u64, identity: usize) -> Self {
        let mut rng = RngStream::new(corpus_seed)
            .split(IDENTITY_STREAM)
            .split(identity as u64);
        let kind = match rng.below(3) {
            0 => PrimitiveKind::Box,
            1 => PrimitiveKind::Ellipsoid,
            _ => PrimitiveKind::Prism,
        };
        let half_extents = [
            rng.uniform_in(0.40, 0.60),
            rng.uniform_in(0.35, 0.55),
            rng.uniform_in(0.30, 0.50),
        ];
        let base_color = hsv_to_rgb(rng.uniform(), rng.uniform_in(0.55, 0.95), rng.uniform_in(0.65, 1.0));
        let pattern_freq = rng.uniform_in(1.5, 4.5);
        let marker_offset = [
            rng.uniform_in(0.30, 0.45),
            rng.uniform_in(0.05, 0.30),
            rng.uniform_in(0.10, 0.30),
        ];
        let marker_color = hsv_to_rgb(rng.uniform(), rng.uniform_in(0.7, 1.0), rng.uniform_in(0.8, 1.0));
        IdentitySpec {
            identity,
            kind,
            half_extents,
            base_color,
            pattern_freq,
            marker_offset,
            marker_color,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).clamp(0.0, 6.0);
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn len3(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn sd_box(p: [f64; 3], he: [f64; 3]) -> f64 {
    let q = [p[0].abs() - he[0], p[1].abs() - he[1], p[2].abs() - he[2]];
    let outside = len3([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
    let inside = q[0].max(q[1]).max(q[2]).min(0.0);
    outside + inside
}

fn sd_ellipsoid(p: [f64; 3], r: [f64; 3]) -> f64 {
    let k0 = len3([p[0] / r[0], p[1] / r[1], p[2] / r[2]]);
    let k1 = len3([p[0] / (r[0] * r[0]), p[1] / (r[1] * r[1]), p[2] / (r[2] * r[2])]);
    if k1 == 0.0 {
        -r[0].min(r[1]).min(r[2])
    } else {
        k0 * (k0 - 1.0) / k1
    }
}

/// Triangular prism along z: cross-section height `he[1]`, length `he[2]`.
fn sd_tri_prism(p: [f64; 3], he: [f64; 3]) -> f64 {
    let q = [p[0].abs(), p[1].abs(), p[2].abs()];
    let d1 = q[2] - he[2];
    let d2 = (q[0] * 0.866025 + p[1] * 0.5).max(-p[1]) - he[1] * 0.5;
    let m = d1.max(d2);
    len3([d1.max(0.0), d2.max(0.0), 0.0]) + m.min(0.0)
}

fn body_sdf(spec: &IdentitySpec, p: [f64; 3]) -> f64 {
    match spec.kind {
        PrimitiveKind::Box => sd_box(p, spec.half_extents),
        PrimitiveKind::Ellipsoid => sd_ellipsoid(p, spec.half_extents),
        PrimitiveKind::Prism => sd_tri_prism(p, spec.half_extents),
    }
}

const MARKER_RADIUS: f64 = 0.16;

fn marker_sdf(spec: &IdentitySpec, p: [f64; 3]) -> f64 {
    let d = [
        p[0] - spec.marker_offset[0],
        p[1] - spec.marker_offset[1],
        p[2] - spec.marker_offset[2],
    ];
    len3(d) - MARKER_RADIUS
}

/// Signed distance in world space for the object rotated by `yaw` about the
/// vertical axis. Returns (distance, is_marker).
fn scene_sdf(spec: &IdentitySpec, yaw_rad: f64, p: [f64; 3]) -> (f64, bool) {
    let (s, c) = yaw_rad.sin_cos();
    // object-frame coordinates: rotate the point by -yaw
    let q = [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]];
    let db = body_sdf(spec, q);
    let dm = marker_sdf(spec, q);
    if dm < db {
        (dm, true)
    } else {
        (db, false)
    }
}

fn normal_at(spec: &IdentitySpec, yaw: f64, p: [f64; 3]) -> [f64; 3] {
    let e = 1e-4;
    let d = |q: [f64; 3]| scene_sdf(spec, yaw, q).0;
    let n = [
        d([p[0] + e, p[1], p[2]]) - d([p[0] - e, p[1], p[2]]),
        d([p[0], p[1] + e, p[2]]) - d([p[0], p[1] - e, p[2]]),
        d([p[0], p[1], p[2] + e]) - d([p[0], p[1], p[2] - e]),
    ];
    let l = len3(n).max(1e-12);
    [n[0] / l, n[1] / l, n[2] / l]
}

const LIGHT_DIR: [f64; 3] = [0.42, 0.55, 0.72];

/// Render one view of one identity. `yaw_degrees` rotates the object about
/// the vertical axis; output values are in [-1, 1], background is -1.
pub fn render_view<F: Scalar>(spec: &IdentitySpec, yaw_degrees: f64, size: usize) -> Image<F> {
    let yaw = yaw_degrees.to_radians();
    let llen = len3(LIGHT_DIR);
    let light = [LIGHT_DIR[0] / llen, LIGHT_DIR[1] / llen, LIGHT_DIR[2] / llen];
    let mut data = vec![F::zero(); size * size * 3];
    for py in 0..size {
        for px in 0..size {
            // pixel centers on [-1.05, 1.05], y up
            let u = (px as f64 + 0.5) / size as f64 * 2.1 - 1.05;
            let v = 1.05 - (py as f64 + 0.5) / size as f64 * 2.1;
            let mut p = [u, v, 2.0];
            let mut hit = None;
            let mut travelled = 0.0;
            for _ in 0..96 {
                let (d, is_marker) = scene_sdf(spec, yaw, p);
                if d < 1e-4 {
                    hit = Some(is_marker);
                    break;
                }
                travelled += d;
                if travelled > 4.5 {
                    break;
                }
                p[2] -= d; // orthographic ray along -z
            }
            let rgb = match hit {
                None => [0.0, 0.0, 0.0],
                Some(is_marker) => {
                    let n = normal_at(spec, yaw, p);
                    let diffuse = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                    let shade = 0.22 + 0.78 * diffuse;
                    let albedo = if is_marker {
                        spec.marker_color
                    } else {
                        // stripes travel with the object frame
                        let (s, c) = yaw.sin_cos();
                        let q = [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]];
                        let stripe = 0.72
                            + 0.28
                                * (spec.pattern_freq * std::f64::consts::PI * (q[0] + 0.6 * q[1]))
                                    .sin();
                        [
                            spec.base_color[0] * stripe,
                            spec.base_color[1] * stripe,
                            spec.base_color[2] * stripe,
                        ]
                    };
                    [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade]
                }
            };
            let base = (py * size + px) * 3;
            for ch in 0..3 {
                data[base + ch] = F::of_f64((rgb[ch] * 2.0 - 1.0).clamp(-1.0, 1.0));
            }
        }
    }
    Image::new(size, size, 3, data).expect("renderer output in bounds")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mirror_lr<F: Scalar>(img: &Image<F>) -> Image<F> {
        let (h, w, c) = img.shape();
        let mut data = vec![F::zero(); h * w * c];
        for y in 0..h {
            for x in 0..w {
                let src = img.pixel(y, x);
                let base = (y * w + (w - 1 - x)) * c;
                data[base..base + c].copy_from_slice(src);
            }
        }
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = IdentitySpec::derive(42, 7);
        let a: Image<f32> = render_view(&spec, 15.0, 32);
        let b: Image<f32> = render_view(&spec, 15.0, 32);
        assert_eq!(a, b);
        assert_eq!(IdentitySpec::derive(42, 7), spec);
    }

    #[test]
    fn output_is_in_bounds_and_hits_something() {
        for id in 0..6 {
            let spec = IdentitySpec::derive(1, id);
            let img: Image<f64> = render_view(&spec, -60.0, 32);
            assert!(img.in_bounds());
            // at least a tenth of the pixels are foreground
            let fg = img.tensor().data().iter().filter(|&&v| v > -0.999).count();
            assert!(fg > 32 * 32 * 3 / 10, "identity {id}: only {fg} lit values");
        }
    }

    #[test]
    fn marker_breaks_mirror_symmetry_at_frontal_view() {
        let spec = IdentitySpec::derive(5, 0);
        let img: Image<f64> = render_view(&spec, 0.0, 32);
        let mirrored = mirror_lr(&img);
        let diff: f64 = img
            .tensor()
            .data()
            .iter()
            .zip(mirrored.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / img.tensor().len() as f64;
        assert!(diff > 0.01, "frontal view is mirror symmetric: {diff}");
    }

    #[test]
    fn distinct_views_render_distinct_images() {
        let spec = IdentitySpec::derive(9, 3);
        let a: Image<f64> = render_view(&spec, -60.0, 32);
        let b: Image<f64> = render_view(&spec, 60.0, 32);
        let diff: f64 = a
            .tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.tensor().len() as f64;
        assert!(diff > 0.01);
    }

    #[test]
    fn distinct_identities_render_distinct_images() {
        let a: Image<f64> = render_view(&IdentitySpec::derive(3, 0), 0.0, 32);
        let b: Image<f64> = render_view(&IdentitySpec::derive(3, 1), 0.0, 32);
        assert_ne!(a, b);
    }
}
