//! Test-only oracles shared by the integration suites. Nothing here calls
//! into the projection or rasterization code it is used to check.
#![allow(dead_code)]

use densescan::corpus::synthetic::{Primitive, Shape};
use densescan::corpus::FrameRecord;
use densescan::geomview::BinaryMask;
use nalgebra::Vector3;

/// Independent ray caster: boxes as six bounded face planes, spheres by
/// the geometric (projection onto the ray) construction.
pub fn oracle_hit(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    match shape {
        Shape::Box { center, half } => {
            let mut best: Option<f64> = None;
            for axis in 0..3 {
                if d[axis] == 0.0 {
                    continue;
                }
                for sign in [-1.0, 1.0] {
                    let plane = center[axis] + sign * half[axis];
                    let t = (plane - o[axis]) / d[axis];
                    if t <= 0.0 {
                        continue;
                    }
                    let p = o + d * t;
                    let inside = (0..3).filter(|&a| a != axis).all(|a| {
                        (p[a] - center[a]).abs() <= half[a] + 1e-12
                    });
                    if inside && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                }
            }
            best
        }
        Shape::Sphere { center, radius } => {
            let c = Vector3::from(*center);
            let dn = d.normalize();
            let tc = (c - o).dot(&dn);
            let d2 = (c - o).norm_squared() - tc * tc;
            if d2 > radius * radius {
                return None;
            }
            let th = (radius * radius - d2).sqrt();
            let t = if tc - th > 0.0 { tc - th } else { tc + th };
            (t > 0.0).then(|| t / d.norm())
        }
    }
}

/// Pixels whose nearest ray hit is primitive `target`.
pub fn analytic_silhouette(primitives: &[Primitive], frame: &FrameRecord, target: usize) -> BinaryMask {
    let rot = frame.pose_c2w.rotation();
    let eye = frame.pose_c2w.translation();
    let k = frame.intrinsics;
    BinaryMask::from_fn(k.width, k.height, |u, v| {
        let d = rot * Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in primitives.iter().enumerate() {
            if let Some(t) = oracle_hit(&p.shape, &eye, &d) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        matches!(best, Some((_, i)) if i == target)
    })
}

/// |a ∩ b| / |a ∪ b| by explicit pixel enumeration.
pub fn pixel_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (pa, pb) = (a.get(x, y), b.get(x, y));
            inter += (pa && pb) as usize;
            union += (pa || pb) as usize;
        }
    }
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}
