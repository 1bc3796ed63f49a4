//! Collision primitives and pairwise contact queries.
//!
//! Supported shapes are spheres, cuboids, and capsules (axis along local z)
//! against each other and against static supports (half-planes and a
//! single-edge height step). Queries return signed separation distance
//! (negative when penetrating), a contact point, and the normal pointing
//! in the direction that separates the pair.

use nalgebra::{Isometry3, Unit, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Cuboid { half_extents: [f64; 3] },
    /// Axis along the local z direction; `half_length` excludes the caps.
    Capsule { radius: f64, half_length: f64 },
}

impl Shape {
    pub fn volume(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Shape::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            Shape::Cuboid { half_extents: he } => 8.0 * he[0] * he[1] * he[2],
            Shape::Capsule {
                radius,
                half_length,
            } => PI * radius * radius * 2.0 * half_length + 4.0 / 3.0 * PI * radius.powi(3),
        }
    }

    /// Radius of the bounding sphere centred at the shape origin.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Cuboid { half_extents: he } => {
                (he[0] * he[0] + he[1] * he[1] + he[2] * he[2]).sqrt()
            }
            Shape::Capsule {
                radius,
                half_length,
            } => half_length + radius,
        }
    }

    /// Diagonal of the body-frame inertia tensor for a solid of mass `m`.
    pub fn inertia_diag(&self, m: f64) -> Vector3<f64> {
        match *self {
            Shape::Sphere { radius } => {
                let i = 0.4 * m * radius * radius;
                Vector3::new(i, i, i)
            }
            Shape::Cuboid { half_extents: he } => Vector3::new(
                m / 3.0 * (he[1] * he[1] + he[2] * he[2]),
                m / 3.0 * (he[0] * he[0] + he[2] * he[2]),
                m / 3.0 * (he[0] * he[0] + he[1] * he[1]),
            ),
            Shape::Capsule {
                radius,
                half_length,
            } => {
                // cylinder part + two hemispheres, split by volume
                let r2 = radius * radius;
                let h = 2.0 * half_length;
                let v_cyl = std::f64::consts::PI * r2 * h;
                let v_sph = 4.0 / 3.0 * std::f64::consts::PI * radius * r2;
                let m_cyl = m * v_cyl / (v_cyl + v_sph);
                let m_sph = m - m_cyl;
                let i_axial = 0.5 * m_cyl * r2 + 0.4 * m_sph * r2;
                let i_trans = m_cyl * (r2 / 4.0 + h * h / 12.0)
                    + m_sph * (0.4 * r2 + half_length * half_length);
                Vector3::new(i_trans, i_trans, i_axial)
            }
        }
    }

    fn corners(he: [f64; 3]) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        let mut idx = 0;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out[idx] = Vector3::new(sx * he[0], sy * he[1], sz * he[2]);
                    idx += 1;
                }
            }
        }
        out
    }
}

/// Static environment geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StaticGeom {
    /// Points with `normal . p < offset` are inside the support.
    HalfPlane { normal: [f64; 3], offset: f64 },
    /// Horizontal floor at `z_low` for x < x_edge and `z_high` beyond;
    /// contact normals stay vertical (the riser face is not modelled).
    HeightStep { x_edge: f64, z_low: f64, z_high: f64 },
}

/// One contact point between a pair. `normal` points from the first body
/// toward the second; applying `+normal` force to the second body (and the
/// opposite to the first) separates the pair.
#[derive(Debug, Clone, Copy)]
pub struct Contact {
    pub point: Vector3<f64>,
    pub normal: Unit<Vector3<f64>>,
    pub dist: f64,
}

fn capsule_segment(pose: &Isometry3<f64>, half_length: f64) -> (Vector3<f64>, Vector3<f64>) {
    let axis = pose.rotation * Vector3::new(0.0, 0.0, half_length);
    let c = pose.translation.vector;
    (c - axis, c + axis)
}

fn closest_on_segment(a: Vector3<f64>, b: Vector3<f64>, p: Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= f64::EPSILON {
        return a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Closest point on a cuboid (world frame) to a world point, plus the
/// separation direction from the box toward the point and the signed
/// distance of the point to the box surface.
fn point_vs_cuboid(
    p: Vector3<f64>,
    pose: &Isometry3<f64>,
    he: [f64; 3],
) -> (Vector3<f64>, Unit<Vector3<f64>>, f64) {
    let local = pose.inverse_transform_point(&p.into()).coords;
    let clamped = Vector3::new(
        local.x.clamp(-he[0], he[0]),
        local.y.clamp(-he[1], he[1]),
        local.z.clamp(-he[2], he[2]),
    );
    if (local - clamped).norm_squared() > 0.0 {
        // outside the box
        let delta = local - clamped;
        let dist = delta.norm();
        let n_local = delta / dist;
        let point = pose.transform_point(&clamped.into()).coords;
        (point, Unit::new_unchecked(pose.rotation * n_local), dist)
    } else {
        // inside: exit along the axis of least penetration
        let pen = [
            he[0] - local.x.abs(),
            he[1] - local.y.abs(),
            he[2] - local.z.abs(),
        ];
        let (axis, &depth) = pen
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let mut n_local = Vector3::zeros();
        n_local[axis] = if local[axis] >= 0.0 { 1.0 } else { -1.0 };
        let mut surf = local;
        surf[axis] = n_local[axis] * he[axis];
        let point = pose.transform_point(&surf.into()).coords;
        (point, Unit::new_unchecked(pose.rotation * n_local), -depth)
    }
}

/// Contact between two dynamic shapes, `None` if the pair kind is not
/// supported (cuboid-cuboid) or clearly separated beyond `activation`.
pub fn shape_contact(
    a: &Shape,
    a_pose: &Isometry3<f64>,
    b: &Shape,
    b_pose: &Isometry3<f64>,
    activation: f64,
) -> Option<Contact> {
    let c = match (a, b) {
        (Shape::Sphere { radius: ra }, Shape::Sphere { radius: rb }) => {
            sphere_sphere(a_pose.translation.vector, *ra, b_pose.translation.vector, *rb)
        }
        (Shape::Sphere { radius }, Shape::Cuboid { half_extents }) => {
            sphere_cuboid(a_pose.translation.vector, *radius, b_pose, *half_extents)
                .map(Contact::flipped)
        }
        (Shape::Cuboid { half_extents }, Shape::Sphere { radius }) => {
            sphere_cuboid(b_pose.translation.vector, *radius, a_pose, *half_extents)
        }
        (Shape::Sphere { radius: rs }, Shape::Capsule { radius, half_length }) => {
            sphere_capsule(a_pose.translation.vector, *rs, b_pose, *radius, *half_length)
                .map(Contact::flipped)
        }
        (Shape::Capsule { radius, half_length }, Shape::Sphere { radius: rs }) => {
            sphere_capsule(b_pose.translation.vector, *rs, a_pose, *radius, *half_length)
        }
        (Shape::Capsule { radius, half_length }, Shape::Cuboid { half_extents }) => {
            capsule_cuboid(a_pose, *radius, *half_length, b_pose, *half_extents)
                .map(Contact::flipped)
        }
        (Shape::Cuboid { half_extents }, Shape::Capsule { radius, half_length }) => {
            capsule_cuboid(b_pose, *radius, *half_length, a_pose, *half_extents)
        }
        (Shape::Capsule { .. }, Shape::Capsule { .. }) => None,
        (Shape::Cuboid { .. }, Shape::Cuboid { .. }) => None,
    };
    c.filter(|c| c.dist < activation)
}

impl Contact {
    fn flipped(self) -> Contact {
        Contact {
            point: self.point,
            normal: Unit::new_unchecked(-self.normal.into_inner()),
            dist: self.dist,
        }
    }
}

fn sphere_sphere(ca: Vector3<f64>, ra: f64, cb: Vector3<f64>, rb: f64) -> Option<Contact> {
    let d = cb - ca;
    let dist_c = d.norm();
    let normal = if dist_c > 1e-12 {
        Unit::new_unchecked(d / dist_c)
    } else {
        Unit::new_unchecked(Vector3::z())
    };
    let dist = dist_c - ra - rb;
    let point = ca + normal.into_inner() * (ra + dist * 0.5);
    Some(Contact {
        point,
        normal,
        dist,
    })
}

// normal points from the cuboid toward the sphere
fn sphere_cuboid(
    center: Vector3<f64>,
    radius: f64,
    box_pose: &Isometry3<f64>,
    he: [f64; 3],
) -> Option<Contact> {
    let (surface, dir, center_dist) = point_vs_cuboid(center, box_pose, he);
    Some(Contact {
        point: surface,
        normal: dir,
        dist: center_dist - radius,
    })
}

// normal points from the capsule toward the sphere
fn sphere_capsule(
    center: Vector3<f64>,
    r_sphere: f64,
    cap_pose: &Isometry3<f64>,
    r_cap: f64,
    half_length: f64,
) -> Option<Contact> {
    let (a, b) = capsule_segment(cap_pose, half_length);
    let on_axis = closest_on_segment(a, b, center);
    let c = sphere_sphere(on_axis, r_cap, center, r_sphere)?;
    Some(c)
}

// normal points from the cuboid toward the capsule
fn capsule_cuboid(
    cap_pose: &Isometry3<f64>,
    radius: f64,
    half_length: f64,
    box_pose: &Isometry3<f64>,
    he: [f64; 3],
) -> Option<Contact> {
    let (a, b) = capsule_segment(cap_pose, half_length);
    // distance from a point on the segment to the box is convex in the
    // segment parameter, so ternary search pins the minimizer
    let dist_at = |t: f64| {
        let p = a + (b - a) * t;
        point_vs_cuboid(p, box_pose, he).2
    };
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..60 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if dist_at(m1) <= dist_at(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let t = 0.5 * (lo + hi);
    let p = a + (b - a) * t;
    let (surface, dir, center_dist) = point_vs_cuboid(p, box_pose, he);
    Some(Contact {
        point: surface,
        normal: dir,
        dist: center_dist - radius,
    })
}

fn static_height_at(geom: &StaticGeom, p: Vector3<f64>) -> (Unit<Vector3<f64>>, f64) {
    match *geom {
        StaticGeom::HalfPlane { normal, offset } => {
            let n = Unit::new_normalize(Vector3::new(normal[0], normal[1], normal[2]));
            (n, p.dot(&n) - offset)
        }
        StaticGeom::HeightStep {
            x_edge,
            z_low,
            z_high,
        } => {
            let floor = if p.x < x_edge { z_low } else { z_high };
            (Unit::new_unchecked(Vector3::z()), p.z - floor)
        }
    }
}

/// Contacts between a dynamic shape and a static support. Cuboids report
/// one contact per penetrating corner so resting torque balance works;
/// capsules report both end caps.
pub fn static_contacts(
    shape: &Shape,
    pose: &Isometry3<f64>,
    geom: &StaticGeom,
    activation: f64,
    out: &mut Vec<Contact>,
) {
    match *shape {
        Shape::Sphere { radius } => {
            let c = pose.translation.vector;
            let (n, d) = static_height_at(geom, c);
            let dist = d - radius;
            if dist < activation {
                out.push(Contact {
                    point: c - n.into_inner() * radius,
                    normal: n,
                    dist,
                });
            }
        }
        Shape::Cuboid { half_extents } => {
            for corner in Shape::corners(half_extents) {
                let w = pose.transform_point(&corner.into()).coords;
                let (n, dist) = static_height_at(geom, w);
                if dist < activation {
                    out.push(Contact {
                        point: w,
                        normal: n,
                        dist,
                    });
                }
            }
        }
        Shape::Capsule {
            radius,
            half_length,
        } => {
            let (a, b) = capsule_segment(pose, half_length);
            for end in [a, b] {
                let (n, d) = static_height_at(geom, end);
                let dist = d - radius;
                if dist < activation {
                    out.push(Contact {
                        point: end - n.into_inner() * radius,
                        normal: n,
                        dist,
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Translation3, UnitQuaternion};

    fn iso(x: f64, y: f64, z: f64) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::new(x, y, z), UnitQuaternion::identity())
    }

    #[test]
    fn sphere_sphere_separation_and_penetration() {
        let s = Shape::Sphere { radius: 0.5 };
        let c = shape_contact(&s, &iso(0.0, 0.0, 0.0), &s, &iso(2.0, 0.0, 0.0), 10.0).unwrap();
        assert_relative_eq!(c.dist, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.normal.x, 1.0, epsilon = 1e-12);

        let c = shape_contact(&s, &iso(0.0, 0.0, 0.0), &s, &iso(0.9, 0.0, 0.0), 10.0).unwrap();
        assert_relative_eq!(c.dist, -0.1, epsilon = 1e-12);
    }

    #[test]
    fn sphere_cuboid_face_contact() {
        let sph = Shape::Sphere { radius: 0.1 };
        let cub = Shape::Cuboid {
            half_extents: [0.5, 0.5, 0.5],
        };
        // sphere approaching the +x face of the box
        let c = shape_contact(&sph, &iso(0.7, 0.0, 0.0), &cub, &iso(0.0, 0.0, 0.0), 10.0).unwrap();
        assert_relative_eq!(c.dist, 0.1, epsilon = 1e-12);
        // normal points from the sphere toward the box
        assert_relative_eq!(c.normal.x, -1.0, epsilon = 1e-12);
        assert_relative_eq!(c.point.x, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sphere_cuboid_respects_box_rotation() {
        let sph = Shape::Sphere { radius: 0.1 };
        let cub = Shape::Cuboid {
            half_extents: [0.5, 0.2, 0.2],
        };
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let pose = Isometry3::from_parts(Translation3::new(0.0, 0.0, 0.0), rot);
        // after 90 deg yaw the long axis lies along y; +x face is now 0.2 away
        let c = shape_contact(&sph, &iso(0.35, 0.0, 0.0), &cub, &pose, 10.0).unwrap();
        assert_relative_eq!(c.dist, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn capsule_cuboid_matches_point_distance_on_axis() {
        let cap = Shape::Capsule {
            radius: 0.05,
            half_length: 0.2,
        };
        let cub = Shape::Cuboid {
            half_extents: [0.1, 0.1, 0.1],
        };
        // vertical capsule beside the box: nearest feature is the side face
        let c = shape_contact(&cap, &iso(0.3, 0.0, 0.0), &cub, &iso(0.0, 0.0, 0.0), 10.0).unwrap();
        assert_relative_eq!(c.dist, 0.3 - 0.1 - 0.05, epsilon = 1e-9);
    }

    #[test]
    fn cuboid_rests_on_plane_with_four_corners() {
        let cub = Shape::Cuboid {
            half_extents: [0.1, 0.1, 0.1],
        };
        let plane = StaticGeom::HalfPlane {
            normal: [0.0, 0.0, 1.0],
            offset: 0.0,
        };
        let mut out = Vec::new();
        static_contacts(&cub, &iso(0.0, 0.0, 0.095), &plane, 0.0, &mut out);
        assert_eq!(out.len(), 4);
        for c in &out {
            assert_relative_eq!(c.dist, -0.005, epsilon = 1e-12);
        }
    }

    #[test]
    fn height_step_switches_floor_level() {
        let sph = Shape::Sphere { radius: 0.1 };
        let step = StaticGeom::HeightStep {
            x_edge: 0.0,
            z_low: 0.0,
            z_high: 0.05,
        };
        let mut out = Vec::new();
        static_contacts(&sph, &iso(-1.0, 0.0, 0.1), &step, 1e-6, &mut out);
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out[0].dist, 0.0, epsilon = 1e-12);
        out.clear();
        static_contacts(&sph, &iso(1.0, 0.0, 0.1), &step, 1e-6, &mut out);
        assert_relative_eq!(out[0].dist, -0.05, epsilon = 1e-12);
    }

    #[test]
    fn capsule_inertia_reduces_to_sphere_as_length_vanishes() {
        let cap = Shape::Capsule {
            radius: 0.3,
            half_length: 1e-12,
        };
        let sph = Shape::Sphere { radius: 0.3 };
        let i_cap = cap.inertia_diag(2.0);
        let i_sph = sph.inertia_diag(2.0);
        assert_relative_eq!(i_cap.x, i_sph.x, max_relative = 1e-6);
        assert_relative_eq!(i_cap.z, i_sph.z, max_relative = 1e-6);
    }
}
