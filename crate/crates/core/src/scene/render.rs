//! Analytic ray caster producing RGB-D frames.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, Pose6, Vec3};
use crate::raster::Mask;
use crate::rng::{self, Substream};

use super::{Primitive, Shape, WorldState};

const NO_HIT: u16 = 0;
const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbdFrame {
    pub color: Vec<[u8; 3]>,
    /// Camera-frame z in meters, `0.0` where invalid.
    pub depth: Vec<f64>,
    pub validity: Mask,
    pub intrinsics: CameraIntrinsics,
    pub frame_id: u64,
}

impl RgbdFrame {
    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width() as usize + u as usize
    }

    pub fn depth_at(&self, u: u32, v: u32) -> f64 {
        self.depth[self.index(u, v)]
    }

    pub fn is_valid(&self, u: u32, v: u32) -> bool {
        self.validity.get(u, v)
    }

    /// Stable fingerprint of the depth image (FNV-1a over the raw f64 bits).
    pub fn depth_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for d in &self.depth {
            for b in d.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Noise-free ray cast: nearest hit per pixel and which entity owns it.
#[derive(Debug, Clone, PartialEq)]
pub struct RayCast {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    /// Index into `owners`; 0 means the ray hit nothing.
    pub owner: Vec<u16>,
    /// Owner names: `""`, `"table"`, `"board"` when present, then scene entities.
    pub owners: Vec<String>,
    pub albedo: Vec<[f64; 3]>,
    pub absorbing: Vec<bool>,
}

impl RayCast {
    pub fn mask_of(&self, name: &str) -> Mask {
        let Some(id) = self.owners.iter().position(|n| n == name).filter(|&i| i != 0) else {
            return Mask::new(self.width, self.height);
        };
        let data = self.owner.iter().map(|&o| o as usize == id).collect();
        Mask::from_vec(self.width, self.height, data)
    }
}

struct Target {
    owner: u16,
    shape: Shape,
    world_to_local: Pose6,
    /// Conservative pixel bounding box (u0, v0, u1, v1) inclusive, or None for "test every pixel".
    bbox: Option<(i64, i64, i64, i64)>,
}

fn pixel_bbox(prim: &Primitive, world_to_cam: &Pose6, k: &CameraIntrinsics) -> Option<(i64, i64, i64, i64)> {
    let h = prim.shape.half_extents();
    let mut u0 = f64::INFINITY;
    let mut v0 = f64::INFINITY;
    let mut u1 = f64::NEG_INFINITY;
    let mut v1 = f64::NEG_INFINITY;
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let corner = prim.pose.transform_point(&Vec3::new(sx * h.x, sy * h.y, sz * h.z));
                let c = world_to_cam.transform_point(&corner);
                if c.z <= 1e-6 {
                    return None;
                }
                let u = k.fx * c.x / c.z + k.cx;
                let v = k.fy * c.y / c.z + k.cy;
                u0 = u0.min(u);
                v0 = v0.min(v);
                u1 = u1.max(u);
                v1 = v1.max(v);
            }
        }
    }
    Some((u0.floor() as i64 - 1, v0.floor() as i64 - 1, u1.ceil() as i64 + 1, v1.ceil() as i64 + 1))
}

/// Smallest positive ray parameter at which the ray meets the shape (local frame).
pub fn intersect_local(shape: &Shape, o: &Vec3, d: &Vec3) -> Option<f64> {
    match shape {
        Shape::Box { .. } | Shape::Slab { .. } => {
            let h = shape.half_extents();
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for i in 0..3 {
                if d[i].abs() < EPS {
                    if o[i].abs() > h[i] {
                        return None;
                    }
                    continue;
                }
                let a = (-h[i] - o[i]) / d[i];
                let b = (h[i] - o[i]) / d[i];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            (t1 >= t0 && t0 > EPS).then_some(t0)
        }
        Shape::Cylinder { radius, height } => {
            let hz = height / 2.0;
            let mut best: Option<f64> = None;
            let mut consider = |t: f64| {
                if t > EPS && best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            };
            let a = d.x * d.x + d.y * d.y;
            if a > EPS {
                let b = 2.0 * (o.x * d.x + o.y * d.y);
                let c = o.x * o.x + o.y * o.y - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    if (o.z + t * d.z).abs() <= hz {
                        consider(t);
                    }
                }
            }
            if d.z.abs() > EPS {
                for z in [-hz, hz] {
                    let t = (z - o.z) / d.z;
                    let x = o.x + t * d.x;
                    let y = o.y + t * d.y;
                    if x * x + y * y <= radius * radius {
                        consider(t);
                    }
                }
            }
            best
        }
    }
}

/// Casts one ray per pixel against every primitive in the world.
pub fn raycast(world: &WorldState) -> RayCast {
    let k = world.camera;
    let w = k.width;
    let world_to_cam = world.camera_pose.inverse();

    let mut owners = vec![String::new(), "table".to_string()];
    let mut prims: Vec<Primitive> = vec![world.table];
    if let Some(board) = &world.pegboard {
        owners.push("board".to_string());
        prims.push(board.board);
    }
    for e in world.entities() {
        owners.push(e.name);
        prims.push(e.primitive);
    }
    let mut albedo = vec![[0.0; 3]];
    let mut absorbing = vec![false];
    albedo.extend(prims.iter().map(|p| p.albedo));
    absorbing.extend(prims.iter().map(|p| p.ir_absorbing));

    let targets: Vec<Target> = prims
        .iter()
        .enumerate()
        .map(|(i, p)| Target {
            owner: (i + 1) as u16,
            shape: p.shape,
            world_to_local: p.pose.inverse(),
            bbox: pixel_bbox(p, &world_to_cam, &k),
        })
        .collect();

    let origin = *world.camera_pose.translation();
    let mut depth = vec![0.0; k.pixel_count()];
    let mut owner = vec![NO_HIT; k.pixel_count()];
    depth
        .par_chunks_mut(w as usize)
        .zip(owner.par_chunks_mut(w as usize))
        .enumerate()
        .for_each(|(v, (drow, orow))| {
            let row_targets: Vec<&Target> = targets
                .iter()
                .filter(|t| t.bbox.is_none_or(|b| (v as i64) >= b.1 && (v as i64) <= b.3))
                .collect();
            for u in 0..w as usize {
                let dir_cam = k.ray(u as f64, v as f64);
                let dir = world.camera_pose.transform_vector(&dir_cam);
                let mut best = f64::INFINITY;
                let mut best_owner = NO_HIT;
                for t in &row_targets {
                    if let Some(b) = t.bbox {
                        if (u as i64) < b.0 || (u as i64) > b.2 {
                            continue;
                        }
                    }
                    let o = t.world_to_local.transform_point(&origin);
                    let d = t.world_to_local.transform_vector(&dir);
                    if let Some(hit) = intersect_local(&t.shape, &o, &d) {
                        if hit < best {
                            best = hit;
                            best_owner = t.owner;
                        }
                    }
                }
                if best_owner != NO_HIT {
                    // the camera-frame ray has unit z, so the ray parameter is the depth
                    drow[u] = best;
                    orow[u] = best_owner;
                }
            }
        });
    RayCast {
        width: w,
        height: k.height,
        depth,
        owner,
        owners,
        albedo,
        absorbing,
    }
}

/// Renders an RGB-D frame; deterministic in `(world, noise_seed)`.
pub fn render_frame(world: &WorldState, noise_seed: u64) -> RgbdFrame {
    let cast = raycast(world);
    frame_from_cast(world, &cast, noise_seed, noise_seed)
}

/// Applies sensor noise to a precomputed ray cast.
pub fn frame_from_cast(world: &WorldState, cast: &RayCast, noise_seed: u64, frame_id: u64) -> RgbdFrame {
    let k = world.camera;
    let w = k.width as usize;
    let sigma = world.config.depth_noise_sigma;
    let dropout = world.config.ir_dropout_prob;
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("sigma validated non-negative");

    let mut depth = vec![0.0; k.pixel_count()];
    let mut valid = vec![false; k.pixel_count()];
    depth
        .par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(v, (drow, vrow))| {
            let mut noise = rng::indexed_stream(noise_seed, Substream::RenderNoise, v as u64);
            let mut drop = rng::indexed_stream(noise_seed, Substream::IrDropout, v as u64);
            for u in 0..w {
                let i = v * w + u;
                let id = cast.owner[i] as usize;
                if id == 0 {
                    continue;
                }
                let mut d = cast.depth[i];
                if sigma > 0.0 {
                    d += normal.sample(&mut noise);
                }
                let dropped = cast.absorbing[id] && dropout > 0.0 && drop.random::<f64>() < dropout;
                if !dropped && d > 0.0 {
                    drow[u] = d;
                    vrow[u] = true;
                }
            }
        });

    let color = cast
        .owner
        .iter()
        .map(|&o| {
            let a = cast.albedo[o as usize];
            [
                (a[0] * 255.0).round() as u8,
                (a[1] * 255.0).round() as u8,
                (a[2] * 255.0).round() as u8,
            ]
        })
        .collect();
    RgbdFrame {
        color,
        depth,
        validity: Mask::from_vec(k.width, k.height, valid),
        intrinsics: k,
        frame_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_environment, EnvironmentConfig, EnvironmentKind};
    use std::collections::BTreeMap;

    fn slab_world(z: f64) -> WorldState {
        let mut w = build_environment(&EnvironmentConfig::new(EnvironmentKind::Gauze).noise_free(), 0).unwrap();
        w.objects.clear();
        // a huge slab whose top face sits at camera depth z
        w.table = Primitive {
            shape: Shape::Slab {
                extents: [10.0, 10.0, 0.01],
            },
            pose: Pose6::from_translation(Vec3::new(0.0, 0.0, 0.45 - z - 0.005)),
            albedo: [1.0, 1.0, 1.0],
            ir_absorbing: false,
        };
        w
    }

    #[test]
    fn empty_world_is_all_invalid() {
        let mut w = slab_world(0.5);
        w.table.pose = Pose6::from_translation(Vec3::new(0.0, 0.0, 10.0));
        let f = render_frame(&w, 1);
        assert!(f.validity.is_empty());
        assert!(f.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn flat_slab_depth_is_exact() {
        let f = render_frame(&slab_world(0.5), 3);
        assert_eq!(f.validity.count(), 640 * 480);
        assert!(f.depth.iter().all(|&d| (d - 0.5).abs() < 1e-12), "slab depths must equal 0.5");
    }

    #[test]
    fn depth_zero_exactly_where_invalid() {
        let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::BlackRedBlock), 5).unwrap();
        let f = render_frame(&w, 9);
        for (i, &d) in f.depth.iter().enumerate() {
            assert_eq!(d == 0.0, !f.validity.data()[i]);
            assert!(d >= 0.0);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::BlackRedBlock), 5).unwrap();
        let a = render_frame(&w, 77);
        let b = render_frame(&w, 77);
        assert_eq!(a, b);
        assert_ne!(a.depth_hash(), render_frame(&w, 78).depth_hash());
    }

    #[test]
    fn culled_cast_matches_brute_force() {
        let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::TiltedPegboard).noise_free(), 2).unwrap();
        let cast = raycast(&w);
        let mut prims: BTreeMap<String, Primitive> = BTreeMap::new();
        prims.insert("table".into(), w.table);
        prims.insert("board".into(), w.pegboard.as_ref().unwrap().board);
        for e in w.entities() {
            prims.insert(e.name, e.primitive);
        }
        let origin = *w.camera_pose.translation();
        for v in (0..480).step_by(7) {
            for u in (0..640).step_by(11) {
                let dir = w.camera_pose.transform_vector(&w.camera.ray(u as f64, v as f64));
                let best = prims
                    .iter()
                    .filter_map(|(n, p)| {
                        let inv = p.pose.inverse();
                        intersect_local(&p.shape, &inv.transform_point(&origin), &inv.transform_vector(&dir))
                            .map(|t| (n.clone(), t))
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                let i = v * 640 + u;
                match best {
                    Some((name, t)) => {
                        assert_eq!(cast.owners[cast.owner[i] as usize], name);
                        assert_eq!(cast.depth[i], t);
                    }
                    None => assert_eq!(cast.owner[i], 0),
                }
            }
        }
    }

    #[test]
    fn cylinder_hits() {
        let s = Shape::Cylinder {
            radius: 1.0,
            height: 2.0,
        };
        let t = intersect_local(&s, &Vec3::new(0.0, 0.0, -5.0), &Vec3::z()).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        let t = intersect_local(&s, &Vec3::new(-5.0, 0.0, 0.0), &Vec3::x()).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert!(intersect_local(&s, &Vec3::new(-5.0, 2.0, 0.0), &Vec3::x()).is_none());
    }
}
