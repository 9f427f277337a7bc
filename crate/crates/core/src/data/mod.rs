//! Procedural scenes, camera sampling, ground-truth rendering and the
//! on-disk dataset format.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraPose, Intrinsics, Vec3, VolumeFrame};
use crate::render::{render_maps, RadianceField, RenderConfig};
use crate::tensor::{Graph, Tensor};

pub use io::{read_dataset, read_scene, write_dataset, write_scene, DataError, Manifest};

/// Half-width of the box every object must fit in.
pub const OBJECT_BOUND: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Box,
    Sphere,
    Cylinder,
    /// Two overlapping primitives sharing one albedo.
    Union,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePreset {
    Objects,
    /// One small bright dot on a black background.
    Dot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub preset: ScenePreset,
    pub primitives: [usize; 2],
    pub kinds: Vec<PrimitiveKind>,
    pub palette: Vec<[f64; 3]>,
    pub radius_range: [f64; 2],
    pub res: usize,
    pub focal_scale: f64,
    /// Views per scene; the first `inputs` are model inputs, the rest held out.
    pub k: usize,
    pub inputs: usize,
    pub grid_res: usize,
    /// Density of occupied voxels in the ground-truth field.
    pub sigma_max: f64,
    pub oracle_samples: usize,
    pub dot_radius: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            preset: ScenePreset::Objects,
            primitives: [1, 3],
            kinds: vec![
                PrimitiveKind::Box,
                PrimitiveKind::Sphere,
                PrimitiveKind::Cylinder,
                PrimitiveKind::Union,
            ],
            palette: vec![
                [0.90, 0.20, 0.15],
                [0.20, 0.70, 0.25],
                [0.15, 0.35, 0.90],
                [0.95, 0.80, 0.20],
                [0.80, 0.30, 0.80],
                [0.20, 0.80, 0.85],
                [0.85, 0.85, 0.85],
                [0.95, 0.55, 0.15],
            ],
            radius_range: [3.2, 3.6],
            res: 32,
            focal_scale: 1.1,
            k: 5,
            inputs: 3,
            grid_res: 64,
            sigma_max: 100.0,
            oracle_samples: 64,
            dot_radius: 0.12,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid scene spec: {0}")]
pub struct SpecError(pub String);

impl SceneSpec {
    pub fn dot() -> Self {
        SceneSpec {
            preset: ScenePreset::Dot,
            k: 2,
            inputs: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let err = |m: &str| Err(SpecError(m.into()));
        if self.k == 0 || self.inputs == 0 || self.inputs > self.k {
            return err("need 1 <= inputs <= k");
        }
        if self.primitives[0] == 0 || self.primitives[0] > self.primitives[1] {
            return err("primitives must be a range [lo, hi] with 1 <= lo <= hi");
        }
        if self.kinds.is_empty() || self.palette.is_empty() {
            return err("kinds and palette must be non-empty");
        }
        let [r0, r1] = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return err("radius_range must be positive and ordered");
        }
        if self.res == 0 || self.grid_res < 2 || self.oracle_samples == 0 {
            return err("res, grid_res and oracle_samples must be positive");
        }
        if !(self.focal_scale > 0.0 && self.sigma_max > 0.0) {
            return err("focal_scale and sigma_max must be positive");
        }
        if !(self.dot_radius > 0.0 && self.dot_radius < OBJECT_BOUND) {
            return err("dot_radius out of range");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.res, self.focal_scale)
    }
}

/// Ground-truth grids on `[-1, 1]^3`: occupancy `[n, n, n]` in {0, 1}
/// and albedo `[n, n, n, 3]`. Albedo is also set one node outside the
/// surface, where it only matters through interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGeometry {
    pub occupancy: Tensor<f32>,
    pub albedo: Tensor<f32>,
    pub dot: Option<[f64; 3]>,
}

/// A generated scene with its rendered views.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub seed: u64,
    pub inputs: usize,
    pub intrinsics: Intrinsics,
    pub poses: Vec<CameraPose>,
    pub images: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
    pub geometry: SceneGeometry,
}

impl SceneRecord {
    pub fn k(&self) -> usize {
        self.poses.len()
    }

    pub fn held_out(&self) -> std::ops::Range<usize> {
        self.inputs..self.k()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box {
        c: Vec3,
        h: Vec3,
    },
    Sphere {
        c: Vec3,
        r: f64,
    },
    /// Axis along z.
    Cylinder {
        c: Vec3,
        r: f64,
        h: f64,
    },
}

impl Shape {
    fn contains(&self, p: &Vec3) -> bool {
        match *self {
            Shape::Box { c, h } => {
                let d = p - c;
                d.x.abs() <= h.x && d.y.abs() <= h.y && d.z.abs() <= h.z
            }
            Shape::Sphere { c, r } => (p - c).norm_squared() <= r * r,
            Shape::Cylinder { c, r, h } => {
                let d = p - c;
                d.x * d.x + d.y * d.y <= r * r && d.z.abs() <= h
            }
        }
    }
}

fn center_for<R: Rng>(rng: &mut R, half: &Vec3) -> Vec3 {
    Vec3::from_fn(|i, _| {
        let room = (OBJECT_BOUND - half[i]).max(0.0);
        rng.random_range(-room..=room)
    })
}

fn sample_shape<R: Rng>(rng: &mut R, kind: PrimitiveKind) -> Shape {
    match kind {
        PrimitiveKind::Box | PrimitiveKind::Union => {
            let h = Vec3::from_fn(|_, _| rng.random_range(0.15..0.45));
            Shape::Box {
                c: center_for(rng, &h),
                h,
            }
        }
        PrimitiveKind::Sphere => {
            let r = rng.random_range(0.2..0.5);
            Shape::Sphere {
                c: center_for(rng, &Vec3::repeat(r)),
                r,
            }
        }
        PrimitiveKind::Cylinder => {
            let r = rng.random_range(0.15..0.4);
            let h = rng.random_range(0.2..0.6);
            Shape::Cylinder {
                c: center_for(rng, &Vec3::new(r, r, h)),
                r,
                h,
            }
        }
    }
}

/// A sphere attached to a box: centered on one of the box's faces.
fn union_partner<R: Rng>(rng: &mut R, base: &Shape) -> Shape {
    let Shape::Box { c, h } = *base else {
        unreachable!("union composites start from a box")
    };
    let axis = rng.random_range(0..3);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut at = c;
    at[axis] += sign * h[axis];
    // the face center lies inside the bound, so the sphere can shrink to fit
    let room = (0..3)
        .map(|i| OBJECT_BOUND - at[i].abs())
        .fold(f64::INFINITY, f64::min);
    let r = rng.random_range(0.1..0.3f64).min(room);
    Shape::Sphere { c: at, r }
}

fn node(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

fn rasterize(n: usize, shapes: &[(Shape, [f64; 3])]) -> (Tensor<f32>, Tensor<f32>) {
    let mut occ = Tensor::zeros(&[n, n, n]);
    let mut alb = Tensor::zeros(&[n, n, n, 3]);
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let p = Vec3::new(node(i, n), node(j, n), node(l, n));
                let inside = p.iter().all(|v| v.abs() <= OBJECT_BOUND);
                // later primitives paint over earlier ones
                if let Some((_, color)) =
                    shapes.iter().rev().find(|(s, _)| inside && s.contains(&p))
                {
                    let v = (i * n + j) * n + l;
                    occ.data_mut()[v] = 1.0;
                    for (c, &x) in color.iter().enumerate() {
                        alb.data_mut()[3 * v + c] = x as f32;
                    }
                }
            }
        }
    }
    dilate_albedo(n, &occ, &mut alb);
    (occ, alb)
}

/// Copies colors into empty nodes next to occupied ones, so interpolation
/// across a surface cell does not darken it.
fn dilate_albedo(n: usize, occ: &Tensor<f32>, alb: &mut Tensor<f32>) {
    let src = alb.clone();
    let o = occ.data();
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let v = (i * n + j) * n + l;
                if o[v] > 0.0 {
                    continue;
                }
                let mut found = None;
                'search: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for dl in -1i64..=1 {
                            let (a, b, c) = (i as i64 + di, j as i64 + dj, l as i64 + dl);
                            if [a, b, c].iter().any(|&x| x < 0 || x >= n as i64) {
                                continue;
                            }
                            let u = ((a as usize * n) + b as usize) * n + c as usize;
                            if o[u] > 0.0 {
                                found = Some(u);
                                break 'search;
                            }
                        }
                    }
                }
                if let Some(u) = found {
                    alb.data_mut()[3 * v..3 * v + 3].copy_from_slice(&src.data()[3 * u..3 * u + 3]);
                }
            }
        }
    }
}

/// A single sphere of radius `r` at `center`, clipped to the object bound.
pub fn sphere_geometry(n: usize, center: [f64; 3], r: f64, color: [f64; 3]) -> SceneGeometry {
    let c = Vec3::from(center);
    let (occupancy, albedo) = rasterize(n, &[(Shape::Sphere { c, r }, color)]);
    SceneGeometry {
        occupancy,
        albedo,
        dot: None,
    }
}

/// Samples and rasterizes the scene's primitives.
pub fn make_scene(spec: &SceneSpec, seed: u64) -> SceneGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.grid_res;
    match spec.preset {
        ScenePreset::Dot => {
            let r = spec.dot_radius;
            let c = center_for(&mut rng, &Vec3::repeat(r + 0.2));
            SceneGeometry {
                dot: Some([c.x, c.y, c.z]),
                ..sphere_geometry(n, [c.x, c.y, c.z], r, [1.0; 3])
            }
        }
        ScenePreset::Objects => {
            let count = rng.random_range(spec.primitives[0]..=spec.primitives[1]);
            let mut shapes = Vec::new();
            for _ in 0..count {
                let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
                let color = spec.palette[rng.random_range(0..spec.palette.len())];
                let s = sample_shape(&mut rng, kind);
                shapes.push((s, color));
                if kind == PrimitiveKind::Union {
                    shapes.push((union_partner(&mut rng, &s), color));
                }
            }
            let (occupancy, albedo) = rasterize(n, &shapes);
            SceneGeometry {
                occupancy,
                albedo,
                dot: None,
            }
        }
    }
}

/// `k` cameras uniformly on the shell `radius_range` looking at the origin.
pub fn sample_cameras(seed: u64, k: usize, radius_range: [f64; 2]) -> Vec<CameraPose> {
    assert!(k >= 1, "need at least one camera");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let d: [f64; 3] = UnitSphere.sample(&mut rng);
            let d = Vec3::from(d);
            let r = if radius_range[0] < radius_range[1] {
                rng.random_range(radius_range[0]..=radius_range[1])
            } else {
                radius_range[0]
            };
            let up = if d.z.abs() > 0.99 {
                Vec3::x()
            } else {
                Vec3::z()
            };
            CameraPose::look_at(d * r, Vec3::zeros(), up)
        })
        .collect()
}

/// Renders ground-truth grids with the model renderer in `f64`. Returns
/// the image `[res, res, 3]` and the binarized (`alpha > 0.5`) mask.
pub fn oracle_render(
    geometry: &SceneGeometry,
    pose: &CameraPose,
    k: &Intrinsics,
    spec: &SceneSpec,
) -> (Tensor<f32>, Tensor<f32>) {
    let g = Graph::<f64>::new();
    let field = RadianceField {
        density: g.constant(geometry.occupancy.cast()),
        features: g.constant(geometry.albedo.cast()),
    };
    let cfg = oracle_render_config(spec);
    let maps = render_maps::<_, ChaCha8Rng>(&field, pose, k, &VolumeFrame::unit(), &cfg, None);
    let image = maps.features.value().cast();
    let mask = maps
        .mask
        .value()
        .map(|a| if a > 0.5 { 1.0 } else { 0.0 })
        .cast();
    (image, mask)
}

pub fn oracle_render_config(spec: &SceneSpec) -> RenderConfig {
    RenderConfig {
        n_samples: spec.oracle_samples,
        density_scale: spec.sigma_max,
        stratified: false,
    }
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// Geometry, cameras and oracle views for one scene.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneRecord, SpecError> {
    spec.validate()?;
    let geometry = make_scene(spec, seed);
    let poses = sample_cameras(seed ^ 0x9e37_79b9_7f4a_7c15, spec.k, spec.radius_range);
    let k = spec.intrinsics();
    let (images, masks) = poses
        .iter()
        .map(|p| oracle_render(&geometry, p, &k, spec))
        .unzip();
    Ok(SceneRecord {
        seed,
        inputs: spec.inputs,
        intrinsics: k,
        poses,
        images,
        masks,
        geometry,
    })
}

/// `count` scenes from `seed`, generated on all available cores.
pub fn generate_dataset(
    spec: &SceneSpec,
    seed: u64,
    count: usize,
) -> Result<Vec<SceneRecord>, SpecError> {
    spec.validate()?;
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(count.max(1));
    let mut out: Vec<Option<SceneRecord>> = vec![None; count];
    std::thread::scope(|s| {
        for (t, chunk) in out.chunks_mut(count.div_ceil(threads).max(1)).enumerate() {
            let base = t * count.div_ceil(threads).max(1);
            s.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(
                        generate_scene(spec, scene_seed(seed, base + i)).expect("spec validated"),
                    );
                }
            });
        }
    });
    Ok(out
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect())
}

/// Fraction of occupied voxels.
pub fn occupancy_fraction(geometry: &SceneGeometry) -> f64 {
    let o = &geometry.occupancy;
    o.data().iter().map(|&v| v as f64).sum::<f64>() / o.numel() as f64
}
