//! Procedural multi-category benchmark: random deformable templates,
//! posed instances with self-occlusion, rendered images, and the on-disk
//! dataset format (`manifest.json` plus one binary PGM per image).

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix2xX, Matrix3, Matrix3xX, Unit, UnitQuaternion, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detector::ImageRaster;
use crate::geometry::{orthographic_project, Structure3D};
use crate::shape_model::{CategoryId, CategoryRegistry, CategorySchema};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const MIN_KEYPOINTS: usize = 6;
pub const MAX_KEYPOINTS: usize = 14;
const MIN_VISIBLE: usize = 3;
const OCCLUSION_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Number of deformation modes `D_c` per category.
    pub deformation_dim: usize,
    pub deformation_scale: f64,
    /// The first mode's coefficient gets `deformation_scale · context_gain · c`.
    pub context_gain: f64,
    pub occlusion: bool,
    /// Rotation angle bound in degrees; `None` samples all of SO(3).
    pub max_view_angle: Option<f64>,
    pub image_size: usize,
    pub px_per_unit: f64,
    pub blob_sigma: f64,
    pub line_intensity: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            deformation_dim: 3,
            deformation_scale: 0.2,
            context_gain: 1.0,
            occlusion: true,
            max_view_angle: None,
            image_size: 64,
            px_per_unit: 9.0,
            blob_sigma: 1.5,
            line_intensity: 0.5,
        }
    }
}

/// Mapping between shape units and image / detector coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub size: usize,
    pub px_per_unit: f64,
}

impl ImageFrame {
    /// Continuous pixel coordinates (pixel `i` spans `[i, i+1)`).
    pub fn to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.size as f64 / 2.0;
        [c + self.px_per_unit * p[0], c + self.px_per_unit * p[1]]
    }

    /// Detector coordinates in `[0,1]²`.
    pub fn to_delta(&self, p: [f64; 2]) -> [f64; 2] {
        let px = self.to_pixel(p);
        [px[0] / self.size as f64, px[1] / self.size as f64]
    }

    pub fn from_delta(&self, d: [f64; 2]) -> [f64; 2] {
        let s = self.size as f64;
        let c = s / 2.0;
        [(d[0] * s - c) / self.px_per_unit, (d[1] * s - c) / self.px_per_unit]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCategory {
    pub schema: CategorySchema,
    /// Mean shape, zero-centred, unit RMS radius.
    pub template: Structure3D,
    /// `D_c × 3k_z`, orthogonal rows of norm `√k_z`.
    pub deformation_basis: DMatrix<f64>,
    pub deformation_scale: f64,
    pub skeleton: Vec<(usize, usize)>,
}

impl SyntheticCategory {
    pub fn k(&self) -> usize {
        self.schema.keypoint_count()
    }

    /// Template plus `Σ a_i B_i`.
    pub fn shape(&self, coeffs: &[f64]) -> Structure3D {
        let mut flat = self.template.flatten();
        for (i, a) in coeffs.iter().enumerate() {
            for (f, b) in flat.iter_mut().zip(self.deformation_basis.row(i).iter()) {
                *f += a * b;
            }
        }
        Structure3D(Matrix3xX::from_column_slice(&flat))
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normalize_cloud(x: &mut Matrix3xX<f64>) {
    let mean = x.column_mean();
    for mut c in x.column_iter_mut() {
        c -= &mean;
    }
    let rms = (x.norm_squared() / x.ncols() as f64).sqrt();
    *x /= rms;
}

/// Minimum spanning tree over the template points (Prim).
fn skeleton(x: &Matrix3xX<f64>) -> Vec<(usize, usize)> {
    let k = x.ncols();
    let mut in_tree = vec![false; k];
    let mut best = vec![(f64::INFINITY, 0usize); k];
    in_tree[0] = true;
    for (j, b) in best.iter_mut().enumerate().skip(1) {
        *b = ((x.column(0) - x.column(j)).norm(), 0);
    }
    let mut edges = Vec::with_capacity(k - 1);
    for _ in 1..k {
        let j = (0..k)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].0.total_cmp(&best[b].0))
            .expect("a vertex is left");
        in_tree[j] = true;
        edges.push((best[j].1.min(j), best[j].1.max(j)));
        for i in 0..k {
            let d = (x.column(i) - x.column(j)).norm();
            if !in_tree[i] && d < best[i].0 {
                best[i] = (d, j);
            }
        }
    }
    edges
}

/// Orthonormal deformation modes. The first one moves points along the
/// template's z axis only, so for views close to the canonical one it is
/// nearly invisible in 2D.
fn deformation_basis(k: usize, dims: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dims);
    while rows.len() < dims {
        let mut v: Vec<f64> = (0..3 * k).map(|_| normal(rng)).collect();
        if rows.is_empty() {
            for j in 0..k {
                v[3 * j] = 0.0;
                v[3 * j + 1] = 0.0;
            }
        }
        // keep the centroid fixed
        for axis in 0..3 {
            let m = (0..k).map(|j| v[3 * j + axis]).sum::<f64>() / k as f64;
            for j in 0..k {
                v[3 * j + axis] -= m;
            }
        }
        for r in &rows {
            let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            for (x, a) in v.iter_mut().zip(r) {
                *x -= d * a;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        rows.push(v.into_iter().map(|x| x / n).collect());
    }
    DMatrix::from_fn(dims, 3 * k, |i, j| rows[i][j])
}

/// `n` random categories with `k_z ∈ 6..=14` keypoints each.
pub fn gen_categories(n: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Vec<SyntheticCategory>> {
    if n == 0 {
        return Err(Error::Invalid("need at least one category".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut registry = CategoryRegistry::new();
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let k = rng.random_range(MIN_KEYPOINTS..=MAX_KEYPOINTS);
        let name = format!("cat{c}");
        let kp_names = (0..k).map(|j| format!("{name}.kp{j}")).collect();
        let id = registry.register(&name, kp_names)?;
        // points uniform in the unit ball
        let mut x = Matrix3xX::zeros(k);
        for j in 0..k {
            loop {
                let p = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if p.norm_squared() <= 1.0 {
                    x.set_column(j, &p);
                    break;
                }
            }
        }
        normalize_cloud(&mut x);
        let skel = skeleton(&x);
        out.push(SyntheticCategory {
            schema: registry.get(id)?.clone(),
            template: Structure3D(x),
            deformation_basis: deformation_basis(k, cfg.deformation_dim, &mut rng),
            deformation_scale: cfg.deformation_scale,
            skeleton: skel,
        });
    }
    Ok(out)
}

pub fn registry_of(categories: &[SyntheticCategory]) -> Result<CategoryRegistry> {
    let mut reg = CategoryRegistry::new();
    for c in categories {
        reg.register(&c.schema.name, c.schema.keypoint_names.clone())?;
    }
    Ok(reg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: usize,
    pub category: CategoryId,
    pub deformation_coeffs: Vec<f64>,
    pub rotation: Matrix3<f64>,
    /// Object-frame points, `3 × k_z`.
    pub keypoints3d: Structure3D,
    /// `2 × k_z`, the orthographic projection of the rotated points.
    pub keypoints2d: Matrix2xX<f64>,
    pub visibility: Vec<bool>,
    pub context_factor: f64,
    pub image: Option<ImageRaster>,
}

impl SyntheticSample {
    /// Ground truth in the camera frame, `R·X`.
    pub fn camera_points(&self) -> Structure3D {
        self.keypoints3d.rotated(&self.rotation)
    }
}

fn random_rotation(rng: &mut impl Rng, max_angle_deg: Option<f64>) -> Matrix3<f64> {
    match max_angle_deg {
        None => {
            let q = nalgebra::Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
            UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
        }
        Some(deg) => {
            let axis = Unit::new_normalize(Vector3::new(normal(rng), normal(rng), normal(rng)));
            let angle = rng.random_range(0.0..=1.0) * deg.to_radians();
            UnitQuaternion::from_axis_angle(&axis, angle).to_rotation_matrix().into_inner()
        }
    }
}

/// Points in the rear quartile of depth (largest camera z) are hidden
/// with probability 1/2.
fn occlude(camera: &Structure3D, rng: &mut impl Rng) -> Vec<bool> {
    let k = camera.k();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| camera.0[(2, b)].total_cmp(&camera.0[(2, a)]).then(a.cmp(&b)));
    let mut vis = vec![true; k];
    for &j in &order[..k.div_ceil(4)] {
        if rng.random_bool(0.5) {
            vis[j] = false;
        }
    }
    vis
}

/// Draw one posed instance of `category`.
pub fn sample_instance(category: &SyntheticCategory, cfg: &GeneratorConfig, seed: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let context_factor: f64 = rng.random_range(0.0..1.0);
    let s = category.deformation_scale;
    let mut coeffs: Vec<f64> = (0..category.deformation_basis.nrows()).map(|_| s * normal(&mut rng)).collect();
    if let Some(c0) = coeffs.first_mut() {
        *c0 += s * cfg.context_gain * context_factor;
    }
    let x = category.shape(&coeffs);
    loop {
        let rotation = random_rotation(&mut rng, cfg.max_view_angle);
        let camera = x.rotated(&rotation);
        let mut visibility = vec![true; x.k()];
        let mut ok = !cfg.occlusion;
        if cfg.occlusion {
            for _ in 0..OCCLUSION_RETRIES {
                visibility = occlude(&camera, &mut rng);
                if visibility.iter().filter(|&&v| v).count() >= MIN_VISIBLE {
                    ok = true;
                    break;
                }
            }
        }
        if ok {
            return SyntheticSample {
                id: 0,
                category: category.schema.id,
                deformation_coeffs: coeffs,
                keypoints2d: orthographic_project(&rotation, &x),
                rotation,
                keypoints3d: x,
                visibility,
                context_factor,
                image: None,
            };
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
    (ex * ex + ey * ey).sqrt()
}

/// Skeleton lines for all keypoints, a Gaussian blob per visible keypoint,
/// everything scaled by `0.5 + 0.5·context_factor`.
pub fn render_image(sample: &SyntheticSample, category: &SyntheticCategory, cfg: &GeneratorConfig) -> ImageRaster {
    let frame = ImageFrame {
        size: cfg.image_size,
        px_per_unit: cfg.px_per_unit,
    };
    let pts: Vec<[f64; 2]> = (0..sample.keypoints2d.ncols())
        .map(|j| frame.to_pixel([sample.keypoints2d[(0, j)], sample.keypoints2d[(1, j)]]))
        .collect();
    let gain = 0.5 + 0.5 * sample.context_factor;
    let two_s2 = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
    let n = cfg.image_size;
    let mut values = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let mut v: f64 = 0.0;
            for &(a, b) in &category.skeleton {
                let d = segment_distance(p, pts[a], pts[b]);
                v = v.max(cfg.line_intensity * (1.0 - d).max(0.0));
            }
            for (j, q) in pts.iter().enumerate() {
                if sample.visibility[j] {
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                    v = v.max((-d2 / two_s2).exp());
                }
            }
            values[y * n + x] = v * gain;
        }
    }
    ImageRaster::from_values(n, n, &values).expect("sizes agree")
}

/// Seed of sample `index` under `master`: the first word of the ChaCha
/// stream numbered `index`.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub categories: usize,
    /// Total number of samples; sample `i` belongs to category `i mod N`.
    pub samples: usize,
    /// Index of the first sample. Disjoint index ranges under one seed give
    /// disjoint splits over the same categories.
    pub first_index: usize,
    pub seed: u64,
    pub render: bool,
    pub generator: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            categories: 3,
            samples: 300,
            first_index: 0,
            seed: 0,
            render: true,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frame: ImageFrame,
    pub categories: Vec<SyntheticCategory>,
    pub samples: Vec<SyntheticSample>,
}

fn make_sample(cats: &[SyntheticCategory], cfg: &DatasetConfig, index: usize) -> SyntheticSample {
    let cat = &cats[index % cats.len()];
    let mut s = sample_instance(cat, &cfg.generator, sample_seed(cfg.seed, index));
    s.id = index;
    if cfg.render {
        s.image = Some(render_image(&s, cat, &cfg.generator));
    }
    s
}

/// Generate a dataset on `threads` worker threads. The result does not
/// depend on the thread count.
pub fn generate_dataset(cfg: &DatasetConfig, threads: usize) -> Result<Dataset> {
    let cats = gen_categories(cfg.categories, cfg.seed, &cfg.generator)?;
    let indices: Vec<usize> = (cfg.first_index..cfg.first_index + cfg.samples).collect();
    let threads = threads.max(1);
    let samples = if threads == 1 || indices.len() < 2 {
        indices.iter().map(|&i| make_sample(&cats, cfg, i)).collect()
    } else {
        let chunk = indices.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|part| {
                    let cats = &cats;
                    s.spawn(move || part.iter().map(|&i| make_sample(cats, cfg, i)).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("generator thread panicked"))
                .collect()
        })
    };
    Ok(Dataset {
        frame: ImageFrame {
            size: cfg.generator.image_size,
            px_per_unit: cfg.generator.px_per_unit,
        },
        categories: cats,
        samples,
    })
}

/// What training may see of a sample: stacked 2D keypoints, visibility,
/// category and image. No 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub category: CategoryId,
    /// `2 × k` stacked, zero outside the category block.
    pub keypoints2d: Matrix2xX<f64>,
    /// Stacked, false outside the category block.
    pub visibility: Vec<bool>,
    pub image: Option<ImageRaster>,
    pub image_frame: ImageFrame,
}

impl Dataset {
    pub fn registry(&self) -> Result<CategoryRegistry> {
        registry_of(&self.categories)
    }

    pub fn category(&self, id: CategoryId) -> Result<&SyntheticCategory> {
        self.categories.get(id.0).ok_or_else(|| Error::UnknownCategory(id.to_string()))
    }

    pub fn train_view(&self) -> Result<Vec<TrainSample>> {
        let reg = self.registry()?;
        let k = reg.total_keypoints();
        self.samples
            .iter()
            .map(|s| {
                let block = reg.get(s.category)?.block();
                let mut kp = Matrix2xX::zeros(k);
                let mut vis = vec![false; k];
                for (t, j) in block.enumerate() {
                    kp.set_column(j, &s.keypoints2d.column(t));
                    vis[j] = s.visibility[t];
                }
                Ok(TrainSample {
                    category: s.category,
                    keypoints2d: kp,
                    visibility: vis,
                    image: s.image.clone(),
                    image_frame: self.frame,
                })
            })
            .collect()
    }

    pub fn without_images(mut self) -> Dataset {
        for s in &mut self.samples {
            s.image = None;
        }
        self
    }
}

/// Closest same-category pair in centred 2D keypoint space whose context
/// factors differ by at least `min_context_gap`, scored by the ratio of
/// 2D to 3D (camera frame, centred) RMS distance. Returns `(a, b, d2, d3)`.
pub fn find_context_collision(samples: &[SyntheticSample], min_context_gap: f64) -> Option<(usize, usize, f64, f64)> {
    fn centred(m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = m.clone();
        for mut row in c.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        c
    }
    let prepared: Vec<(DMatrix<f64>, DMatrix<f64>)> = samples
        .iter()
        .map(|s| {
            let p2 = DMatrix::from_column_slice(2, s.keypoints2d.ncols(), s.keypoints2d.as_slice());
            let cam = s.camera_points();
            let p3 = DMatrix::from_column_slice(3, cam.k(), cam.0.as_slice());
            (centred(&p2), centred(&p3))
        })
        .collect();
    let mut best: Option<(usize, usize, f64, f64)> = None;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (a, b) = (&samples[i], &samples[j]);
            if a.category != b.category || (a.context_factor - b.context_factor).abs() < min_context_gap {
                continue;
            }
            let k = a.keypoints2d.ncols() as f64;
            let d2 = ((&prepared[i].0 - &prepared[j].0).norm_squared() / k).sqrt();
            let d3 = ((&prepared[i].1 - &prepared[j].1).norm_squared() / k).sqrt();
            if best.is_none_or(|(_, _, b2, b3)| d2 * b3 < b2 * d3) {
                best = Some((i, j, d2, d3));
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// on-disk format

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoryRecord {
    name: String,
    keypoint_names: Vec<String>,
    skeleton: Vec<[usize; 2]>,
    template: Vec<[f64; 3]>,
    deformation_basis: Vec<Vec<f64>>,
    deformation_scale: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    id: usize,
    category: String,
    keypoints2d: Vec<[f64; 2]>,
    visibility: Vec<bool>,
    deformation_coeffs: Vec<f64>,
    rotation: [[f64; 3]; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints3d: Option<Vec<[f32; 3]>>,
    context_factor: f64,
    #[serde(default)]
    image: Option<String>,
}

thread_local! {
    // categories of the manifest being read: name → (index, k_z, D_c)
    static KNOWN: RefCell<HashMap<String, (usize, usize, usize)>> = RefCell::new(HashMap::new());
}

/// A sample record already checked against the manifest's categories.
#[derive(Debug, Deserialize)]
#[serde(try_from = "RawSample")]
struct SampleRecord(RawSample, usize);

impl Serialize for SampleRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl TryFrom<RawSample> for SampleRecord {
    type Error = String;

    fn try_from(r: RawSample) -> std::result::Result<Self, String> {
        let (idx, k, dc) = KNOWN
            .with(|m| m.borrow().get(&r.category).copied())
            .ok_or_else(|| format!("category: unknown category {:?}", r.category))?;
        if r.keypoints2d.len() != k {
            return Err(format!("keypoints2d: {} points, category has {k}", r.keypoints2d.len()));
        }
        if r.visibility.len() != k {
            return Err(format!("visibility: {} flags, category has {k}", r.visibility.len()));
        }
        if r.keypoints3d.as_ref().is_some_and(|p| p.len() != k) {
            return Err(format!("keypoints3d: expected {k} points"));
        }
        if r.deformation_coeffs.len() != dc {
            return Err(format!(
                "deformation_coeffs: {} values, category has {dc} modes",
                r.deformation_coeffs.len()
            ));
        }
        Ok(SampleRecord(r, idx))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    image_size: usize,
    px_per_unit: f64,
    #[serde(deserialize_with = "categories_in_scope")]
    categories: Vec<CategoryRecord>,
    samples: Vec<SampleRecord>,
}

fn categories_in_scope<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<CategoryRecord>, D::Error> {
    use serde::de::Error as _;
    let cats = Vec::<CategoryRecord>::deserialize(d)?;
    let mut known = HashMap::new();
    for (i, c) in cats.iter().enumerate() {
        let k = c.keypoint_names.len();
        if c.template.len() != k {
            return Err(D::Error::custom(format!(
                "template of {:?} has {} points, expected {k}",
                c.name,
                c.template.len()
            )));
        }
        if c.deformation_basis.iter().any(|r| r.len() != 3 * k) {
            return Err(D::Error::custom(format!(
                "deformation_basis rows of {:?} must have {} values",
                c.name,
                3 * k
            )));
        }
        if c.skeleton.iter().any(|e| e[0] >= k || e[1] >= k) {
            return Err(D::Error::custom(format!("skeleton of {:?} references a missing keypoint", c.name)));
        }
        if known.insert(c.name.clone(), (i, k, c.deformation_basis.len())).is_some() {
            return Err(D::Error::custom(format!("duplicate category {:?}", c.name)));
        }
    }
    KNOWN.with(|m| *m.borrow_mut() = known);
    Ok(cats)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    start + column.saturating_sub(1)
}

fn image_name(id: usize) -> String {
    format!("img_{id:06}.pgm")
}

pub fn write_pgm(path: &Path, img: &ImageRaster) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<ImageRaster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |offset: usize, field: &str, msg: String| Error::Malformed {
        path: path.to_path_buf(),
        offset,
        field: field.to_string(),
        msg,
    };
    let mut pos = 0;
    let mut token = |field: &str| -> Result<(usize, String)> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(start, field, "unexpected end of header".into()));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()))
    };
    let (at, magic) = token("magic")?;
    if magic != "P5" {
        return Err(malformed(at, "magic", format!("expected P5, found {magic:?}")));
    }
    let mut number = |field: &str| -> Result<usize> {
        let (at, t) = token(field)?;
        t.parse().map_err(|_| malformed(at, field, format!("not a number: {t:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(malformed(pos, "maxval", format!("expected 255, found {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height;
    if bytes.len() < start + need {
        return Err(malformed(
            bytes.len(),
            "pixels",
            format!("{} raster bytes, expected {need}", bytes.len().saturating_sub(start)),
        ));
    }
    Ok(ImageRaster {
        width,
        height,
        pixels: bytes[start..start + need].to_vec(),
    })
}

/// Write `manifest.json` and one PGM per rendered image into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let categories = dataset
        .categories
        .iter()
        .map(|c| CategoryRecord {
            name: c.schema.name.clone(),
            keypoint_names: c.schema.keypoint_names.clone(),
            skeleton: c.skeleton.iter().map(|&(a, b)| [a, b]).collect(),
            template: (0..c.k()).map(|j| c.template.point(j)).collect(),
            deformation_basis: c.deformation_basis.row_iter().map(|r| r.iter().copied().collect()).collect(),
            deformation_scale: c.deformation_scale,
        })
        .collect();
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let cat = dataset.category(s.category)?;
        let image = match &s.image {
            Some(img) => {
                let name = image_name(s.id);
                write_pgm(&dir.join(&name), img)?;
                Some(name)
            }
            None => None,
        };
        let r = s.rotation;
        let raw = RawSample {
            id: s.id,
            category: cat.schema.name.clone(),
            keypoints2d: (0..s.keypoints2d.ncols())
                .map(|j| [s.keypoints2d[(0, j)], s.keypoints2d[(1, j)]])
                .collect(),
            visibility: s.visibility.clone(),
            deformation_coeffs: s.deformation_coeffs.clone(),
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            keypoints3d: Some((0..s.keypoints3d.k()).map(|j| s.keypoints3d.point(j).map(|v| v as f32)).collect()),
            context_factor: s.context_factor,
            image,
        };
        samples.push(SampleRecord(raw, s.category.0));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        image_size: dataset.frame.size,
        px_per_unit: dataset.frame.px_per_unit,
        categories,
        samples,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let parsed: std::result::Result<Manifest, _> = serde_path_to_error::deserialize(de);
    KNOWN.with(|m| m.borrow_mut().clear());
    let manifest = parsed.map_err(|e| {
        let field_path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        // sample checks prefix their message with the offending field
        let (field, msg) = match msg.split_once(": ") {
            Some((f, m)) if !f.contains(' ') => (format!("{field_path}.{f}"), m.to_string()),
            _ => (field_path, msg),
        };
        Error::Malformed {
            path: path.to_path_buf(),
            offset: byte_offset(&text, inner.line(), inner.column()),
            field,
            msg,
        }
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            offset: text.find("format_version").unwrap_or(0),
            field: "format_version".into(),
            msg: format!("unsupported version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

fn build(dir: &Path, manifest: Manifest, with_images: bool) -> Result<Dataset> {
    let mut registry = CategoryRegistry::new();
    let mut categories = Vec::with_capacity(manifest.categories.len());
    for c in manifest.categories {
        let id = registry.register(&c.name, c.keypoint_names)?;
        let k = c.template.len();
        let dc = c.deformation_basis.len();
        categories.push(SyntheticCategory {
            schema: registry.get(id)?.clone(),
            template: Structure3D::from_columns(&c.template),
            deformation_basis: DMatrix::from_fn(dc, 3 * k, |i, j| c.deformation_basis[i][j]),
            deformation_scale: c.deformation_scale,
            skeleton: c.skeleton.iter().map(|e| (e[0], e[1])).collect(),
        });
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for SampleRecord(r, cat) in manifest.samples {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        let k = r.keypoints2d.len();
        let keypoints3d = match &r.keypoints3d {
            Some(p) => Structure3D::from_columns(&p.iter().map(|q| q.map(f64::from)).collect::<Vec<_>>()),
            None => Structure3D(Matrix3xX::from_element(k, f64::NAN)),
        };
        let image = match (&r.image, with_images) {
            (Some(name), true) => {
                let img = read_pgm(&dir.join(name))?;
                if img.width != manifest.image_size || img.height != manifest.image_size {
                    return Err(Error::Malformed {
                        path: dir.join(name),
                        offset: 0,
                        field: "size".into(),
                        msg: format!("{}x{} image, manifest says {}", img.width, img.height, manifest.image_size),
                    });
                }
                Some(img)
            }
            _ => None,
        };
        samples.push(SyntheticSample {
            id: r.id,
            category: CategoryId(cat),
            deformation_coeffs: r.deformation_coeffs,
            rotation: rot,
            keypoints3d,
            keypoints2d: Matrix2xX::from_fn(k, |i, j| r.keypoints2d[j][i]),
            visibility: r.visibility,
            context_factor: r.context_factor,
            image,
        });
    }
    Ok(Dataset {
        frame: ImageFrame {
            size: manifest.image_size,
            px_per_unit: manifest.px_per_unit,
        },
        categories,
        samples,
    })
}

/// Read a dataset directory including its images.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = parse_manifest(&dir.join(MANIFEST))?;
    build(dir, m, true)
}

/// Read only the manifest; image files are not opened.
pub fn read_manifest(dir: &Path) -> Result<Dataset> {
    let m = parse_manifest(&dir.join(MANIFEST))?;
    build(dir, m, false)
}

/// Whether every sample carries 3D ground truth.
pub fn has_ground_truth(dataset: &Dataset) -> bool {
    dataset.samples.iter().all(|s| s.keypoints3d.0.iter().all(|v| v.is_finite()))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_are_deterministic_and_normalized() {
        let cfg = GeneratorConfig::default();
        let a = gen_categories(3, 11, &cfg).unwrap();
        assert_eq!(a, gen_categories(3, 11, &cfg).unwrap());
        let mut offset = 0;
        for c in &a {
            assert!((MIN_KEYPOINTS..=MAX_KEYPOINTS).contains(&c.k()));
            assert_eq!(c.schema.block_offset, offset);
            offset += c.k();
            let rms = (c.template.0.norm_squared() / c.k() as f64).sqrt();
            assert!((rms - 1.0).abs() < 1e-9);
            assert!(c.template.0.column_mean().norm() < 1e-12);
            let g = &c.deformation_basis * c.deformation_basis.transpose();
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g[(i, j)] - want).abs() < 1e-9);
                }
            }
            assert_eq!(c.skeleton.len(), c.k() - 1);
        }
        assert_eq!(registry_of(&a).unwrap().total_keypoints(), offset);
        assert!(gen_categories(0, 1, &cfg).is_err());
    }

    #[test]
    fn zero_deformation_gives_rotated_template() {
        let cfg = GeneratorConfig {
            deformation_scale: 0.0,
            ..GeneratorConfig::default()
        };
        let c = &gen_categories(1, 2, &cfg).unwrap()[0];
        let s = sample_instance(c, &cfg, 5);
        assert_eq!(s.keypoints3d, c.template);
        assert_eq!(s, sample_instance(c, &cfg, 5));
        assert!((orthographic_project(&s.rotation, &s.keypoints3d) - &s.keypoints2d).amax() < 1e-9);
    }

    #[test]
    fn render_rules() {
        let cfg = GeneratorConfig::default();
        let c = &gen_categories(1, 3, &cfg).unwrap()[0];
        let mut s = sample_instance(c, &cfg, 9);
        s.visibility.fill(false);
        let skel = render_image(&s, c, &cfg);
        assert!(skel.pixels.iter().all(|&p| p as f64 <= 0.5 * 255.0 + 0.5));
        assert!(skel.pixels.iter().any(|&p| p > 0));

        s.visibility.fill(true);
        s.context_factor = 1.0;
        let bright = render_image(&s, c, &cfg);
        s.context_factor = 0.0;
        let dim = render_image(&s, c, &cfg);
        for (b, d) in bright.pixels.iter().zip(&dim.pixels) {
            assert!((*b as f64 * 0.5 - *d as f64).abs() <= 1.0);
        }
        assert!(*bright.pixels.iter().max().unwrap() > 200);
    }

    #[test]
    fn frame_round_trip() {
        let f = ImageFrame {
            size: 64,
            px_per_unit: 9.0,
        };
        let p = [0.3, -1.2];
        let q = f.from_delta(f.to_delta(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        assert_eq!(f.to_delta([0.0, 0.0]), [0.5, 0.5]);
    }

    #[test]
    fn pgm_errors_name_offset_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, b"P5\n4 4\n255\n\x01\x02").unwrap();
        match read_pgm(&p) {
            Err(Error::Malformed { field, offset, .. }) => {
                assert_eq!(field, "pixels");
                assert_eq!(offset, 13);
            }
            other => panic!("{other:?}"),
        }
        fs::write(&p, b"P2\n4 4\n255\n").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Malformed { offset: 0, .. })));
        fs::write(&p, b"P5\n# comment\n2 1\n255\n\x07\x08").unwrap();
        assert_eq!(read_pgm(&p).unwrap().pixels, vec![7, 8]);
    }
}
