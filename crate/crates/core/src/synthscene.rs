//! Seeded synthetic scenes: flat colored rectangles and discs on a neutral
//! ground plane, rendered through a pinhole camera.
//!
//! World frame: `z` up, ground at `z = 0`, objects inside the square
//! `[-extent/2, extent/2]²`. Camera frame: `x` right, `y` down, `z` forward.
//! A [`Pose`] stores the camera centre in world coordinates and the
//! camera-from-world rotation, so a world point `p` maps to `R (p - c)`.
//!
//! Random draws come from SplitMix64, which is fully specified and identical
//! on every platform.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::colorspace::{gamut_map_chroma, lab_pixel_to_rgb};
use crate::error::{Error, Result};
use crate::image::{read_pnm, write_ppm, RgbImage};
use crate::posemath::{Pose, Quaternion};
use crate::seed::derive_seed;

pub const DEFAULT_EXTENT: f64 = 10.0;
pub const DEFAULT_NUM_OBJECTS: usize = 24;
/// Ground and sky are gray with Lab lightness outside the object band
/// (about 27 and 78..98), so lightness alone tells background from objects.
pub const GROUND_GRAY: f64 = 0.25;
const SKY_HORIZON_GRAY: f64 = 0.76;
const SKY_ZENITH_GRAY: f64 = 0.95;
/// Lab lightness band of the object colors.
pub const OBJECT_LIGHTNESS: (f64, f64) = (40.0, 70.0);
/// Nominal Lab chroma of object colors, reduced where sRGB cannot reach it.
pub const OBJECT_CHROMA: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Axis-aligned rectangle with the given half extents along world x, y.
    Rect { half_x: f64, half_y: f64 },
    Disc { radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: [f64; 2],
    /// sRGB in `[0,1]`.
    pub color: [f64; 3],
    /// Hue in `[0,1)`.
    pub hue: f64,
}

impl SceneObject {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        match self.shape {
            Shape::Rect { half_x, half_y } => dx.abs() <= half_x && dy.abs() <= half_y,
            Shape::Disc { radius } => dx * dx + dy * dy <= radius * radius,
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Rect { half_x, half_y } => half_x.hypot(half_y),
            Shape::Disc { radius } => radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub extent: f64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// FNV-1a over the bit patterns of every object field.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for o in &self.objects {
            let dims = match o.shape {
                Shape::Rect { half_x, half_y } => [0.0, half_x, half_y],
                Shape::Disc { radius } => [1.0, radius, 0.0],
            };
            for v in dims.iter().chain(&o.center).chain(&o.color) {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        crate::seed::fnv1a64(&bytes)
    }
}

/// sRGB color of object `k` of `n`: lightness steps evenly through
/// [`OBJECT_LIGHTNESS`] while the hue turns once around the circle from
/// `hue0` (fraction of a turn), so chroma is a smooth function of lightness.
pub fn object_color(k: usize, n: usize, hue0: f64) -> ([f64; 3], f64) {
    let (lo, hi) = OBJECT_LIGHTNESS;
    let t = (k as f64 + 0.5) / n as f64;
    let hue = (hue0 + k as f64 / n as f64).rem_euclid(1.0);
    let angle = std::f64::consts::TAU * hue;
    let lab = gamut_map_chroma([lo + (hi - lo) * t, OBJECT_CHROMA * angle.cos(), OBJECT_CHROMA * angle.sin()]);
    (lab_pixel_to_rgb(lab), hue)
}

pub fn generate_scene(seed: u64, num_objects: usize) -> Result<Scene> {
    generate_scene_with_extent(seed, num_objects, DEFAULT_EXTENT)
}

/// Draws `num_objects` primitives. Colors come from [`object_color`] with a
/// random hue offset and are dealt to objects in shuffled order; positions
/// are rejection-sampled to avoid overlap, falling back to overlap
/// (resolved by list order) when the square is too crowded.
pub fn generate_scene_with_extent(seed: u64, num_objects: usize, extent: f64) -> Result<Scene> {
    if num_objects == 0 {
        return Err(Error::InvalidArgument("scene needs at least one object".into()));
    }
    if !(extent > 2.0) || !extent.is_finite() {
        return Err(Error::InvalidArgument(format!("scene extent must exceed 2, got {extent}")));
    }
    let mut rng = SplitMix64::seed_from_u64(derive_seed(seed, "scene"));
    let hue0: f64 = rng.gen();
    let mut order: Vec<usize> = (0..num_objects).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let half = extent / 2.0;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(num_objects);
    for &k in &order {
        let (color, hue) = object_color(k, num_objects, hue0);
        let shape = if rng.gen_bool(0.5) {
            Shape::Rect {
                half_x: rng.gen_range(0.25..0.7),
                half_y: rng.gen_range(0.25..0.7),
            }
        } else {
            Shape::Disc {
                radius: rng.gen_range(0.3..0.7),
            }
        };
        let mut candidate = SceneObject {
            shape,
            center: [0.0, 0.0],
            color,
            hue,
        };
        let r = candidate.bounding_radius();
        let margin = (half - r).max(0.0);
        for _ in 0..1000 {
            candidate.center = [rng.gen_range(-margin..=margin), rng.gen_range(-margin..=margin)];
            let clear = objects.iter().all(|o| {
                let d = (o.center[0] - candidate.center[0]).hypot(o.center[1] - candidate.center[1]);
                d > o.bounding_radius() + r + 0.1
            });
            if clear {
                break;
            }
        }
        objects.push(candidate);
    }
    Ok(Scene { seed, extent, objects })
}

/// Camera-from-world rotation for a camera at `eye` looking at `target`
/// with world `z` up. Fails when the view direction is vertical.
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Result<Pose<f64>> {
    let fwd = normalize3(sub3(target, eye))?;
    let right = normalize3(cross3(fwd, [0.0, 0.0, 1.0]))?;
    let down = cross3(fwd, right);
    let q = Quaternion::from_rotation_matrix([right, down, fwd]);
    Pose::new(eye, q)
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize3(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(n > 1e-12) {
        return Err(Error::InvalidArgument(format!("degenerate direction {v:?}")));
    }
    Ok(v.map(|c| c / n))
}

/// Color seen along a world-space ray from `origin`.
fn shade(scene: &Scene, origin: [f64; 3], dir: [f64; 3]) -> [f64; 3] {
    if dir[2] < 0.0 && origin[2] > 0.0 {
        let t = -origin[2] / dir[2];
        let (x, y) = (origin[0] + t * dir[0], origin[1] + t * dir[1]);
        // Painter order: later objects are drawn over earlier ones.
        for o in scene.objects.iter().rev() {
            if o.contains(x, y) {
                return o.color;
            }
        }
        [GROUND_GRAY; 3]
    } else {
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let elevation = (dir[2] / n).clamp(0.0, 1.0);
        [SKY_HORIZON_GRAY + (SKY_ZENITH_GRAY - SKY_HORIZON_GRAY) * elevation; 3]
    }
}

/// Pinhole rendering with focal length `width` pixels, principal point at
/// the image centre and 2x2 supersampling per pixel.
pub fn render(scene: &Scene, pose: &Pose<f64>, width: usize, height: usize) -> RgbImage<f64> {
    let r = pose.rotation().to_rotation_matrix();
    let origin = pose.translation();
    let f = width as f64;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let mut data = Vec::with_capacity(width * height * 3);
    for i in 0..height {
        for j in 0..width {
            let mut acc = [0.0; 3];
            for s in 0..4 {
                let u = j as f64 + 0.25 + 0.5 * (s % 2) as f64;
                let v = i as f64 + 0.25 + 0.5 * (s / 2) as f64;
                let d = [(u - cx) / f, (v - cy) / f, 1.0];
                // World direction is Rᵀ d.
                let w = [0, 1, 2].map(|k| r[0][k] * d[0] + r[1][k] * d[1] + r[2][k] * d[2]);
                let c = shade(scene, origin, w);
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
            data.extend(acc.map(|c| c / 4.0));
        }
    }
    RgbImage::new(width, height, data).expect("buffer sized from dimensions")
}

/// Closed camera loop in a horizontal plane, always looking at `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub center: [f64; 2],
    pub radius: f64,
    pub radial_amplitude: f64,
    pub radial_frequency: u32,
    pub height: f64,
    pub height_amplitude: f64,
    pub height_frequency: u32,
    /// Starting angle in radians.
    pub phase: f64,
    pub target: [f64; 3],
}

impl TrajectorySpec {
    /// Default training loop for a scene of the given extent.
    pub fn train_default(extent: f64) -> Self {
        let s = extent / DEFAULT_EXTENT;
        Self {
            center: [0.0, -0.4 * extent],
            radius: 3.0 * s,
            radial_amplitude: 0.5 * s,
            radial_frequency: 7,
            height: 2.5 * s,
            height_amplitude: 0.4 * s,
            height_frequency: 5,
            phase: 0.0,
            target: [0.0, 0.3 * extent, 0.0],
        }
    }

    /// Default test loop: a different radius, phase and wobble.
    pub fn test_default(extent: f64) -> Self {
        let s = extent / DEFAULT_EXTENT;
        Self {
            radius: 3.2 * s,
            radial_amplitude: 0.3 * s,
            radial_frequency: 4,
            height_amplitude: 0.3 * s,
            height_frequency: 3,
            phase: 0.37,
            ..Self::train_default(extent)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.radial_amplitude.abs() >= self.radius {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs radius > |radial amplitude| > 0, got {} and {}",
                self.radius, self.radial_amplitude
            )));
        }
        if !(self.height - self.height_amplitude.abs() > 0.0) {
            return Err(Error::InvalidArgument("trajectory dips below the ground".into()));
        }
        Ok(())
    }

    /// Pose `index` of `count` evenly spaced samples around the loop.
    pub fn pose(&self, index: usize, count: usize) -> Result<Pose<f64>> {
        let theta = self.phase + std::f64::consts::TAU * index as f64 / count.max(1) as f64;
        let r = self.radius + self.radial_amplitude * (self.radial_frequency as f64 * theta).sin();
        let z = self.height + self.height_amplitude * (self.height_frequency as f64 * theta + 0.7).sin();
        let eye = [self.center[0] + r * theta.cos(), self.center[1] + r * theta.sin(), z];
        look_at(eye, self.target)
    }

    pub fn poses(&self, count: usize) -> Result<Vec<Pose<f64>>> {
        (0..count).map(|i| self.pose(i, count)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub extent: f64,
    pub num_objects: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub width: usize,
    pub height: usize,
    pub train_path: TrajectorySpec,
    pub test_path: TrajectorySpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: DEFAULT_EXTENT,
            num_objects: DEFAULT_NUM_OBJECTS,
            n_train: 100,
            n_test: 40,
            width: 32,
            height: 32,
            train_path: TrajectorySpec::train_default(DEFAULT_EXTENT),
            test_path: TrajectorySpec::test_default(DEFAULT_EXTENT),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Contents of `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub extent: f64,
    pub num_objects: usize,
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "seed={}\nextent={:?}\nobjects={}\nwidth={}\nheight={}\nn_train={}\nn_test={}\n",
            self.seed, self.extent, self.num_objects, self.width, self.height, self.n_train, self.n_test
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("manifest", format!("expected key=value, got {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        fn get<V: std::str::FromStr>(f: &std::collections::HashMap<&str, &str>, k: &str) -> Result<V> {
            let raw = f
                .get(k)
                .ok_or_else(|| Error::format("manifest", format!("missing key {k}")))?;
            raw.parse()
                .map_err(|_| Error::format("manifest", format!("bad value for {k}: {raw:?}")))
        }
        Ok(Self {
            seed: get(&fields, "seed")?,
            extent: get(&fields, "extent")?,
            num_objects: get(&fields, "objects")?,
            width: get(&fields, "width")?,
            height: get(&fields, "height")?,
            n_train: get(&fields, "n_train")?,
            n_test: get(&fields, "n_test")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub image: RgbImage<f64>,
    pub pose: Pose<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub const POSE_HEADER: &str = "index,tx,ty,tz,qw,qx,qy,qz";

pub fn image_path(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join("images").join(split.name()).join(format!("{index:06}.ppm"))
}

pub fn pose_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("poses_{}.csv", split.name()))
}

/// CSV fields of one pose; `{:.16e}` keeps 17 significant digits, enough
/// to round-trip every `f64`.
pub fn pose_fields(pose: &Pose<f64>) -> [String; 7] {
    pose.to_array().map(|v| format!("{v:.16e}"))
}

pub fn write_poses(path: &Path, poses: &[Pose<f64>]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format("pose file", format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(POSE_HEADER.split(',')).map_err(csv_err)?;
    for (i, p) in poses.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(pose_fields(p));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: String| Error::format("pose file", format!("{}: {what}", path.display()));
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != POSE_HEADER {
        return Err(bad(format!("expected header {POSE_HEADER}")));
    }
    let mut poses = Vec::new();
    for (row, record) in r.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let bad = |what: String| bad(format!("row {}: {what}", row + 1));
        if record.get(0).and_then(|c| c.trim().parse::<usize>().ok()) != Some(row) {
            return Err(bad(format!("index {:?} out of sequence", record.get(0))));
        }
        let mut a = [0.0; 7];
        for (k, slot) in a.iter_mut().enumerate() {
            let c = record.get(k + 1).unwrap_or_default().trim();
            *slot = c.parse().map_err(|_| bad(format!("bad number {c:?}")))?;
        }
        poses.push(Pose::from_array(a).map_err(|e| bad(e.to_string()))?);
    }
    Ok(poses)
}

/// Renders both splits and writes the directory layout:
/// `manifest.txt`, `images/{split}/{index:06}.ppm`, `poses_{split}.csv`.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidArgument("image dimensions must be positive".into()));
    }
    spec.train_path.validate()?;
    spec.test_path.validate()?;
    let scene = generate_scene_with_extent(spec.seed, spec.num_objects, spec.extent)?;
    for (split, path, count) in [
        (Split::Train, &spec.train_path, spec.n_train),
        (Split::Test, &spec.test_path, spec.n_test),
    ] {
        let dir = root.join("images").join(split.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let poses = path.poses(count)?;
        for (i, pose) in poses.iter().enumerate() {
            let image = render(&scene, pose, spec.width, spec.height);
            write_ppm(&image_path(root, split, i), &image)?;
        }
        write_poses(&pose_path(root, split), &poses)?;
    }
    let manifest = Manifest {
        seed: spec.seed,
        extent: spec.extent,
        num_objects: spec.num_objects,
        width: spec.width,
        height: spec.height,
        n_train: spec.n_train,
        n_test: spec.n_test,
    };
    let mpath = root.join("manifest.txt");
    std::fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn load_split(root: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Sample>> {
    let poses = read_poses(&pose_path(root, split))?;
    let expected = match split {
        Split::Train => manifest.n_train,
        Split::Test => manifest.n_test,
    };
    if poses.len() != expected {
        return Err(Error::format(
            "dataset",
            format!("{} split has {} poses, manifest says {expected}", split.name(), poses.len()),
        ));
    }
    poses
        .into_iter()
        .enumerate()
        .map(|(index, pose)| {
            let image = read_pnm(&image_path(root, split, index))?;
            if image.width() != manifest.width || image.height() != manifest.height {
                return Err(Error::format(
                    "dataset",
                    format!(
                        "{}: {}x{} image, manifest says {}x{}",
                        image_path(root, split, index).display(),
                        image.width(),
                        image.height(),
                        manifest.width,
                        manifest.height
                    ),
                ));
            }
            Ok(Sample { index, image, pose })
        })
        .collect()
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = Manifest::parse(&text)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        train: load_split(root, &manifest, Split::Train)?,
        test: load_split(root, &manifest, Split::Test)?,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posemath::{quat_log, translation_error};

    fn is_background(p: [f64; 3]) -> bool {
        p[0] == p[1] && p[1] == p[2]
    }

    #[test]
    fn scenes_are_seeded() {
        let a = generate_scene(3, 24).unwrap();
        assert_eq!(a, generate_scene(3, 24).unwrap());
        assert_eq!(a.objects.len(), 24);
        assert_eq!(generate_scene(3, 1).unwrap().objects.len(), 1);
        assert!(generate_scene(3, 0).is_err());
        let mut prints: Vec<u64> = (0..100).map(|s| generate_scene(s, 24).unwrap().fingerprint()).collect();
        prints.sort_unstable();
        prints.dedup();
        assert_eq!(prints.len(), 100);
    }

    #[test]
    fn hues_are_distinct_and_objects_inside() {
        let scene = generate_scene(11, DEFAULT_NUM_OBJECTS).unwrap();
        for (i, a) in scene.objects.iter().enumerate() {
            for b in &scene.objects[i + 1..] {
                let d = (a.hue - b.hue).abs();
                assert!(d.min(1.0 - d) > 0.5 / DEFAULT_NUM_OBJECTS as f64);
            }
            assert!(a.center.iter().all(|c| c.abs() <= scene.extent / 2.0));
            assert!(a.color.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(!(a.color[0] == a.color[1] && a.color[1] == a.color[2]));
        }
    }

    #[test]
    fn chroma_follows_lightness() {
        use crate::colorspace::rgb_pixel_to_lab;
        let n = DEFAULT_NUM_OBJECTS;
        let labs: Vec<[f64; 3]> = (0..n).map(|k| rgb_pixel_to_lab(object_color(k, n, 0.3).0).unwrap()).collect();
        for w in labs.windows(2) {
            assert!(w[1][0] > w[0][0] + 0.5, "lightness must increase: {w:?}");
            let step = (w[1][1] - w[0][1]).hypot(w[1][2] - w[0][2]);
            // chord between neighbouring hues, plus slack where gamut
            // mapping lowered one of the two chromas
            let chord = 2.0 * OBJECT_CHROMA * (std::f64::consts::PI / n as f64).sin();
            assert!(step < chord + 0.1 * OBJECT_CHROMA, "{step}");
        }
        for lab in &labs {
            assert!(lab[0] > OBJECT_LIGHTNESS.0 - 1e-6 && lab[0] < OBJECT_LIGHTNESS.1 + 1e-6);
            assert!(lab[1].hypot(lab[2]) > 10.0, "{lab:?}");
        }
        let ground = rgb_pixel_to_lab([GROUND_GRAY; 3]).unwrap()[0];
        let sky = rgb_pixel_to_lab([SKY_HORIZON_GRAY; 3]).unwrap()[0];
        assert!(ground < OBJECT_LIGHTNESS.0 - 5.0 && sky > OBJECT_LIGHTNESS.1 + 5.0);
    }

    #[test]
    fn look_at_points_the_optical_axis_at_the_target() {
        let eye = [1.0, -2.0, 2.5];
        let target = [0.5, 3.0, 0.0];
        let pose = look_at(eye, target).unwrap();
        let p = pose.rotation().rotate(sub3(target, eye));
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] > 0.0);
        // World up points to negative image y.
        assert!(pose.rotation().rotate([0.0, 0.0, 1.0])[1] < 0.0);
        assert!(look_at([0.0, 0.0, 5.0], [0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn facing_away_renders_background_only() {
        let scene = generate_scene(1, 24).unwrap();
        let pose = look_at([0.0, 0.0, 2.0], [0.0, 1.0, 4.0]).unwrap();
        let img = render(&scene, &pose, 16, 16);
        assert!(img.pixels().all(is_background));
    }

    #[test]
    fn moving_right_shifts_objects_left() {
        let scene = Scene {
            seed: 0,
            extent: 10.0,
            objects: vec![SceneObject {
                shape: Shape::Disc { radius: 0.5 },
                center: [0.0, 2.0],
                color: [0.9, 0.1, 0.1],
                hue: 0.0,
            }],
        };
        let centroid = |dx: f64| {
            let pose = look_at([dx, -3.0, 2.0], [dx, 2.0, 0.0]).unwrap();
            let img = render(&scene, &pose, 32, 32);
            let (mut sx, mut n) = (0.0, 0.0);
            for y in 0..32 {
                for x in 0..32 {
                    let w = 1.0 - img.pixel(x, y)[1] / GROUND_GRAY;
                    if !is_background(img.pixel(x, y)) {
                        sx += w * x as f64;
                        n += w;
                    }
                }
            }
            assert!(n > 0.0);
            sx / n
        };
        let (c0, c1) = (centroid(0.0), centroid(0.3));
        assert!((c0 - 15.5).abs() < 0.5, "{c0}");
        assert!(c1 < c0 - 1.0, "{c0} -> {c1}");
    }

    #[test]
    fn rendering_is_pure_and_sign_invariant() {
        let scene = generate_scene(5, 24).unwrap();
        let pose = TrajectorySpec::train_default(10.0).pose(3, 100).unwrap();
        let a = render(&scene, &pose, 24, 16);
        assert_eq!(a, render(&scene, &pose, 24, 16));
        assert_eq!((a.width(), a.height()), (24, 16));
        let flipped = Pose::new(pose.translation(), -pose.rotation()).unwrap();
        let b = render(&scene, &flipped, 24, 16);
        assert_eq!(a.data(), b.data());
        // The quadratic rotation matrix is sign-blind even without
        // canonicalization.
        assert_eq!(
            pose.rotation().to_rotation_matrix(),
            (-pose.rotation()).to_rotation_matrix()
        );
    }

    #[test]
    fn image_difference_grows_with_pose_distance() {
        let scene = generate_scene(2, 24).unwrap();
        let poses = TrajectorySpec::train_default(10.0).poses(100).unwrap();
        let images: Vec<_> = poses.iter().map(|p| render(&scene, p, 32, 32)).collect();
        let mut rng = SplitMix64::seed_from_u64(9);
        let mut pairs: Vec<(f64, f64)> = (0..50)
            .map(|_| {
                let (i, j) = (rng.gen_range(0..100), rng.gen_range(0..100));
                let d = translation_error(poses[i].translation(), poses[j].translation());
                let diff: f64 = images[i]
                    .data()
                    .iter()
                    .zip(images[j].data())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                (d, diff)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mean = |s: &[(f64, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        assert!(mean(&pairs[25..]) > mean(&pairs[..25]));
    }

    #[test]
    fn default_trajectories_are_distinct_and_well_conditioned() {
        let spec = DatasetSpec::default();
        let train = spec.train_path.poses(spec.n_train).unwrap();
        let test = spec.test_path.poses(spec.n_test).unwrap();
        for t in &test {
            for r in &train {
                assert_ne!(t, r);
                assert!(translation_error(t.translation(), r.translation()) > 0.0);
            }
        }
        // Rotations stay well inside the canonical log domain, away from
        // the sign-flip discontinuity at half-angle pi/2.
        for p in train.iter().chain(&test) {
            assert!(quat_log(p.rotation()).unwrap().norm() < 0.45 * std::f64::consts::PI);
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_train: 7,
            n_test: 3,
            width: 16,
            height: 16,
            ..DatasetSpec::default()
        };
        let manifest = generate_dataset(dir.path(), &spec).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        assert_eq!(data.manifest, manifest);
        assert_eq!(data.train.len(), 7);
        assert_eq!(data.test.len(), 3);
        let expected = spec.train_path.poses(7).unwrap();
        for (s, p) in data.train.iter().zip(&expected) {
            assert_eq!(s.pose.to_array().map(f64::to_bits), p.to_array().map(f64::to_bits));
        }
        let text = std::fs::read_to_string(pose_path(dir.path(), Split::Train)).unwrap();
        assert_eq!(text.lines().next(), Some(POSE_HEADER));
        assert_eq!(text.lines().count(), 8);
        assert!(image_path(dir.path(), Split::Test, 2).ends_with("images/test/000002.ppm"));

        let scene = generate_scene(spec.seed, spec.num_objects).unwrap();
        let img = render(&scene, &expected[4], 16, 16);
        for (a, b) in img.data().iter().zip(data.train[4].image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, "x").unwrap();
        assert!(matches!(
            generate_dataset(&file, &DatasetSpec::default()),
            Err(Error::Io { .. })
        ));
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
        std::fs::write(dir.path().join("manifest.txt"), "seed=1\n").unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("missing key extent"));
    }
}
