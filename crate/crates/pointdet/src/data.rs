//! Synthetic rendered-shapes dataset: deterministic scenes of rectangles,
//! ellipses, and triangles on a uniform background, with tight ground-truth
//! boxes, anti-aliased fills, and Gaussian pixel noise. Annotations use a
//! COCO-style JSON subset so the detections export can be evaluated against
//! them directly.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assign::GtObject;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const CLASS_NAMES: [&str; 3] = ["rectangle", "ellipse", "triangle"];
pub const NUM_CLASSES: usize = 3;
const BACKGROUND: [f64; 3] = [0.85, 0.85, 0.85];
const CLASS_COLORS: [[f64; 3]; 3] = [
    [0.20, 0.35, 0.85], // rectangle: blue
    [0.85, 0.25, 0.20], // ellipse: red
    [0.15, 0.65, 0.30], // triangle: green
];
/// Supersampling factor per axis for anti-aliased coverage.
const AA: usize = 4;

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub num_scenes: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Smallest and largest object side, pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Gaussian pixel noise sigma on the [0,1] intensity scale.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            image_size: 128,
            min_objects: 1,
            max_objects: 4,
            min_size: 12.0,
            max_size: 96.0,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 {
            return Err(Error::Config("num_scenes must be positive".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} is empty or starts at zero",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.min_size >= 1.0 && self.min_size <= self.max_size) {
            return Err(Error::Config(format!(
                "object size range {}..={} is invalid",
                self.min_size, self.max_size
            )));
        }
        if self.max_size > self.image_size as f64 {
            return Err(Error::Config(format!(
                "objects up to {} px cannot fit a {} px image",
                self.max_size, self.image_size
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One object to draw: its class/box plus rendering details.
#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub gt: GtObject,
    pub color: [f64; 3],
    /// Triangle apex x as a fraction of box width; unused for other classes.
    pub apex: f64,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-scene, per-purpose seed so annotations do not depend on
/// the noise stream and scenes can be produced in any order.
fn scene_seed(seed: u64, index: usize, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64).wrapping_add(salt))
}

const SALT_GEOMETRY: u64 = 0x01;
const SALT_NOISE: u64 = 0x02;

/// Sample the objects of one scene. Deterministic in (config, index).
pub fn scene_spec(cfg: &GenConfig, index: usize) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, index, SALT_GEOMETRY));
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let size = cfg.image_size as f64;
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..NUM_CLASSES);
        let w = rng.gen_range(cfg.min_size..=cfg.max_size);
        let h = rng.gen_range(cfg.min_size..=cfg.max_size);
        let x0 = rng.gen_range(0.0..=(size - w));
        let y0 = rng.gen_range(0.0..=(size - h));
        let base = CLASS_COLORS[class];
        let mut color = [0.0; 3];
        for (c, b) in color.iter_mut().zip(base) {
            *c = (b + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0);
        }
        objects.push(ObjectSpec {
            gt: GtObject { class, bbox: BBox::new(x0, y0, x0 + w, y0 + h) },
            color,
            apex: rng.gen_range(0.1..0.9),
        });
    }
    Ok(SceneSpec { objects })
}

fn inside(obj: &ObjectSpec, x: f64, y: f64) -> bool {
    let b = &obj.gt.bbox;
    match obj.gt.class {
        0 => x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1,
        1 => {
            let rx = b.width() / 2.0;
            let ry = b.height() / 2.0;
            let dx = (x - (b.x0 + rx)) / rx;
            let dy = (y - (b.y0 + ry)) / ry;
            dx * dx + dy * dy <= 1.0
        }
        2 => {
            // Apex on the top edge, base corners at the bottom: the triangle
            // touches all four box sides, so the box is tight.
            let ax = b.x0 + obj.apex * b.width();
            let tri = [[ax, b.y0], [b.x0, b.y1], [b.x1, b.y1]];
            let mut sign = 0.0;
            for i in 0..3 {
                let [px, py] = tri[i];
                let [qx, qy] = tri[(i + 1) % 3];
                let cross = (qx - px) * (y - py) - (qy - py) * (x - px);
                if cross.abs() < 1e-12 {
                    continue;
                }
                if sign == 0.0 {
                    sign = cross.signum();
                } else if cross.signum() != sign {
                    return false;
                }
            }
            true
        }
        other => panic!("unknown shape class {other}"),
    }
}

/// Rasterize one scene. Noise is seeded independently of the geometry.
pub fn render(cfg: &GenConfig, spec: &SceneSpec, index: usize) -> RgbImage {
    let size = cfg.image_size;
    let mut canvas = vec![BACKGROUND; size * size];
    for obj in &spec.objects {
        let b = &obj.gt.bbox;
        let px0 = (b.x0.floor() as usize).min(size - 1);
        let py0 = (b.y0.floor() as usize).min(size - 1);
        let px1 = (b.x1.ceil() as usize).min(size);
        let py1 = (b.y1.ceil() as usize).min(size);
        for py in py0..py1 {
            for px in px0..px1 {
                let mut hit = 0usize;
                for sy in 0..AA {
                    for sx in 0..AA {
                        let x = px as f64 + (sx as f64 + 0.5) / AA as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / AA as f64;
                        if inside(obj, x, y) {
                            hit += 1;
                        }
                    }
                }
                if hit > 0 {
                    let alpha = hit as f64 / (AA * AA) as f64;
                    let cell = &mut canvas[py * size + px];
                    for (c, oc) in cell.iter_mut().zip(obj.color) {
                        *c = *c * (1.0 - alpha) + oc * alpha;
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, index, SALT_NOISE));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut img = RgbImage::new(size as u32, size as u32);
    for (i, cell) in canvas.iter().enumerate() {
        let mut px = [0u8; 3];
        for (ch, &v) in cell.iter().enumerate() {
            let noisy = v + cfg.noise_std * normal.sample(&mut rng);
            px[ch] = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        img.put_pixel((i % size) as u32, (i / size) as u32, Rgb(px));
    }
    img
}

// --- COCO-style annotation subset ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// 1-based: class index + 1.
    pub category_id: u32,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoDoc {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDoc {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:06}.png")
}

/// Generate `cfg.num_scenes` PNGs plus `annotations.json` under `dir`.
pub fn generate(dir: &Path, cfg: &GenConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut doc = CocoDoc {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory { id: i as u32 + 1, name: n.to_string() })
            .collect(),
    };
    let mut ann_id = 1;
    for index in 0..cfg.num_scenes {
        let spec = scene_spec(cfg, index)?;
        let img = render(cfg, &spec, index);
        let file_name = scene_file_name(index);
        img.save(dir.join(&file_name))?;
        let image_id = index as u64 + 1;
        doc.images.push(CocoImage {
            id: image_id,
            file_name,
            width: cfg.image_size as u32,
            height: cfg.image_size as u32,
        });
        for obj in &spec.objects {
            let b = &obj.gt.bbox;
            doc.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: obj.gt.class as u32 + 1,
                bbox: [b.x0, b.y0, b.width(), b.height()],
                area: b.width() * b.height(),
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    doc.save(&dir.join("annotations.json"))
}

/// One loaded scene: normalized image tensor plus ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image_id: u64,
    pub file_name: String,
    pub image: Array3<f64>,
    pub gts: Vec<GtObject>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

/// Map 8-bit RGB into `[3, H, W]` values in [-1, 1].
pub fn image_to_input(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px.0[c] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    out
}

impl Dataset {
    /// Load a directory produced by [`generate`].
    pub fn load(dir: &Path) -> Result<Self> {
        let doc = CocoDoc::load(&dir.join("annotations.json"))?;
        let mut scenes = Vec::with_capacity(doc.images.len());
        for im in &doc.images {
            let img = image::open(dir.join(&im.file_name))
                .map_err(|e| Error::Dataset(format!("{}: {e}", im.file_name)))?
                .to_rgb8();
            let gts = doc
                .annotations
                .iter()
                .filter(|a| a.image_id == im.id)
                .map(|a| {
                    let class = a.category_id.checked_sub(1).ok_or_else(|| {
                        Error::Dataset(format!("annotation {}: category_id 0", a.id))
                    })? as usize;
                    if class >= NUM_CLASSES {
                        return Err(Error::Dataset(format!(
                            "annotation {}: category_id {} out of range",
                            a.id, a.category_id
                        )));
                    }
                    let [x, y, w, h] = a.bbox;
                    Ok(GtObject { class, bbox: BBox::new(x, y, x + w, y + h) })
                })
                .collect::<Result<Vec<_>>>()?;
            scenes.push(Scene {
                image_id: im.id,
                file_name: im.file_name.clone(),
                image: image_to_input(&img),
                gts,
            });
        }
        Ok(Self { scenes })
    }
}

/// Horizontal flip of an input tensor and its boxes.
pub fn hflip(image: &Array3<f64>, gts: &[GtObject]) -> (Array3<f64>, Vec<GtObject>) {
    let (c, h, w) = image.dim();
    let mut flipped = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                flipped[(ch, y, x)] = image[(ch, y, w - 1 - x)];
            }
        }
    }
    let wf = w as f64;
    let gts = gts
        .iter()
        .map(|g| GtObject {
            class: g.class,
            bbox: BBox::new(wf - g.bbox.x1, g.bbox.y0, wf - g.bbox.x0, g.bbox.y1),
        })
        .collect();
    (flipped, gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::{self, PyramidLayout};

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig { num_scenes: 4, ..GenConfig::default() };
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        generate(da.path(), &cfg).unwrap();
        generate(db.path(), &cfg).unwrap();
        for i in 0..cfg.num_scenes {
            let f = scene_file_name(i);
            let a = std::fs::read(da.path().join(&f)).unwrap();
            let b = std::fs::read(db.path().join(&f)).unwrap();
            assert_eq!(a, b, "{f} differs between runs");
        }
        let a = std::fs::read(da.path().join("annotations.json")).unwrap();
        let b = std::fs::read(db.path().join("annotations.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rectangle_rendering_is_tight() {
        let cfg = GenConfig { noise_std: 0.0, ..GenConfig::default() };
        let spec = SceneSpec {
            objects: vec![ObjectSpec {
                gt: GtObject { class: 0, bbox: BBox::new(10.0, 10.0, 50.0, 40.0) },
                color: [0.2, 0.3, 0.8],
                apex: 0.5,
            }],
        };
        let img = render(&cfg, &spec, 0);
        let bg = Rgb([
            (BACKGROUND[0] * 255.0).round() as u8,
            (BACKGROUND[1] * 255.0).round() as u8,
            (BACKGROUND[2] * 255.0).round() as u8,
        ]);
        // Interior pixels carry the object color, pixels beyond a 1 px
        // anti-aliasing band are untouched background.
        assert_ne!(*img.get_pixel(30, 25), bg);
        assert_ne!(*img.get_pixel(10, 10), bg);
        assert_eq!(*img.get_pixel(8, 25), bg);
        assert_eq!(*img.get_pixel(30, 8), bg);
        assert_eq!(*img.get_pixel(51, 25), bg);
        assert_eq!(*img.get_pixel(30, 41), bg);
    }

    #[test]
    fn scenes_respect_bounds_and_counts() {
        let cfg = GenConfig::default();
        for index in 0..100 {
            let spec = scene_spec(&cfg, index).unwrap();
            assert!((cfg.min_objects..=cfg.max_objects).contains(&spec.objects.len()));
            for obj in &spec.objects {
                let b = &obj.gt.bbox;
                assert!(b.x0 >= 0.0 && b.y0 >= 0.0);
                assert!(b.x1 <= cfg.image_size as f64 && b.y1 <= cfg.image_size as f64);
                assert!(b.width() >= cfg.min_size && b.height() >= cfg.min_size);
                assert!(obj.gt.class < NUM_CLASSES);
            }
        }
    }

    #[test]
    fn infeasible_config_rejected() {
        let cfg = GenConfig { min_size: 200.0, max_size: 300.0, ..GenConfig::default() };
        assert!(matches!(scene_spec(&cfg, 0), Err(Error::Config(_))));
        let cfg = GenConfig { min_objects: 0, ..GenConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn center_bin_collision_rate_is_low() {
        // Two objects collide when they claim the same center bin on the same
        // pyramid level; the loser gets no stage-1 positive. The default
        // distribution keeps this rare.
        let cfg = GenConfig { num_scenes: 1000, ..GenConfig::default() };
        let layout = PyramidLayout::for_image(cfg.image_size, cfg.image_size);
        let mut objects = 0usize;
        let mut winners = 0usize;
        for index in 0..cfg.num_scenes {
            let spec = scene_spec(&cfg, index).unwrap();
            let gts: Vec<GtObject> = spec.objects.iter().map(|o| o.gt.clone()).collect();
            let pos = assign::assign_stage1(&gts, &layout, cfg.image_size, cfg.image_size).unwrap();
            objects += gts.len();
            winners += pos.len();
        }
        let rate = (objects - winners) as f64 / objects as f64;
        assert!(rate < 0.05, "collision rate {rate:.4} over {objects} objects");
    }

    #[test]
    fn load_round_trips_annotations() {
        let cfg = GenConfig { num_scenes: 3, ..GenConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &cfg).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.scenes.len(), 3);
        for (index, scene) in ds.scenes.iter().enumerate() {
            let spec = scene_spec(&cfg, index).unwrap();
            assert_eq!(scene.image_id, index as u64 + 1);
            assert_eq!(scene.gts.len(), spec.objects.len());
            for (got, want) in scene.gts.iter().zip(&spec.objects) {
                assert_eq!(got.class, want.gt.class);
                assert!((got.bbox.x0 - want.gt.bbox.x0).abs() < 1e-9);
                assert!((got.bbox.x1 - want.gt.bbox.x1).abs() < 1e-9);
            }
            assert_eq!(scene.image.dim(), (3, 128, 128));
            assert!(scene.image.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hflip_is_involutive_and_moves_boxes() {
        let cfg = GenConfig { num_scenes: 1, ..GenConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &cfg).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let scene = &ds.scenes[0];
        let (f1, g1) = hflip(&scene.image, &scene.gts);
        let (f2, g2) = hflip(&f1, &g1);
        assert_eq!(scene.image, f2);
        for (a, b) in scene.gts.iter().zip(&g2) {
            assert!((a.bbox.x0 - b.bbox.x0).abs() < 1e-12);
            assert!((a.bbox.x1 - b.bbox.x1).abs() < 1e-12);
        }
        let w = scene.image.dim().2 as f64;
        for (orig, flip) in scene.gts.iter().zip(&g1) {
            assert!((flip.bbox.x0 - (w - orig.bbox.x1)).abs() < 1e-12);
            assert!((flip.bbox.y0 - orig.bbox.y0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_changes_pixels_but_not_annotations() {
        let quiet = GenConfig { noise_std: 0.0, num_scenes: 1, ..GenConfig::default() };
        let loud = GenConfig { noise_std: 0.05, num_scenes: 1, ..GenConfig::default() };
        let sa = scene_spec(&quiet, 0).unwrap();
        let sb = scene_spec(&loud, 0).unwrap();
        assert_eq!(sa.objects.len(), sb.objects.len());
        for (a, b) in sa.objects.iter().zip(&sb.objects) {
            assert_eq!(a.gt.bbox.x0.to_bits(), b.gt.bbox.x0.to_bits());
        }
        let ia = render(&quiet, &sa, 0);
        let ib = render(&loud, &sb, 0);
        assert_ne!(ia.as_raw(), ib.as_raw());
    }
}
