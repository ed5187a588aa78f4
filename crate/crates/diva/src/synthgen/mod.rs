//! Diagnostic data generator: image/flow pairs with 2 to 4 regions moving
//! under statistically independent affine motions, with exact ground-truth
//! instance labels.
//!
//! Scenes are a textured background plus pasted object cutouts (later pastes
//! occlude earlier ones). Assets come from pluggable directories of mask and
//! background images, with a procedural fallback (wiggly blobs over sinusoid
//! textures) that keeps the generator self-contained. Each region, background
//! included, gets its own motion model, and the flow inside a region equals
//! that model exactly.

pub mod texture;

use crate::error::{DivaError, Result};
use crate::infer::colorwheel::flow_to_rgb;
use crate::model::types::{FlowField, FlowRgb, Image};
use crate::tensor::Real;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Per-region affine motion. `warp` maps centered pixel coordinates, so the
/// displacement at pixel `p` is `(A - I)(p - c) + b` with `c` the frame
/// center; identity warp plus zero translation is exactly zero flow.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MotionModel {
    /// Row-major 2x2 warp matrix A.
    pub warp: [[f64; 2]; 2],
    /// Translation in pixels/frame.
    pub translation: [f64; 2],
}

impl MotionModel {
    pub fn identity() -> Self {
        MotionModel { warp: [[1.0, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] }
    }

    pub fn translation_only(bx: f64, by: f64) -> Self {
        MotionModel { warp: [[1.0, 0.0], [0.0, 1.0]], translation: [bx, by] }
    }

    /// Displacement (u, v) at pixel (x, y) on an `h` by `w` lattice.
    pub fn displacement(&self, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let u = (self.warp[0][0] - 1.0) * dx + self.warp[0][1] * dy + self.translation[0];
        let v = self.warp[1][0] * dx + (self.warp[1][1] - 1.0) * dy + self.translation[1];
        (u, v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Bound on |translation|.
    pub translation_max: f64,
    /// Bound on the entries of A - I.
    pub affine_eps: f64,
    /// Minimum visible area per object, as a fraction of the frame.
    pub min_area_frac: f64,
    /// Scene resampling budget before giving up.
    pub resample_budget: usize,
    /// Region counts to draw from (background included in the count).
    pub region_counts: Vec<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 64,
            width: 64,
            translation_max: 8.0,
            affine_eps: 0.05,
            min_area_frac: 0.005,
            resample_budget: 24,
            region_counts: vec![2, 3, 4],
        }
    }
}

impl GenConfig {
    /// Codec bound covering every motion this config can draw on its lattice.
    pub fn max_norm(&self) -> f64 {
        self.translation_max + 1.5 * self.affine_eps * (self.height + self.width) as f64 / 2.0
    }
}

/// Asset source for object shapes and backgrounds.
pub enum AssetLibrary {
    /// Self-contained: blob masks and sinusoid textures.
    Procedural,
    /// Binary mask PNGs and background images from disk.
    Dirs { masks: Vec<PathBuf>, backgrounds: Vec<PathBuf> },
}

impl AssetLibrary {
    /// Scan `masks_dir` and `backgrounds_dir` for usable files.
    pub fn from_dirs(masks_dir: &Path, backgrounds_dir: &Path) -> Result<Self> {
        let list = |dir: &Path| -> Result<Vec<PathBuf>> {
            let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|s| s.to_str()),
                        Some("png") | Some("jpg") | Some("jpeg")
                    )
                })
                .collect();
            v.sort();
            Ok(v)
        };
        let masks = list(masks_dir)?;
        let backgrounds = list(backgrounds_dir)?;
        if masks.is_empty() || backgrounds.is_empty() {
            return Err(DivaError::Generation("asset directories are empty".into()));
        }
        Ok(AssetLibrary::Dirs { masks, backgrounds })
    }
}

/// One generated sample with exact ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSample<F: Real> {
    pub image: Image<F>,
    pub flow: FlowField<F>,
    pub flow_rgb: FlowRgb<F>,
    /// 0 is the background region, 1..r-1 are objects.
    pub gt_labels: Array2<u8>,
    pub region_count: usize,
    pub motions: Vec<MotionModel>,
    pub seed: u64,
    pub asset_ids: Vec<String>,
}

/// Draw one affine motion: warp entries within `affine_eps` of the identity
/// and a translation of magnitude up to `translation_max`.
pub fn sample_motion<R: Rng>(rng: &mut R, cfg: &GenConfig) -> MotionModel {
    let e = cfg.affine_eps;
    let warp = [
        [1.0 + rng.gen_range(-e..e), rng.gen_range(-e..e)],
        [rng.gen_range(-e..e), 1.0 + rng.gen_range(-e..e)],
    ];
    let mag = rng.gen_range(0.0..cfg.translation_max);
    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
    MotionModel { warp, translation: [mag * ang.cos(), mag * ang.sin()] }
}

fn load_image_asset<F: Real>(path: &Path, h: usize, w: usize) -> Result<Array3<F>> {
    let img = image::open(path)?.to_rgb8();
    let (iw, ih) = img.dimensions();
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        // nearest-neighbor resample onto the target lattice
        let sy = (y as u32 * ih / h as u32).min(ih - 1);
        let sx = (x as u32 * iw / w as u32).min(iw - 1);
        F::from_f64(img.get_pixel(sx, sy)[c] as f64 / 255.0)
    }))
}

fn load_mask_asset<R: Rng>(path: &Path, rng: &mut R, h: usize, w: usize) -> Result<Array2<bool>> {
    let img = image::open(path)?.to_luma8();
    let (iw, ih) = img.dimensions();
    // random scale and placement of the source mask's bounding box
    let scale = rng.gen_range(0.35..0.8);
    let oy = rng.gen_range(0.0..(1.0 - scale));
    let ox = rng.gen_range(0.0..(1.0 - scale));
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / h as f64;
            let fx = x as f64 / w as f64;
            if fy < oy || fx < ox || fy >= oy + scale || fx >= ox + scale {
                continue;
            }
            let sy = (((fy - oy) / scale) * ih as f64) as u32;
            let sx = (((fx - ox) / scale) * iw as f64) as u32;
            out[[y, x]] = img.get_pixel(sx.min(iw - 1), sy.min(ih - 1))[0] >= 128;
        }
    }
    Ok(out)
}

struct SceneAssets<F: Real> {
    background: Array3<F>,
    background_id: String,
    objects: Vec<(Array2<bool>, Array3<F>, String)>,
}

fn draw_assets<F: Real, R: Rng>(
    rng: &mut R,
    assets: &AssetLibrary,
    cfg: &GenConfig,
    n_objects: usize,
) -> Result<SceneAssets<F>> {
    let (h, w) = (cfg.height, cfg.width);
    match assets {
        AssetLibrary::Procedural => {
            let background = texture::texture(rng, h, w);
            let objects = (0..n_objects)
                .map(|i| {
                    let m = texture::blob_mask(rng, h, w);
                    let t = texture::texture(rng, h, w);
                    (m, t, format!("blob{i}"))
                })
                .collect();
            Ok(SceneAssets { background, background_id: "procedural".into(), objects })
        }
        AssetLibrary::Dirs { masks, backgrounds } => {
            let bg_path = &backgrounds[rng.gen_range(0..backgrounds.len())];
            let background = load_image_asset(bg_path, h, w)?;
            let mut objects = Vec::with_capacity(n_objects);
            for _ in 0..n_objects {
                let mp = &masks[rng.gen_range(0..masks.len())];
                let m = load_mask_asset(mp, rng, h, w)?;
                let t = texture::texture(rng, h, w);
                objects.push((m, t, mp.display().to_string()));
            }
            Ok(SceneAssets { background, background_id: bg_path.display().to_string(), objects })
        }
    }
}

/// Compose one scene with `r` regions (background plus `r - 1` objects).
/// `forced_motions`, when given, overrides the independent per-region draws;
/// it exists so tests can construct dependent-motion negative controls.
pub fn compose_scene_with<F: Real>(
    rng: &mut ChaCha8Rng,
    r: usize,
    assets: &AssetLibrary,
    cfg: &GenConfig,
    forced_motions: Option<Vec<MotionModel>>,
) -> Result<SyntheticSample<F>> {
    if !(2..=4).contains(&r) {
        return Err(DivaError::InvalidArgument(format!("region count {r} outside 2..=4")));
    }
    if let Some(m) = &forced_motions {
        if m.len() != r {
            return Err(DivaError::InvalidArgument("forced_motions length must equal r".into()));
        }
    }
    let (h, w) = (cfg.height, cfg.width);
    let min_area = ((cfg.min_area_frac * (h * w) as f64).ceil() as usize).max(1);
    let seed_snapshot = rng.get_seed();

    'attempt: for _ in 0..cfg.resample_budget {
        let scene = draw_assets::<F, _>(rng, assets, cfg, r - 1)?;
        let mut labels = Array2::<u8>::zeros((h, w));
        let mut image = scene.background.clone();
        for (i, (mask, tex, _)) in scene.objects.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if mask[[y, x]] {
                        labels[[y, x]] = (i + 1) as u8;
                        for c in 0..3 {
                            image[[y, x, c]] = tex[[y, x, c]];
                        }
                    }
                }
            }
        }
        // visible-area check for every region, background included
        let mut areas = vec![0usize; r];
        for &l in labels.iter() {
            areas[l as usize] += 1;
        }
        if areas.iter().any(|&a| a < min_area) {
            continue 'attempt;
        }

        let motions = match &forced_motions {
            Some(m) => m.clone(),
            None => (0..r).map(|_| sample_motion(rng, cfg)).collect(),
        };
        let max_norm = cfg.max_norm();
        let mut flow = Array3::<F>::zeros((h, w, 2));
        for y in 0..h {
            for x in 0..w {
                let m = &motions[labels[[y, x]] as usize];
                let (u, v) = m.displacement(x, y, h, w);
                flow[[y, x, 0]] = F::from_f64(u);
                flow[[y, x, 1]] = F::from_f64(v);
            }
        }
        let flow = FlowField::new(flow, F::from_f64(max_norm))?;
        let flow_rgb = flow_to_rgb(&flow);
        let image = Image::new(image)?;
        let mut asset_ids = vec![scene.background_id.clone()];
        asset_ids.extend(scene.objects.iter().map(|(_, _, id)| id.clone()));
        return Ok(SyntheticSample {
            image,
            flow,
            flow_rgb,
            gt_labels: labels,
            region_count: r,
            motions,
            seed: u64::from_le_bytes(seed_snapshot[..8].try_into().unwrap()),
            asset_ids,
        });
    }
    Err(DivaError::Generation(format!(
        "exhausted {} attempts composing an {r}-region scene",
        cfg.resample_budget
    )))
}

/// Standard entry: independent motions.
pub fn compose_scene<F: Real>(
    rng: &mut ChaCha8Rng,
    r: usize,
    assets: &AssetLibrary,
    cfg: &GenConfig,
) -> Result<SyntheticSample<F>> {
    compose_scene_with(rng, r, assets, cfg, None)
}

// ---------------------------------------------------------------------------
// dataset splits on disk

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleEntry {
    pub id: usize,
    pub seed: u64,
    pub region_count: usize,
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub config: GenConfig,
    pub max_norm: f64,
    pub samples: Vec<SampleEntry>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed derived from the split seed; disjoint split seeds give
/// disjoint sample provenance.
pub fn sample_seed(split_seed: u64, index: usize) -> u64 {
    splitmix64(split_seed ^ splitmix64(index as u64 + 1))
}

/// Deterministic manifest for a split of `count` samples. No samples are
/// rendered; pair with [`generate_split`] to materialize them.
pub fn build_split(seed: u64, count: usize, cfg: &GenConfig) -> DatasetManifest {
    let mut samples = Vec::with_capacity(count);
    for id in 0..count {
        let s = sample_seed(seed, id);
        let r = cfg.region_counts[(splitmix64(s) % cfg.region_counts.len() as u64) as usize];
        samples.push(SampleEntry { id, seed: s, region_count: r, dir: format!("sample_{id:05}") });
    }
    DatasetManifest { seed, count, config: cfg.clone(), max_norm: cfg.max_norm(), samples }
}

/// Render one manifest entry.
pub fn render_entry<F: Real>(
    entry: &SampleEntry,
    cfg: &GenConfig,
    assets: &AssetLibrary,
) -> Result<SyntheticSample<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(entry.seed);
    compose_scene(&mut rng, entry.region_count, assets, cfg)
}

/// Write a full split to `dir`: `manifest.json` plus one subdirectory per
/// sample holding `image.png`, `flow.flo`, `labels.png` and `meta.json`.
pub fn generate_split<F: Real>(
    dir: &Path,
    seed: u64,
    count: usize,
    cfg: &GenConfig,
    assets: &AssetLibrary,
) -> Result<DatasetManifest> {
    let manifest = build_split(seed, count, cfg);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    for entry in &manifest.samples {
        let sample = render_entry::<F>(entry, cfg, assets)?;
        save_sample(&dir.join(&entry.dir), &sample)?;
    }
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    seed: u64,
    region_count: usize,
    max_norm: f64,
    motions: Vec<MotionModel>,
    asset_ids: Vec<String>,
}

pub fn save_sample<F: Real>(dir: &Path, sample: &SyntheticSample<F>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = sample.image.dims();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (sample.image.data()[[y, x, 0]].to_f64() * 255.0).round() as u8,
                (sample.image.data()[[y, x, 1]].to_f64() * 255.0).round() as u8,
                (sample.image.data()[[y, x, 2]].to_f64() * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(dir.join("image.png"))?;

    crate::infer::flow_io::flow_write(&dir.join("flow.flo"), &sample.flow)?;

    let mut lab = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            lab.put_pixel(x as u32, y as u32, image::Luma([sample.gt_labels[[y, x]]]));
        }
    }
    lab.save(dir.join("labels.png"))?;

    let meta = SampleMeta {
        seed: sample.seed,
        region_count: sample.region_count,
        max_norm: sample.flow.max_norm().to_f64(),
        motions: sample.motions.clone(),
        asset_ids: sample.asset_ids.clone(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// A sample loaded back for training or evaluation.
#[derive(Debug, Clone)]
pub struct LoadedSample<F: Real> {
    pub image: Image<F>,
    pub flow_rgb: FlowRgb<F>,
    pub gt_labels: Array2<u8>,
    pub region_count: usize,
}

pub struct Dataset<F: Real> {
    pub manifest: DatasetManifest,
    pub samples: Vec<LoadedSample<F>>,
}

/// Load a split; the color rendering is recomputed from the stored flow with
/// the split-wide `max_norm`, so renderings are comparable across samples.
pub fn load_split<F: Real>(dir: &Path) -> Result<Dataset<F>> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let sdir = dir.join(&entry.dir);
        let img = image::open(sdir.join("image.png"))?.to_rgb8();
        let (iw, ih) = img.dimensions();
        let data = Array3::from_shape_fn((ih as usize, iw as usize, 3), |(y, x, c)| {
            F::from_f64(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        });
        let image = Image::new(data)?;
        let flow_raw = crate::infer::flow_io::flow_read::<F>(&sdir.join("flow.flo"))?;
        let flow = FlowField::new(flow_raw.data().clone(), F::from_f64(manifest.max_norm))?;
        let flow_rgb = flow_to_rgb(&flow);
        let lab = image::open(sdir.join("labels.png"))?.to_luma8();
        let gt_labels = Array2::from_shape_fn((ih as usize, iw as usize), |(y, x)| {
            lab.get_pixel(x as u32, y as u32)[0]
        });
        samples.push(LoadedSample { image, flow_rgb, gt_labels, region_count: entry.region_count });
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg32() -> GenConfig {
        GenConfig { height: 32, width: 32, ..Default::default() }
    }

    #[test]
    fn identity_motion_is_zero_flow_and_translation_is_constant() {
        let m = MotionModel::identity();
        assert_eq!(m.displacement(5, 9, 32, 32), (0.0, 0.0));
        let t = MotionModel::translation_only(3.0, 0.0);
        for &(x, y) in &[(0usize, 0usize), (13, 7), (31, 31)] {
            assert_eq!(t.displacement(x, y, 32, 32), (3.0, 0.0));
        }
    }

    #[test]
    fn sampled_motions_are_seed_reproducible() {
        let cfg = cfg32();
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            assert_eq!(sample_motion(&mut a, &cfg), sample_motion(&mut b, &cfg));
        }
    }

    #[test]
    fn scene_flow_matches_region_motion_exactly() {
        let cfg = cfg32();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = compose_scene::<f32>(&mut rng, 3, &AssetLibrary::Procedural, &cfg).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        for y in 0..h {
            for x in 0..w {
                let m = &s.motions[s.gt_labels[[y, x]] as usize];
                let (u, v) = m.displacement(x, y, h, w);
                assert_eq!(s.flow.data()[[y, x, 0]], u as f32);
                assert_eq!(s.flow.data()[[y, x, 1]], v as f32);
            }
        }
    }

    #[test]
    fn label_count_equals_region_count_and_areas_respect_minimum() {
        let cfg = cfg32();
        for r in 2..=4usize {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + r as u64);
            let s = compose_scene::<f32>(&mut rng, r, &AssetLibrary::Procedural, &cfg).unwrap();
            let mut areas = vec![0usize; r];
            for &l in s.gt_labels.iter() {
                assert!((l as usize) < r);
                areas[l as usize] += 1;
            }
            let min_area = (cfg.min_area_frac * (cfg.height * cfg.width) as f64).ceil() as usize;
            assert!(areas.iter().all(|&a| a >= min_area), "{areas:?}");
            assert_eq!(areas.iter().filter(|&&a| a > 0).count(), r);
        }
    }

    #[test]
    fn forced_identical_motions_make_a_dependent_negative_control() {
        let cfg = cfg32();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shared = sample_motion(&mut rng, &cfg);
        let s = compose_scene_with::<f32>(
            &mut rng,
            2,
            &AssetLibrary::Procedural,
            &cfg,
            Some(vec![shared, shared]),
        )
        .unwrap();
        // flow has no discontinuity: every pixel follows the same model
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (u, v) = shared.displacement(x, y, cfg.height, cfg.width);
                assert_eq!(s.flow.data()[[y, x, 0]], u as f32);
                assert_eq!(s.flow.data()[[y, x, 1]], v as f32);
            }
        }
    }

    #[test]
    fn manifests_are_deterministic_and_seeds_disjoint() {
        let cfg = cfg32();
        let m1 = build_split(42, 20, &cfg);
        let m2 = build_split(42, 20, &cfg);
        assert_eq!(serde_json::to_vec(&m1).unwrap(), serde_json::to_vec(&m2).unwrap());
        assert_eq!(build_split(42, 0, &cfg).samples.len(), 0);

        let m3 = build_split(43, 20, &cfg);
        let s1: std::collections::HashSet<u64> = m1.samples.iter().map(|s| s.seed).collect();
        let s3: std::collections::HashSet<u64> = m3.samples.iter().map(|s| s.seed).collect();
        assert!(s1.is_disjoint(&s3));
    }

    #[test]
    fn motion_draws_across_regions_are_uncorrelated() {
        let cfg = cfg32();
        let mut bx0 = Vec::new();
        let mut bx1 = Vec::new();
        for i in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + i);
            let m0 = sample_motion(&mut rng, &cfg);
            let m1 = sample_motion(&mut rng, &cfg);
            bx0.push(m0.translation[0]);
            bx1.push(m1.translation[0]);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (m0, m1) = (mean(&bx0), mean(&bx1));
        let mut cov = 0.0;
        let mut v0 = 0.0;
        let mut v1 = 0.0;
        for i in 0..bx0.len() {
            cov += (bx0[i] - m0) * (bx1[i] - m1);
            v0 += (bx0[i] - m0).powi(2);
            v1 += (bx1[i] - m1).powi(2);
        }
        let rho = cov / (v0.sqrt() * v1.sqrt());
        assert!(rho.abs() < 0.1, "correlation {rho}");
    }
}
