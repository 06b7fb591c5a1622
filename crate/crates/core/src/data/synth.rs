//! Synthetic infrared scenes: smooth clutter, small Gaussian targets and
//! unannotated look-alike distractors.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    dataset_split, write_manifest, write_png16, write_voc_xml, BBox, IrImage, VocDocument,
};
use crate::error::{Error, Result};

const PLACEMENT_TRIES: usize = 200;
const SCENE_RETRIES: usize = 10;
/// Coarse noise lattice cell size in pixels.
const CLUTTER_CELL: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSceneConfig {
    pub width: usize,
    pub height: usize,
    pub targets: (usize, usize),
    pub sigma: (f64, f64),
    /// Peak amplitude above the background.
    pub intensity: (f64, f64),
    pub distractors: (usize, usize),
    /// 1 makes distractors indistinguishable in size and brightness.
    pub similarity: f64,
    pub clutter: f64,
    pub background: f64,
    pub seed: u64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            targets: (1, 3),
            sigma: (0.8, 2.0),
            intensity: (0.35, 0.7),
            distractors: (1, 3),
            similarity: 0.7,
            clutter: 0.3,
            background: 0.15,
            seed: 0,
        }
    }
}

impl SynthSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        let ok = self.width >= 8
            && self.height >= 8
            && self.targets.0 <= self.targets.1
            && self.distractors.0 <= self.distractors.1
            && range_ok(self.sigma)
            && self.sigma.0 > 0.0
            && range_ok(self.intensity)
            && self.intensity.0 > 0.0
            && (0.0..=1.0).contains(&self.similarity)
            && self.clutter >= 0.0
            && (0.0..1.0).contains(&self.background);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid synthetic scene config {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub image: IrImage,
    pub targets: Vec<BBox>,
    pub distractors: Vec<BBox>,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    amp: f64,
}

impl Blob {
    /// Pixel box covering the blob out to three sigma.
    fn extent(&self) -> BBox {
        BBox::new(
            (self.cx - 3.0 * self.sx).floor(),
            (self.cy - 3.0 * self.sy).floor(),
            (self.cx + 3.0 * self.sx).ceil(),
            (self.cy + 3.0 * self.sy).ceil(),
        )
    }

    fn draw(&self, img: &mut [f64], w: usize, h: usize) {
        let b = self.extent().clip(w as f64, h as f64);
        for y in b.y_min as usize..b.y_max as usize {
            for x in b.x_min as usize..b.x_max as usize {
                let dx = (x as f64 + 0.5 - self.cx) / self.sx;
                let dy = (y as f64 + 0.5 - self.cy) / self.sy;
                img[y * w + x] += self.amp * (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn count(rng: &mut impl Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Bilinear upsampling of a coarse normal lattice plus a linear ramp.
fn background(cfg: &SynthSceneConfig, rng: &mut impl Rng) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let (gw, gh) = (w.div_ceil(CLUTTER_CELL) + 1, h.div_ceil(CLUTTER_CELL) + 1);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| StandardNormal.sample(rng)).collect();
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let diag = ((w * w + h * h) as f64).sqrt();
    let mut img = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (
                x as f64 / CLUTTER_CELL as f64,
                y as f64 / CLUTTER_CELL as f64,
            );
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let smooth = (1.0 - ty) * ((1.0 - tx) * at(ix, iy) + tx * at(ix + 1, iy))
                + ty * ((1.0 - tx) * at(ix, iy + 1) + tx * at(ix + 1, iy + 1));
            let ramp = ((x as f64 - w as f64 / 2.0) * ca + (y as f64 - h as f64 / 2.0) * sa) / diag;
            let noise: f64 = StandardNormal.sample(rng);
            img[y * w + x] =
                cfg.background + cfg.clutter * (0.12 * smooth + 0.3 * ramp + 0.05 * noise);
        }
    }
    img
}

fn target_blob(cfg: &SynthSceneConfig, rng: &mut impl Rng) -> Blob {
    let sx = uniform(rng, cfg.sigma);
    let ratio = rng.random_range(0.75..1.33);
    let sy = (sx * ratio).clamp(cfg.sigma.0, cfg.sigma.1);
    let amp = uniform(rng, cfg.intensity);
    let (mx, my) = (3.0 * sx + 0.5, 3.0 * sy + 0.5);
    Blob {
        cx: rng.random_range(mx..cfg.width as f64 - mx),
        cy: rng.random_range(my..cfg.height as f64 - my),
        sx,
        sy,
        amp,
    }
}

/// Oversized blob or elongated streak; both approach target statistics as
/// `similarity` goes to 1.
fn distractor_blob(cfg: &SynthSceneConfig, rng: &mut impl Rng) -> Blob {
    let s = cfg.similarity;
    let base = uniform(rng, cfg.sigma);
    let (sx, sy) = if rng.random_bool(0.5) {
        let k = 1.0 + 2.0 * (1.0 - s);
        (base * k, base * k * rng.random_range(0.75..1.33))
    } else {
        let e = 1.0 + 4.0 * (1.0 - s);
        if rng.random_bool(0.5) {
            (base * e, base)
        } else {
            (base, base * e)
        }
    };
    let amp = uniform(rng, cfg.intensity) * uniform(rng, (s, 1.0));
    Blob {
        cx: rng.random_range(0.0..cfg.width as f64),
        cy: rng.random_range(0.0..cfg.height as f64),
        sx,
        sy,
        amp,
    }
}

fn try_scene(cfg: &SynthSceneConfig, rng: &mut ChaCha8Rng) -> Option<SynthScene> {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = background(cfg, rng);
    let mut targets: Vec<Blob> = Vec::new();
    for _ in 0..count(rng, cfg.targets) {
        let blob = (0..PLACEMENT_TRIES)
            .map(|_| target_blob(cfg, rng))
            .find(|b| {
                let e = b.extent();
                e.inside(w as f64, h as f64)
                    && targets.iter().all(|t| t.extent().intersection(&e) == 0.0)
            })?;
        targets.push(blob);
    }
    let tboxes: Vec<BBox> = targets.iter().map(Blob::extent).collect();
    let mut distractors = Vec::new();
    for _ in 0..count(rng, cfg.distractors) {
        let blob = (0..PLACEMENT_TRIES)
            .map(|_| distractor_blob(cfg, rng))
            .find(|b| {
                let e = b.extent().clip(w as f64, h as f64);
                !e.is_degenerate() && tboxes.iter().all(|t| t.intersection(&e) == 0.0)
            })?;
        distractors.push(blob);
    }
    for b in targets.iter().chain(&distractors) {
        b.draw(&mut img, w, h);
    }
    let data = img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Some(SynthScene {
        image: IrImage::new(w, h, data).ok()?,
        targets: tboxes,
        distractors: distractors
            .iter()
            .map(|b| b.extent().clip(w as f64, h as f64))
            .collect(),
    })
}

/// Draws one scene from `rng`. A scene whose objects cannot be placed is
/// redrawn from a fresh sub-seed a bounded number of times.
pub fn synth_scene(cfg: &SynthSceneConfig, rng: &mut ChaCha8Rng) -> Result<SynthScene> {
    cfg.validate()?;
    for _ in 0..SCENE_RETRIES {
        let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
        if let Some(s) = try_scene(cfg, &mut sub) {
            return Ok(s);
        }
    }
    Err(Error::Data(format!(
        "could not place objects after {SCENE_RETRIES} attempts"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDatasetConfig {
    pub count: usize,
    pub split_seed: u64,
    pub scene: SynthSceneConfig,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            count: 500,
            split_seed: 0,
            scene: SynthSceneConfig::default(),
        }
    }
}

/// Writes `train/` and `test/` directories of 16-bit PNG + VOC XML pairs and
/// the `train.txt` / `test.txt` manifests. Returns `(train, test)` sizes.
pub fn write_synth_dataset(cfg: &SynthDatasetConfig, out: &Path) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.scene.seed);
    let ids: Vec<String> = (0..cfg.count).map(|i| format!("synth_{i:05}")).collect();
    let (train, test) = dataset_split(&ids, cfg.split_seed)?;
    let train_set: std::collections::HashSet<&String> = train.iter().collect();
    for split in ["train", "test"] {
        fs::create_dir_all(out.join(split))?;
    }
    for id in &ids {
        let scene = synth_scene(&cfg.scene, &mut rng)?;
        let dir = out.join(if train_set.contains(id) {
            "train"
        } else {
            "test"
        });
        write_png16(&dir.join(format!("{id}.png")), &scene.image)?;
        let doc = VocDocument::with_boxes(
            format!("{id}.png"),
            scene.image.width,
            scene.image.height,
            &scene.targets,
        );
        write_voc_xml(&doc, &dir.join(format!("{id}.xml")))?;
    }
    write_manifest(&out.join("train.txt"), &train)?;
    write_manifest(&out.join("test.txt"), &test)?;
    Ok((train.len(), test.len()))
}
