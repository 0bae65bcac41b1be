//! Samples, synthetic defects, dataset directories and augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gmbinet_core::ops::resize_bilinear;
use gmbinet_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;

/// One image with its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, 3, H, W)`, values in `[0, 1]` before normalization.
    pub image: Tensor,
    /// `(1, 1, H, W)`, values in `{0, 1}`.
    pub mask: Tensor,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor) -> Result<Self> {
        let (i, m) = (image.shape(), mask.shape());
        if i.n != 1 || i.c != 3 || m.n != 1 || m.c != 1 || (i.h, i.w) != (m.h, m.w) {
            return Err(Error::usage(format!("image {i} and mask {m} do not form a sample")));
        }
        Ok(Sample { id: id.into(), image, mask })
    }

    pub fn hw(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }

    /// Image bilinear, mask nearest, to `h x w`.
    pub fn resized(&self, h: usize, w: usize) -> Result<Sample> {
        if self.hw() == (h, w) {
            return Ok(self.clone());
        }
        Ok(Sample { id: self.id.clone(), image: resize_bilinear(&self.image, h, w)?, mask: resize_nearest(&self.mask, h, w) })
    }
}

/// Corner-aligned nearest-neighbour source index, matching the bilinear grid.
fn nearest_src(i: usize, out: usize, inp: usize) -> usize {
    if out <= 1 || inp <= 1 {
        return 0;
    }
    ((i * (inp - 1)) as f64 / (out - 1) as f64).round() as usize
}

pub fn resize_nearest(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s.with_hw(h, w), |n, c, y, x| t.at(n, c, nearest_src(y, h, s.h), nearest_src(x, w, s.w)))
}

// ---------------------------------------------------------------------------
// synthetic defects

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthKind {
    Scratch,
    Patch,
    Inclusion,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [SynthKind::Scratch, SynthKind::Patch, SynthKind::Inclusion];

    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::Scratch => "scratch",
            SynthKind::Patch => "patch",
            SynthKind::Inclusion => "inclusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown defect kind `{s}` (scratch, patch, inclusion)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub size: usize,
    /// Inclusive range of defect instances.
    pub count: (usize, usize),
    /// Salt-and-pepper probability per pixel, image only.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, size: usize, seed: u64) -> Self {
        SynthSpec { kind, size, count: (1, 2), noise: 0.05, seed }
    }
}

struct Canvas {
    size: usize,
    image: Vec<f32>,
    mask: Vec<bool>,
}

impl Canvas {
    fn paint(&mut self, x: i64, y: i64, delta: f32) {
        let s = self.size as i64;
        if x < 0 || y < 0 || x >= s || y >= s {
            return;
        }
        let i = (y * s + x) as usize;
        if !self.mask[i] {
            self.mask[i] = true;
            self.image[i] += delta;
        }
    }

    fn disk(&mut self, cx: f64, cy: f64, r: f64, delta: f32) {
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.paint(x, y, delta);
                }
            }
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, a: f64, b: f64, angle: f64, delta: f32) {
        let r = a.max(b);
        let (c, s) = (angle.cos(), angle.sin());
        for y in (cy - r).floor() as i64..=(cy + r).ceil() as i64 {
            for x in (cx - r).floor() as i64..=(cx + r).ceil() as i64 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    self.paint(x, y, delta);
                }
            }
        }
    }
}

fn contrast(rng: &mut ChaCha8Rng) -> f32 {
    let m = rng.gen_range(0.25..0.4);
    if rng.gen_bool(0.75) {
        -m
    } else {
        m
    }
}

/// Polyline with sharp heading changes, kept inside a margin. Stroke and
/// blob sizes have a floor of about 4 px so defects stay resolvable at half
/// resolution, where the finest side output lives.
fn scratch(cv: &mut Canvas, rng: &mut ChaCha8Rng) {
    let s = cv.size as f64;
    let margin = s * 0.1;
    let radius = (s / 64.0).max(2.0);
    let delta = contrast(rng);
    let (mut x, mut y) = (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let segments = rng.gen_range(3..7);
    for _ in 0..segments {
        heading += rng.gen_range(-1.4..1.4);
        let len = rng.gen_range(s * 0.08..s * 0.22);
        let (mut nx, mut ny) = (x + len * heading.cos(), y + len * heading.sin());
        if nx < margin || nx > s - margin || ny < margin || ny > s - margin {
            heading = (s / 2.0 - y).atan2(s / 2.0 - x);
            nx = x + len * heading.cos();
            ny = y + len * heading.sin();
        }
        let steps = (len / 0.5).ceil() as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            cv.disk(x + t * (nx - x), y + t * (ny - y), radius, delta);
        }
        x = nx;
        y = ny;
    }
}

/// Star-shaped blob with a randomly perturbed radius.
fn patch(cv: &mut Canvas, rng: &mut ChaCha8Rng) {
    let s = cv.size as f64;
    let r0 = rng.gen_range(s * 0.08..s * 0.16);
    let (cx, cy) = (rng.gen_range(r0 * 1.5..s - r0 * 1.5), rng.gen_range(r0 * 1.5..s - r0 * 1.5));
    let delta = contrast(rng);
    let harmonics: Vec<(f64, f64)> = (2..5).map(|k| (rng.gen_range(0.0..0.18) / (k as f64 - 1.0), rng.gen_range(0.0..std::f64::consts::TAU))).collect();
    let reach = (r0 * 1.5).ceil() as i64;
    for y in cy as i64 - reach..=cy as i64 + reach {
        for x in cx as i64 - reach..=cx as i64 + reach {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let th = dy.atan2(dx);
            let r = r0 * (1.0 + harmonics.iter().enumerate().map(|(k, (a, p))| a * ((k + 2) as f64 * th + p).sin()).sum::<f64>());
            if dx * dx + dy * dy <= r * r {
                cv.paint(x, y, delta);
            }
        }
    }
}

/// Cluster of small dark ellipses.
fn inclusion(cv: &mut Canvas, rng: &mut ChaCha8Rng) {
    let s = cv.size as f64;
    let spread = s * 0.08;
    let (cx, cy) = (rng.gen_range(s * 0.2..s * 0.8), rng.gen_range(s * 0.2..s * 0.8));
    let delta = -rng.gen_range(0.3..0.45);
    for _ in 0..rng.gen_range(2..6) {
        let a = rng.gen_range((s * 0.03).max(2.5)..(s * 0.07).max(4.5));
        let b = (a * rng.gen_range(0.6..1.0)).max(2.0);
        cv.ellipse(
            cx + rng.gen_range(-spread..spread),
            cy + rng.gen_range(-spread..spread),
            a,
            b,
            rng.gen_range(0.0..std::f64::consts::PI),
            delta,
        );
    }
}

/// Textured background with painted defects; the mask is exactly the painted set.
pub fn generate(spec: &SynthSpec) -> Result<Sample> {
    if spec.size < 64 {
        return Err(Error::usage(format!("synthetic canvas must be at least 64, got {}", spec.size)));
    }
    if spec.count.0 > spec.count.1 || !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::usage("invalid synthetic defect count range or noise probability"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let base = rng.gen_range(0.45..0.65);
    let (fx, fy, phase) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0), rng.gen_range(0.0..6.3));
    let mut image = vec![0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
            let wave = 0.04 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            image[y * n + x] = (base + wave + rng.gen_range(-0.03..0.03)) as f32;
        }
    }
    let mut cv = Canvas { size: n, image, mask: vec![false; n * n] };
    for _ in 0..rng.gen_range(spec.count.0..=spec.count.1) {
        match spec.kind {
            SynthKind::Scratch => scratch(&mut cv, &mut rng),
            SynthKind::Patch => patch(&mut cv, &mut rng),
            SynthKind::Inclusion => inclusion(&mut cv, &mut rng),
        }
    }
    if spec.noise > 0.0 {
        for v in cv.image.iter_mut() {
            if rng.gen_bool(spec.noise) {
                *v = if rng.gen_bool(0.5) { 0.0 } else { 1.0 };
            }
        }
    }
    let shape = Shape::new(1, 3, n, n);
    let image = Tensor::from_fn(shape, |_, _, y, x| cv.image[y * n + x].clamp(0.0, 1.0));
    let mask = Tensor::from_fn(shape.with_c(1), |_, _, y, x| cv.mask[y * n + x] as u8 as f32);
    Sample::new(format!("{}_{:016x}", spec.kind.name(), spec.seed), image, mask)
}

/// `count` samples cycling through the defect kinds, seeds derived from `seed`.
pub fn synthetic_set(count: usize, size: usize, noise: f64, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let kind = SynthKind::ALL[i % 3];
            let mut spec = SynthSpec::new(kind, size, mix(seed, i as u64));
            spec.noise = noise;
            let mut s = generate(&spec)?;
            s.id = format!("{:04}_{}", i, kind.name());
            Ok(s)
        })
        .collect()
}

/// SplitMix64-style combination of two words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

// ---------------------------------------------------------------------------
// directories

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// `[section]` headers followed by one stem per line; `#` starts a comment.
pub fn read_split(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            out.entry(name.trim().to_string()).or_default();
        } else if let Some(sec) = &current {
            out.get_mut(sec).expect("section exists").push(line.to_string());
        } else {
            return Err(Error::usage(format!("{}: stem `{line}` before any [section]", path.display())));
        }
    }
    Ok(out)
}

pub fn write_split(path: &Path, sections: &[(&str, Vec<String>)]) -> Result<()> {
    let mut text = String::new();
    for (name, stems) in sections {
        text.push_str(&format!("[{name}]\n"));
        for s in stems {
            text.push_str(s);
            text.push('\n');
        }
    }
    io::write_text(path, &text)
}

/// Pairs `images/*.png` with `masks/*.png` by stem, in stem order. With
/// `split`, only the stems listed under that section of `split.txt` are kept.
pub fn load_dataset(root: &Path, split: Option<&str>) -> Result<Vec<Sample>> {
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    let missing: Vec<String> = images.keys().filter(|s| !masks.contains_key(*s)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingMasks(missing));
    }
    let keep: Option<Vec<String>> = match split {
        None => None,
        Some(name) => {
            let path = root.join("split.txt");
            let sections = read_split(&path)?;
            let stems = sections.get(name).ok_or_else(|| Error::usage(format!("{}: no [{name}] section", path.display())))?;
            for s in stems {
                if !images.contains_key(s) {
                    return Err(Error::usage(format!("{}: stem `{s}` has no image", path.display())));
                }
            }
            Some(stems.clone())
        }
    };
    let mut out = Vec::new();
    for (stem, img_path) in &images {
        if keep.as_ref().is_some_and(|k| !k.contains(stem)) {
            continue;
        }
        let image = io::read_image(img_path)?;
        let mask = io::read_mask(&masks[stem])?;
        if (image.shape().h, image.shape().w) != (mask.shape().h, mask.shape().w) {
            return Err(Error::Image { path: masks[stem].clone(), reason: format!("mask size differs from image {}", image.shape()) });
        }
        out.push(Sample::new(stem.clone(), image, mask)?);
    }
    Ok(out)
}

/// Writes samples in the `images/` + `masks/` layout.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    io::create_dir(&root.join("images"))?;
    io::create_dir(&root.join("masks"))?;
    for s in samples {
        io::write_rgb_png(&s.image, &root.join("images").join(format!("{}.png", s.id)))?;
        io::write_gray_png(&s.mask, &root.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// `<root>/<class>/*.png`; classes are sorted directory names, labels their indices.
pub fn load_classification(root: &Path) -> Result<(Vec<String>, Vec<(String, Tensor, usize)>)> {
    let mut classes: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    classes.sort();
    let mut items = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for (stem, path) in png_stems(&root.join(class))? {
            items.push((format!("{class}/{stem}"), io::read_image(&path)?, label));
        }
    }
    Ok((classes, items))
}

// ---------------------------------------------------------------------------
// augmentation

pub const INTENSITY_SHIFT: f64 = 0.1;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const ZSCORE_EPS: f64 = 1e-6;

/// Random choices for one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    pub shift: f32,
    pub scale: f64,
    /// Crop/pad placement in `[0, 1]` along rows and columns.
    pub offset: (f64, f64),
}

impl AugmentPlan {
    pub fn identity() -> Self {
        AugmentPlan { hflip: false, vflip: false, shift: 0.0, scale: 1.0, offset: (0.5, 0.5) }
    }

    pub fn draw(rng: &mut impl Rng) -> Self {
        AugmentPlan {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            shift: rng.gen_range(-INTENSITY_SHIFT..=INTENSITY_SHIFT) as f32,
            scale: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            offset: (rng.gen::<f64>(), rng.gen::<f64>()),
        }
    }

    /// Seeded by the run seed, the sample id and the draw index, so results
    /// do not depend on processing order.
    pub fn for_sample(seed: u64, id: &str, draw: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, hash_str(id)), draw));
        Self::draw(&mut rng)
    }

    /// Source pixel of output pixel `(y, x)` under flips and scale/crop/pad,
    /// or `None` where padding was inserted.
    pub fn source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (sh, sw) = (scaled(h, self.scale), scaled(w, self.scale));
        let oy = place(sh, h, self.offset.0);
        let ox = place(sw, w, self.offset.1);
        let (ys, xs) = (y as i64 + oy, x as i64 + ox);
        if ys < 0 || xs < 0 || ys >= sh as i64 || xs >= sw as i64 {
            return None;
        }
        let (sy, sx) = (nearest_src(ys as usize, sh, h), nearest_src(xs as usize, sw, w));
        let sy = if self.vflip { h - 1 - sy } else { sy };
        let sx = if self.hflip { w - 1 - sx } else { sx };
        Some((sy, sx))
    }

    fn geometry(&self, t: &Tensor, nearest: bool, fill: &[f32]) -> Result<Tensor> {
        let s = t.shape();
        let flipped = Tensor::from_fn(s, |n, c, y, x| {
            let y = if self.vflip { s.h - 1 - y } else { y };
            let x = if self.hflip { s.w - 1 - x } else { x };
            t.at(n, c, y, x)
        });
        let (sh, sw) = (scaled(s.h, self.scale), scaled(s.w, self.scale));
        let resized = if (sh, sw) == (s.h, s.w) {
            flipped
        } else if nearest {
            resize_nearest(&flipped, sh, sw)
        } else {
            resize_bilinear(&flipped, sh, sw)?
        };
        let oy = place(sh, s.h, self.offset.0);
        let ox = place(sw, s.w, self.offset.1);
        Ok(Tensor::from_fn(s, |n, c, y, x| {
            let (ys, xs) = (y as i64 + oy, x as i64 + ox);
            if ys < 0 || xs < 0 || ys >= sh as i64 || xs >= sw as i64 {
                fill[c]
            } else {
                resized.at(n, c, ys as usize, xs as usize)
            }
        }))
    }

    /// Geometry on both, intensity shift on the image only. No normalization.
    pub fn apply(&self, s: &Sample) -> Result<Sample> {
        let img = &s.image;
        let sh = img.shape();
        let means: Vec<f32> = (0..sh.c).map(|c| img.plane(0, c).iter().sum::<f32>() / sh.plane() as f32).collect();
        let mut image = self.geometry(img, false, &means)?;
        for v in image.data_mut() {
            *v += self.shift;
        }
        let mask = self.geometry(&s.mask, true, &[0.0])?;
        Ok(Sample { id: s.id.clone(), image, mask })
    }
}

fn scaled(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Top-left of an `n`-long window inside a `scaled`-long axis (negative = padding).
fn place(scaled: usize, n: usize, t: f64) -> i64 {
    ((scaled as f64 - n as f64) * t).round() as i64
}

/// Per-image z-score over all channels and pixels.
pub fn normalize(image: &Tensor) -> Tensor {
    let s = image.shape();
    let per = s.c * s.plane();
    let mut out = image.clone();
    for n in 0..s.n {
        let chunk = &mut out.data_mut()[n * per..(n + 1) * per];
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
        let scale = 1.0 / (var.sqrt() + ZSCORE_EPS);
        for v in chunk.iter_mut() {
            *v = ((*v as f64 - mean) * scale) as f32;
        }
    }
    out
}

/// Seeded augmentation draw followed by z-score normalization.
pub fn augment(s: &Sample, seed: u64, draw: u64) -> Result<Sample> {
    let mut out = AugmentPlan::for_sample(seed, &s.id, draw).apply(s)?;
    out.image = normalize(&out.image);
    Ok(out)
}

/// Stacks samples into `(B, 3, H, W)` images and `(B, 1, H, W)` masks.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Sample indices for training step `step`: consecutive epochs of seeded
/// permutations, so a dataset smaller than the batch is reshuffled and repeated.
pub fn batch_indices(len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = start / len;
    let mut perm = permutation(len, seed, epoch as u64);
    let mut pos = start % len;
    while out.len() < batch {
        if pos == len {
            epoch += 1;
            perm = permutation(len, seed, epoch as u64);
            pos = 0;
        }
        out.push(perm[pos]);
        pos += 1;
    }
    out
}

fn permutation(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_matches_corner_grid() {
        assert_eq!(nearest_src(0, 5, 3), 0);
        assert_eq!(nearest_src(4, 5, 3), 2);
        assert_eq!(nearest_src(2, 5, 3), 1);
    }

    #[test]
    fn batch_indices_cover_epochs() {
        let mut seen = vec![0; 5];
        for step in 0..5 {
            for i in batch_indices(5, 2, 9, step) {
                seen[i] += 1;
            }
        }
        assert_eq!(seen, vec![2; 5]);
        assert_eq!(batch_indices(3, 8, 1, 0).len(), 8);
    }

    #[test]
    fn split_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.txt");
        std::fs::write(&p, "# comment\n[train]\na\nb\n\n[val]\nc\n").unwrap();
        let s = read_split(&p).unwrap();
        assert_eq!(s["train"], vec!["a", "b"]);
        assert_eq!(s["val"], vec!["c"]);
        std::fs::write(&p, "a\n").unwrap();
        assert!(read_split(&p).is_err());
    }
}
