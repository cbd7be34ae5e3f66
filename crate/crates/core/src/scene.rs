//! Synthetic long-tailed height scenes with a monocular shadow cue.
//!
//! Ground is low-frequency noise below half a meter, trees are dome-shaped
//! blobs with gamma-distributed peaks, buildings are axis-aligned rectangles
//! with Pareto roof heights (one constant value per instance). Every object
//! casts a shadow in the +x direction, half a pixel per meter of height,
//! darkening ground pixels — the cue that makes height readable from a
//! single image.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Pareto};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_GROUND: u16 = 0;
pub const CLASS_BUILDING: u16 = 1;
pub const CLASS_TREE: u16 = 2;

const ALBEDO: [[f64; 3]; 3] = [
    [0.35, 0.33, 0.30], // ground
    [0.62, 0.60, 0.58], // building
    [0.18, 0.42, 0.20], // tree
];
const SHADOW_FACTOR: f64 = 0.45;
const IMAGE_NOISE_SIGMA: f64 = 0.02;
/// Shadow extrusion: pixels of shadow per meter of object height.
pub const SHADOW_PX_PER_METER: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub size: usize,
    pub building_count: (usize, usize),
    pub tree_count: (usize, usize),
    pub h_max: f64,
    /// Additive image noise; zero gives clean scenes.
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            building_count: (2, 6),
            tree_count: (3, 10),
            h_max: 100.0,
            noise_sigma: IMAGE_NOISE_SIGMA,
        }
    }
}

/// One scene: reflectance image, ground-truth heights, semantic classes,
/// and building instance ids (0 = none).
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,       // [3, S, S], values in [0, 1]
    pub heights: Vec<f64>,   // S*S meters
    pub semantics: Vec<u16>, // S*S class ids
    pub instances: Vec<u16>, // S*S building ids
    pub size: usize,
}

impl Scene {
    pub fn pixel_count(&self) -> usize {
        self.size * self.size
    }
}

/// Smooth value noise in [0, 1]: a coarse random grid, bilinearly upsampled.
fn low_frequency_noise(size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let step = 16.min(size).max(2);
    let grid = size / step + 2;
    let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / step as f64;
            let fx = x as f64 / step as f64;
            let (gy, gx) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - gy as f64, fx - gx as f64);
            let v00 = coarse[gy * grid + gx];
            let v01 = coarse[gy * grid + gx + 1];
            let v10 = coarse[(gy + 1) * grid + gx];
            let v11 = coarse[(gy + 1) * grid + gx + 1];
            out[y * size + x] =
                v00 * (1.0 - ty) * (1.0 - tx) + v01 * (1.0 - ty) * tx + v10 * ty * (1.0 - tx) + v11 * ty * tx;
        }
    }
    out
}

struct Placer {
    occupied: Vec<bool>,
    size: usize,
}

impl Placer {
    fn new(size: usize) -> Self {
        Placer {
            occupied: vec![false; size * size],
            size,
        }
    }

    /// True when at most half of the candidate pixels are already taken.
    fn fits(&self, pixels: &[usize]) -> bool {
        let taken = pixels.iter().filter(|p| self.occupied[**p]).count();
        2 * taken <= pixels.len()
    }

    fn claim(&mut self, pixels: &[usize]) {
        for p in pixels {
            self.occupied[*p] = true;
        }
    }
}

pub fn generate_scene(rng: &mut impl Rng, config: &SceneConfig) -> Result<Scene> {
    let s = config.size;
    if s < 8 || s % 4 != 0 {
        return Err(Error::config(format!(
            "scene size {s} must be at least 8 and divide by 4"
        )));
    }
    let mut heights: Vec<f64> = low_frequency_noise(s, rng).iter().map(|v| 0.5 * v).collect();
    let mut semantics = vec![CLASS_GROUND; s * s];
    let mut instances = vec![0u16; s * s];
    let mut placer = Placer::new(s);

    // trees first; buildings may overwrite them later
    let tree_n = rng.random_range(config.tree_count.0..=config.tree_count.1);
    let gamma = Gamma::new(4.0, 2.0).expect("gamma params");
    let mut placed = 0;
    let mut attempts = 0;
    while placed < tree_n {
        attempts += 1;
        if attempts > 100 * tree_n.max(1) {
            return Err(Error::data(format!(
                "overcrowded scene config: placed {placed} of {tree_n} trees"
            )));
        }
        let radius = rng.random_range(2usize..=4) as isize;
        let cy = rng.random_range(radius as usize..s - radius as usize) as isize;
        let cx = rng.random_range(radius as usize..s - radius as usize) as isize;
        let peak = <Gamma<f64> as Distribution<f64>>::sample(&gamma, rng).clamp(2.0, 30.0);
        let mut pixels = Vec::new();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dy * dy + dx * dx <= radius * radius {
                    pixels.push(((cy + dy) * s as isize + cx + dx) as usize);
                }
            }
        }
        if !placer.fits(&pixels) {
            continue;
        }
        placer.claim(&pixels);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let d2 = (dy * dy + dx * dx) as f64;
                let r2 = (radius * radius) as f64;
                if d2 <= r2 {
                    let p = ((cy + dy) * s as isize + cx + dx) as usize;
                    let dome = peak * (1.0 - d2 / r2).sqrt();
                    if dome > heights[p] {
                        heights[p] = dome;
                        semantics[p] = CLASS_TREE;
                    }
                }
            }
        }
        placed += 1;
    }

    // buildings: non-overlapping rectangles, one constant roof height each
    let building_n = rng.random_range(config.building_count.0..=config.building_count.1);
    let pareto = Pareto::new(3.0, 1.5).expect("pareto params");
    let side_lo = (s / 10).max(4);
    let side_hi = (s / 4).max(side_lo + 1);
    let mut next_id: u16 = 1;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < building_n {
        attempts += 1;
        if attempts > 100 * building_n.max(1) {
            return Err(Error::data(format!(
                "overcrowded scene config: placed {placed} of {building_n} buildings"
            )));
        }
        let bw = rng.random_range(side_lo..=side_hi);
        let bh = rng.random_range(side_lo..=side_hi);
        let y0 = rng.random_range(0..s - bh);
        let x0 = rng.random_range(0..s - bw);
        let roof = <Pareto<f64> as Distribution<f64>>::sample(&pareto, rng).min(config.h_max);
        let mut pixels = Vec::with_capacity(bw * bh);
        let mut overlaps_building = false;
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let p = y * s + x;
                if instances[p] != 0 {
                    overlaps_building = true;
                }
                pixels.push(p);
            }
        }
        // footprints must stay whole rectangles, so buildings never overlap
        if overlaps_building || !placer.fits(&pixels) {
            continue;
        }
        placer.claim(&pixels);
        for p in pixels {
            heights[p] = roof;
            semantics[p] = CLASS_BUILDING;
            instances[p] = next_id;
        }
        next_id += 1;
        placed += 1;
    }

    // shadow map: objects darken ground pixels to their +x side
    let mut shadowed = vec![false; s * s];
    for y in 0..s {
        let mut shadow_until: isize = -1;
        for x in 0..s {
            let p = y * s + x;
            if semantics[p] == CLASS_GROUND {
                if (x as isize) <= shadow_until {
                    shadowed[p] = true;
                }
            } else {
                let reach = (heights[p] * SHADOW_PX_PER_METER).round() as isize;
                shadow_until = shadow_until.max(x as isize + reach);
            }
        }
    }

    // image: class albedo, shadow darkening, additive noise
    let noise = Normal::new(0.0, 1.0).expect("normal params");
    let mut image = vec![0.0; 3 * s * s];
    for p in 0..s * s {
        let albedo = ALBEDO[semantics[p] as usize];
        let factor = if shadowed[p] { SHADOW_FACTOR } else { 1.0 };
        for (c, a) in albedo.iter().enumerate() {
            let n: f64 = noise.sample(rng) * config.noise_sigma;
            image[c * s * s + p] = (a * factor + n).clamp(0.0, 1.0);
        }
    }

    Ok(Scene {
        image: Tensor::from_vec(&[3, s, s], image)?,
        heights,
        semantics,
        instances,
        size: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn empty_scene_stays_below_one_meter() {
        let config = SceneConfig {
            building_count: (0, 0),
            tree_count: (0, 0),
            ..SceneConfig::default()
        };
        let scene = generate_scene(&mut rng(1), &config).unwrap();
        let max = scene.heights.iter().cloned().fold(0.0, f64::max);
        assert!(max < 1.0, "max ground height {max}");
        assert!(scene.semantics.iter().all(|s| *s == CLASS_GROUND));
    }

    #[test]
    fn building_shadow_length_matches_extrusion_oracle() {
        let config = SceneConfig {
            building_count: (1, 1),
            tree_count: (0, 0),
            noise_sigma: 0.0,
            ..SceneConfig::default()
        };
        let mut checked = 0;
        for seed in 0..60 {
            let scene = generate_scene(&mut rng(seed), &config).unwrap();
            let s = scene.size;
            // bounding box of instance 1
            let (mut y0, mut y1, mut x1) = (s, 0, 0);
            for y in 0..s {
                for x in 0..s {
                    if scene.instances[y * s + x] == 1 {
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x1 = x1.max(x);
                    }
                }
            }
            let roof = scene
                .heights
                .iter()
                .zip(&scene.instances)
                .find(|(_, i)| **i == 1)
                .unwrap()
                .0;
            let expect = (roof * SHADOW_PX_PER_METER).round() as usize;
            if x1 + expect + 1 >= s || expect == 0 {
                continue; // shadow clipped by the frame
            }
            // read the shadow off the image: darkened ground pixels right of
            // the footprint at its vertical center row
            let y = (y0 + y1) / 2;
            let mut len = 0;
            for x in x1 + 1..s {
                let p = y * s + x;
                if scene.semantics[p] != CLASS_GROUND {
                    break;
                }
                if scene.image.data()[p] < ALBEDO[0][0] * 0.7 {
                    len += 1;
                } else {
                    break;
                }
            }
            assert_eq!(len, expect, "seed {seed}: roof {roof}");
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} scenes eligible");
    }

    #[test]
    fn generated_heights_are_long_tailed() {
        let config = SceneConfig::default();
        let mut all = Vec::new();
        let mut r = rng(7);
        for _ in 0..300 {
            let scene = generate_scene(&mut r, &config).unwrap();
            all.extend(scene.heights);
        }
        let mut sorted = all.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        let p999 = sorted[(sorted.len() as f64 * 0.999) as usize];
        let below_1m = sorted.partition_point(|h| *h < 1.0) as f64 / sorted.len() as f64;
        assert!(median < 1.0, "median {median}");
        assert!(p999 > 30.0, "99.9th percentile {p999}");
        assert!(below_1m > 0.5, "sub-1m share {below_1m}");

        // decaying tail over 10 m bins
        let bin = |lo: f64, hi: f64| all.iter().filter(|h| **h >= lo && **h < hi).count();
        let (b1, b2, b3) = (bin(10.0, 20.0), bin(20.0, 30.0), bin(30.0, 40.0));
        assert!(b1 > b2 && b2 > b3, "tail bins {b1} {b2} {b3}");
    }

    #[test]
    fn building_instances_have_constant_roofs_and_are_connected() {
        let mut r = rng(21);
        for _ in 0..50 {
            let scene = generate_scene(&mut r, &SceneConfig::default()).unwrap();
            let s = scene.size;
            let max_id = *scene.instances.iter().max().unwrap();
            for id in 1..=max_id {
                let pixels: Vec<usize> = (0..s * s).filter(|p| scene.instances[*p] == id).collect();
                assert!(!pixels.is_empty());
                let roof = scene.heights[pixels[0]];
                assert!(pixels.iter().all(|p| scene.heights[*p] == roof));
                assert!(roof >= 3.0 && roof <= 100.0);
                // 4-connectivity via flood fill from the first pixel
                let mut seen = vec![false; s * s];
                let mut stack = vec![pixels[0]];
                seen[pixels[0]] = true;
                let mut count = 0;
                while let Some(p) = stack.pop() {
                    count += 1;
                    let (y, x) = (p / s, p % s);
                    let mut push = |q: usize| {
                        if !seen[q] && scene.instances[q] == id {
                            seen[q] = true;
                            stack.push(q);
                        }
                    };
                    if y > 0 {
                        push(p - s);
                    }
                    if y + 1 < s {
                        push(p + s);
                    }
                    if x > 0 {
                        push(p - 1);
                    }
                    if x + 1 < s {
                        push(p + 1);
                    }
                }
                assert_eq!(count, pixels.len(), "instance {id} disconnected");
            }
        }
    }

    #[test]
    fn shadow_cue_predicts_building_height() {
        // least-squares fit of roof height against the measured shadow
        // length on clean single-building scenes
        let config = SceneConfig {
            building_count: (1, 1),
            tree_count: (0, 0),
            noise_sigma: 0.0,
            ..SceneConfig::default()
        };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for seed in 100..400 {
            let scene = generate_scene(&mut rng(seed), &config).unwrap();
            let s = scene.size;
            let (mut y0, mut y1, mut x1) = (s, 0, 0);
            for y in 0..s {
                for x in 0..s {
                    if scene.instances[y * s + x] == 1 {
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x1 = x1.max(x);
                    }
                }
            }
            let roof = *scene
                .heights
                .iter()
                .zip(&scene.instances)
                .find(|(_, i)| **i == 1)
                .unwrap()
                .0;
            let expect = (roof * SHADOW_PX_PER_METER).round() as usize;
            if x1 + expect + 1 >= s {
                continue;
            }
            let y = (y0 + y1) / 2;
            let mut len = 0;
            for x in x1 + 1..s {
                let p = y * s + x;
                if scene.semantics[p] != CLASS_GROUND || scene.image.data()[p] >= ALBEDO[0][0] * 0.7 {
                    break;
                }
                len += 1;
            }
            xs.push(len as f64);
            ys.push(roof);
            if xs.len() >= 100 {
                break;
            }
        }
        assert!(xs.len() >= 50);
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let r2 = sxy * sxy / (sxx * syy);
        assert!(r2 > 0.95, "R^2 = {r2}");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_scene(&mut rng(5), &SceneConfig::default()).unwrap();
        let b = generate_scene(&mut rng(5), &SceneConfig::default()).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.heights, b.heights);
        assert_eq!(a.semantics, b.semantics);
    }
}
