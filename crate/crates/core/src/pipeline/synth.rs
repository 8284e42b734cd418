//! Procedural clips standing in for backbone and optical-flow features.
//!
//! A scene is one disc moving at constant velocity over a faint static
//! sinusoidal background. Per pixel we compute intensity and edge
//! statistics (appearance) and the true displacement field plus temporal
//! difference (motion), average-pool them to each stage stride, and project
//! the pooled statistics to the stage width with a fixed random matrix.

use crate::blocks::FeatureMap;
use crate::numerics::{ops, DenseArray, Rng};

use super::config::STAGES;
use super::model::StageStack;
use super::PipelineError;

const APPEARANCE_STATS: usize = 6;
const MOTION_STATS: usize = 4;
const PROJECTION_SEED: u64 = 0x1505_0f05;
const BACKGROUND_AMPLITUDE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Disc {
    /// Centre at frame 0, in pixels.
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Pixels per frame.
    pub vx: f64,
    pub vy: f64,
    pub intensity: f64,
}

impl Disc {
    pub fn centre(&self, t: usize) -> (f64, f64) {
        (self.cx + self.vx * t as f64, self.cy + self.vy * t as f64)
    }

    /// Pixel `(x, y)` is covered when its centre lies inside the disc.
    pub fn covers(&self, t: usize, x: usize, y: usize) -> bool {
        let (cx, cy) = self.centre(t);
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub resolution: usize,
    pub frames: usize,
    pub disc: Disc,
    pub phase: (f64, f64),
    pub freq: (f64, f64),
}

impl Scene {
    /// Random scene whose disc stays fully inside the frame for all frames.
    pub fn random(seed: u64, resolution: usize, frames: usize) -> Result<Self, PipelineError> {
        if resolution == 0 || resolution % 32 != 0 {
            return Err(PipelineError::Config(format!(
                "clip resolution {resolution} is not a positive multiple of 32"
            )));
        }
        if frames == 0 {
            return Err(PipelineError::Config("a clip needs at least one frame".into()));
        }
        let mut rng = Rng::new(seed);
        let res = resolution as f64;
        let radius = rng.uniform_range(res / 8.0, res / 5.0);
        let vmax = res / 32.0;
        let vx = rng.uniform_range(-vmax, vmax);
        let vy = rng.uniform_range(-vmax, vmax);
        let span = (frames - 1) as f64;
        let pick = |rng: &mut Rng, v: f64| {
            let lo = radius + 1.0 + (-v * span).max(0.0);
            let hi = res - radius - 1.0 - (v * span).max(0.0);
            if hi > lo {
                rng.uniform_range(lo, hi)
            } else {
                res / 2.0
            }
        };
        let cx = pick(&mut rng, vx);
        let cy = pick(&mut rng, vy);
        let intensity = rng.uniform_range(0.8, 1.0);
        let phase = (rng.uniform_range(0.0, 6.28), rng.uniform_range(0.0, 6.28));
        let freq = (rng.uniform_range(0.1, 0.4), rng.uniform_range(0.1, 0.4));
        Ok(Self {
            resolution,
            frames,
            disc: Disc { cx, cy, radius, vx, vy, intensity },
            phase,
            freq,
        })
    }

    pub fn background(&self, x: usize, y: usize) -> f64 {
        BACKGROUND_AMPLITUDE
            * (self.freq.0 * x as f64 + self.phase.0).sin()
            * (self.freq.1 * y as f64 + self.phase.1).cos()
    }

    pub fn mask(&self, t: usize) -> DenseArray {
        let r = self.resolution;
        let mut m = DenseArray::zeros(&[r, r]);
        for y in 0..r {
            for x in 0..r {
                if self.disc.covers(t, x, y) {
                    m.data_mut()[y * r + x] = 1.0;
                }
            }
        }
        m
    }

    pub fn image(&self, t: usize) -> Vec<f64> {
        let r = self.resolution;
        let mut img = vec![0.0; r * r];
        for y in 0..r {
            for x in 0..r {
                let fg = if self.disc.covers(t, x, y) { self.disc.intensity } else { 0.0 };
                img[y * r + x] = self.background(x, y) + fg;
            }
        }
        img
    }
}

/// Per-pixel statistic planes, each `r × r`.
fn appearance_planes(img: &[f64], r: usize) -> Vec<Vec<f64>> {
    let mut planes = vec![vec![0.0; r * r]; APPEARANCE_STATS];
    for y in 0..r {
        for x in 0..r {
            let i = y * r + x;
            let v = img[i];
            let gx = if x + 1 < r { img[i + 1] - v } else { 0.0 };
            let gy = if y + 1 < r { img[i + r] - v } else { 0.0 };
            planes[0][i] = v;
            planes[1][i] = gx;
            planes[2][i] = gy;
            planes[3][i] = (gx * gx + gy * gy).sqrt();
            planes[4][i] = v * v;
            planes[5][i] = 1.0;
        }
    }
    planes
}

/// `diff` is the temporal difference image, absent for single-frame clips.
fn motion_planes(scene: &Scene, t: usize, diff: Option<&[f64]>) -> Vec<Vec<f64>> {
    let r = scene.resolution;
    let mut planes = vec![vec![0.0; r * r]; MOTION_STATS];
    for y in 0..r {
        for x in 0..r {
            let i = y * r + x;
            if scene.disc.covers(t, x, y) {
                planes[0][i] = scene.disc.vx;
                planes[1][i] = scene.disc.vy;
            }
            let d = diff.map_or(0.0, |d| d[i]);
            planes[2][i] = d;
            planes[3][i] = d.abs();
        }
    }
    planes
}

/// Average-pools every plane to `side × side` and returns `side² × planes`.
fn pool(planes: &[Vec<f64>], r: usize, side: usize) -> DenseArray {
    let s = r / side;
    let mut out = DenseArray::zeros(&[side * side, planes.len()]);
    let inv = 1.0 / (s * s) as f64;
    for (k, plane) in planes.iter().enumerate() {
        for by in 0..side {
            for bx in 0..side {
                let mut acc = 0.0;
                for y in by * s..(by + 1) * s {
                    for x in bx * s..(bx + 1) * s {
                        acc += plane[y * r + x];
                    }
                }
                out.data_mut()[(by * side + bx) * planes.len() + k] = acc * inv;
            }
        }
    }
    out
}

/// Replaces the pooled mean of squares (column 4) by the block variance.
fn to_variance(stats: &mut DenseArray) {
    let c = stats.cols();
    for row in stats.data_mut().chunks_mut(c) {
        row[4] = (row[4] - row[0] * row[0]).max(0.0);
    }
}

fn projections(stats: usize, channels: &[usize; STAGES], salt: u64) -> Vec<DenseArray> {
    let root = Rng::new(PROJECTION_SEED).fork(salt);
    (0..STAGES)
        .map(|s| {
            let mut rng = root.fork(s as u64);
            DenseArray::uniform(&[stats, channels[s]], -1.0, 1.0, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub appearance: StageStack,
    pub motion: StageStack,
    /// Full-resolution footprint, `r × r`.
    pub mask: DenseArray,
    /// Footprint at stage-1 resolution, `1 × H₁ × W₁`: a cell is
    /// foreground when at least half of its pixels are.
    pub target: DenseArray,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub scene: Scene,
    pub frames: Vec<Frame>,
}

/// Renders a scene into per-frame stage stacks.
pub fn render(scene: &Scene, channels: &[usize; STAGES]) -> Result<Clip, PipelineError> {
    let r = scene.resolution;
    let sides: Vec<usize> = (0..STAGES).map(|s| r / (4 << s)).collect();
    let app_proj = projections(APPEARANCE_STATS, channels, 1);
    let mot_proj = projections(MOTION_STATS, channels, 2);
    let images: Vec<Vec<f64>> = (0..scene.frames).map(|t| scene.image(t)).collect();
    let mut frames = Vec::with_capacity(scene.frames);
    for t in 0..scene.frames {
        let img = &images[t];
        // backward difference, forward difference on the first frame
        let diff: Option<Vec<f64>> = match (t, scene.frames) {
            (_, 1) => None,
            (0, _) => Some(images[1].iter().zip(img).map(|(a, b)| a - b).collect()),
            _ => Some(img.iter().zip(&images[t - 1]).map(|(a, b)| a - b).collect()),
        };
        let app_planes = appearance_planes(img, r);
        let mot = motion_planes(scene, t, diff.as_deref());
        let mut app_stack = Vec::with_capacity(STAGES);
        let mut mot_stack = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let mut a = pool(&app_planes, r, sides[s]);
            to_variance(&mut a);
            let m = pool(&mot, r, sides[s]);
            let fa = ops::matmul(&a, &app_proj[s])?;
            let fm = ops::matmul(&m, &mot_proj[s])?;
            app_stack.push(FeatureMap::from_tokens(&fa, sides[s], sides[s])?);
            mot_stack.push(FeatureMap::from_tokens(&fm, sides[s], sides[s])?);
        }
        let mask = scene.mask(t);
        let mask_planes = vec![mask.data().to_vec()];
        let pooled = pool(&mask_planes, r, sides[0]);
        let target_data = pooled.data().iter().map(|&f| if f >= 0.5 { 1.0 } else { 0.0 }).collect();
        let target = DenseArray::new(vec![1, sides[0], sides[0]], target_data)?;
        frames.push(Frame {
            appearance: StageStack::new(app_stack)?,
            motion: StageStack::new(mot_stack)?,
            mask,
            target,
        });
    }
    Ok(Clip {
        scene: scene.clone(),
        frames,
    })
}

/// Random moving-disc clip.
pub fn synth_clip(
    seed: u64,
    resolution: usize,
    frames: usize,
    channels: &[usize; STAGES],
) -> Result<Clip, PipelineError> {
    render(&Scene::random(seed, resolution, frames)?, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CH: [usize; 4] = [4, 4, 8, 8];

    #[test]
    fn static_scene_has_zero_motion() {
        let mut scene = Scene::random(3, 64, 3).unwrap();
        scene.disc.vx = 0.0;
        scene.disc.vy = 0.0;
        let clip = render(&scene, &CH).unwrap();
        for f in &clip.frames {
            for s in &f.motion.stages {
                assert!(s.data().data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn same_seed_same_clip() {
        let a = synth_clip(9, 64, 2, &CH).unwrap();
        let b = synth_clip(9, 64, 2, &CH).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (x, y) in fa.appearance.stages.iter().zip(&fb.appearance.stages) {
                assert!(x.data().bit_eq(y.data()));
            }
            assert!(fa.target.bit_eq(&fb.target));
        }
    }

    #[test]
    fn mask_area_matches_disc_area() {
        for seed in 0..20 {
            let scene = Scene::random(seed, 96, 3).unwrap();
            let r = scene.disc.radius;
            for t in 0..3 {
                let count = scene.mask(t).data().iter().sum::<f64>();
                let area = std::f64::consts::PI * r * r;
                // misclassified pixel centres lie within √2/2 of the circle
                let bound = 2.0 * std::f64::consts::SQRT_2 * std::f64::consts::PI * r;
                assert!((count - area).abs() <= bound, "seed {seed}: {count} vs {area}");
            }
        }
    }

    #[test]
    fn disc_stays_inside() {
        for seed in 0..50 {
            let s = Scene::random(seed, 64, 4).unwrap();
            for t in 0..4 {
                let (cx, cy) = s.disc.centre(t);
                let r = s.disc.radius;
                assert!(cx - r >= 0.0 && cx + r <= 64.0 && cy - r >= 0.0 && cy + r <= 64.0);
            }
        }
    }

    #[test]
    fn stage_shapes() {
        let clip = synth_clip(1, 64, 1, &CH).unwrap();
        let f = &clip.frames[0];
        let sides: Vec<usize> = f.appearance.stages.iter().map(|s| s.height()).collect();
        assert_eq!(sides, vec![16, 8, 4, 2]);
        assert_eq!(f.target.shape(), &[1, 16, 16]);
        assert!(synth_clip(1, 48, 1, &CH).is_err());
    }
}
