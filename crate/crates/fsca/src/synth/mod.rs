//! Synthetic multi-domain crowd scenes.
//!
//! Each domain is a bundle of nuisance parameters (background texture,
//! illumination, noise, head blob scale) plus a crowd-count range. Scenes are
//! pure functions of (domain spec, seed); ground truth is a
//! truncated-renormalized Gaussian density map whose mass equals the point
//! count exactly.

pub mod io;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{GradTensor, Real};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SIZE: usize = 64;
/// Peak intensity added by one rendered head blob.
const HEAD_AMPLITUDE: f64 = 0.6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BgTexture {
    /// Cycles across the image.
    pub frequency: f64,
    /// Orientation of the sinusoid, radians.
    pub orientation: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Illumination {
    pub gain: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    pub domain_id: u32,
    /// Heads per scene, inclusive.
    pub count_range: [u32; 2],
    /// Rendered blob scale range, px.
    pub head_sigma_range: [f64; 2],
    pub bg_texture: BgTexture,
    pub illumination: Illumination,
    pub noise_std: f64,
}

impl DomainSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.count_range[0] > self.count_range[1] {
            return Err(Error::Config(format!(
                "domain {}: count range {:?} has min > max",
                self.domain_id, self.count_range
            )));
        }
        if self.head_sigma_range[0] > self.head_sigma_range[1]
            || self.head_sigma_range[0] <= 0.0
        {
            return Err(Error::Config(format!(
                "domain {}: bad head sigma range {:?}",
                self.domain_id, self.head_sigma_range
            )));
        }
        if self.bg_texture.amplitude < 0.0 || self.illumination.gain < 0.0 || self.noise_std < 0.0
        {
            return Err(Error::Config(format!(
                "domain {}: amplitude, gain, noise_std must be nonnegative",
                self.domain_id
            )));
        }
        if self.count_range[1] as usize > height * width {
            return Err(Error::Config(format!(
                "domain {}: max count {} exceeds pixel count {}",
                self.domain_id,
                self.count_range[1],
                height * width
            )));
        }
        Ok(())
    }
}

/// One training/eval sample: image grid, point annotations, provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in [0,1].
    pub image: Vec<f32>,
    /// Sub-pixel (x, y) head positions.
    pub points: Vec<(f64, f64)>,
    pub domain_id: u32,
    pub seed: u64,
}

impl Scene {
    pub fn image_tensor<F: Real>(&self) -> GradTensor<F> {
        let data: Vec<f64> = self.image.iter().map(|&v| v as f64).collect();
        GradTensor::from_f64_slice(vec![1, self.height, self.width], &data, false)
            .expect("scene image shape")
    }
}

/// Nonnegative per-cell person density; sums to the point count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub grid: Vec<f64>,
}

impl DensityMap {
    pub fn total(&self) -> f64 {
        self.grid.iter().sum()
    }

    pub fn to_tensor<F: Real>(&self) -> GradTensor<F> {
        GradTensor::from_f64_slice(vec![1, self.height, self.width], &self.grid, false)
            .expect("density shape")
    }
}

/// Generate one scene deterministically from (spec, seed) at the default
/// 64x64 geometry.
pub fn gen_scene(spec: &DomainSpec, seed: u64) -> Result<Scene> {
    gen_scene_sized(spec, seed, DEFAULT_SIZE, DEFAULT_SIZE)
}

pub fn gen_scene_sized(
    spec: &DomainSpec,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<Scene> {
    spec.validate(height, width)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let count = if spec.count_range[0] == spec.count_range[1] {
        spec.count_range[0]
    } else {
        rng.gen_range(spec.count_range[0]..=spec.count_range[1])
    };
    let mut points = Vec::with_capacity(count as usize);
    let mut sigmas = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let x: f64 = rng.gen_range(0.0..width as f64);
        let y: f64 = rng.gen_range(0.0..height as f64);
        let s = if spec.head_sigma_range[0] == spec.head_sigma_range[1] {
            spec.head_sigma_range[0]
        } else {
            rng.gen_range(spec.head_sigma_range[0]..spec.head_sigma_range[1])
        };
        points.push((x, y));
        sigmas.push(s);
    }

    let (sin_o, cos_o) = spec.bg_texture.orientation.sin_cos();
    let two_pi_f = 2.0 * std::f64::consts::PI * spec.bg_texture.frequency;
    let mut image = vec![0.0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            let texture = spec.bg_texture.amplitude * (two_pi_f * (u * cos_o + v * sin_o)).sin();
            let noise = spec.noise_std * rng::normal(&mut rng);
            let mut val = texture * spec.illumination.gain + spec.illumination.offset + noise;
            for (&(px, py), &s) in points.iter().zip(sigmas.iter()) {
                let dx = x as f64 + 0.5 - px;
                let dy = y as f64 + 0.5 - py;
                let d2 = dx * dx + dy * dy;
                if d2 <= 16.0 * s * s {
                    val += HEAD_AMPLITUDE * (-d2 / (2.0 * s * s)).exp();
                }
            }
            image[y * width + x] = val.clamp(0.0, 1.0) as f32;
        }
    }

    Ok(Scene {
        height,
        width,
        image,
        points,
        domain_id: spec.domain_id,
        seed,
    })
}

/// Ground-truth density: one Gaussian kernel per point, truncated at four
/// sigma and renormalized to unit mass after truncation and border clipping.
pub fn render_density_gt(
    points: &[(f64, f64)],
    sigma: f64,
    shape: (usize, usize),
) -> Result<DensityMap> {
    let (height, width) = shape;
    if sigma <= 0.0 {
        return Err(Error::Input(format!("density sigma must be positive, got {sigma}")));
    }
    let mut grid = vec![0.0f64; height * width];
    let radius = 4.0 * sigma;
    for &(px, py) in points {
        if !(0.0..width as f64).contains(&px) || !(0.0..height as f64).contains(&py) {
            return Err(Error::Input(format!(
                "point ({px}, {py}) outside {width}x{height} image"
            )));
        }
        // cells whose centers fall inside the truncation box, always
        // including the cell that contains the point
        let cx = (px.floor() as usize).min(width - 1);
        let cy = (py.floor() as usize).min(height - 1);
        let x_lo = ((px - radius - 0.5).ceil().max(0.0) as usize).min(cx);
        let x_hi = ((px + radius - 0.5).floor().min((width - 1) as f64) as usize).max(cx);
        let y_lo = ((py - radius - 0.5).ceil().max(0.0) as usize).min(cy);
        let y_hi = ((py + radius - 0.5).floor().min((height - 1) as f64) as usize).max(cy);

        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut weights = Vec::with_capacity((y_hi - y_lo + 1) * (x_hi - x_lo + 1));
        let mut mass = 0.0;
        for y in y_lo..=y_hi {
            let dy = y as f64 + 0.5 - py;
            for x in x_lo..=x_hi {
                let dx = x as f64 + 0.5 - px;
                let w = (-(dx * dx + dy * dy) * inv).exp();
                weights.push(w);
                mass += w;
            }
        }
        let mut k = 0;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                grid[y * width + x] += weights[k] / mass;
                k += 1;
            }
        }
    }
    Ok(DensityMap {
        height,
        width,
        grid,
    })
}

/// Derive the per-sample generation seed for a domain's split.
pub fn sample_seed(base_seed: u64, domain_id: u32, split: &str, index: usize) -> u64 {
    rng::mix_seed(&[
        base_seed,
        domain_id as u64,
        crate::tensor::gradcheck::fnv(split),
        index as u64,
    ])
}

/// All scenes of one domain, split for training and evaluation.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn generate_domain(
    spec: &DomainSpec,
    base_seed: u64,
    n_train: usize,
    n_test: usize,
    height: usize,
    width: usize,
) -> Result<DomainData> {
    let mut train = Vec::with_capacity(n_train);
    for i in 0..n_train {
        train.push(gen_scene_sized(
            spec,
            sample_seed(base_seed, spec.domain_id, "train", i),
            height,
            width,
        )?);
    }
    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_test {
        test.push(gen_scene_sized(
            spec,
            sample_seed(base_seed, spec.domain_id, "test", i),
            height,
            width,
        )?);
    }
    Ok(DomainData {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Built-in domain roster: distinct textures, illumination, noise, and blob
/// scales, with overlapping count ranges so appearance rather than raw count
/// separates the domains.
pub fn default_domains(n: usize) -> Result<Vec<DomainSpec>> {
    let roster = vec![
        DomainSpec {
            domain_id: 0,
            count_range: [5, 22],
            head_sigma_range: [1.0, 1.8],
            bg_texture: BgTexture {
                frequency: 9.0,
                orientation: 0.45,
                amplitude: 0.28,
            },
            illumination: Illumination {
                gain: 0.55,
                offset: 0.16,
            },
            noise_std: 0.02,
        },
        DomainSpec {
            domain_id: 1,
            count_range: [14, 40],
            head_sigma_range: [2.2, 3.6],
            bg_texture: BgTexture {
                frequency: 2.5,
                orientation: 2.1,
                amplitude: 0.35,
            },
            illumination: Illumination {
                gain: 1.0,
                offset: 0.45,
            },
            noise_std: 0.06,
        },
        DomainSpec {
            domain_id: 2,
            count_range: [8, 30],
            head_sigma_range: [1.4, 2.6],
            bg_texture: BgTexture {
                frequency: 5.0,
                orientation: 1.2,
                amplitude: 0.2,
            },
            illumination: Illumination {
                gain: 0.8,
                offset: 0.3,
            },
            noise_std: 0.04,
        },
    ];
    if n == 0 || n > roster.len() {
        return Err(Error::Config(format!(
            "requested {n} default domains, available 1..={}",
            roster.len()
        )));
    }
    Ok(roster.into_iter().take(n).collect())
}
