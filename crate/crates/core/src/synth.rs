//! Synthetic, domain-shifted identity benchmark.
//!
//! Each identity is a latent vector that fixes the colors and stripe texture
//! of five horizontal body bands. A domain applies its own color transform,
//! stripe frequency and noise level; each camera adds a brightness/contrast
//! perturbation. Identities never repeat across domains, and evaluation
//! identities are held out from training within a domain.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::graph::sigmoid;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const HEIGHT: usize = 40;
pub const WIDTH: usize = 16;
pub const LATENT_DIM: usize = 16;
pub const BANDS: usize = 5;
const BAND_ROWS: usize = HEIGHT / BANDS;
const APPEARANCE_SEED: u64 = 0x5EED_0F_A11_BA4D5;

/// A person: a global id, the latent that drives its appearance, and the
/// domain (task index, 1-based) it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub id: u64,
    pub latent: [f64; LATENT_DIM],
    pub domain: usize,
}

/// Appearance statistics of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// 1-based task index.
    pub index: usize,
    /// Row-major 3×3 color mixing matrix applied to every pixel.
    pub color_matrix: [f64; 9],
    pub color_offset: [f64; 3],
    /// Stripe cycles across the image width.
    pub texture_frequency: f64,
    pub noise_sigma: f64,
    pub camera_count: usize,
    /// Per-camera contrast around mid-gray.
    pub camera_gain: Vec<f64>,
    /// Per-camera additive brightness.
    pub camera_bias: Vec<f64>,
}

impl DomainSpec {
    pub fn determinant(&self) -> f64 {
        let m = &self.color_matrix;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
    }
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub identity: u64,
    pub camera: usize,
}

/// One domain's train/query/gallery splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub domain: DomainSpec,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl TaskDataset {
    pub fn index(&self) -> usize {
        self.domain.index
    }

    /// Distinct training identities in first-appearance order.
    pub fn train_identities(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = Vec::new();
        for s in &self.train {
            if !ids.contains(&s.identity) {
                ids.push(s.identity);
            }
        }
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub tasks: usize,
    pub ids_per_domain_train: usize,
    pub ids_per_domain_eval: usize,
    pub images_per_id: usize,
    pub camera_count: usize,
    pub noise_sigma: f64,
    /// Minimum separation of mean pixel value between any two domains.
    pub offset_gap: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            tasks: 4,
            ids_per_domain_train: 40,
            ids_per_domain_eval: 10,
            images_per_id: 16,
            camera_count: 4,
            noise_sigma: 0.04,
            offset_gap: 0.04,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks < 2 {
            bail!(Config, "tasks must be at least 2, got {}", self.tasks);
        }
        if self.ids_per_domain_eval < 5 {
            bail!(Config, "ids_per_domain_eval must be at least 5, got {}", self.ids_per_domain_eval);
        }
        if self.images_per_id < 4 {
            bail!(Config, "images_per_id must be at least 4, got {}", self.images_per_id);
        }
        if self.camera_count < 2 {
            bail!(Config, "camera_count must be at least 2 so every query has a cross-camera match");
        }
        if self.ids_per_domain_train < 2 {
            bail!(Config, "ids_per_domain_train must be at least 2");
        }
        if !(self.noise_sigma >= 0.0) || !(self.offset_gap >= 0.0) {
            bail!(Config, "noise_sigma and offset_gap must be non-negative");
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Fixed latent-to-appearance projection shared by every domain.
struct Appearance {
    color: [[[f64; LATENT_DIM]; CHANNELS]; BANDS],
    amplitude: [[f64; LATENT_DIM]; BANDS],
    phase: [[f64; LATENT_DIM]; BANDS],
}

impl Appearance {
    fn get() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(APPEARANCE_SEED);
        let scale = 1.0 / libm::sqrt(LATENT_DIM as f64);
        let mut color = [[[0.0; LATENT_DIM]; CHANNELS]; BANDS];
        let mut amplitude = [[0.0; LATENT_DIM]; BANDS];
        let mut phase = [[0.0; LATENT_DIM]; BANDS];
        for b in 0..BANDS {
            for c in color[b].iter_mut() {
                c.iter_mut().for_each(|v| *v = 1.6 * scale * normal(&mut rng));
            }
            amplitude[b].iter_mut().for_each(|v| *v = scale * normal(&mut rng));
            phase[b].iter_mut().for_each(|v| *v = scale * normal(&mut rng));
        }
        Self { color, amplitude, phase }
    }
}

fn dot(a: &[f64; LATENT_DIM], b: &[f64; LATENT_DIM]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Renders one `3×40×16` image with values in `[0, 1]`.
///
/// The result is a pure function of the arguments.
pub fn render_image(identity: &Identity, domain: &DomainSpec, camera: usize, instance_seed: u64) -> Result<Tensor> {
    if camera >= domain.camera_count {
        bail!(Config, "camera {} out of range for {} cameras", camera, domain.camera_count);
    }
    let app = Appearance::get();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(instance_seed, camera as u64));
    // Per-instance nuisance: vertical shift of the band layout, horizontal
    // stripe phase and a small color drift per band.
    let shift = rng.random_range(-1i64..=1) as isize;
    let phase_jitter = rng.random_range(0.0..core::f64::consts::TAU);
    let mut band_color = [[0.0; CHANNELS]; BANDS];
    let mut band_amp = [0.0; BANDS];
    let mut band_phase = [0.0; BANDS];
    for b in 0..BANDS {
        for c in 0..CHANNELS {
            band_color[b][c] = sigmoid(dot(&app.color[b][c], &identity.latent)) + 0.04 * normal(&mut rng);
        }
        band_amp[b] = 0.3 * sigmoid(dot(&app.amplitude[b], &identity.latent));
        band_phase[b] = core::f64::consts::PI * dot(&app.phase[b], &identity.latent) + phase_jitter;
    }
    let m = &domain.color_matrix;
    let gain = domain.camera_gain[camera];
    let bias = domain.camera_bias[camera];
    let mut data = vec![0.0; CHANNELS * HEIGHT * WIDTH];
    for y in 0..HEIGHT {
        let band = ((y as isize - shift).clamp(0, HEIGHT as isize - 1) as usize / BAND_ROWS).min(BANDS - 1);
        for x in 0..WIDTH {
            let wave = libm::cos(
                core::f64::consts::TAU * domain.texture_frequency * x as f64 / WIDTH as f64 + band_phase[band],
            );
            let shade = 1.0 - band_amp[band] + band_amp[band] * wave;
            let base = [band_color[band][0] * shade, band_color[band][1] * shade, band_color[band][2] * shade];
            for c in 0..CHANNELS {
                let mixed = m[c * 3] * base[0] + m[c * 3 + 1] * base[1] + m[c * 3 + 2] * base[2] + domain.color_offset[c];
                let cam = gain * (mixed - 0.5) + 0.5 + bias;
                let noisy = cam + domain.noise_sigma * normal(&mut rng);
                data[(c * HEIGHT + y) * WIDTH + x] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[CHANNELS, HEIGHT, WIDTH], data)
}

fn gen_domain(cfg: &BenchmarkConfig, index: usize, seed: u64) -> DomainSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD0_0000 + index as u64));
    // Mixing matrix (1-a)·I + a·Q with Q a convex combination of two
    // permutations: doubly stochastic, so mean intensity is preserved, and
    // every eigenvalue has modulus at least 1 - 2a.
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let matrix = loop {
        let a = rng.random_range(0.15..0.3);
        let w = rng.random_range(0.0..1.0);
        let p1 = PERMS[rng.random_range(1..6)];
        let p2 = PERMS[rng.random_range(1..6)];
        let mut m = [0.0; 9];
        for r in 0..3 {
            m[r * 3 + r] += 1.0 - a;
            m[r * 3 + p1[r]] += a * w;
            m[r * 3 + p2[r]] += a * (1.0 - w);
        }
        let spec = DomainSpec {
            index,
            color_matrix: m,
            color_offset: [0.0; 3],
            texture_frequency: 0.0,
            noise_sigma: 0.0,
            camera_count: 0,
            camera_gain: Vec::new(),
            camera_bias: Vec::new(),
        };
        if spec.determinant().abs() > 0.1 {
            break m;
        }
    };
    // Mean offsets are spaced two gaps apart, centered on zero; a zero-sum
    // tint on top keeps the per-domain mean where it was placed. Clipping and
    // camera contrast eat into the spacing, hence the headroom.
    let center = (cfg.tasks as f64 - 1.0) / 2.0;
    let level = 2.0 * cfg.offset_gap * (index as f64 - 1.0 - center);
    let tint: [f64; 3] = core::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let tint_mean = (tint[0] + tint[1] + tint[2]) / 3.0;
    let color_offset = core::array::from_fn(|c| level + tint[c] - tint_mean);
    let cams = cfg.camera_count;
    // Contrast levels evenly spaced around 1, in a domain-specific order.
    let mut camera_gain: Vec<f64> =
        (0..cams).map(|c| 0.8 + 0.4 * c as f64 / (cams as f64 - 1.0).max(1.0)).collect();
    for i in (1..cams).rev() {
        camera_gain.swap(i, rng.random_range(0..=i));
    }
    // Evenly spaced, zero-mean brightness offsets.
    let camera_bias = (0..cams)
        .map(|c| 0.12 * (c as f64 - (cams as f64 - 1.0) / 2.0) / (cams as f64 - 1.0).max(1.0))
        .collect();
    DomainSpec {
        index,
        color_matrix: matrix,
        color_offset,
        texture_frequency: 1.0 + ((index - 1) % 4) as f64,
        noise_sigma: cfg.noise_sigma,
        camera_count: cams,
        camera_gain,
        camera_bias,
    }
}

/// Generates `cfg.tasks` domains with globally disjoint identities.
///
/// Within a domain the first `ids_per_domain_train` identities form the
/// training split. Each held-out identity contributes its first two images
/// (different cameras) to the query split and the rest to the gallery.
pub fn gen_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<Vec<TaskDataset>> {
    cfg.validate()?;
    let per_domain = (cfg.ids_per_domain_train + cfg.ids_per_domain_eval) as u64;
    let mut out = Vec::with_capacity(cfg.tasks);
    for t in 1..=cfg.tasks {
        let domain = gen_domain(cfg, t, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1D_0000 + t as u64));
        let mut ds = TaskDataset { domain, train: Vec::new(), query: Vec::new(), gallery: Vec::new() };
        for j in 0..per_domain {
            let id = (t as u64 - 1) * per_domain + j;
            let identity = Identity { id, latent: core::array::from_fn(|_| normal(&mut rng)), domain: t };
            for k in 0..cfg.images_per_id {
                let camera = (k + id as usize) % cfg.camera_count;
                let image = render_image(&identity, &ds.domain, camera, mix_seed(seed, id * 1_000 + k as u64))?;
                let sample = Sample { image, identity: id, camera };
                if (j as usize) < cfg.ids_per_domain_train {
                    ds.train.push(sample);
                } else if k < 2 {
                    ds.query.push(sample);
                } else {
                    ds.gallery.push(sample);
                }
            }
        }
        out.push(ds);
    }
    Ok(out)
}

/// Mean over all pixels of all images in a domain.
pub fn mean_pixel(ds: &TaskDataset) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in ds.train.iter().chain(&ds.query).chain(&ds.gallery) {
        sum += s.image.data().iter().fold(0.0, |a, v| a + v);
        n += s.image.len();
    }
    sum / n as f64
}
