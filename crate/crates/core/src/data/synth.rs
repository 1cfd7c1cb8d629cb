//! Synthetic pedestrian-like identities.
//!
//! Each identity is a figure on a background: head, upper body (optionally
//! striped, optionally with a patch) and two legs. Clothing colours come from
//! a small shared palette, so identities are told apart by colour shade,
//! layout and a faint per-identity block texture rather than by colour alone.
//! Cameras apply a per-channel gain and their own background; every image
//! adds a random shift, a global colour offset and pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{market_file_name, Dataset, ImageRecord, ImageShape, Split};
use crate::error::{Error, Result};

/// Smallest side that leaves room for the figure.
const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Std-dev of a per-image, per-channel colour offset (pixel levels).
    pub color_sigma: f32,
    /// Maximum translation in pixels along each axis.
    pub shift_max: u32,
    /// Std-dev of independent per-pixel noise (pixel levels).
    pub noise_sigma: f32,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            color_sigma: 8.0,
            shift_max: 1,
            noise_sigma: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_train_ids: u32,
    pub num_test_ids: u32,
    pub images_per_id_per_camera: u32,
    pub num_cameras: u32,
    pub image_size: ImageShape,
    pub jitter: Jitter,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_train_ids: 64,
            num_test_ids: 32,
            images_per_id_per_camera: 4,
            num_cameras: 2,
            image_size: ImageShape::new(32, 16, 3),
            jitter: Jitter::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.image_size.validate()?;
        if self.image_size.height < MIN_SIDE || self.image_size.width < MIN_SIDE {
            return Err(Error::Config(format!(
                "synthetic images must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                self.image_size.height, self.image_size.width
            )));
        }
        if self.num_train_ids == 0 || self.num_test_ids == 0 {
            return Err(Error::Config("identity counts must be positive".into()));
        }
        if self.images_per_id_per_camera == 0 {
            return Err(Error::Config(
                "images_per_id_per_camera must be positive".into(),
            ));
        }
        if self.num_cameras < 2 {
            return Err(Error::Config(format!(
                "need at least 2 cameras, got {}",
                self.num_cameras
            )));
        }
        let j = &self.jitter;
        if !(j.color_sigma >= 0.0
            && j.noise_sigma >= 0.0
            && j.color_sigma.is_finite()
            && j.noise_sigma.is_finite())
        {
            return Err(Error::Config(
                "jitter sigmas must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

type Rgb = [f32; 3];

struct Appearance {
    head: Rgb,
    upper: Rgb,
    stripe: Option<Rgb>,
    patch: Option<(Rgb, f32, f32)>,
    lower: Rgb,
    /// Half width of the figure as a fraction of the image width.
    half_width: f32,
    /// Fraction of the height where the upper body ends.
    waist: f32,
    /// Per-cell colour offsets on a coarse grid over the figure.
    pattern: Vec<Rgb>,
}

struct Camera {
    gain: Rgb,
    background: Rgb,
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}

/// Clothing colours shared by many identities, like real pedestrians.
const PALETTE: [Rgb; 6] = [
    [40.0, 40.0, 45.0],
    [220.0, 220.0, 215.0],
    [50.0, 70.0, 140.0],
    [150.0, 40.0, 40.0],
    [120.0, 120.0, 120.0],
    [60.0, 110.0, 60.0],
];
/// Per-identity deviation from the palette colour, per channel.
const PALETTE_SPREAD: f32 = 25.0;
/// Amplitude of the per-identity block texture.
const TEXTURE_AMPLITUDE: f32 = 12.0;
/// Side of one texture block in pixels.
const CELL: i64 = 2;

fn palette_color(rng: &mut impl Rng) -> Rgb {
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    std::array::from_fn(|i| base[i] + rng.random_range(-PALETTE_SPREAD..=PALETTE_SPREAD))
}

fn appearance(seed: u64, identity: u32, cells: usize) -> Appearance {
    let mut rng = rng_for(seed, 1, u64::from(identity));
    let pattern = (0..cells)
        .map(|_| std::array::from_fn(|_| rng.random_range(-TEXTURE_AMPLITUDE..=TEXTURE_AMPLITUDE)))
        .collect();
    let skin_tone = rng.random_range(0.0..1.0f32);
    Appearance {
        head: [
            150.0 + 80.0 * skin_tone,
            110.0 + 70.0 * skin_tone,
            80.0 + 60.0 * skin_tone,
        ],
        upper: palette_color(&mut rng),
        stripe: rng.random_bool(0.5).then(|| palette_color(&mut rng)),
        patch: rng.random_bool(0.5).then(|| {
            (
                palette_color(&mut rng),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            )
        }),
        lower: palette_color(&mut rng),
        pattern,
        half_width: rng.random_range(0.28..0.42),
        waist: rng.random_range(0.48..0.62),
    }
}

fn camera(seed: u64, index: u32) -> Camera {
    let mut rng = rng_for(seed, 2, u64::from(index));
    let mut gain = [0.0; 3];
    for g in &mut gain {
        *g = rng.random_range(0.85..1.15);
    }
    let mut background = [0.0; 3];
    let base = rng.random_range(60.0..190.0f32);
    for b in &mut background {
        *b = base + rng.random_range(-25.0..25.0);
    }
    Camera { gain, background }
}

fn render(
    shape: ImageShape,
    look: &Appearance,
    cam: &Camera,
    jitter: &Jitter,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let (h, w) = (shape.height as i64, shape.width as i64);
    let shift = i64::from(jitter.shift_max);
    let dx = rng.random_range(-shift..=shift);
    let dy = rng.random_range(-shift..=shift);
    let color_noise = Normal::new(0.0, f64::from(jitter.color_sigma)).expect("finite sigma");
    let pixel_noise = Normal::new(0.0, f64::from(jitter.noise_sigma)).expect("finite sigma");
    let offset: Rgb = std::array::from_fn(|_| color_noise.sample(rng) as f32);

    let hf = h as f32;
    let wf = w as f32;
    let half = (look.half_width * wf).round().max(1.0) as i64;
    let cx = w / 2;
    let top = (0.06 * hf).round() as i64;
    let neck = (0.22 * hf).round() as i64;
    let waist = (look.waist * hf).round() as i64;
    let bottom = h - 1;
    let head_half = (half / 2).max(1);
    let patch = look.patch.map(|(c, u, v)| {
        let px = cx - half + 1 + (u * (2 * half - 3).max(0) as f32) as i64;
        let py = neck + 1 + (v * (waist - neck - 3).max(0) as f32) as i64;
        (c, px, py)
    });

    let cells_per_row = (w + CELL - 1) / CELL;

    let mut out = Vec::with_capacity(shape.len());
    for y in 0..h {
        for x in 0..w {
            // Figure coordinates before the shift; the figure never touches
            // the border, so shifted coordinates inside it stay in range.
            let (fx, fy) = (x - dx, y - dy);
            let rel = fx - cx;
            let figure: Option<&Rgb> = if (top..neck).contains(&fy) && rel.abs() < head_half {
                Some(&look.head)
            } else if (neck..waist).contains(&fy) && rel.abs() < half {
                Some(match (&patch, &look.stripe) {
                    (Some((c, px, py)), _)
                        if (*px..px + 3).contains(&fx) && (*py..py + 3).contains(&fy) =>
                    {
                        c
                    }
                    (_, Some(s)) if (fy - neck) % 4 >= 2 => s,
                    _ => &look.upper,
                })
            } else if (waist..bottom).contains(&fy) && rel.abs() < half && rel != 0 && rel != -1 {
                Some(&look.lower)
            } else {
                None
            };
            let (color, tex) = match figure {
                Some(c) => (
                    c,
                    look.pattern[(fy / CELL * cells_per_row + fx / CELL) as usize],
                ),
                None => (&cam.background, [0.0; 3]),
            };
            let rgb: Rgb = std::array::from_fn(|c| (color[c] + tex[c]) * cam.gain[c] + offset[c]);
            if shape.channels == 1 {
                let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                out.push(quantize(luma + pixel_noise.sample(rng) as f32));
            } else {
                for v in rgb {
                    out.push(quantize(v + pixel_noise.sample(rng) as f32));
                }
            }
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Generates train, probe and gallery splits.
///
/// Training identities are `1..=num_train_ids`, test identities follow.
/// Cameras are numbered from 1. The first image of every test identity in
/// every camera is a probe; the remaining test images form the gallery.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let shape = spec.image_size;
    let cameras: Vec<Camera> = (1..=spec.num_cameras)
        .map(|c| camera(spec.seed, c))
        .collect();
    let mut dataset = Dataset {
        shape,
        train: Vec::new(),
        probe: Vec::new(),
        gallery: Vec::new(),
    };
    let total = spec.num_train_ids + spec.num_test_ids;
    for identity in 1..=total {
        let cells = shape.height.div_ceil(CELL as usize) * shape.width.div_ceil(CELL as usize);
        let look = appearance(spec.seed, identity, cells);
        let is_train = identity <= spec.num_train_ids;
        for (ci, cam) in cameras.iter().enumerate() {
            let camera_id = ci as u32 + 1;
            for k in 0..spec.images_per_id_per_camera {
                let index =
                    (u64::from(identity) << 32) | (u64::from(camera_id) << 16) | u64::from(k);
                let mut rng = rng_for(spec.seed, 3, index);
                let pixels = render(shape, &look, cam, &spec.jitter, &mut rng);
                let split = match (is_train, k) {
                    (true, _) => Split::Train,
                    (false, 0) => Split::Probe,
                    (false, _) => Split::Gallery,
                };
                let record = ImageRecord {
                    pixels,
                    shape,
                    identity,
                    camera: camera_id,
                    split,
                    source_path: Some(format!(
                        "{}/{}",
                        split.dir_name(),
                        market_file_name(identity, camera_id, k)
                    )),
                };
                match split {
                    Split::Train => dataset.train.push(record),
                    Split::Probe => dataset.probe.push(record),
                    Split::Gallery => dataset.gallery.push(record),
                }
            }
        }
    }
    dataset.verify_splits()?;
    Ok(dataset)
}
