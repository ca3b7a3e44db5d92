use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PatchPixels, PatchRecord};

/// Label-preserving transforms applied to a whole patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    Identity,
    FlipHorizontal,
    FlipVertical,
    /// Clockwise quarter turns (1, 2 or 3).
    Rotate(u8),
    /// `v' = (v - 128)·contrast + 128 + brightness` on raw pixels, clamped to 8 bits.
    /// Whitened pixels use `v·contrast + brightness/64`.
    Jitter { brightness: i32, contrast: f32 },
}

const MAX_BRIGHTNESS: i32 = 20;
const CONTRAST_RANGE: (f32, f32) = (0.8, 1.2);

impl Augmentation {
    /// Draws one transform uniformly over the seven kinds.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_kind(rng.gen_range(0..7), rng)
    }

    /// Same as [`Augmentation::sample`] but never the identity.
    pub fn sample_non_identity<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_kind(rng.gen_range(1..7), rng)
    }

    fn from_kind<R: Rng + ?Sized>(kind: u32, rng: &mut R) -> Self {
        match kind {
            0 => Augmentation::Identity,
            1 => Augmentation::FlipHorizontal,
            2 => Augmentation::FlipVertical,
            3 => Augmentation::Rotate(1),
            4 => Augmentation::Rotate(2),
            5 => Augmentation::Rotate(3),
            _ => {
                let brightness = rng.gen_range(-MAX_BRIGHTNESS..=MAX_BRIGHTNESS);
                let c: f32 = rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1);
                Augmentation::Jitter { brightness, contrast: (c * 100.0).round() / 100.0 }
            }
        }
    }

    /// The transform [`augment`] applies for `seed`.
    pub fn for_seed(seed: u64) -> Self {
        Self::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn tag(&self) -> String {
        match *self {
            Augmentation::Identity => "none".into(),
            Augmentation::FlipHorizontal => "hflip".into(),
            Augmentation::FlipVertical => "vflip".into(),
            Augmentation::Rotate(q) => format!("rot{}", 90 * q as u32),
            Augmentation::Jitter { brightness, contrast } => format!("jitter-b{brightness:+}-c{contrast:.2}"),
        }
    }
}

fn geometric<E: Copy>(px: &Array3<E>, aug: Augmentation) -> Array3<E> {
    let (c, h, w) = px.dim();
    debug_assert_eq!(h, w, "square patches");
    match aug {
        Augmentation::FlipHorizontal => Array3::from_shape_fn((c, h, w), |(k, i, j)| px[[k, i, w - 1 - j]]),
        Augmentation::FlipVertical => Array3::from_shape_fn((c, h, w), |(k, i, j)| px[[k, h - 1 - i, j]]),
        Augmentation::Rotate(q) => {
            let mut out = px.clone();
            for _ in 0..q % 4 {
                let prev = out.clone();
                out = Array3::from_shape_fn((c, h, w), |(k, i, j)| prev[[k, h - 1 - j, i]]);
            }
            out
        }
        _ => px.clone(),
    }
}

/// Applies a specific transform.
pub fn augment_with(patch: &PatchRecord, aug: Augmentation) -> PatchRecord {
    let pixels = match (&patch.pixels, aug) {
        (PatchPixels::Raw(px), Augmentation::Jitter { brightness, contrast }) => PatchPixels::Raw(px.mapv(|v| {
            let x = (v as f32 - 128.0) * contrast + 128.0 + brightness as f32;
            x.round().clamp(0.0, 255.0) as u8
        })),
        (PatchPixels::Whitened(px), Augmentation::Jitter { brightness, contrast }) => {
            PatchPixels::Whitened(px.mapv(|v| v * contrast + brightness as f32 / 64.0))
        }
        (PatchPixels::Raw(px), a) => PatchPixels::Raw(geometric(px, a)),
        (PatchPixels::Whitened(px), a) => PatchPixels::Whitened(geometric(px, a)),
    };
    PatchRecord {
        pixels,
        source: patch.source.clone(),
        origin: patch.origin,
        augmentation_tag: aug.tag(),
    }
}

/// Applies the transform drawn from `seed`; identical inputs give identical outputs.
pub fn augment(patch: &PatchRecord, seed: u64) -> PatchRecord {
    augment_with(patch, Augmentation::for_seed(seed))
}
