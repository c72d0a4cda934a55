//! Axial patch extraction and nodule augmentation.
//!
//! A patch is a 64x64 window on the axial slice holding the candidate,
//! centred on its voxel: columns follow x and rows follow y, and the centre
//! voxel lands at row 32, column 32. Samples outside the volume take the
//! normalized air value 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{normalize_hu, Candidate, CtVolume};

pub const PATCH_SIZE: usize = 64;
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;
pub const CHANNELS: usize = 3;
/// Augmented samples per nodule, the original included.
pub const AUGMENT_COUNT: usize = 49;
pub const MAX_SHIFT: i64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatchSource {
    pub scan_id: String,
    pub candidate: usize,
}

/// Single-slice patch fed to the autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch2D {
    pub pixels: Vec<f32>,
    pub source: PatchSource,
}

/// Three adjacent axial slices (k-1, k, k+1), channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch3C {
    pub pixels: Vec<f32>,
    pub label: u8,
    pub source: PatchSource,
}

impl Patch3C {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.pixels[c * PATCH_PIXELS..(c + 1) * PATCH_PIXELS]
    }
}

fn fill_window(volume: &CtVolume, ci: i64, cj: i64, k: i64, out: &mut [f32]) {
    let half = (PATCH_SIZE / 2) as i64;
    for r in 0..PATCH_SIZE {
        let j = cj - half + r as i64;
        for c in 0..PATCH_SIZE {
            let i = ci - half + c as i64;
            out[r * PATCH_SIZE + c] = volume
                .get_signed(i, j, k)
                .map(|hu| normalize_hu(hu as i32))
                .unwrap_or(0.0);
        }
    }
}

fn candidate_voxel(volume: &CtVolume, candidate: &Candidate) -> Result<[i64; 3]> {
    let v = volume.world_to_voxel(candidate.world_mm);
    if v[2] < 0 || v[2] >= volume.dims[2] as i64 {
        return Err(Error::OutOfVolume {
            k: v[2],
            nz: volume.dims[2],
        });
    }
    Ok(v)
}

fn source(candidate: &Candidate, index: usize) -> PatchSource {
    PatchSource {
        scan_id: candidate.scan_id.clone(),
        candidate: index,
    }
}

pub fn extract_patch2d(volume: &CtVolume, candidate: &Candidate, index: usize) -> Result<Patch2D> {
    let [i, j, k] = candidate_voxel(volume, candidate)?;
    let mut pixels = vec![0.0; PATCH_PIXELS];
    fill_window(volume, i, j, k, &mut pixels);
    Ok(Patch2D {
        pixels,
        source: source(candidate, index),
    })
}

fn window3(volume: &CtVolume, i: i64, j: i64, k: i64) -> Vec<f32> {
    let mut pixels = vec![0.0; CHANNELS * PATCH_PIXELS];
    for (c, out) in pixels.chunks_exact_mut(PATCH_PIXELS).enumerate() {
        // slices outside the volume are left as padding
        fill_window(volume, i, j, k + c as i64 - 1, out);
    }
    pixels
}

pub fn extract_patch3c(volume: &CtVolume, candidate: &Candidate, index: usize) -> Result<Patch3C> {
    let [i, j, k] = candidate_voxel(volume, candidate)?;
    Ok(Patch3C {
        pixels: window3(volume, i, j, k),
        label: candidate.label.unwrap_or(0),
        source: source(candidate, index),
    })
}

/// One augmentation: a crop-centre shift on the source slice followed by an
/// element of the square's symmetry group (rotate by `quarter_turns` x 90
/// degrees counter-clockwise, then the flips).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub dx: i64,
    pub dy: i64,
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

const SYMMETRIES: [(u8, bool, bool); 8] = [
    (0, false, false),
    (1, false, false),
    (2, false, false),
    (3, false, false),
    (0, true, false),
    (0, false, true),
    (1, true, false),
    (3, true, false),
];

impl Transform {
    pub fn is_identity(&self) -> bool {
        *self == Transform::default()
    }

    /// Applies the rotation and flips to one square image.
    pub fn apply_geometry(&self, img: &[f32]) -> Vec<f32> {
        let n = PATCH_SIZE;
        let mut cur = img.to_vec();
        for _ in 0..self.quarter_turns % 4 {
            let mut next = vec![0.0; n * n];
            for r in 0..n {
                for c in 0..n {
                    next[r * n + c] = cur[c * n + (n - 1 - r)];
                }
            }
            cur = next;
        }
        if self.flip_h {
            for row in cur.chunks_exact_mut(n) {
                row.reverse();
            }
        }
        if self.flip_v {
            let mut next = vec![0.0; n * n];
            for r in 0..n {
                next[r * n..(r + 1) * n].copy_from_slice(&cur[(n - 1 - r) * n..(n - r) * n]);
            }
            cur = next;
        }
        cur
    }
}

/// The deterministic 49-entry schedule for `seed`: the identity first, then
/// 48 transforms cycling through the eight symmetries with shifts drawn
/// uniformly from `[-4, 4]` (never the identity again).
pub fn augmentation_schedule(seed: u64) -> Vec<Transform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Transform::default()];
    for t in 1..AUGMENT_COUNT {
        let (quarter_turns, flip_h, flip_v) = SYMMETRIES[t % SYMMETRIES.len()];
        loop {
            let tr = Transform {
                dx: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
                dy: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
                quarter_turns,
                flip_h,
                flip_v,
            };
            if !tr.is_identity() {
                out.push(tr);
                break;
            }
        }
    }
    out
}

/// Applies one transform to the candidate's 3-channel window. The shift moves
/// the crop on the source slices, so new context enters from the volume.
pub fn transformed_patch(
    volume: &CtVolume,
    candidate: &Candidate,
    index: usize,
    transform: &Transform,
) -> Result<Patch3C> {
    let [i, j, k] = candidate_voxel(volume, candidate)?;
    let shifted = window3(volume, i + transform.dx, j + transform.dy, k);
    let mut pixels = Vec::with_capacity(shifted.len());
    for ch in shifted.chunks_exact(PATCH_PIXELS) {
        pixels.extend(transform.apply_geometry(ch));
    }
    Ok(Patch3C {
        pixels,
        label: 1,
        source: source(candidate, index),
    })
}

/// Expands one nodule into its 49 augmented samples; the first equals
/// [`extract_patch3c`].
pub fn augment_nodule(
    volume: &CtVolume,
    candidate: &Candidate,
    index: usize,
    seed: u64,
) -> Result<Vec<Patch3C>> {
    if candidate.label != Some(1) {
        return Err(Error::InvalidValue(
            "only nodule candidates are augmented".into(),
        ));
    }
    augmentation_schedule(seed)
        .iter()
        .map(|t| transformed_patch(volume, candidate, index, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(hu: i16, dims: [usize; 3]) -> CtVolume {
        CtVolume::new(
            "c",
            dims,
            [1.0; 3],
            [0.0; 3],
            vec![hu; dims.iter().product()],
        )
        .unwrap()
    }

    fn at(x: f64, y: f64, z: f64) -> Candidate {
        Candidate::new("c", [x, y, z], Some(1))
    }

    #[test]
    fn constant_volume_gives_constant_patch() {
        let v = constant(-300, [80, 80, 3]);
        let p = extract_patch2d(&v, &at(40.0, 40.0, 1.0), 0).unwrap();
        assert_eq!(p.pixels.len(), PATCH_PIXELS);
        assert!(p.pixels.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn corner_candidate_fills_one_quadrant() {
        let v = constant(400, [40, 40, 2]);
        let p = extract_patch2d(&v, &at(0.0, 0.0, 0.0), 0).unwrap();
        for r in 0..PATCH_SIZE {
            for c in 0..PATCH_SIZE {
                let inside = r >= 32 && c >= 32;
                assert_eq!(
                    p.pixels[r * PATCH_SIZE + c],
                    if inside { 1.0 } else { 0.0 },
                    "({r},{c})"
                );
            }
        }
    }

    #[test]
    fn slice_outside_volume_is_an_error() {
        let v = constant(0, [8, 8, 4]);
        assert!(matches!(
            extract_patch2d(&v, &at(4.0, 4.0, 4.0), 0),
            Err(Error::OutOfVolume { k: 4, nz: 4 })
        ));
        assert!(extract_patch3c(&v, &at(4.0, 4.0, -1.0), 0).is_err());
        // in-plane positions outside the grid are only padding
        assert!(extract_patch2d(&v, &at(-50.0, 4.0, 0.0), 0)
            .unwrap()
            .pixels
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn three_channel_layout() {
        let v = constant(-1000, [70, 70, 5]);
        let p = extract_patch3c(&v, &at(35.0, 35.0, 2.0), 0).unwrap();
        assert_eq!(p.pixels.len(), 3 * PATCH_PIXELS);
        assert!(p.pixels.iter().all(|&x| x == 0.0));

        // slice index encoded in the HU value: slice k holds HU 100*k - 1000
        let dims = [8, 8, 3];
        let mut voxels = Vec::new();
        for k in 0..3 {
            voxels.extend(std::iter::repeat_n(100 * k as i16 - 1000, 64));
        }
        let v = CtVolume::new("s", dims, [1.0; 3], [0.0; 3], voxels).unwrap();
        let cand = at(4.0, 4.0, 0.0);
        let p = extract_patch3c(&v, &cand, 0).unwrap();
        let centre = 32 * PATCH_SIZE + 32;
        assert!(p.channel(0).iter().all(|&x| x == 0.0));
        assert_eq!(p.channel(1)[centre], normalize_hu(-1000));
        assert_eq!(p.channel(2)[centre], normalize_hu(-900));
        assert_eq!(
            p.channel(1),
            extract_patch2d(&v, &cand, 0).unwrap().pixels.as_slice()
        );
    }

    #[test]
    fn flips_are_involutions_and_rotations_cycle() {
        let img: Vec<f32> = (0..PATCH_PIXELS).map(|i| i as f32).collect();
        let h = Transform {
            flip_h: true,
            ..Default::default()
        };
        assert_eq!(h.apply_geometry(&h.apply_geometry(&img)), img);
        let v = Transform {
            flip_v: true,
            ..Default::default()
        };
        assert_eq!(v.apply_geometry(&v.apply_geometry(&img)), img);
        let r = Transform {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = r.apply_geometry(&cur);
        }
        assert_eq!(cur, img);
        assert_ne!(r.apply_geometry(&img), img);
    }

    #[test]
    fn schedule_has_49_entries_with_identity_first() {
        let s = augmentation_schedule(11);
        assert_eq!(s.len(), AUGMENT_COUNT);
        assert!(s[0].is_identity());
        assert!(s[1..].iter().all(|t| !t.is_identity()));
        assert!(s
            .iter()
            .all(|t| t.dx.abs() <= MAX_SHIFT && t.dy.abs() <= MAX_SHIFT));
        assert_eq!(s, augmentation_schedule(11));
    }

    #[test]
    fn augmentation_identity_matches_extraction() {
        let v = CtVolume::new(
            "g",
            [16, 16, 3],
            [1.0; 3],
            [0.0; 3],
            (0..16 * 16 * 3).map(|i| (i % 1400) as i16 - 1000).collect(),
        )
        .unwrap();
        let cand = at(8.0, 7.0, 1.0);
        let aug = augment_nodule(&v, &cand, 3, 5).unwrap();
        assert_eq!(aug.len(), 49);
        assert_eq!(aug[0], extract_patch3c(&v, &cand, 3).unwrap());
        assert!(aug
            .iter()
            .all(|p| p.label == 1 && p.pixels.iter().all(|x| (0.0..=1.0).contains(x))));
        let non = Candidate::new("g", [8.0, 7.0, 1.0], Some(0));
        assert!(augment_nodule(&v, &non, 0, 5).is_err());
    }
}
