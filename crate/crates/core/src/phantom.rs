//! Synthetic CT-like scans: noisy parenchyma with nodule spheres and three
//! kinds of non-nodule structure, each yielding one candidate.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    save_annotations, save_candidates, save_volume, write_file, Candidate, CtVolume,
    NoduleAnnotation, HU_MAX, HU_MIN,
};

pub const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Nodule,
    Vessel,
    Wall,
    Blob,
}

impl Structure {
    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Nodule => "nodule",
            Structure::Vessel => "vessel",
            Structure::Wall => "wall",
            Structure::Blob => "blob",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fractions of the non-nodule structures by morphology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureMix {
    pub vessel: f64,
    pub wall: f64,
    pub blob: f64,
}

impl Default for StructureMix {
    fn default() -> Self {
        Self {
            vessel: 0.4,
            wall: 0.3,
            blob: 0.3,
        }
    }
}

impl StructureMix {
    /// Largest-remainder split of `n` structures; ties favour the earlier
    /// morphology (vessel, wall, blob).
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let f = [self.vessel, self.wall, self.blob];
        let exact: Vec<f64> = f.iter().map(|&x| x * n as f64).collect();
        let mut counts: [usize; 3] = [0, 1, 2].map(|i| exact[i].floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let mut left = n.saturating_sub(counts.iter().sum());
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub scan_count: usize,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub background_hu: f64,
    pub background_sigma: f64,
    pub nodules_per_scan: usize,
    /// Nodule radius range in in-plane voxels.
    pub nodule_radius: [f64; 2],
    pub nodule_hu: [f64; 2],
    pub non_nodules_per_scan: usize,
    pub mix: StructureMix,
    /// Standard deviation of candidate displacement from the structure
    /// centre, in mm.
    pub jitter_mm: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            scan_count: 16,
            dims: [96, 96, 24],
            spacing_mm: [0.74, 0.74, 1.25],
            background_hu: -850.0,
            background_sigma: 40.0,
            nodules_per_scan: 4,
            nodule_radius: [2.0, 5.0],
            nodule_hu: [-100.0, 100.0],
            non_nodules_per_scan: 48,
            mix: StructureMix::default(),
            jitter_mm: 0.5,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if self.dims.contains(&0) || self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("phantom dims and spacing must be positive".into());
        }
        let [r0, r1] = self.nodule_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!(
                "nodule radius range {:?} is empty",
                self.nodule_radius
            ));
        }
        let r_mm = r1 * self.spacing_mm[0];
        for d in 0..3 {
            if 2.0 * r_mm >= self.dims[d] as f64 * self.spacing_mm[d] {
                return bad(format!(
                    "nodules of radius {r1} voxels do not fit in dims {:?}",
                    self.dims
                ));
            }
        }
        if self.nodule_hu[0] > self.nodule_hu[1]
            || self.background_sigma < 0.0
            || self.jitter_mm < 0.0
        {
            return bad("invalid nodule intensity range, background sigma or jitter".into());
        }
        let m = self.mix;
        let parts = [m.vessel, m.wall, m.blob];
        if parts.iter().any(|&x| x < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!(
                "structure mix {parts:?} must be non-negative and sum to 1"
            ));
        }
        Ok(())
    }

    pub fn scan_id(&self, index: usize) -> String {
        format!("phantom-{index:03}")
    }

    fn origin(&self) -> [f64; 3] {
        [0, 1, 2].map(|d| -(self.dims[d] as f64) * self.spacing_mm[d] / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScan {
    pub volume: CtVolume,
    pub candidates: Vec<Candidate>,
    pub annotations: Vec<NoduleAnnotation>,
    /// Morphology behind each candidate, aligned with `candidates`.
    pub structures: Vec<Structure>,
}

/// Float voxel grid; structures combine with `max`, nodules overwrite.
struct Canvas {
    dims: [usize; 3],
    spacing: [f64; 3],
    hu: Vec<f64>,
}

impl Canvas {
    /// Paints the voxels inside the box `[lo, hi]` (mm from the first voxel)
    /// for which `value` returns an intensity.
    fn paint(
        &mut self,
        lo: [f64; 3],
        hi: [f64; 3],
        mut value: impl FnMut([f64; 3]) -> Option<f64>,
    ) {
        self.paint_with(lo, hi, f64::max, &mut value)
    }

    fn paint_with(
        &mut self,
        lo: [f64; 3],
        hi: [f64; 3],
        combine: fn(f64, f64) -> f64,
        value: &mut dyn FnMut([f64; 3]) -> Option<f64>,
    ) {
        let [nx, ny, nz] = self.dims;
        let range = |d: usize, n: usize| {
            let a = (lo[d] / self.spacing[d]).floor().max(0.0) as usize;
            let b = ((hi[d] / self.spacing[d]).ceil().max(0.0) as usize).min(n.saturating_sub(1));
            a..=b
        };
        for k in range(2, nz) {
            for j in range(1, ny) {
                for i in range(0, nx) {
                    let p = [
                        i as f64 * self.spacing[0],
                        j as f64 * self.spacing[1],
                        k as f64 * self.spacing[2],
                    ];
                    if let Some(v) = value(p) {
                        let cell = &mut self.hu[i + nx * (j + ny * k)];
                        *cell = combine(*cell, v);
                    }
                }
            }
        }
    }

    fn extent(&self, d: usize) -> f64 {
        (self.dims[d] - 1) as f64 * self.spacing[d]
    }
}

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
}

fn uniform<R: Rng>(rng: &mut R, [a, b]: [f64; 2]) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a..=b)
    }
}

fn textured<R: Rng>(rng: &mut R, base: f64, sigma: f64, range: [f64; 2]) -> f64 {
    (base + sigma * Normal::new(0.0, 1.0).unwrap().sample(rng)).clamp(range[0], range[1])
}

/// Point with every coordinate at least `margin[d]` inside the grid.
fn place<R: Rng>(rng: &mut R, canvas: &Canvas, margin: [f64; 3]) -> Option<[f64; 3]> {
    let mut p = [0.0; 3];
    for d in 0..3 {
        let (a, b) = (margin[d], canvas.extent(d) - margin[d]);
        if a > b {
            return None;
        }
        p[d] = uniform(rng, [a, b]);
    }
    Some(p)
}

fn placed<T>(what: &str, mut attempt: impl FnMut() -> Option<T>) -> Result<T> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        if let Some(v) = attempt() {
            return Ok(v);
        }
    }
    Err(Error::PlacementFailed {
        what: what.to_string(),
        attempts: PLACEMENT_ATTEMPTS,
    })
}

fn jitter<R: Rng>(
    rng: &mut R,
    centre: [f64; 3],
    sigma: f64,
    max: f64,
    canvas: &Canvas,
) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut off = [0.0; 3].map(|_: f64| sigma * n.sample(rng));
    let len = off.iter().map(|v| v * v).sum::<f64>().sqrt();
    if len > max && len > 0.0 {
        off.iter_mut().for_each(|v| *v *= max / len);
    }
    [0, 1, 2].map(|d| (centre[d] + off[d]).clamp(0.0, canvas.extent(d)))
}

/// One scan, deterministic in `(spec.seed, index)`.
pub fn gen_scan(spec: &PhantomSpec, index: usize) -> Result<PhantomScan> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n_vox: usize = spec.dims.iter().product();
    let bg = Normal::new(spec.background_hu, spec.background_sigma.max(0.0)).unwrap();
    let mut canvas = Canvas {
        dims: spec.dims,
        spacing: spec.spacing_mm,
        hu: (0..n_vox).map(|_| bg.sample(&mut rng)).collect(),
    };
    let sp = spec.spacing_mm;
    let scan_id = spec.scan_id(index);
    let origin = spec.origin();
    let world = |p: [f64; 3]| [0, 1, 2].map(|d| origin[d] + p[d]);

    let mut centres: Vec<([f64; 3], f64)> = Vec::new();
    let mut spheres = Vec::new();
    let mut candidates = Vec::new();
    let mut annotations = Vec::new();
    let mut structures = Vec::new();

    for _ in 0..spec.nodules_per_scan {
        // the radius is redrawn with each attempt so crowded scans still fit
        let (c, r) = placed("nodule", || {
            let r = uniform(&mut rng, spec.nodule_radius) * sp[0];
            let c = place(&mut rng, &canvas, [r; 3])?;
            centres
                .iter()
                .all(|&(o, ro)| d2(c, o).sqrt() > r + ro + sp[0])
                .then_some((c, r))
        })?;
        spheres.push((c, r, uniform(&mut rng, spec.nodule_hu), rng.random::<u64>()));
        centres.push((c, r));
        annotations.push(NoduleAnnotation::new(scan_id.clone(), world(c), 2.0 * r)?);
        let at = jitter(&mut rng, c, spec.jitter_mm, r / 2.0, &canvas);
        candidates.push(Candidate::new(scan_id.clone(), world(at), Some(1)));
        structures.push(Structure::Nodule);
    }

    let nodules: Vec<([f64; 3], f64)> = centres.clone();
    let clear_of_nodules = |c: [f64; 3]| {
        nodules
            .iter()
            .all(|&(o, r)| d2(c, o).sqrt() > r + 2.0 * sp[0])
    };
    let [n_vessel, n_wall, n_blob] = spec.mix.counts(spec.non_nodules_per_scan);
    let kinds = std::iter::repeat_n(Structure::Vessel, n_vessel)
        .chain(std::iter::repeat_n(Structure::Wall, n_wall))
        .chain(std::iter::repeat_n(Structure::Blob, n_blob));
    for kind in kinds {
        let c = match kind {
            Structure::Vessel => paint_vessel(&mut rng, &mut canvas, &clear_of_nodules)?,
            Structure::Wall => paint_wall(&mut rng, &mut canvas, &clear_of_nodules)?,
            Structure::Blob => paint_blob(&mut rng, &mut canvas, &clear_of_nodules)?,
            Structure::Nodule => unreachable!(),
        };
        let at = jitter(&mut rng, c, spec.jitter_mm, 2.0 * spec.jitter_mm, &canvas);
        candidates.push(Candidate::new(scan_id.clone(), world(at), Some(0)));
        structures.push(kind);
    }
    for (c, r, base, tex_seed) in spheres {
        let mut tex = ChaCha8Rng::seed_from_u64(tex_seed);
        let range = spec.nodule_hu;
        canvas.paint_with(
            [c[0] - r, c[1] - r, c[2] - r],
            [c[0] + r, c[1] + r, c[2] + r],
            |_, v| v,
            &mut |p| (d2(p, c) <= r * r).then(|| textured(&mut tex, base, 15.0, range)),
        );
    }

    let voxels = canvas
        .hu
        .iter()
        .map(|&v| v.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16)
        .collect();
    Ok(PhantomScan {
        volume: CtVolume::new(scan_id, spec.dims, sp, origin, voxels)?,
        candidates,
        annotations,
        structures,
    })
}

/// Finite tube segment through the candidate point, running mostly
/// in-plane so it shows as a streak on the axial slice.
fn paint_vessel<R: Rng>(
    rng: &mut R,
    canvas: &mut Canvas,
    clear: &dyn Fn([f64; 3]) -> bool,
) -> Result<[f64; 3]> {
    let s = canvas.spacing[0];
    let c = placed("vessel", || {
        place(rng, canvas, [2.0 * s, 2.0 * s, canvas.spacing[2]]).filter(|&c| clear(c))
    })?;
    let radius = uniform(rng, [0.8, 1.6]) * s;
    let half_len = uniform(rng, [5.0, 10.0]) * s;
    let theta = uniform(rng, [0.0, std::f64::consts::TAU]);
    let elevation = uniform(rng, [-0.5, 0.5]);
    let dir = [
        theta.cos() * elevation.cos(),
        theta.sin() * elevation.cos(),
        elevation.sin(),
    ];
    let hu = uniform(rng, [-60.0, 60.0]);
    let mut tex = ChaCha8Rng::seed_from_u64(rng.random());
    let reach = half_len + radius;
    canvas.paint(
        [c[0] - reach, c[1] - reach, c[2] - reach],
        [c[0] + reach, c[1] + reach, c[2] + reach],
        |p| {
            let v = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let t = v[0] * dir[0] + v[1] * dir[1] + v[2] * dir[2];
            let perp2 = v.iter().map(|x| x * x).sum::<f64>() - t * t;
            (t.abs() <= half_len && perp2 <= radius * radius)
                .then(|| textured(&mut tex, hu, 15.0, [-100.0, 100.0]))
        },
    );
    Ok(c)
}

/// Dense slab against one in-plane border; the candidate sits on its inner
/// face.
fn paint_wall<R: Rng>(
    rng: &mut R,
    canvas: &mut Canvas,
    clear: &dyn Fn([f64; 3]) -> bool,
) -> Result<[f64; 3]> {
    let s = canvas.spacing[0];
    let (axis, low_side, depth, c) = placed("wall", || {
        let axis = rng.random_range(0..2usize);
        let low_side = rng.random::<bool>();
        let depth = uniform(rng, [2.0, 5.0]) * s;
        let mut c = place(rng, canvas, [s, s, canvas.spacing[2]])?;
        c[axis] = if low_side {
            depth
        } else {
            canvas.extent(axis) - depth
        };
        clear(c).then_some((axis, low_side, depth, c))
    })?;
    let half = uniform(rng, [4.0, 9.0]) * s;
    let hu = uniform(rng, [0.0, 120.0]);
    let mut tex = ChaCha8Rng::seed_from_u64(rng.random());
    let extent = canvas.extent(axis);
    let mut lo = [c[0] - half, c[1] - half, c[2] - half];
    let mut hi = [c[0] + half, c[1] + half, c[2] + half];
    lo[axis] = if low_side { 0.0 } else { extent - depth };
    hi[axis] = if low_side { depth } else { extent };
    canvas.paint(lo, hi, |p| {
        let inside = (0..3).all(|d| p[d] >= lo[d] && p[d] <= hi[d]);
        inside.then(|| textured(&mut tex, hu, 20.0, [-100.0, 200.0]))
    });
    Ok(c)
}

/// Faint, irregular union of lobes, one of them on the candidate point.
fn paint_blob<R: Rng>(
    rng: &mut R,
    canvas: &mut Canvas,
    clear: &dyn Fn([f64; 3]) -> bool,
) -> Result<[f64; 3]> {
    let s = canvas.spacing[0];
    let c = placed("blob", || {
        place(rng, canvas, [3.0 * s, 3.0 * s, 2.0 * canvas.spacing[2]]).filter(|&c| clear(c))
    })?;
    let lobes = rng.random_range(3..=6);
    let mut parts = Vec::with_capacity(lobes);
    for l in 0..lobes {
        let r = uniform(rng, [1.5, 3.5]) * s;
        let off = if l == 0 {
            [0.0; 3]
        } else {
            [0.0; 3].map(|_: f64| uniform(rng, [-3.5, 3.5]) * s)
        };
        parts.push(([c[0] + off[0], c[1] + off[1], c[2] + off[2]], r));
    }
    let hu = uniform(rng, [-450.0, -200.0]);
    let mut tex = ChaCha8Rng::seed_from_u64(rng.random());
    let reach = 7.0 * s;
    canvas.paint(
        [c[0] - reach, c[1] - reach, c[2] - reach],
        [c[0] + reach, c[1] + reach, c[2] + reach],
        |p| {
            parts
                .iter()
                .any(|&(o, r)| d2(p, o) <= r * r)
                .then(|| textured(&mut tex, hu, 40.0, [-550.0, -150.0]))
        },
    );
    Ok(c)
}

/// All scans of the spec, in index order.
pub fn gen_all(spec: &PhantomSpec) -> Result<Vec<PhantomScan>> {
    (0..spec.scan_count).map(|i| gen_scan(spec, i)).collect()
}

pub const STRUCTURE_COLUMNS: [&str; 3] = ["seriesuid", "candidate_index", "structure"];

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    pub dir: PathBuf,
    pub scans: Vec<String>,
    pub candidates: usize,
    pub nodules: usize,
}

/// Writes `volumes/<scan>.rvol`, `candidates.csv`, `annotations.csv` and
/// `structures.csv` under `dir`.
pub fn gen_dataset(spec: &PhantomSpec, dir: impl AsRef<Path>) -> Result<PhantomDataset> {
    let dir = dir.as_ref();
    let mut candidates = Vec::new();
    let mut annotations = Vec::new();
    let mut table = STRUCTURE_COLUMNS.join(",") + "\n";
    let mut scans = Vec::new();
    for scan in gen_all(spec)? {
        save_volume(
            &scan.volume,
            dir.join("volumes")
                .join(format!("{}.rvol", scan.volume.scan_id)),
        )?;
        for (c, s) in scan.candidates.into_iter().zip(&scan.structures) {
            table.push_str(&format!(
                "{},{},{}\n",
                scan.volume.scan_id,
                candidates.len(),
                s
            ));
            candidates.push(c);
        }
        annotations.extend(scan.annotations);
        scans.push(scan.volume.scan_id.clone());
    }
    save_candidates(&candidates, dir.join("candidates.csv"))?;
    save_annotations(&annotations, dir.join("annotations.csv"))?;
    write_file(&dir.join("structures.csv"), table.as_bytes())?;
    Ok(PhantomDataset {
        dir: dir.to_path_buf(),
        scans,
        candidates: candidates.len(),
        nodules: annotations.len(),
    })
}

/// Reads the structure side table into `(scan, candidate index, structure)`.
pub fn load_structures(path: impl AsRef<Path>) -> Result<Vec<(String, usize, Structure)>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Table(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let idx: usize = row[1]
            .parse()
            .map_err(|_| Error::Table(format!("bad candidate index {:?}", &row[1])))?;
        let s = match &row[2] {
            "nodule" => Structure::Nodule,
            "vessel" => Structure::Vessel,
            "wall" => Structure::Wall,
            "blob" => Structure::Blob,
            other => return Err(Error::Table(format!("unknown structure {other:?}"))),
        };
        out.push((row[0].to_string(), idx, s));
    }
    Ok(out)
}
