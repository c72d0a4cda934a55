//! FROC analysis: candidate matching, the sensitivity/false-positive sweep,
//! the CPM summary and scan-level bootstrap intervals.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{write_file, Candidate, NoduleAnnotation};

/// False positives per scan at which CPM averages sensitivity.
pub const FP_LEVELS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Default)]
pub struct EvalInput {
    pub scans: Vec<String>,
    pub candidates: Vec<Candidate>,
    pub annotations: Vec<NoduleAnnotation>,
    pub irrelevant: Vec<NoduleAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    /// Index into `EvalInput::annotations`.
    Hit(usize),
    Fp,
    Ignored,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
}

/// Tags every candidate. A candidate hits a nodule when it lies within the
/// nodule's radius, the nearest such nodule winning; misses inside an
/// irrelevant finding are ignored; everything else is a false positive.
pub fn match_candidates(input: &EvalInput) -> Result<Vec<Tag>> {
    let scans: HashSet<&str> = input.scans.iter().map(String::as_str).collect();
    let mut by_scan: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, a) in input.annotations.iter().enumerate() {
        by_scan.entry(a.scan_id.as_str()).or_default().push(i);
    }
    input
        .candidates
        .iter()
        .map(|c| {
            if !scans.contains(c.scan_id.as_str()) {
                return Err(Error::InvalidValue(format!(
                    "candidate scan {:?} is not in the scan list",
                    c.scan_id
                )));
            }
            let mut best: Option<(f64, usize)> = None;
            for &i in by_scan.get(c.scan_id.as_str()).into_iter().flatten() {
                let a = &input.annotations[i];
                let d = dist2(c.world_mm, a.center_mm);
                let r = a.diameter_mm / 2.0;
                if d <= r * r && best.is_none_or(|b| d < b.0) {
                    best = Some((d, i));
                }
            }
            if let Some((_, i)) = best {
                return Ok(Tag::Hit(i));
            }
            let ignored = input.irrelevant.iter().any(|f| {
                let r = f.diameter_mm / 2.0;
                f.scan_id == c.scan_id && dist2(c.world_mm, f.center_mm) <= r * r
            });
            Ok(if ignored { Tag::Ignored } else { Tag::Fp })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
}

fn probabilities(input: &EvalInput) -> Result<Vec<f64>> {
    input
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| c.probability.ok_or(Error::MissingProbability(i)))
        .collect()
}

/// Sweep over `(probability, tag)` pairs; nodule ids only need to be
/// distinct keys.
fn sweep(mut scored: Vec<(f64, Tag)>, n_scans: usize, total_nodules: usize) -> FrocCurve {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut seen = HashSet::new();
    let mut fps = 0usize;
    let mut points = Vec::new();
    let mut i = 0;
    while i < scored.len() {
        let tau = scored[i].0;
        while i < scored.len() && scored[i].0 == tau {
            match scored[i].1 {
                Tag::Hit(n) => {
                    seen.insert(n);
                }
                Tag::Fp => fps += 1,
                Tag::Ignored => {}
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold: tau,
            fp_per_scan: fps as f64 / n_scans as f64,
            sensitivity: seen.len() as f64 / total_nodules as f64,
        });
    }
    FrocCurve { points }
}

/// One point per distinct probability, in decreasing threshold order (so
/// increasing false positives per scan).
pub fn froc_curve(input: &EvalInput, tags: &[Tag], total_nodules: usize) -> Result<FrocCurve> {
    if total_nodules == 0 {
        return Err(Error::NoNodules);
    }
    if input.scans.is_empty() {
        return Err(Error::NoScans);
    }
    if tags.len() != input.candidates.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tags for {} candidates",
            tags.len(),
            input.candidates.len()
        )));
    }
    let distinct: HashSet<usize> = tags
        .iter()
        .filter_map(|t| if let Tag::Hit(n) = t { Some(*n) } else { None })
        .collect();
    if distinct.len() > total_nodules {
        return Err(Error::InvalidValue(format!(
            "{} nodules are hit but the denominator is {total_nodules}",
            distinct.len()
        )));
    }
    let probs = probabilities(input)?;
    Ok(sweep(
        probs.into_iter().zip(tags.iter().copied()).collect(),
        input.scans.len(),
        total_nodules,
    ))
}

/// Highest sensitivity reached at no more than `f` false positives per scan.
pub fn sensitivity_at(curve: &FrocCurve, f: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fp_per_scan <= f)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

pub fn level_sensitivities(curve: &FrocCurve, levels: &[f64]) -> Vec<f64> {
    levels.iter().map(|&f| sensitivity_at(curve, f)).collect()
}

/// Mean of the given sensitivities.
pub fn cpm_of(sensitivities: &[f64]) -> f64 {
    sensitivities.iter().sum::<f64>() / sensitivities.len() as f64
}

/// Mean sensitivity at the seven standard levels.
pub fn cpm(curve: &FrocCurve) -> f64 {
    cpm_of(&level_sensitivities(curve, &FP_LEVELS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub resamples: usize,
    pub used: usize,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub cpm_low: f64,
    pub cpm_high: f64,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-scan scored candidates and nodule counts, shared by the bootstrap.
struct ScanTable {
    scored: Vec<Vec<(f64, Option<usize>, bool)>>,
    nodules: Vec<usize>,
}

fn scan_table(input: &EvalInput, tags: &[Tag], probs: &[f64]) -> ScanTable {
    let index: HashMap<&str, usize> = input
        .scans
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut scored = vec![Vec::new(); input.scans.len()];
    for ((c, &t), &p) in input.candidates.iter().zip(tags).zip(probs) {
        let entry = match t {
            Tag::Hit(n) => (p, Some(n), false),
            Tag::Fp => (p, None, true),
            Tag::Ignored => (p, None, false),
        };
        scored[index[c.scan_id.as_str()]].push(entry);
    }
    let mut nodules = vec![0; input.scans.len()];
    for a in &input.annotations {
        if let Some(&s) = index.get(a.scan_id.as_str()) {
            nodules[s] += 1;
        }
    }
    ScanTable { scored, nodules }
}

/// Sensitivities at `levels` for one multiset of scans; `None` when the
/// drawn scans hold no nodules.
fn resample_levels(
    table: &ScanTable,
    draw: &[usize],
    n_annotations: usize,
    levels: &[f64],
) -> Option<Vec<f64>> {
    let total: usize = draw.iter().map(|&s| table.nodules[s]).sum();
    if total == 0 {
        return None;
    }
    let mut scored = Vec::new();
    for (copy, &s) in draw.iter().enumerate() {
        for &(p, hit, fp) in &table.scored[s] {
            let tag = match (hit, fp) {
                (Some(n), _) => Tag::Hit(copy * n_annotations + n),
                (None, true) => Tag::Fp,
                (None, false) => Tag::Ignored,
            };
            scored.push((p, tag));
        }
    }
    Some(level_sensitivities(
        &sweep(scored, draw.len(), total),
        levels,
    ))
}

/// Scans are drawn with replacement; each resample counts the nodules
/// annotated in its drawn scans as the denominator and gets its own
/// generator stream. Resamples without any nodule are skipped. Bounds are
/// the 2.5th and 97.5th percentiles.
pub fn bootstrap_ci(
    input: &EvalInput,
    tags: &[Tag],
    levels: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapCi> {
    if input.scans.is_empty() {
        return Err(Error::NoScans);
    }
    if resamples == 0 {
        return Err(Error::InvalidValue(
            "at least one resample is needed".into(),
        ));
    }
    let probs = probabilities(input)?;
    let table = scan_table(input, tags, &probs);
    let n = input.scans.len();
    let m = input.annotations.len().max(1);
    let samples: Vec<Vec<f64>> = (0..resamples)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let draw: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            resample_levels(&table, &draw, m, levels)
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::NoNodules);
    }
    let mut low = vec![0.0; levels.len()];
    let mut high = vec![0.0; levels.len()];
    for l in 0..levels.len() {
        let mut col: Vec<f64> = samples.iter().map(|s| s[l]).collect();
        col.sort_by(f64::total_cmp);
        low[l] = percentile(&col, 0.025);
        high[l] = percentile(&col, 0.975);
    }
    let mut cpms: Vec<f64> = samples.iter().map(|s| cpm_of(s)).collect();
    cpms.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        resamples,
        used: samples.len(),
        low,
        high,
        cpm_low: percentile(&cpms, 0.025),
        cpm_high: percentile(&cpms, 0.975),
    })
}

/// The sensitivities of every equally likely ordered draw of the scans, for
/// exhaustive checks on tiny inputs.
pub fn enumerate_resamples(
    input: &EvalInput,
    tags: &[Tag],
    levels: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let probs = probabilities(input)?;
    let table = scan_table(input, tags, &probs);
    let n = input.scans.len();
    let m = input.annotations.len().max(1);
    let total = n.pow(n as u32);
    Ok((0..total)
        .filter_map(|mut code| {
            let draw: Vec<usize> = (0..n)
                .map(|_| {
                    let s = code % n;
                    code /= n;
                    s
                })
                .collect();
            resample_levels(&table, &draw, m, levels)
        })
        .collect())
}

/// Levels must be positive, finite and strictly increasing.
pub fn check_levels(levels: &[f64]) -> Result<()> {
    let ok = !levels.is_empty()
        && levels.iter().all(|f| f.is_finite() && *f > 0.0)
        && levels.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!(
            "bad false-positive levels {levels:?}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub fp_levels: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub cpm: f64,
    pub scans: usize,
    pub candidates: usize,
    pub total_nodules: usize,
    pub nodules_detected: usize,
    pub ci: Option<BootstrapCi>,
}

/// Full evaluation: tags, curve, sensitivities at `levels` and their mean,
/// plus bootstrap bounds when `resamples > 0`.
pub fn evaluate(
    input: &EvalInput,
    levels: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<(FrocCurve, EvalSummary)> {
    check_levels(levels)?;
    let tags = match_candidates(input)?;
    let total = input.annotations.len();
    let curve = froc_curve(input, &tags, total)?;
    let sensitivities = level_sensitivities(&curve, levels);
    let detected: HashSet<usize> = tags
        .iter()
        .filter_map(|t| if let Tag::Hit(n) = t { Some(*n) } else { None })
        .collect();
    let ci = if resamples > 0 {
        Some(bootstrap_ci(input, &tags, levels, resamples, seed)?)
    } else {
        None
    };
    let summary = EvalSummary {
        fp_levels: levels.to_vec(),
        cpm: cpm_of(&sensitivities),
        sensitivities,
        scans: input.scans.len(),
        candidates: input.candidates.len(),
        total_nodules: total,
        nodules_detected: detected.len(),
        ci,
    };
    Ok((curve, summary))
}

pub fn save_curve(curve: &FrocCurve, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("threshold,fp_per_scan,sensitivity\n");
    for p in &curve.points {
        writeln!(s, "{},{},{}", p.threshold, p.fp_per_scan, p.sensitivity).unwrap();
    }
    write_file(path.as_ref(), s.as_bytes())
}

pub fn load_curve(path: impl AsRef<Path>) -> Result<FrocCurve> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Table(format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    for row in rdr.deserialize() {
        points.push(row?);
    }
    Ok(FrocCurve { points })
}

/// Log-x FROC plot over the summary's levels, with the bootstrap band if
/// present.
pub fn render_svg(curve: &FrocCurve, summary: &EvalSummary, title: &str) -> String {
    let levels = &summary.fp_levels;
    let (w, h, m) = (560.0, 400.0, 50.0);
    let (first, last) = (levels[0], levels[levels.len() - 1]);
    let (lo, hi) = (first.log2(), last.log2().max(first.log2() + 1.0));
    let x = |f: f64| m + (f.max(first).min(last).log2() - lo) / (hi - lo) * (w - 2.0 * m);
    let y = |s: f64| h - m - s * (h - 2.0 * m);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{} (CPM {:.3})</text>"#,
        w / 2.0,
        title,
        summary.cpm
    )
    .unwrap();
    for &f in levels {
        writeln!(s, r##"<line x1="{0:.1}" y1="{1}" x2="{0:.1}" y2="{2}" stroke="#ddd"/><text x="{0:.1}" y="{3}" text-anchor="middle">{4}</text>"##, x(f), m, h - m, h - m + 15.0, f).unwrap();
    }
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        writeln!(s, r##"<line x1="{m}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{v:.1}</text>"##, y(v), w - m, m - 5.0, y(v) + 4.0).unwrap();
    }
    if let Some(ci) = &summary.ci {
        let mut pts: Vec<String> = levels
            .iter()
            .zip(&ci.high)
            .map(|(&f, &v)| format!("{:.1},{:.1}", x(f), y(v)))
            .collect();
        pts.extend(
            levels
                .iter()
                .zip(&ci.low)
                .rev()
                .map(|(&f, &v)| format!("{:.1},{:.1}", x(f), y(v))),
        );
        writeln!(
            s,
            r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5"/>"##,
            pts.join(" ")
        )
        .unwrap();
    }
    // step curve sampled on a dense log grid
    let steps = 200;
    let path: Vec<String> = (0..=steps)
        .map(|i| {
            let f = (lo + (hi - lo) * i as f64 / steps as f64).exp2();
            format!("{:.1},{:.1}", x(f), y(sensitivity_at(curve, f)))
        })
        .collect();
    writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##,
        path.join(" ")
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">false positives per scan</text>"#,
        w / 2.0,
        h - 12.0
    )
    .unwrap();
    writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">sensitivity</text>"#, h / 2.0, h / 2.0).unwrap();
    s.push_str("</svg>\n");
    s
}

/// Scan ids in first-appearance order.
pub fn scans_of(candidates: &[Candidate]) -> Vec<String> {
    let mut seen = BTreeMap::new();
    for c in candidates {
        let next = seen.len();
        seen.entry(c.scan_id.clone()).or_insert(next);
    }
    let mut v: Vec<(usize, String)> = seen.into_iter().map(|(s, i)| (i, s)).collect();
    v.sort();
    v.into_iter().map(|(_, s)| s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(scan: &str, xyz: [f64; 3], p: f64) -> Candidate {
        Candidate {
            probability: Some(p),
            ..Candidate::new(scan, xyz, None)
        }
    }

    fn nod(scan: &str, xyz: [f64; 3], d: f64) -> NoduleAnnotation {
        NoduleAnnotation::new(scan, xyz, d).unwrap()
    }

    fn curve(points: &[(f64, f64)]) -> FrocCurve {
        FrocCurve {
            points: points
                .iter()
                .map(|&(fp_per_scan, sensitivity)| FrocPoint {
                    threshold: 0.0,
                    fp_per_scan,
                    sensitivity,
                })
                .collect(),
        }
    }

    #[test]
    fn matching_rules() {
        let eps = 1e-9;
        let input = EvalInput {
            scans: vec!["a".into()],
            candidates: vec![
                cand("a", [0.0; 3], 0.5),
                cand("a", [2.0 + eps, 0.0, 0.0], 0.5),
                cand("a", [2.0, 0.0, 0.0], 0.5),
                cand("a", [20.0, 0.0, 0.0], 0.5),
                cand("a", [5.0, 0.0, 0.0], 0.5),
            ],
            annotations: vec![nod("a", [0.0; 3], 4.0), nod("a", [5.5, 0.0, 0.0], 6.0)],
            irrelevant: vec![nod("a", [20.0, 0.0, 0.0], 2.0)],
        };
        let tags = match_candidates(&input).unwrap();
        assert_eq!(
            tags,
            [Tag::Hit(0), Tag::Fp, Tag::Hit(0), Tag::Ignored, Tag::Hit(1)]
        );
    }

    #[test]
    fn perfect_and_constant_classifiers() {
        let input = EvalInput {
            scans: vec!["a".into(), "b".into()],
            candidates: vec![
                cand("a", [0.0; 3], 1.0),
                cand("b", [0.0; 3], 1.0),
                cand("a", [9.0; 3], 0.0),
            ],
            annotations: vec![nod("a", [0.0; 3], 2.0), nod("b", [0.0; 3], 2.0)],
            irrelevant: vec![],
        };
        let tags = match_candidates(&input).unwrap();
        let c = froc_curve(&input, &tags, 2).unwrap();
        assert_eq!(c.points[0].fp_per_scan, 0.0);
        assert_eq!(c.points[0].sensitivity, 1.0);
        assert_eq!(cpm(&c), 1.0);

        let mut flat = input.clone();
        flat.candidates
            .iter_mut()
            .for_each(|c| c.probability = Some(0.3));
        let c = froc_curve(&flat, &tags, 2).unwrap();
        assert_eq!(c.points.len(), 1);
        assert!(matches!(
            froc_curve(&input, &tags, 0),
            Err(Error::NoNodules)
        ));
    }

    #[test]
    fn step_lookup() {
        let c = curve(&[(0.0, 0.9), (3.0, 0.95)]);
        assert_eq!(sensitivity_at(&c, 2.0), 0.9);
        assert_eq!(sensitivity_at(&c, 100.0), 0.95);
        let c = curve(&[(0.2, 0.5), (0.6, 0.6), (1.5, 0.7), (5.0, 0.8)]);
        let levels = level_sensitivities(&c, &FP_LEVELS);
        assert_eq!(levels, [0.0, 0.5, 0.5, 0.6, 0.7, 0.7, 0.8]);
    }

    #[test]
    fn cpm_of_published_rows() {
        let ours = [0.905, 0.913, 0.921, 0.925, 0.927, 0.931, 0.933];
        assert!((cpm_of(&ours) - 0.922).abs() <= 0.0005);
        let cumedvis = [0.678, 0.738, 0.816, 0.848, 0.879, 0.907, 0.922];
        assert!((cpm_of(&cumedvis) - 0.827).abs() <= 0.0005);
        assert_eq!(cpm(&curve(&[(0.0, 1.0)])), 1.0);
    }

    #[test]
    fn bootstrap_basics() {
        let input = EvalInput {
            scans: vec!["a".into()],
            candidates: vec![cand("a", [0.0; 3], 0.9), cand("a", [9.0; 3], 0.8)],
            annotations: vec![nod("a", [0.0; 3], 2.0), nod("a", [30.0; 3], 2.0)],
            irrelevant: vec![],
        };
        let tags = match_candidates(&input).unwrap();
        let ci = bootstrap_ci(&input, &tags, &FP_LEVELS, 50, 1).unwrap();
        assert_eq!(ci.low, ci.high);
        assert_eq!(ci, bootstrap_ci(&input, &tags, &FP_LEVELS, 50, 1).unwrap());
        let empty = EvalInput::default();
        assert!(matches!(
            bootstrap_ci(&empty, &[], &FP_LEVELS, 10, 0),
            Err(Error::NoScans)
        ));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.25), 2.5);
        assert_eq!(percentile(&[7.0], 0.975), 7.0);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let c = curve(&[(0.1, 0.5), (2.0, 0.9)]);
        let summary = EvalSummary {
            fp_levels: FP_LEVELS.to_vec(),
            sensitivities: level_sensitivities(&c, &FP_LEVELS),
            cpm: cpm(&c),
            scans: 1,
            candidates: 2,
            total_nodules: 2,
            nodules_detected: 2,
            ci: None,
        };
        let svg = render_svg(&c, &summary, "t");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
