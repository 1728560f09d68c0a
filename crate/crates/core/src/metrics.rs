//! Dice similarity and mean surface distance, per case and per cohort.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{LabelMap, LabelVolume};
use crate::error::{Error, Result};

/// Marker printed for undefined surface distances.
pub const UNDEFINED_MARK: &str = "†";

/// A boolean voxel grid in x-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid(
                "mask",
                format!("{} values for dims {dims:?}", data.len()),
            ));
        }
        Ok(BinaryMask { dims, data })
    }

    pub fn from_voxels(dims: [usize; 3], voxels: &[[usize; 3]]) -> Result<Self> {
        let mut data = vec![false; dims.iter().product()];
        for v in voxels {
            if (0..3).any(|a| v[a] >= dims[a]) {
                return Err(Error::invalid(
                    "mask",
                    format!("voxel {v:?} outside {dims:?}"),
                ));
            }
            data[(v[0] * dims[1] + v[1]) * dims[2] + v[2]] = true;
        }
        Ok(BinaryMask { dims, data })
    }

    /// Voxels equal to `class`.
    pub fn from_labels(labels: &LabelVolume, class: u16) -> Self {
        BinaryMask {
            dims: labels.dims(),
            data: labels.data().iter().map(|&l| l == class).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    fn at(&self, p: [isize; 3]) -> bool {
        if (0..3).any(|a| p[a] < 0 || p[a] >= self.dims[a] as isize) {
            return false;
        }
        self.data[(p[0] as usize * self.dims[1] + p[1] as usize) * self.dims[2] + p[2] as usize]
    }
}

fn check_dims(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::invalid(op, format!("shape mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `2|Y∩Ŷ| / (|Y|+|Ŷ|)`, and 1.0 when both masks are empty.
pub fn dsc(y: &BinaryMask, y_hat: &BinaryMask) -> Result<f64> {
    check_dims("dsc", y.dims, y_hat.dims)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in y.data.iter().zip(&y_hat.data) {
        inter += usize::from(a && b);
        total += usize::from(a) + usize::from(b);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Boundary voxel centres of one class in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePointSet {
    pub class_id: u16,
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
}

/// Foreground voxels with at least one background face neighbour (the
/// volume border counts as background), as `index * spacing`. Empty masks
/// give an empty set.
pub fn extract_surface(mask: &BinaryMask, spacing: [f64; 3], class_id: u16) -> SurfacePointSet {
    let [_, ny, nz] = mask.dims;
    let mut points = Vec::new();
    for (i, _) in mask.data.iter().enumerate().filter(|(_, &b)| b) {
        let p = [
            (i / (ny * nz)) as isize,
            ((i / nz) % ny) as isize,
            (i % nz) as isize,
        ];
        let boundary = (0..3).any(|a| {
            [-1, 1].iter().any(|&d| {
                let mut q = p;
                q[a] += d;
                !mask.at(q)
            })
        });
        if boundary {
            points.push([0, 1, 2].map(|a| p[a] as f64 * spacing[a]));
        }
    }
    SurfacePointSet { class_id, points }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Static 3-d tree for exact nearest-neighbour queries.
struct KdTree {
    /// Points reordered so each subtree is a contiguous range whose median
    /// element is the splitting node.
    points: Vec<[f64; 3]>,
}

impl KdTree {
    fn new(mut points: Vec<[f64; 3]>) -> Self {
        fn build(pts: &mut [[f64; 3]], depth: usize) {
            if pts.len() <= 1 {
                return;
            }
            let axis = depth % 3;
            let mid = pts.len() / 2;
            pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
            let (left, right) = pts.split_at_mut(mid);
            build(left, depth + 1);
            build(&mut right[1..], depth + 1);
        }
        build(&mut points, 0);
        KdTree { points }
    }

    /// Smallest squared distance from `q` to any point; `INFINITY` if empty.
    fn nearest2(&self, q: &[f64; 3]) -> f64 {
        fn search(pts: &[[f64; 3]], depth: usize, q: &[f64; 3], best: &mut f64) {
            if pts.is_empty() {
                return;
            }
            let mid = pts.len() / 2;
            let node = &pts[mid];
            *best = best.min(dist2(node, q));
            let axis = depth % 3;
            let diff = q[axis] - node[axis];
            let (near, far) = if diff < 0.0 {
                (&pts[..mid], &pts[mid + 1..])
            } else {
                (&pts[mid + 1..], &pts[..mid])
            };
            search(near, depth + 1, q, best);
            if diff * diff <= *best {
                search(far, depth + 1, q, best);
            }
        }
        let mut best = f64::INFINITY;
        search(&self.points, 0, q, &mut best);
        best
    }
}

fn directed_sum(from: &SurfacePointSet, to: &SurfacePointSet) -> f64 {
    let tree = KdTree::new(to.points.clone());
    let nearest: Vec<f64> = from
        .points
        .par_iter()
        .map(|p| tree.nearest2(p).sqrt())
        .collect();
    nearest.iter().sum()
}

/// Directed mean surface distance `(1/N) Σ_{p∈Y} min_{q∈Ŷ} ‖p−q‖` in mm.
/// `None` when either surface is empty.
pub fn msd(y: &SurfacePointSet, y_hat: &SurfacePointSet) -> Option<f64> {
    if y.is_empty() || y_hat.is_empty() {
        return None;
    }
    Some(directed_sum(y, y_hat) / y.len() as f64)
}

/// Average symmetric surface distance: both directed sums over `N + M`.
pub fn symmetric_msd(a: &SurfacePointSet, b: &SurfacePointSet) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    Some((directed_sum(a, b) + directed_sum(b, a)) / (a.len() + b.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class_id: u16,
    pub name: String,
    pub dsc: f64,
    /// `None` when the prediction or the ground truth lacks the class.
    pub msd_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub classes: Vec<ClassMetrics>,
}

impl CaseMetrics {
    pub fn class_ids(&self) -> Vec<u16> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    /// Mean DSC over foreground classes.
    pub fn mean_dsc(&self) -> f64 {
        self.classes.iter().map(|c| c.dsc).sum::<f64>() / self.classes.len().max(1) as f64
    }
}

/// DSC and directed MSD for every foreground class of `map`.
pub fn evaluate_case(
    case_id: &str,
    pred: &LabelVolume,
    gt: &LabelVolume,
    map: &LabelMap,
) -> Result<CaseMetrics> {
    check_dims("evaluate_case", gt.dims(), pred.dims())?;
    if pred.spacing() != gt.spacing() {
        return Err(Error::invalid(
            "evaluate_case",
            format!(
                "spacing mismatch {:?} vs {:?}",
                gt.spacing(),
                pred.spacing()
            ),
        ));
    }
    let spacing = gt.spacing();
    let fg: Vec<(u16, String)> = map.foreground().map(|(i, n)| (i, n.to_string())).collect();
    let classes = fg
        .into_par_iter()
        .map(|(class_id, name)| {
            let y = BinaryMask::from_labels(gt, class_id);
            let y_hat = BinaryMask::from_labels(pred, class_id);
            let dsc = dsc(&y, &y_hat)?;
            let msd_mm = msd(
                &extract_surface(&y, spacing, class_id),
                &extract_surface(&y_hat, spacing, class_id),
            );
            Ok(ClassMetrics {
                class_id,
                name,
                dsc,
                msd_mm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        classes,
    })
}

/// Cohort means of one class (or of the class means for the average row).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortRow {
    pub class_id: Option<u16>,
    pub name: String,
    pub mean_dsc: f64,
    /// Mean over defined entries; `None` when none are defined.
    pub mean_msd_mm: Option<f64>,
    /// Entries skipped because the surface distance was undefined.
    pub msd_undefined: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortSummary {
    pub rows: Vec<CohortRow>,
    pub average: CohortRow,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), n, skipped)
}

/// Per-class means across cases. Cases are visited in `case_id` order so
/// the result does not depend on input order. Undefined distances are
/// skipped and counted.
pub fn summarize(cases: &[CaseMetrics]) -> Result<CohortSummary> {
    let mut sorted: Vec<&CaseMetrics> = cases.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let Some(first) = sorted.first() else {
        return Err(Error::invalid("summarize", "no cases"));
    };
    let ids = first.class_ids();
    if let Some(bad) = sorted.iter().find(|c| c.class_ids() != ids) {
        return Err(Error::invalid(
            "summarize",
            format!("case {} has a different class list", bad.case_id),
        ));
    }
    let rows: Vec<CohortRow> = first
        .classes
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let dsc = sorted.iter().map(|m| m.classes[k].dsc).sum::<f64>() / sorted.len() as f64;
            let (msd, _, skipped) = mean_defined(sorted.iter().map(|m| m.classes[k].msd_mm));
            CohortRow {
                class_id: Some(c.class_id),
                name: c.name.clone(),
                mean_dsc: dsc,
                mean_msd_mm: msd,
                msd_undefined: skipped,
                count: sorted.len(),
            }
        })
        .collect();
    let (avg_msd, _, _) = mean_defined(rows.iter().map(|r| r.mean_msd_mm));
    let average = CohortRow {
        class_id: None,
        name: "Average".to_string(),
        mean_dsc: rows.iter().map(|r| r.mean_dsc).sum::<f64>() / rows.len().max(1) as f64,
        mean_msd_mm: avg_msd,
        msd_undefined: rows.iter().map(|r| r.msd_undefined).sum(),
        count: sorted.len(),
    };
    Ok(CohortSummary { rows, average })
}

fn fmt_msd(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED_MARK.to_string(), |v| format!("{v:.4}"))
}

/// Tab-separated report: a `[cases]` table with one row per class per
/// case, then a `[cohort]` table with one row per class and an `Average`
/// row. Undefined distances print as `†`; `msd_undefined` counts them.
pub fn render_report(cases: &[CaseMetrics], summary: &CohortSummary) -> String {
    let mut sorted: Vec<&CaseMetrics> = cases.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut out = String::from("[cases]\ncase_id\tclass_id\tclass\tdsc\tmsd_mm\n");
    for case in sorted {
        for c in &case.classes {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.4}\t{}",
                case.case_id,
                c.class_id,
                c.name,
                c.dsc,
                fmt_msd(c.msd_mm)
            );
        }
    }
    out.push_str("\n[cohort]\nclass_id\tclass\tdsc\tmsd_mm\tmsd_undefined\tcases\n");
    for r in summary.rows.iter().chain(std::iter::once(&summary.average)) {
        let id = r
            .class_id
            .map_or_else(|| "-".to_string(), |i| i.to_string());
        let _ = writeln!(
            out,
            "{id}\t{}\t{:.4}\t{}\t{}\t{}",
            r.name,
            r.mean_dsc,
            fmt_msd(r.mean_msd_mm),
            r.msd_undefined,
            r.count
        );
    }
    out
}
