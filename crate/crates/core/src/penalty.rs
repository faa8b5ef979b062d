//! Additive penalty model `AP = 1 - Σ P_t` over the transformations applied
//! to a query, fit by (ridge) least squares, and marginalized mAP tables.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mean_ap;
use crate::model::{EditMode, PenaltyModel, QueryMetadata, Registry, TransformClass};

pub const DEFAULT_LAMBDA: f64 = 1e-6;
const RANK_TOLERANCE: f64 = 1e-10;

/// Indicator design over the transformations that occur, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub query_ids: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major `rows × columns`, entries 0 or 1.
    pub x: Vec<f64>,
    /// `1 - AP` per row.
    pub target: Vec<f64>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.query_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.cols()..(i + 1) * self.cols()]
    }

    /// Number of queries that underwent each column's transformation.
    pub fn column_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = self.columns.iter().map(|c| (c.clone(), 0)).collect();
        for i in 0..self.rows() {
            for (c, &v) in self.columns.iter().zip(self.row(i)) {
                if v != 0.0 {
                    *counts.get_mut(c).unwrap() += 1;
                }
            }
        }
        counts
    }
}

/// One row per automatic query in `aps`. Manual queries carry no steps and
/// are skipped.
pub fn build_design(metadata: &[QueryMetadata], aps: &BTreeMap<String, f64>, registry: &Registry) -> Result<DesignMatrix> {
    let by_id: HashMap<&str, &QueryMetadata> = metadata.iter().map(|m| (m.query_id.as_str(), m)).collect();
    let mut rows: Vec<(&str, Vec<usize>, f64)> = Vec::new();
    let mut used = vec![false; registry.len()];
    for (q, &ap) in aps {
        let m = by_id.get(q.as_str()).ok_or_else(|| Error::MissingMetadata(q.clone()))?;
        if m.edit_mode == EditMode::Manual {
            continue;
        }
        if m.steps.is_empty() {
            return Err(Error::NoSteps(q.clone()));
        }
        let positions = m
            .steps
            .iter()
            .map(|s| registry.position(&s.name).ok_or_else(|| Error::UnknownId(s.name.clone())))
            .collect::<Result<Vec<_>>>()?;
        for &p in &positions {
            used[p] = true;
        }
        rows.push((q, positions, 1.0 - ap));
    }
    let mut column_of = vec![usize::MAX; registry.len()];
    let mut columns = Vec::new();
    for (p, info) in registry.entries().iter().enumerate() {
        if used[p] {
            column_of[p] = columns.len();
            columns.push(info.name.clone());
        }
    }
    let cols = columns.len();
    let mut x = vec![0.0; rows.len() * cols];
    for (i, (_, positions, _)) in rows.iter().enumerate() {
        for &p in positions {
            x[i * cols + column_of[p]] = 1.0;
        }
    }
    Ok(DesignMatrix {
        query_ids: rows.iter().map(|r| r.0.to_string()).collect(),
        columns,
        x,
        target: rows.iter().map(|r| r.2).collect(),
    })
}

/// Solves `min ‖y - X p‖² + λ ‖p‖²` through the normal equations.
pub fn fit_penalties(d: &DesignMatrix, lambda: f64) -> Result<PenaltyModel> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let (rows, cols) = (d.rows(), d.cols());
    if lambda == 0.0 && rows < cols {
        return Err(Error::Underdetermined { rows, cols });
    }
    let x = DMatrix::from_row_slice(rows, cols, &d.x);
    let y = DVector::from_column_slice(&d.target);
    let mut a = x.tr_mul(&x);
    for i in 0..cols {
        a[(i, i)] += lambda;
    }
    let b = x.tr_mul(&y);

    let rank_deficient = if cols == 0 {
        false
    } else {
        let eig = a.clone().symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min();
        min.is_nan() || max.is_nan() || min < RANK_TOLERANCE * max || max <= 0.0
    };
    if rank_deficient && lambda == 0.0 {
        return Err(Error::SingularSystem);
    }
    let p = match a.cholesky() {
        Some(ch) => ch.solve(&b),
        None => return Err(Error::SingularSystem),
    };
    let residual_norm = (&y - &x * &p).norm();
    Ok(PenaltyModel {
        penalties: d.columns.iter().cloned().zip(p.iter().copied()).collect(),
        residual_norm,
        rank_deficient,
        regularization: lambda,
    })
}

/// `transformation,class,n_queries,penalty`, registry order.
pub fn write_penalty_csv<W: Write>(model: &PenaltyModel, design: &DesignMatrix, registry: &Registry, mut w: W) -> std::io::Result<()> {
    let counts = design.column_counts();
    writeln!(w, "transformation,class,n_queries,penalty")?;
    for info in registry.entries() {
        if let Some(p) = model.penalties.get(&info.name) {
            writeln!(w, "{},{},{},{}", info.name, info.class, counts.get(&info.name).copied().unwrap_or(0), p)?;
        }
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub key: String,
    pub n: usize,
    pub map: f64,
}

/// mAP within each group produced by `group_fn`. A query may fall into
/// several groups or none. Rows are ordered by descending `n`, then key.
pub fn marginalized_map<F>(metadata: &[QueryMetadata], aps: &BTreeMap<String, f64>, group_fn: F) -> Result<Vec<GroupRow>>
where
    F: Fn(&QueryMetadata) -> Vec<String>,
{
    if aps.is_empty() {
        return Err(Error::EmptySubset);
    }
    let by_id: HashMap<&str, &QueryMetadata> = metadata.iter().map(|m| (m.query_id.as_str(), m)).collect();
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (q, &ap) in aps {
        let m = by_id.get(q.as_str()).ok_or_else(|| Error::MissingMetadata(q.clone()))?;
        for key in group_fn(m) {
            groups.entry(key).or_default().push(ap);
        }
    }
    let mut rows = groups
        .into_iter()
        .map(|(key, values)| {
            let m = mean_ap(values)?;
            Ok(GroupRow { key, n: m.n, map: m.value })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.n.cmp(&a.n).then_with(|| a.key.cmp(&b.key)));
    Ok(rows)
}

/// Every transformation applied to the query.
pub fn by_transformation(m: &QueryMetadata) -> Vec<String> {
    m.steps.iter().map(|s| s.name.clone()).collect()
}

/// Number of steps, automatic queries only.
pub fn by_step_count(m: &QueryMetadata) -> Vec<String> {
    match m.edit_mode {
        EditMode::Automatic => vec![m.steps.len().to_string()],
        EditMode::Manual => Vec::new(),
    }
}

pub fn by_attack_model(m: &QueryMetadata) -> Vec<String> {
    m.attack_model().map(str::to_string).into_iter().collect()
}

/// Half-open bins `(e[i-1], e[i]]` with open-ended first and last bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityBins {
    pub edges: Vec<f64>,
}

impl IntensityBins {
    /// Remaining-surface fraction after cropping.
    pub fn crop_default() -> Self {
        Self {
            edges: vec![0.06, 0.12, 0.25, 0.5],
        }
    }

    /// Fraction of pixels not coming from the source image.
    pub fn overlay_default() -> Self {
        Self {
            edges: vec![0.2, 0.4, 0.6, 0.8],
        }
    }

    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("bin edges must be finite and strictly increasing".into()));
        }
        Ok(Self { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bin(&self, x: f64) -> usize {
        self.edges.partition_point(|&e| e < x)
    }

    pub fn label(&self, i: usize) -> String {
        let e = &self.edges;
        if e.is_empty() {
            "all".to_string()
        } else if i == 0 {
            format!("<={}", e[0])
        } else if i == e.len() {
            format!(">{}", e[e.len() - 1])
        } else {
            format!("{}-{}", e[i - 1], e[i])
        }
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

/// Groups queries by the intensity bin of the first listed intensity-bearing
/// step they contain.
pub fn by_intensity<'a>(names: &'a [String], bins: &'a IntensityBins) -> impl Fn(&QueryMetadata) -> Vec<String> + 'a {
    move |m| {
        m.steps
            .iter()
            .find(|s| names.contains(&s.name))
            .and_then(|s| s.intensity)
            .map(|x| bins.label(bins.bin(x)))
            .into_iter()
            .collect()
    }
}

/// Crop is measured by remaining surface.
pub fn crop_transformations() -> Vec<String> {
    vec!["crop".to_string()]
}

/// Intensity-bearing insertion steps, measured by the overlaid fraction.
pub fn overlay_transformations(registry: &Registry) -> Vec<String> {
    registry
        .in_class(TransformClass::I)
        .filter(|t| t.intensity)
        .map(|t| t.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Source, TransformationStep};

    fn reg() -> &'static Registry {
        Registry::builtin()
    }

    fn auto(id: &str, names: &[&str]) -> QueryMetadata {
        let steps = names
            .iter()
            .map(|n| TransformationStep::new(*n, reg().get(n).unwrap().class))
            .collect();
        QueryMetadata::automatic(id, Source::Generic, steps)
    }

    fn aps(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(q, a)| (q.to_string(), *a)).collect()
    }

    #[test]
    fn single_row_design() {
        let d = build_design(&[auto("q", &["crop"])], &aps(&[("q", 0.6)]), reg()).unwrap();
        assert_eq!(d.columns, ["crop"]);
        assert_eq!(d.x, [1.0]);
        assert!((d.target[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn two_step_row_in_registry_order() {
        let d = build_design(&[auto("q", &["blur", "crop"])], &aps(&[("q", 0.5)]), reg()).unwrap();
        assert_eq!(d.columns, ["blur", "crop"]);
        assert_eq!(d.x, [1.0, 1.0]);
    }

    #[test]
    fn design_errors_and_manual_rows() {
        assert!(matches!(
            build_design(&[], &aps(&[("q", 0.5)]), reg()),
            Err(Error::MissingMetadata(_))
        ));
        let empty = QueryMetadata::automatic("q", Source::Generic, Vec::new());
        assert!(matches!(build_design(&[empty], &aps(&[("q", 0.5)]), reg()), Err(Error::NoSteps(_))));
        let manual = QueryMetadata::manual("m", Source::Face, "e1");
        let d = build_design(&[manual, auto("q", &["vflip"])], &aps(&[("m", 0.1), ("q", 0.5)]), reg()).unwrap();
        assert_eq!(d.query_ids, ["q"]);
    }

    #[test]
    fn constant_single_column_fit() {
        let meta: Vec<_> = (0..5).map(|i| auto(&format!("q{i}"), &["crop"])).collect();
        let a: BTreeMap<_, _> = (0..5).map(|i| (format!("q{i}"), 0.8)).collect();
        let d = build_design(&meta, &a, reg()).unwrap();
        let m = fit_penalties(&d, 0.0).unwrap();
        assert!((m.penalties["crop"] - 0.2).abs() < 1e-14);
        assert!(m.residual_norm < 1e-12);
        assert!(!m.rank_deficient);
    }

    #[test]
    fn singular_and_underdetermined() {
        // crop and blur always co-occur: columns are identical.
        let meta = vec![auto("a", &["crop", "blur"]), auto("b", &["crop", "blur"])];
        let d = build_design(&meta, &aps(&[("a", 0.5), ("b", 0.7)]), reg()).unwrap();
        assert!(matches!(fit_penalties(&d, 0.0), Err(Error::SingularSystem)));
        let ridge = fit_penalties(&d, 1e-3).unwrap();
        assert!(ridge.rank_deficient || ridge.penalties.len() == 2);
        let one = build_design(&meta[..1], &aps(&[("a", 0.5)]), reg()).unwrap();
        assert!(matches!(fit_penalties(&one, 0.0), Err(Error::Underdetermined { rows: 1, cols: 2 })));
        assert!(fit_penalties(&one, -1.0).is_err());
    }

    #[test]
    fn ridge_shrinks_norm() {
        let meta = vec![auto("a", &["crop"]), auto("b", &["crop", "blur"]), auto("c", &["blur"])];
        let d = build_design(&meta, &aps(&[("a", 0.7), ("b", 0.4), ("c", 0.8)]), reg()).unwrap();
        let norm = |l: f64| {
            let m = fit_penalties(&d, l).unwrap();
            m.penalties.values().map(|p| p * p).sum::<f64>().sqrt()
        };
        assert!(norm(0.0) > norm(0.1));
        assert!(norm(0.1) > norm(1.0));
    }

    #[test]
    fn penalty_csv_layout() {
        let meta = vec![auto("a", &["crop"]), auto("b", &["crop", "blur"]), auto("c", &["blur"])];
        let d = build_design(&meta, &aps(&[("a", 0.75), ("b", 0.5), ("c", 0.75)]), reg()).unwrap();
        let m = fit_penalties(&d, 0.0).unwrap();
        let mut buf = Vec::new();
        write_penalty_csv(&m, &d, reg(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "transformation,class,n_queries,penalty");
        for (line, prefix) in lines[1..].iter().zip(["blur,L,2,", "crop,G,2,"]) {
            let p: f64 = line.strip_prefix(prefix).unwrap().parse().unwrap();
            assert!((p - 0.25).abs() < 1e-12, "{line}");
        }
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn single_group_equals_mean_ap() {
        let meta = vec![auto("a", &["crop"]), auto("b", &["blur"]), auto("c", &["vflip"])];
        let a = aps(&[("a", 0.1), ("b", 0.7), ("c", 1.0 / 3.0)]);
        let rows = marginalized_map(&meta, &a, |_| vec!["all".into()]).unwrap();
        let m = mean_ap(a.values().copied()).unwrap();
        assert_eq!(rows, [GroupRow { key: "all".into(), n: 3, map: m.value }]);
        assert_eq!(rows[0].map.to_bits(), m.value.to_bits());
    }

    #[test]
    fn groups_ordered_by_size_then_key() {
        let meta = vec![auto("a", &["crop"]), auto("b", &["blur", "crop"]), auto("c", &["vflip"])];
        let a = aps(&[("a", 1.0), ("b", 0.5), ("c", 0.25)]);
        let rows = marginalized_map(&meta, &a, by_transformation).unwrap();
        let keys: Vec<_> = rows.iter().map(|r| (r.key.as_str(), r.n)).collect();
        assert_eq!(keys, [("crop", 2), ("blur", 1), ("vflip", 1)]);
        assert_eq!(rows[0].map, 0.75);
        assert!(matches!(marginalized_map(&meta, &BTreeMap::new(), by_transformation), Err(Error::EmptySubset)));
    }

    #[test]
    fn intensity_bins() {
        let b = IntensityBins::crop_default();
        assert_eq!(b.labels(), ["<=0.06", "0.06-0.12", "0.12-0.25", "0.25-0.5", ">0.5"]);
        assert_eq!(b.bin(0.06), 0);
        assert_eq!(b.bin(0.07), 1);
        assert_eq!(b.bin(0.9), 4);
        assert!(IntensityBins::new(vec![0.5, 0.2]).is_err());
        assert_eq!(
            overlay_transformations(reg()),
            ["overlay_onto_screenshot", "overlay_onto_image", "overlay_blurred_mask"]
        );
        let names = crop_transformations();
        let f = by_intensity(&names, &b);
        let mut m = auto("a", &["vflip"]);
        m.steps.push(TransformationStep::new("crop", TransformClass::G).with_intensity(0.1));
        assert_eq!(f(&m), ["0.06-0.12"]);
        assert!(f(&auto("b", &["blur"])).is_empty());
    }
}
