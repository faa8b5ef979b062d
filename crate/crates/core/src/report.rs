//! Breakdown tables and plot-ready series, rendered to a directory of JSON
//! and CSV files with deterministic content.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_ap, MicroAp};
use crate::model::{PenaltyModel, QueryMetadata, Registry};
use crate::penalty::{
    by_attack_model, by_intensity, by_step_count, by_transformation, crop_transformations, marginalized_map,
    overlay_transformations, DesignMatrix, GroupRow, IntensityBins,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub micro_ap: Option<f64>,
    pub map: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRow {
    pub transformation: String,
    pub class: String,
    pub n_queries: usize,
    pub penalty: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub summary: Summary,
    pub tables: BTreeMap<String, Vec<GroupRow>>,
    pub series: BTreeMap<String, Series>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalties: Option<Vec<PenaltyRow>>,
}

pub fn breakdown_by_source(aps: &BTreeMap<String, f64>, metadata: &[QueryMetadata]) -> Result<Vec<GroupRow>> {
    marginalized_map(metadata, aps, |m| vec![m.source.as_str().to_string()])
}

pub fn breakdown_by_edit_mode(aps: &BTreeMap<String, f64>, metadata: &[QueryMetadata]) -> Result<Vec<GroupRow>> {
    marginalized_map(metadata, aps, |m| vec![m.edit_mode.as_str().to_string()])
}

/// Manual queries per editor, largest editors first.
pub fn breakdown_by_editor(aps: &BTreeMap<String, f64>, metadata: &[QueryMetadata]) -> Result<Vec<GroupRow>> {
    marginalized_map(metadata, aps, |m| m.editor_id.clone().into_iter().collect())
}

pub fn attack_model_table(aps: &BTreeMap<String, f64>, metadata: &[QueryMetadata]) -> Result<Vec<GroupRow>> {
    marginalized_map(metadata, aps, by_attack_model)
}

/// Automatic queries by number of steps, in increasing step count.
pub fn step_count_table(aps: &BTreeMap<String, f64>, metadata: &[QueryMetadata]) -> Result<Vec<GroupRow>> {
    let mut rows = marginalized_map(metadata, aps, by_step_count)?;
    rows.sort_by_key(|r| r.key.parse::<usize>().unwrap_or(usize::MAX));
    Ok(rows)
}

/// Crop (remaining surface) and overlay (foreign pixel fraction) curves,
/// rows in bin order, empty bins omitted.
pub fn crop_overlay_curves(
    aps: &BTreeMap<String, f64>,
    metadata: &[QueryMetadata],
    registry: &Registry,
    crop_bins: &IntensityBins,
    overlay_bins: &IntensityBins,
) -> Result<(Vec<GroupRow>, Vec<GroupRow>)> {
    let curve = |names: Vec<String>, bins: &IntensityBins| -> Result<Vec<GroupRow>> {
        let rows = marginalized_map(metadata, aps, by_intensity(&names, bins))?;
        Ok(in_label_order(rows, &bins.labels()))
    };
    Ok((
        curve(crop_transformations(), crop_bins)?,
        curve(overlay_transformations(registry), overlay_bins)?,
    ))
}

fn in_label_order(rows: Vec<GroupRow>, labels: &[String]) -> Vec<GroupRow> {
    let mut rows = rows;
    rows.sort_by_key(|r| labels.iter().position(|l| *l == r.key).unwrap_or(usize::MAX));
    rows
}

fn bin_centers(bins: &IntensityBins) -> Vec<f64> {
    let mut bounds = vec![0.0];
    bounds.extend(bins.edges.iter().copied());
    bounds.push(1.0);
    bounds.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
}

fn curve_series(rows: &[GroupRow], bins: &IntensityBins, x_label: &str) -> Series {
    let labels = bins.labels();
    let centers = bin_centers(bins);
    Series {
        x_label: x_label.to_string(),
        y_label: "mAP".to_string(),
        points: rows
            .iter()
            .filter_map(|r| labels.iter().position(|l| *l == r.key))
            .zip(rows)
            .map(|(i, r)| SeriesPoint { x: centers[i], y: r.map })
            .collect(),
    }
}

/// Everything needed to assemble a [`Report`].
pub struct ReportInput<'a> {
    pub aps: &'a BTreeMap<String, f64>,
    pub metadata: Option<&'a [QueryMetadata]>,
    pub micro: Option<&'a MicroAp>,
    pub penalty: Option<(&'a PenaltyModel, &'a DesignMatrix)>,
    pub registry: &'a Registry,
    pub crop_bins: IntensityBins,
    pub overlay_bins: IntensityBins,
}

impl<'a> ReportInput<'a> {
    pub fn new(aps: &'a BTreeMap<String, f64>, registry: &'a Registry) -> Self {
        Self {
            aps,
            metadata: None,
            micro: None,
            penalty: None,
            registry,
            crop_bins: IntensityBins::crop_default(),
            overlay_bins: IntensityBins::overlay_default(),
        }
    }
}

pub fn build_report(input: &ReportInput<'_>) -> Result<Report> {
    let mut report = Report::default();
    let aps = input.aps;
    report.summary = Summary {
        micro_ap: input.micro.map(|m| m.value),
        map: if aps.is_empty() {
            None
        } else {
            Some(mean_ap(aps.values().copied())?.value)
        },
        n: aps.len(),
    };
    if let Some(micro) = input.micro {
        report.series.insert(
            "pr_curve".into(),
            Series {
                x_label: "recall".into(),
                y_label: "precision".into(),
                points: micro.curve.iter().map(|p| SeriesPoint { x: p.recall, y: p.precision }).collect(),
            },
        );
    }
    if let (Some(meta), false) = (input.metadata, aps.is_empty()) {
        let t = &mut report.tables;
        t.insert("source".into(), breakdown_by_source(aps, meta)?);
        t.insert("edit_mode".into(), breakdown_by_edit_mode(aps, meta)?);
        t.insert("editor".into(), breakdown_by_editor(aps, meta)?);
        t.insert("transformation".into(), marginalized_map(meta, aps, by_transformation)?);
        t.insert("step_count".into(), step_count_table(aps, meta)?);
        t.insert("attack_model".into(), attack_model_table(aps, meta)?);
        let (crop, overlay) = crop_overlay_curves(aps, meta, input.registry, &input.crop_bins, &input.overlay_bins)?;
        report
            .series
            .insert("crop_curve".into(), curve_series(&crop, &input.crop_bins, "remaining_surface"));
        report
            .series
            .insert("overlay_curve".into(), curve_series(&overlay, &input.overlay_bins, "overlay_fraction"));
        t.insert("crop_curve".into(), crop);
        t.insert("overlay_curve".into(), overlay);
    }
    if let Some((model, design)) = input.penalty {
        let counts = design.column_counts();
        report.penalties = Some(
            input
                .registry
                .entries()
                .iter()
                .filter_map(|info| {
                    model.penalties.get(&info.name).map(|&p| PenaltyRow {
                        transformation: info.name.clone(),
                        class: info.class.to_string(),
                        n_queries: counts.get(&info.name).copied().unwrap_or(0),
                        penalty: p,
                    })
                })
                .collect(),
        );
    }
    Ok(report)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, r: std::io::Result<()>) -> Result<()> {
    r.map_err(|e| Error::io(path, e))
}

pub fn write_group_csv<W: Write>(rows: &[GroupRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "key,n,mAP")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.key, r.n, r.map)?;
    }
    w.flush()
}

pub fn write_series_csv<W: Write>(s: &Series, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{},{}", s.x_label, s.y_label)?;
    for p in &s.points {
        writeln!(w, "{},{}", p.x, p.y)?;
    }
    w.flush()
}

pub fn write_penalty_rows_csv<W: Write>(rows: &[PenaltyRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "transformation,class,n_queries,penalty")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.transformation, r.class, r.n_queries, r.penalty)?;
    }
    w.flush()
}

/// Writes `report.json`, `tables/<name>.csv` and `series/<name>.csv`.
pub fn render_report(report: &Report, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let tables = dir.join("tables");
    let series = dir.join("series");
    for d in [dir, tables.as_path(), series.as_path()] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let json = dir.join("report.json");
    let mut w = create(&json)?;
    serde_json::to_writer_pretty(&mut w, report)?;
    finish(&json, writeln!(w).and_then(|_| w.flush()))?;
    for (name, rows) in &report.tables {
        let path = tables.join(format!("{name}.csv"));
        let w = create(&path)?;
        finish(&path, write_group_csv(rows, w))?;
    }
    if let Some(rows) = &report.penalties {
        let path = tables.join("penalties.csv");
        let w = create(&path)?;
        finish(&path, write_penalty_rows_csv(rows, w))?;
    }
    for (name, s) in &report.series {
        let path = series.join(format!("{name}.csv"));
        let w = create(&path)?;
        finish(&path, write_series_csv(s, w))?;
    }
    Ok(())
}

pub fn load_report(dir: impl AsRef<Path>) -> Result<Report> {
    let path = dir.as_ref().join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EditMode, Source, TransformClass, TransformationStep};

    fn reg() -> &'static Registry {
        Registry::builtin()
    }

    fn population() -> (Vec<QueryMetadata>, BTreeMap<String, f64>) {
        let mut meta = Vec::new();
        let mut aps = BTreeMap::new();
        for i in 0..12 {
            let id = format!("q{i:02}");
            let m = if i % 3 == 0 {
                QueryMetadata::manual(&id, Source::Generic, format!("e{}", i % 2))
            } else {
                let mut steps = vec![TransformationStep::new("crop", TransformClass::G).with_intensity(0.05 * i as f64)];
                if i % 2 == 0 {
                    steps.push(
                        TransformationStep::new("adversarial_attack", TransformClass::A).with_attack_model("sscd"),
                    );
                }
                QueryMetadata::automatic(&id, if i == 1 { Source::Face } else { Source::Generic }, steps)
            };
            meta.push(m);
            aps.insert(id, 1.0 / (1 + i % 4) as f64);
        }
        (meta, aps)
    }

    #[test]
    fn single_mode_input_gives_one_row() {
        let (meta, aps) = population();
        let only_auto: BTreeMap<_, _> = aps
            .iter()
            .filter(|(q, _)| meta.iter().any(|m| &m.query_id == *q && m.edit_mode == EditMode::Automatic))
            .map(|(q, a)| (q.clone(), *a))
            .collect();
        let rows = breakdown_by_edit_mode(&only_auto, &meta).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].key, "automatic");
        assert_eq!(rows[0].n, 8);
    }

    #[test]
    fn partitions_sum_to_population() {
        let (meta, aps) = population();
        let total = mean_ap(aps.values().copied()).unwrap().value;
        for rows in [breakdown_by_source(&aps, &meta).unwrap(), breakdown_by_edit_mode(&aps, &meta).unwrap()] {
            assert_eq!(rows.iter().map(|r| r.n).sum::<usize>(), 12);
            let weighted: f64 = rows.iter().map(|r| r.n as f64 * r.map).sum::<f64>() / 12.0;
            assert!((weighted - total).abs() < 1e-12);
        }
        assert_eq!(breakdown_by_editor(&aps, &meta).unwrap().iter().map(|r| r.n).sum::<usize>(), 4);
        assert_eq!(step_count_table(&aps, &meta).unwrap().iter().map(|r| r.n).sum::<usize>(), 8);
    }

    #[test]
    fn curves_are_in_bin_order_without_empty_bins() {
        let (meta, aps) = population();
        let (crop, overlay) = crop_overlay_curves(
            &aps,
            &meta,
            reg(),
            &IntensityBins::crop_default(),
            &IntensityBins::overlay_default(),
        )
        .unwrap();
        let keys: Vec<_> = crop.iter().map(|r| r.key.as_str()).collect();
        assert_eq!(keys, ["<=0.06", "0.06-0.12", "0.12-0.25", "0.25-0.5", ">0.5"]);
        assert_eq!(crop.iter().map(|r| r.n).sum::<usize>(), 8);
        assert!(overlay.is_empty());
        let step = step_count_table(&aps, &meta).unwrap();
        assert_eq!(step.iter().map(|r| r.key.as_str()).collect::<Vec<_>>(), ["1", "2"]);
    }

    #[test]
    fn empty_report_is_valid_json() {
        let dir = tempfile::tempdir().unwrap();
        render_report(&Report::default(), dir.path()).unwrap();
        assert_eq!(load_report(dir.path()).unwrap(), Report::default());
    }

    #[test]
    fn render_round_trip_and_row_counts() {
        let (meta, aps) = population();
        let mut input = ReportInput::new(&aps, reg());
        input.metadata = Some(&meta);
        let report = build_report(&input).unwrap();
        let dir = tempfile::tempdir().unwrap();
        render_report(&report, dir.path()).unwrap();
        assert_eq!(load_report(dir.path()).unwrap(), report);
        for (name, rows) in &report.tables {
            let text = fs::read_to_string(dir.path().join("tables").join(format!("{name}.csv"))).unwrap();
            assert_eq!(text.lines().count(), rows.len() + 1, "{name}");
        }
        let first = fs::read(dir.path().join("report.json")).unwrap();
        let again = tempfile::tempdir().unwrap();
        render_report(&build_report(&input).unwrap(), again.path()).unwrap();
        assert_eq!(fs::read(again.path().join("report.json")).unwrap(), first);
        assert_eq!(report.tables["attack_model"], [GroupRow { key: "sscd".into(), n: 4, map: report.tables["attack_model"][0].map }]);
    }
}
