use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use copydet_core::knn::knn_search;
use copydet_core::metrics::{load_aps, micro_ap, per_query_aps, write_aps_csv, MicroAp};
use copydet_core::model::{
    load_candidates, load_descriptors_with, load_ground_truth, load_metadata, save_candidates, save_descriptors,
    DescriptorSet, EditMode, QueryMetadata, Registry,
};
use copydet_core::normalize::{
    normalize_descriptor_rescale, normalize_descriptor_subtract, normalize_scores, BackgroundIndex,
};
use copydet_core::penalty::{build_design, fit_penalties, write_penalty_csv, IntensityBins};
use copydet_core::report::{build_report, load_report, render_report, ReportInput};
use copydet_core::synth::{generate, SynthConfig, SynthManifest};
use copydet_core::{Error, Result};
use serde_json::json;

use crate::ingest::{evaluate_candidates_file, DEFAULT_ROW_BUDGET};
use crate::manifest::RunManifest;
use crate::{
    BgArgs, BinArgs, Command, CompareArgs, EvalDescriptorArgs, EvalMatchingArgs, GenArgs, Metric, Mode,
    NormalizeArgs, PenaltyArgs, ReportArgs,
};

pub fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::EvalDescriptor(a) => eval_descriptor(a),
        Command::EvalMatching(a) => eval_matching(a),
        Command::Normalize(a) => normalize(a),
        Command::Penalty(a) => penalty(a),
        Command::Report(a) => report(a),
        Command::Compare(a) => compare(a),
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("--lambda must be finite and >= 0, got {lambda}")))
    }
}

fn check_bg(bg: &BgArgs) -> Result<()> {
    if bg.bg_n == 0 {
        return Err(Error::InvalidArgument("--bg-n must be positive".into()));
    }
    if !(bg.bg_beta.is_finite() && bg.bg_beta >= 0.0) {
        return Err(Error::InvalidArgument("--bg-beta must be finite and >= 0".into()));
    }
    if let Some(w) = &bg.bg_weights {
        if w.len() != bg.bg_n {
            return Err(Error::InvalidArgument(format!("--bg-weights has {} entries for --bg-n {}", w.len(), bg.bg_n)));
        }
    }
    if bg.bg.is_none() && bg.mode != Mode::Scores {
        return Err(Error::InvalidArgument("--mode subtract/rescale needs --bg".into()));
    }
    Ok(())
}

fn bins(b: &BinArgs) -> Result<(IntensityBins, IntensityBins)> {
    Ok((IntensityBins::new(b.crop_bins.clone())?, IntensityBins::new(b.overlay_bins.clone())?))
}

fn background(bg: &BgArgs, max_dim: usize, dim: usize) -> Result<Option<BackgroundIndex>> {
    let Some(path) = &bg.bg else {
        return Ok(None);
    };
    let train = load_descriptors_with(path, max_dim, Some(dim))?;
    let mut index = BackgroundIndex::new(train, bg.bg_n, bg.bg_beta)?;
    if let Some(w) = &bg.bg_weights {
        index = index.with_weights(w.clone())?;
    }
    Ok(Some(index))
}

fn inputs<'a>(items: &[(&'a str, Option<&'a Path>)]) -> Vec<(&'a str, &'a Path)> {
    items.iter().filter_map(|(role, p)| p.map(|p| (*role, p))).collect()
}

fn gen(a: &GenArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => SynthConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate(Registry::builtin())?;
    let mut manifest = RunManifest::new("gen", a, &inputs(&[("config", a.config.as_deref())]))?;
    manifest.extra = Some(serde_json::to_value(SynthManifest::new(&config))?);
    manifest.write(&a.out)?;
    let ds = generate(&config)?;
    ds.save_data(&a.out)
}

/// Per-query APs, penalties when metadata allows, and the report tree.
fn finish(
    out: &Path,
    micro: Option<&MicroAp>,
    aps: &BTreeMap<String, f64>,
    metadata: Option<&[QueryMetadata]>,
    lambda: Option<f64>,
    bin_args: &BinArgs,
) -> Result<()> {
    let registry = Registry::builtin();
    let (crop_bins, overlay_bins) = bins(bin_args)?;
    write_file(&out.join("aps.csv"), |w| write_aps_csv(aps, w))?;
    let fitted = match (metadata, lambda) {
        (Some(meta), Some(lambda)) => {
            let design = build_design(meta, aps, registry)?;
            if design.rows() == 0 {
                None
            } else {
                let model = fit_penalties(&design, lambda)?;
                write_file(&out.join("penalties.csv"), |w| write_penalty_csv(&model, &design, registry, w))?;
                Some((model, design))
            }
        }
        _ => None,
    };
    let mut input = ReportInput::new(aps, registry);
    input.metadata = metadata;
    input.micro = micro;
    input.penalty = fitted.as_ref().map(|(m, d)| (m, d));
    input.crop_bins = crop_bins;
    input.overlay_bins = overlay_bins;
    render_report(&build_report(&input)?, out)
}

fn eval_descriptor(a: &EvalDescriptorArgs) -> Result<()> {
    check_bg(&a.bg)?;
    check_lambda(a.lambda)?;
    bins(&a.bins)?;
    if a.k == 0 {
        return Err(Error::InvalidArgument("--k must be positive".into()));
    }
    let manifest = RunManifest::new(
        "eval-descriptor",
        a,
        &inputs(&[
            ("queries", Some(a.queries.as_path())),
            ("refs", Some(a.refs.as_path())),
            ("gt", Some(a.gt.as_path())),
            ("metadata", a.metadata.as_deref()),
            ("bg", a.bg.bg.as_deref()),
        ]),
    )?;
    manifest.write(&a.out)?;

    let mut queries = load_descriptors_with(&a.queries, a.max_dim, None)?;
    let mut refs = load_descriptors_with(&a.refs, a.max_dim, Some(queries.dim()))?;
    let gt = load_ground_truth(&a.gt)?;
    let metadata = a.metadata.as_ref().map(load_metadata).transpose()?;
    let bg = background(&a.bg, a.max_dim, queries.dim())?;
    if let Some(bg) = &bg {
        match a.bg.mode {
            Mode::Subtract => {
                queries = normalize_descriptor_subtract(&queries, bg)?;
                refs = normalize_descriptor_subtract(&refs, bg)?;
            }
            Mode::Rescale => queries = normalize_descriptor_rescale(&queries, bg, a.bg.rescale_exponent)?,
            Mode::Scores => {}
        }
    }
    let mut list = knn_search(&queries, &refs, a.k)?.to_candidates(&queries, &refs);
    if let (Some(bg), Mode::Scores) = (&bg, a.bg.mode) {
        list = normalize_scores(&list, &queries, bg)?;
    }
    save_candidates(&list, a.out.join("candidates.csv"))?;
    let micro = micro_ap(&list, &gt, gt.len())?;
    let aps = per_query_aps(&list, &gt);
    finish(&a.out, Some(&micro), &aps, metadata.as_deref(), Some(a.lambda), &a.bins)
}

fn eval_matching(a: &EvalMatchingArgs) -> Result<()> {
    check_lambda(a.lambda)?;
    bins(&a.bins)?;
    let manifest = RunManifest::new(
        "eval-matching",
        a,
        &inputs(&[
            ("candidates", Some(a.candidates.as_path())),
            ("gt", Some(a.gt.as_path())),
            ("metadata", a.metadata.as_deref()),
        ]),
    )?;
    manifest.write(&a.out)?;
    let gt = load_ground_truth(&a.gt)?;
    let metadata = a.metadata.as_ref().map(load_metadata).transpose()?;
    let eval = evaluate_candidates_file(&a.candidates, &gt, a.row_budget, None)?;
    log::info!("{} candidate rows, {} spilled run(s)", eval.rows, eval.runs);
    finish(&a.out, Some(&eval.micro), &eval.aps, metadata.as_deref(), Some(a.lambda), &a.bins)
}

fn normalize(a: &NormalizeArgs) -> Result<()> {
    check_bg(&a.bg)?;
    if a.bg.bg.is_none() {
        return Err(Error::InvalidArgument("normalize needs --bg".into()));
    }
    if a.bg.mode == Mode::Scores && a.candidates.is_none() {
        return Err(Error::InvalidArgument("--mode scores needs --candidates".into()));
    }
    let manifest = RunManifest::new(
        "normalize",
        a,
        &inputs(&[
            ("queries", Some(a.queries.as_path())),
            ("refs", a.refs.as_deref()),
            ("candidates", a.candidates.as_deref()),
            ("bg", a.bg.bg.as_deref()),
        ]),
    )?;
    manifest.write(&a.out)?;
    let queries = load_descriptors_with(&a.queries, a.max_dim, None)?;
    let bg = background(&a.bg, a.max_dim, queries.dim())?.expect("checked above");
    let save = |set: &DescriptorSet, name: &str| save_descriptors(set, a.out.join(name));
    match a.bg.mode {
        Mode::Scores => {
            let list = load_candidates(a.candidates.as_ref().expect("checked above"))?;
            save_candidates(&normalize_scores(&list, &queries, &bg)?, a.out.join("candidates.csv"))
        }
        Mode::Subtract => {
            save(&normalize_descriptor_subtract(&queries, &bg)?, "queries.dsc")?;
            if let Some(r) = &a.refs {
                let refs = load_descriptors_with(r, a.max_dim, Some(queries.dim()))?;
                save(&normalize_descriptor_subtract(&refs, &bg)?, "refs.dsc")?;
            }
            Ok(())
        }
        Mode::Rescale => save(&normalize_descriptor_rescale(&queries, &bg, a.bg.rescale_exponent)?, "queries.dsc"),
    }
}

fn penalty(a: &PenaltyArgs) -> Result<()> {
    check_lambda(a.lambda)?;
    let manifest = RunManifest::new(
        "penalty",
        a,
        &inputs(&[("aps", Some(a.aps.as_path())), ("metadata", Some(a.metadata.as_path()))]),
    )?;
    manifest.write(&a.out)?;
    let aps = load_aps(&a.aps)?;
    let metadata = load_metadata(&a.metadata)?;
    let registry = Registry::builtin();
    let design = build_design(&metadata, &aps, registry)?;
    let model = fit_penalties(&design, a.lambda)?;
    write_file(&a.out.join("penalties.csv"), |w| write_penalty_csv(&model, &design, registry, w))?;
    let manual = metadata.iter().filter(|m| m.edit_mode == EditMode::Manual).count();
    write_json(
        &a.out.join("penalty.json"),
        &json!({
            "rows": design.rows(),
            "columns": design.cols(),
            "excluded_manual_records": manual,
            "model": model,
        }),
    )
}

fn report(a: &ReportArgs) -> Result<()> {
    if let Some(l) = a.lambda {
        check_lambda(l)?;
    }
    bins(&a.bins)?;
    let manifest = RunManifest::new(
        "report",
        a,
        &inputs(&[
            ("aps", Some(a.aps.as_path())),
            ("metadata", a.metadata.as_deref()),
            ("candidates", a.candidates.as_deref()),
            ("gt", a.gt.as_deref()),
        ]),
    )?;
    manifest.write(&a.out)?;
    let aps = load_aps(&a.aps)?;
    let metadata = a.metadata.as_ref().map(load_metadata).transpose()?;
    let micro = match (&a.candidates, &a.gt) {
        (Some(c), Some(g)) => {
            let gt = load_ground_truth(g)?;
            Some(evaluate_candidates_file(c, &gt, DEFAULT_ROW_BUDGET, None)?.micro)
        }
        _ => None,
    };
    finish(&a.out, micro.as_ref(), &aps, metadata.as_deref(), a.lambda, &a.bins)
}

fn compare(a: &CompareArgs) -> Result<()> {
    if a.x.len() != a.y.len() {
        return Err(Error::InvalidArgument(format!(
            "{} --x reports but {} --y reports",
            a.x.len(),
            a.y.len()
        )));
    }
    let report_files: Vec<_> = a.x.iter().chain(&a.y).map(|d| d.join("report.json")).collect();
    let roles: Vec<String> = (0..a.x.len())
        .map(|i| format!("x{i}"))
        .chain((0..a.y.len()).map(|i| format!("y{i}")))
        .collect();
    let items: Vec<(&str, &Path)> = roles.iter().map(String::as_str).zip(report_files.iter().map(|p| p.as_path())).collect();
    let manifest = RunManifest::new("compare", &json!({ "metric": a.metric }), &items)?;
    manifest.write(&a.out)?;
    let value = |dir: &Path| -> Result<f64> {
        let s = load_report(dir)?.summary;
        let v = match a.metric {
            Metric::MicroAp => s.micro_ap,
            Metric::Map => s.map,
        };
        v.ok_or_else(|| Error::InvalidArgument(format!("{} has no {:?} value", dir.display(), a.metric)))
    };
    let label = |d: &Path| d.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rows = Vec::new();
    for (x, y) in a.x.iter().zip(&a.y) {
        rows.push((label(x), label(y), value(x)?, value(y)?));
    }
    write_file(&a.out.join("compare.csv"), |w| {
        writeln!(w, "x_report,y_report,x,y")?;
        for (lx, ly, x, y) in &rows {
            writeln!(w, "{lx},{ly},{x},{y}")?;
        }
        Ok(())
    })
}
