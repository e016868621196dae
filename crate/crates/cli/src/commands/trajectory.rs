use std::path::Path;

use anyhow::Result;
use cast_core::trajectory::{self, EffectSeries, TrajectoryError, TrajectoryReport};

use crate::args::TrajectoryArgs;
use crate::util::{self, usage, InputFile};

fn classify(e: TrajectoryError) -> anyhow::Error {
    match e {
        TrajectoryError::TooFewPoints { .. }
        | TrajectoryError::InvalidSeries(_)
        | TrajectoryError::Csv(_)
        | TrajectoryError::Io(_) => usage(e),
        other => other.into(),
    }
}

/// Writes `curves_<estimand>.csv` and `summary.json`; returns the file names.
pub fn write_report(dir: &Path, series: &[EffectSeries], gnuplot: bool) -> Result<(TrajectoryReport, Vec<String>)> {
    let report = trajectory::trajectory_report(series).map_err(classify)?;
    let mut outputs = vec!["summary.json".to_string()];
    for e in &report.estimands {
        let est = e.series.estimand;
        let name = format!("curves_{}.csv", est.name());
        util::write_csv_with(dir, &name, |buf| Ok(report.write_curve_csv(est, buf)?))?;
        if gnuplot {
            util::gnuplot_stub(
                dir,
                &name,
                &format!("{} effect trajectory", est.name()),
                &[(2, "lines"), (3, "lines dt 2"), (4, "lines dt 2"), (5, "lines")],
            )?;
        }
        outputs.push(name);
    }
    util::write_json(dir, "summary.json", &report.summaries())?;
    Ok((report, outputs))
}

pub fn run(args: &TrajectoryArgs) -> Result<()> {
    let text = util::read_text(&args.estimates)?;
    let default = args.estimand.estimands()[0];
    let series = trajectory::read_series_csv(text.as_bytes(), default).map_err(classify)?;
    let dir = util::out_dir(&args.common)?;
    let (report, outputs) = write_report(dir, &series, args.common.gnuplot)?;
    util::write_manifest(
        dir,
        "trajectory",
        &serde_json::json!({ "default_estimand": default.name() }),
        vec![InputFile::new("estimates", &util::file_name(&args.estimates), text.as_bytes())],
        outputs,
    )?;
    for s in report.summaries() {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.3}"));
        eprintln!(
            "{}: quadratic peak {} (max {}), half-life {}, spline peak {}",
            s.estimand.name(),
            opt(s.t_peak),
            opt(s.max_effect),
            opt(s.half_life),
            opt(s.spline_peak)
        );
    }
    Ok(())
}
