use anyhow::Result;
use cast_core::synth::{self, ScenarioConfig, SynthError};

use crate::args::SimulateArgs;
use crate::util::{self, usage, InputFile};

pub fn run(args: &SimulateArgs) -> Result<()> {
    let mut cfg = match &args.scenario {
        Some(p) => {
            let text = util::read_text(p)?;
            ScenarioConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => ScenarioConfig::radcure_like(),
    };
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if args.null {
        cfg = cfg.null_effect();
    }
    let g = util::with_threads(args.common.threads, || synth::generate(&cfg))?.map_err(|e| match e {
        SynthError::Config(_) | SynthError::Toml(_) | SynthError::NonPositiveDose => usage(e),
        other => other.into(),
    })?;
    let dir = util::out_dir(&args.common)?;
    let scenario = cfg.to_toml();
    util::write(dir, "cohort.csv", &g.csv)?;
    util::write(dir, "schema.cfg", g.schema.to_text())?;
    util::write(dir, "scenario.toml", &scenario)?;
    util::write_json(dir, "truth.json", &g.truth)?;
    util::write_manifest(
        dir,
        "simulate",
        &cfg,
        vec![InputFile::new("scenario", "scenario.toml", scenario.as_bytes())],
        ["cohort.csv", "schema.cfg", "scenario.toml", "truth.json"].map(String::from).to_vec(),
    )?;
    eprintln!(
        "simulated {} subjects: event rate {:.3}, treated {:.3}",
        g.cohort.len(),
        g.cohort.event_rate(),
        g.cohort.treatment_rate()
    );
    Ok(())
}
