//! Implementations behind the CLI subcommands, reusable from the binary, the
//! C bindings and tests. Every command is deterministic given (config, seed):
//! two runs write byte-identical files.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::accounting::{self, ComplexityAudit};
use crate::config::{HarnessConfig, ParamInit};
use crate::error::{Error, Result};
use crate::init;
use crate::io;
use crate::pyramid::{
    self, assign_fpn_level, mismatch_rate, FeaturePyramid, GtBox, MismatchReport, OpNetParams,
    LEVEL_NAMES,
};
use crate::training::{self, GradScope, SuiteCase, ToyTaskResult};

/// Stable CLI exit codes: 0 success, 1 usage/config, 2 I/O, 3 contract
/// violation, 4 numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Io { .. } | Error::Format(_) | Error::Truncated { .. } => 2,
        Error::Contract(_) => 3,
        Error::NonDeterministic(_) | Error::Diverged { .. } | Error::Numeric(_) => 4,
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Build the feature-path parameters selected by the config for a pyramid of
/// `channels` channels.
pub fn build_params(cfg: &HarnessConfig, channels: usize) -> OpNetParams {
    let mut params = match cfg.param_init {
        ParamInit::Seeded => OpNetParams::seeded(channels, &mut init::rng(cfg.seed)),
        ParamInit::Identity => OpNetParams::residual_identity(channels),
    };
    params.mp.cross_config = cfg.cross_config();
    params
}

fn synthetic_pyramid(cfg: &HarnessConfig) -> Result<FeaturePyramid> {
    let mut rng = init::rng(cfg.seed);
    let levels = pyramid::level_dims(cfg.s2_height, cfg.s2_width)
        .iter()
        .map(|&(h, w)| init::standard_normal([cfg.batch, cfg.channels, h, w], &mut rng))
        .collect();
    FeaturePyramid::new(levels)
}

/// `gen`: write a seeded standard-normal pyramid to `out_dir`.
pub fn run_gen(cfg: &HarnessConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let p = synthetic_pyramid(cfg)?;
    io::write_pyramid_dir(out_dir, &p)
}

#[derive(Debug, Clone)]
pub struct ForwardSummary {
    pub level_shapes: Vec<(String, [usize; 4])>,
    pub mp_intermediate: [usize; 4],
}

/// `forward`: run the full feature path over the pyramid in `input_dir` and
/// write the output pyramid plus a `shapes.json` echo to `out_dir`.
pub fn run_forward(cfg: &HarnessConfig, input_dir: &Path, out_dir: &Path) -> Result<ForwardSummary> {
    cfg.validate()?;
    let p = io::read_pyramid_dir(input_dir)?;
    let channels = p.channels();
    let op_cfg = cfg.op_config();
    op_cfg.validate(channels)?;
    let params = build_params(cfg, channels);
    let (out, _) = pyramid::opnet_feature_path(&p, &params.base, &params.mp, &op_cfg, None)?;
    io::write_pyramid_dir(out_dir, &out)?;

    let (s2_h, s2_w) = p.s2_dims();
    let summary = ForwardSummary {
        level_shapes: out
            .levels()
            .iter()
            .enumerate()
            .map(|(i, t)| (LEVEL_NAMES[i].to_string(), t.shape()))
            .collect(),
        mp_intermediate: [p.batch(), pyramid::LEVEL_COUNT, s2_h, s2_w],
    };
    let mut levels = serde_json::Map::new();
    for (name, shape) in &summary.level_shapes {
        levels.insert(name.clone(), serde_json::json!(shape));
    }
    let echo = serde_json::json!({
        "levels": levels,
        "mp_intermediate": summary.mp_intermediate,
    });
    write_text(
        &out_dir.join("shapes.json"),
        &serde_json::to_string_pretty(&echo).expect("shape echo serializes"),
    )?;
    Ok(summary)
}

pub fn gradcheck_csv(cases: &[SuiteCase]) -> String {
    let mut rows: Vec<(String, String, f64, bool)> = Vec::new();
    for case in cases {
        for entry in &case.report.entries {
            rows.push((
                case.name.clone(),
                entry.name.clone(),
                entry.max_rel_err,
                entry.max_rel_err < case.report.threshold,
            ));
        }
    }
    rows.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    let mut s = String::from("case,parameter,max_rel_err,pass\n");
    for (case, param, err, pass) in rows {
        s.push_str(&format!("{case},{param},{err},{pass}\n"));
    }
    s
}

/// `gradcheck`: run the suite for a scope at the config seed and tolerances,
/// write `gradcheck.csv`, and report whether everything passed.
pub fn run_gradcheck(
    cfg: &HarnessConfig,
    scope: GradScope,
    out_dir: &Path,
) -> Result<(Vec<SuiteCase>, bool)> {
    cfg.validate()?;
    let cases = training::gradcheck_suite(
        scope,
        cfg.seed,
        cfg.tolerances.grad_epsilon,
        cfg.tolerances.grad_threshold,
    )?;
    write_text(&out_dir.join("gradcheck.csv"), &gradcheck_csv(&cases))?;
    let pass = cases.iter().all(|c| c.report.pass);
    Ok((cases, pass))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub heads: Vec<usize>,
    pub channels: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { heads: vec![1, 2, 4, 8], channels: vec![8, 16, 32] }
    }
}

/// Parse sweep tokens of the form `P=1,2,4` and `C=8,16,32`; omitted axes keep
/// their defaults.
pub fn parse_sweep(tokens: &[String]) -> Result<SweepSpec> {
    let mut spec = SweepSpec::default();
    for token in tokens {
        let (axis, list) = token
            .split_once('=')
            .ok_or_else(|| Error::config(format!("sweep token {token:?} is not AXIS=v1,v2,...")))?;
        let values = list
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("sweep value {s:?} is not an integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        match axis {
            "P" | "p" => spec.heads = values,
            "C" | "c" => spec.channels = values,
            other => {
                return Err(Error::config(format!(
                    "unknown sweep axis {other:?}; expected P or C"
                )))
            }
        }
    }
    Ok(spec)
}

/// `count`: write `accounting.csv`/`accounting.json` for the configured
/// geometry; with a sweep, also run the similarity-stage audit and write
/// `complexity.csv`.
pub fn run_count(
    cfg: &HarnessConfig,
    sweep: Option<&SweepSpec>,
    out_dir: &Path,
) -> Result<(accounting::AccountingReport, Option<ComplexityAudit>)> {
    cfg.validate()?;
    let report = pyramid::count_pyramid_macs_params(
        cfg.batch,
        cfg.channels,
        cfg.s2_height,
        cfg.s2_width,
        &cfg.op_config(),
        &cfg.cross_config(),
    )?;
    write_text(&out_dir.join("accounting.csv"), &report.to_csv())?;

    let audit = match sweep {
        Some(spec) => {
            let audit = accounting::complexity_audit(1, 8, 8, &spec.heads, &spec.channels, cfg.seed)?;
            write_text(&out_dir.join("complexity.csv"), &audit.to_csv())?;
            Some(audit)
        }
        None => None,
    };
    let mut json = report.to_json_value();
    if let Some(a) = &audit {
        json["complexity_audit"] = serde_json::to_value(a).expect("audit serializes");
    }
    write_text(
        &out_dir.join("accounting.json"),
        &serde_json::to_string_pretty(&json).expect("report serializes"),
    )?;
    Ok((report, audit))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// One row per pyramid level, columns S2..S6; empty cell for levels that
/// received no boxes.
pub fn mismatch_csv(report: &MismatchReport) -> String {
    let mut s = String::from("S2,S3,S4,S5,S6\n");
    let cells: Vec<String> = (2..=6u8)
        .map(|lvl| report.per_level.get(&lvl).map(|r| r.to_string()).unwrap_or_default())
        .collect();
    s.push_str(&cells.join(","));
    s.push('\n');
    s
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub training: ToyTaskResult,
    pub mismatch: MismatchReport,
}

fn shifted_level<R: Rng>(gt: u8, rng: &mut R) -> u8 {
    let up = rng.random::<bool>();
    match (gt, up) {
        (6, _) => 5,
        (2, _) => 3,
        (lvl, true) => lvl + 1,
        (lvl, false) => lvl - 1,
    }
}

/// `experiment`: run the toy training task (writes `loss.csv`) and the
/// synthetic level-mismatch study (writes `mismatch.csv`). `perturb` is the
/// probability of replacing a box's chosen level by a +/-1 shift.
pub fn run_experiment(
    cfg: &HarnessConfig,
    steps: usize,
    perturb: f64,
    out_dir: &Path,
) -> Result<ExperimentSummary> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&perturb) {
        return Err(Error::config(format!(
            "perturbation rate must lie in [0, 1], got {perturb}"
        )));
    }
    if steps < 1 {
        return Err(Error::config("experiment needs at least one step".to_string()));
    }
    let training = training::toy_task_run(cfg.seed, steps, &cfg.sgd)?;
    write_text(&out_dir.join("loss.csv"), &loss_csv(&training.losses))?;

    let mut rng = init::rng(cfg.seed ^ 0xb0c5_ea11);
    let (lo, hi) = (8.0f64.ln(), 2048.0f64.ln());
    let mut pairs = Vec::with_capacity(cfg.boxes);
    for _ in 0..cfg.boxes {
        let bx = GtBox::new(rng.random_range(lo..hi).exp(), rng.random_range(lo..hi).exp());
        let gt = assign_fpn_level(&bx)?;
        let chosen = if rng.random::<f64>() < perturb { shifted_level(gt, &mut rng) } else { gt };
        pairs.push((chosen, gt));
    }
    let mismatch = mismatch_rate(&pairs)?;
    write_text(&out_dir.join("mismatch.csv"), &mismatch_csv(&mismatch))?;
    Ok(ExperimentSummary { training, mismatch })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let spec = parse_sweep(&["P=1,2,4".to_string(), "C=8".to_string()]).unwrap();
        assert_eq!(spec.heads, vec![1, 2, 4]);
        assert_eq!(spec.channels, vec![8]);
        let defaults = parse_sweep(&[]).unwrap();
        assert_eq!(defaults, SweepSpec::default());
        assert!(parse_sweep(&["Q=3".to_string()]).is_err());
        assert!(parse_sweep(&["P=x".to_string()]).is_err());
    }

    #[test]
    fn mismatch_csv_layout() {
        let report = MismatchReport {
            overall: 0.5,
            per_level: [(2u8, 0.25), (5u8, 1.0)].into_iter().collect(),
        };
        let csv = mismatch_csv(&report);
        assert_eq!(csv, "S2,S3,S4,S5,S6\n0.25,,,1,\n");
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::config("x")), 1);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(exit_code(&Error::Truncated { expected: 1, actual: 0 }), 2);
        assert_eq!(exit_code(&Error::contract("x")), 3);
        assert_eq!(exit_code(&Error::Diverged { step: 3 }), 4);
    }

    #[test]
    fn shifted_level_never_matches() {
        let mut rng = init::rng(5);
        for gt in 2..=6u8 {
            for _ in 0..20 {
                let s = shifted_level(gt, &mut rng);
                assert_ne!(s, gt);
                assert!((2..=6).contains(&s));
            }
        }
    }
}
