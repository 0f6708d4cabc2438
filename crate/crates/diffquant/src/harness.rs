//! Experiment orchestration: train-or-load, the canonical variant matrix
//! (full precision / plain quantization / smoothing / staged correction /
//! both), artifact persistence, and report regeneration from the artifacts.
//!
//! Artifact layout under `run.out_dir`:
//!   config.toml            resolved config echo, every default materialized
//!   model.dqw              the clean trained network (imbalance injection is
//!                          a config property, re-applied after every load)
//!   trajectory.csv         per-(run, step) statistics paired against FP
//!   summary.csv            one row per run
//!   layers.csv             per-hook error profile of each quantized variant
//!   samples/{run_id}.csv   final samples of every run
//!   params_{variant}.json  fitted grids plus smoothing factors
//!   plot_data.csv          per-(variant, step) medians over seeds
//!   plot.gp                gnuplot script rendering plot_data.csv

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{CorrectionConfig, ExperimentConfig};
use crate::correction::{corrected_sample_loop, stage_plan, SampleLoopConfig, StagePlan};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::metrics::{
    layer_error_profile, median, sliced_wasserstein, trajectory_stats, write_layers_csv,
    write_summary_csv, write_trajectory_csv, LayerRow, SummaryRow, TrajectoryRecord,
    TrajectoryRow,
};
use crate::quantizer::{
    collect_calibration, quantize_model, BitConfig, Bits, CalibrationSet, QuantizeOptions,
    QuantizedDenoiser,
};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::smoothing::apply_smoothing;
use crate::tensor::Tensor;
use crate::train::{train, TrainReport};
use crate::weights::{load_model, save_model};

/// RNG stream for weight init under the training seed; batches use stream 0.
const INIT_STREAM: u64 = 4;
/// RNG stream for the layer-profile probe batch, under the calibration seed.
const PROFILE_STREAM: u64 = 5;
/// RNG stream for sliced-Wasserstein projections, under the run seed. Each
/// distance computation opens a fresh generator on this stream, so every
/// variant at a given seed is measured along identical directions.
const SWD_STREAM: u64 = 6;
/// Rows in the layer-profile probe batch.
const PROFILE_ROWS: usize = 256;

/// One cell of the run matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// The unquantized reference network.
    Fp,
    /// Plain quantization, no correction.
    Ptq,
    /// Channel smoothing folded into the weights before calibration.
    Intra,
    /// Staged runtime noise estimation during sampling.
    Inter,
    /// Smoothing and staged estimation together.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Fp, Variant::Ptq, Variant::Intra, Variant::Inter, Variant::Full];
    /// The four quantized cells, in reporting order.
    pub const QUARTET: [Variant; 4] =
        [Variant::Ptq, Variant::Intra, Variant::Inter, Variant::Full];

    pub fn token(self) -> &'static str {
        match self {
            Variant::Fp => "fp",
            Variant::Ptq => "ptq",
            Variant::Intra => "intra",
            Variant::Inter => "inter",
            Variant::Full => "full",
        }
    }

    pub fn from_token(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.token() == s)
    }

    /// Whether this cell's weights carry the smoothing fold.
    pub fn smoothed(self) -> bool {
        matches!(self, Variant::Intra | Variant::Full)
    }

    /// Whether this cell's sampling loop probes and corrects.
    pub fn staged(self) -> bool {
        matches!(self, Variant::Inter | Variant::Full)
    }

    /// The cell a correction config describes.
    pub fn of(c: &CorrectionConfig) -> Variant {
        match (c.intra, c.stages > 0) {
            (false, false) => Variant::Ptq,
            (true, false) => Variant::Intra,
            (false, true) => Variant::Inter,
            (true, true) => Variant::Full,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

pub fn run_id(hash: &str, variant: Variant, seed: u64) -> String {
    format!("{hash}-{}-s{seed}", variant.token())
}

/// Everything the run matrix consumes, derived once per invocation.
#[derive(Debug)]
pub struct Prepared {
    pub hash: String,
    pub gmm: GaussianMixture,
    pub schedule: NoiseSchedule,
    /// Trained (or loaded) network before imbalance injection; this is what
    /// `model.dqw` stores.
    pub clean_model: DenoiserModel,
    /// The network the experiment actually runs: `clean_model` plus any
    /// configured channel imbalance.
    pub model: DenoiserModel,
    pub calib: CalibrationSet,
    pub train_report: Option<TrainReport>,
}

fn trained_clean_model(
    cfg: &ExperimentConfig,
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
) -> Result<(DenoiserModel, Option<TrainReport>)> {
    let m = &cfg.model;
    if let Some(path) = &m.weights_path {
        let model = load_model(path)?;
        let same = model.blocks.len() == m.n_blocks
            && model.hidden() == m.hidden
            && model.emb_dim == m.emb_dim
            && model.data_dim == gmm.dim()
            && model.blocks.iter().all(|b| b.groups == m.groups && b.style == m.style);
        if !same {
            return Err(Error::Config(format!(
                "saved weights at {} do not match the configured architecture",
                path.display()
            )));
        }
        return Ok((model, None));
    }
    let mut rng = Rng::with_stream(cfg.train.seed, INIT_STREAM);
    let mut model =
        DenoiserModel::init(m.n_blocks, gmm.dim(), m.hidden, m.emb_dim, m.groups, m.style, &mut rng)?;
    let report = train(&mut model, gmm, schedule, &cfg.train)?;
    Ok((model, Some(report)))
}

/// Validate the config, train or load the network, inject any configured
/// imbalance, and collect calibration rows from the working network.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let gmm = cfg.data.build()?;
    let schedule = cfg.schedule.build()?;
    let (clean_model, train_report) = trained_clean_model(cfg, &gmm, &schedule)?;
    let mut model = clean_model.clone();
    if let Some(im) = &cfg.model.imbalance {
        model.inject_imbalance(&im.channels, im.factor)?;
    }
    let mut crng = Rng::new(cfg.quant.calibration_seed);
    let calib = collect_calibration(
        &model,
        &schedule,
        cfg.quant.calibration_samples,
        cfg.quant.stratified,
        &mut crng,
    )?;
    Ok(Prepared {
        hash: cfg.hash8()?,
        gmm,
        schedule,
        clean_model,
        model,
        calib,
        train_report,
    })
}

/// Train per config and persist the clean network to `out_dir/model.dqw`.
pub fn train_to_disk(cfg: &ExperimentConfig) -> Result<(PathBuf, TrainReport)> {
    cfg.validate()?;
    if cfg.model.weights_path.is_some() {
        return Err(Error::Config(
            "config already points at saved weights; drop model.weights_path to train".into(),
        ));
    }
    let gmm = cfg.data.build()?;
    let schedule = cfg.schedule.build()?;
    let (model, report) = trained_clean_model(cfg, &gmm, &schedule)?;
    let report = report.expect("training path always yields a report");
    fs::create_dir_all(&cfg.run.out_dir).map_err(|e| Error::io(&cfg.run.out_dir, e))?;
    let path = cfg.run.out_dir.join("model.dqw");
    save_model(&path, &model)?;
    Ok((path, report))
}

fn quant_options(cfg: &ExperimentConfig) -> QuantizeOptions {
    QuantizeOptions { grid: cfg.quant.grid, exempt_emb_out: cfg.quant.exempt_emb_out }
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json_pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serialization never fails") + "\n"
}

/// Collect calibration and persist the quantizer artifacts without sampling:
/// `model.dqw`, `calibration.json` (draw statistics), and the fitted-grid
/// sidecar for the configured variant. Returns the calibration summary.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let p = prepare(cfg)?;
    let out = &cfg.run.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_model(&out.join("model.dqw"), &p.clean_model)?;

    let variant = Variant::of(&cfg.correction);
    let plain = quantize_model(&p.model, &p.calib, cfg.quant.bits, &quant_options(cfg))?;
    let net = if variant.smoothed() { apply_smoothing(&plain)? } else { plain };
    write_text(
        &out.join(format!("params_{}.json", variant.token())),
        &json_pretty(&net.sidecar_json()),
    )?;

    let summary = serde_json::json!({
        "config": p.hash,
        "n_samples": p.calib.len(),
        "stratified": cfg.quant.stratified,
        "t_max": p.calib.t_max,
        "chi2_uniform": p.calib.chi2_uniform(),
        "timestep_histogram": p.calib.timestep_histogram(),
    });
    write_text(&out.join("calibration.json"), &json_pretty(&summary))?;
    Ok(summary)
}

/// Run the variant the config describes (plus its paired FP reference) and
/// persist all artifacts. Returns the summary rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    execute(cfg, &[Variant::of(&cfg.correction)])
}

/// Run the whole quartet against one shared FP reference per seed.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    execute(cfg, &Variant::QUARTET)
}

fn execute(cfg: &ExperimentConfig, requested: &[Variant]) -> Result<Vec<SummaryRow>> {
    let wanted: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| *v != Variant::Fp && requested.contains(v))
        .collect();
    if wanted.is_empty() {
        return Err(Error::InvalidArg("no quantized variant requested".into()));
    }
    if wanted.iter().any(|v| v.staged()) && cfg.correction.stages == 0 {
        return Err(Error::Config(
            "staged variants need correction.stages >= 1".into(),
        ));
    }

    let p = prepare(cfg)?;
    let out = cfg.run.out_dir.clone();
    let samples_dir = out.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    write_text(&out.join("config.toml"), &cfg.to_toml_string()?)?;
    save_model(&out.join("model.dqw"), &p.clean_model)?;

    let plain = quantize_model(&p.model, &p.calib, cfg.quant.bits, &quant_options(cfg))?;
    let smooth = if wanted.iter().any(|v| v.smoothed()) {
        Some(apply_smoothing(&plain)?)
    } else {
        None
    };
    let net_for = |v: Variant| -> &QuantizedDenoiser {
        if v.smoothed() {
            smooth.as_ref().expect("built above")
        } else {
            &plain
        }
    };

    let steps = cfg.run.sampler.step_sequence(p.schedule.t_max())?;
    let staged = if wanted.iter().any(|v| v.staged()) {
        Some(stage_plan(&steps, cfg.correction.stages)?)
    } else {
        None
    };

    let d = p.gmm.dim();
    let fp_label = BitConfig { weights: Bits::Fp, acts: Bits::Fp }.to_string();
    let mut summary: Vec<SummaryRow> = Vec::new();
    let mut traj_rows: Vec<TrajectoryRow> = Vec::new();
    let mut per_variant: BTreeMap<Variant, BTreeMap<u64, Vec<TrajectoryRecord>>> = BTreeMap::new();

    for &seed in &cfg.run.seeds {
        let loop_cfg = SampleLoopConfig {
            n: cfg.run.n_samples,
            seed,
            mode: cfg.correction.mode,
            antithetic: cfg.correction.antithetic,
            sampler: cfg.run.sampler,
        };
        let (x_fp, diag_fp) =
            corrected_sample_loop(&p.model, &p.schedule, &StagePlan::disabled(), &loop_cfg)?;
        let fp_records = trajectory_stats(&diag_fp, &diag_fp)?;
        let fp_id = run_id(&p.hash, Variant::Fp, seed);
        write_samples_csv(&samples_dir.join(format!("{fp_id}.csv")), &x_fp)?;
        let mut fp_rng = Rng::with_stream(seed, SWD_STREAM);
        summary.push(SummaryRow {
            run_id: fp_id.clone(),
            config_label: fp_label.clone(),
            intra_enabled: false,
            inter_stages: 0,
            correction_mode: cfg.correction.mode.to_string(),
            seed,
            swd_to_fp: sliced_wasserstein(&x_fp, &x_fp, cfg.run.swd_projections, &mut fp_rng)?,
            final_cosine: fp_records.last().expect("nonempty run").cosine,
            eval_count: diag_fp.eval_count,
        });
        for r in &fp_records {
            traj_rows.push(TrajectoryRow { run_id: fp_id.clone(), record: r.clone() });
        }
        per_variant.entry(Variant::Fp).or_default().insert(seed, fp_records);

        for &variant in &wanted {
            let plan = if variant.staged() {
                staged.clone().expect("built above")
            } else {
                StagePlan::disabled()
            };
            let (x_q, diag_q) =
                corrected_sample_loop(net_for(variant), &p.schedule, &plan, &loop_cfg)?;
            let records = trajectory_stats(&diag_fp, &diag_q)?;
            let id = run_id(&p.hash, variant, seed);
            write_samples_csv(&samples_dir.join(format!("{id}.csv")), &x_q)?;
            let mut rng = Rng::with_stream(seed, SWD_STREAM);
            summary.push(SummaryRow {
                run_id: id.clone(),
                config_label: cfg.quant.bits.to_string(),
                intra_enabled: variant.smoothed(),
                inter_stages: if variant.staged() { cfg.correction.stages } else { 0 },
                correction_mode: cfg.correction.mode.to_string(),
                seed,
                swd_to_fp: sliced_wasserstein(&x_q, &x_fp, cfg.run.swd_projections, &mut rng)?,
                final_cosine: records.last().expect("nonempty run").cosine,
                eval_count: diag_q.eval_count,
            });
            for r in &records {
                traj_rows.push(TrajectoryRow { run_id: id.clone(), record: r.clone() });
            }
            per_variant.entry(variant).or_default().insert(seed, records);
        }
    }

    let (x_probe, ts_probe) = profile_batch(cfg, &p.gmm, &p.schedule)?;
    let first_seed = cfg.run.seeds[0];
    let mut layer_rows = Vec::new();
    for &variant in &wanted {
        let profile = layer_error_profile(&p.model, net_for(variant), &x_probe, &ts_probe)?;
        let id = run_id(&p.hash, variant, first_seed);
        for record in profile {
            layer_rows.push(LayerRow { run_id: id.clone(), record });
        }
    }

    write_trajectory_csv(&out.join("trajectory.csv"), &traj_rows, d)?;
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    write_layers_csv(&out.join("layers.csv"), &layer_rows)?;
    for &variant in &wanted {
        write_text(
            &out.join(format!("params_{}.json", variant.token())),
            &json_pretty(&net_for(variant).sidecar_json()),
        )?;
    }
    write_plot_data(&out.join("plot_data.csv"), &per_variant, d)?;
    write_text(&out.join("plot.gp"), &plot_script(&wanted))?;

    Ok(summary)
}

/// Probe batch for the layer profile: mixture draws diffused to uniformly
/// drawn timesteps, seeded independently of both calibration and the runs.
fn profile_batch(
    cfg: &ExperimentConfig,
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, Vec<usize>)> {
    let mut rng = Rng::with_stream(cfg.quant.calibration_seed, PROFILE_STREAM);
    let t_max = schedule.t_max();
    let n = PROFILE_ROWS;
    let ts: Vec<usize> =
        (0..n).map(|_| rng.int_range(1, t_max as u64) as usize).collect();
    let x0 = gmm.sample(&mut rng, n);
    let eps = rng.randn(n, gmm.dim());
    let mut x = Tensor::zeros(n, gmm.dim());
    for r in 0..n {
        let ab = schedule.alpha_bar(ts[r]);
        for c in 0..gmm.dim() {
            x.set(r, c, ab.sqrt() * x0.get(r, c) + (1.0 - ab).sqrt() * eps.get(r, c));
        }
    }
    Ok((x, ts))
}

fn write_samples_csv(path: &Path, x: &Tensor) -> Result<()> {
    let mut s = String::new();
    for j in 0..x.cols() {
        if j > 0 {
            s.push(',');
        }
        let _ = write!(s, "x_{j}");
    }
    s.push('\n');
    for r in 0..x.rows() {
        for (j, v) in x.row_slice(r).iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    write_text(path, &s)
}

fn read_samples_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArg(format!("{}: empty samples file", path.display())))?;
    let cols = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0usize;
    for line in lines {
        for field in line.split(',') {
            data.push(field.parse::<f64>().map_err(|_| {
                Error::InvalidArg(format!("{}: bad sample value {field:?}", path.display()))
            })?);
        }
        rows += 1;
    }
    Tensor::new(rows, cols, data)
}

/// Per-(variant, step) medians over seeds: prediction SNR and cosine against
/// the paired FP run, plus per-dimension |batch mean - FP batch mean|.
fn write_plot_data(
    path: &Path,
    per_variant: &BTreeMap<Variant, BTreeMap<u64, Vec<TrajectoryRecord>>>,
    d: usize,
) -> Result<()> {
    let fp = per_variant
        .get(&Variant::Fp)
        .ok_or_else(|| Error::InvalidArg("plot data needs the FP reference".into()))?;
    let mut s = String::from("variant,step_index,t,snr_db,cosine");
    for j in 0..d {
        let _ = write!(s, ",gap_abs_{j}");
    }
    s.push('\n');
    for (variant, by_seed) in per_variant {
        let n_steps = by_seed.values().next().map(|r| r.len()).unwrap_or(0);
        for i in 0..n_steps {
            let mut snrs = Vec::new();
            let mut cosines = Vec::new();
            let mut gaps: Vec<Vec<f64>> = vec![Vec::new(); d];
            let mut t = 0usize;
            for (seed, records) in by_seed {
                let rec = &records[i];
                let base = &fp[seed][i];
                t = rec.t;
                snrs.push(rec.snr_db);
                cosines.push(rec.cosine);
                for j in 0..d {
                    gaps[j].push((rec.mean[j] - base.mean[j]).abs());
                }
            }
            let _ = write!(
                s,
                "{},{},{},{},{}",
                variant.token(),
                i,
                t,
                median(&snrs)?,
                median(&cosines)?
            );
            for g in &gaps {
                let _ = write!(s, ",{}", median(g)?);
            }
            s.push('\n');
        }
    }
    write_text(path, &s)
}

fn plot_script(wanted: &[Variant]) -> String {
    let tokens: Vec<&str> = wanted.iter().map(|v| v.token()).collect();
    let list = tokens.join(" ");
    format!(
        r#"# Paired diagnostics for the runs in this directory.
# Usage: gnuplot plot.gp   (reads plot_data.csv, writes diagnostics.png)
set datafile separator ','
set terminal pngcairo size 1400,1000
set output 'diagnostics.png'
set multiplot layout 3,1
set key outside right
set xlabel 'step index'

set ylabel 'cosine to FP prediction'
plot for [v in "{list}"] 'plot_data.csv' \
    using 2:(strcol(1) eq v ? $5 : NaN) with lines title v

set ylabel 'prediction SNR (dB)'
plot for [v in "{list}"] 'plot_data.csv' \
    using 2:(strcol(1) eq v ? $4 : NaN) with lines title v

set ylabel '|batch mean - FP batch mean|, dim 0'
plot for [v in "{list}"] 'plot_data.csv' \
    using 2:(strcol(1) eq v ? $6 : NaN) with lines title v
unset multiplot
"#
    )
}

struct ParsedSummary {
    run_id: String,
    variant: Variant,
    seed: u64,
    intra_enabled: bool,
    inter_stages: usize,
    swd_to_fp: f64,
    final_cosine: f64,
    eval_count: usize,
}

fn parse_run_id(hash: &str, id: &str) -> Result<(Variant, u64)> {
    let bad = || Error::InvalidArg(format!("run id {id:?} does not belong to this config"));
    let rest = id.strip_prefix(&format!("{hash}-")).ok_or_else(bad)?;
    let (token, seed_part) = rest.rsplit_once("-s").ok_or_else(bad)?;
    let variant = Variant::from_token(token).ok_or_else(bad)?;
    let seed = seed_part.parse::<u64>().map_err(|_| bad())?;
    Ok((variant, seed))
}

fn split_csv(text: &str, expected_header: &str, what: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == expected_header => {}
        other => {
            return Err(Error::InvalidArg(format!(
                "{what}: unexpected header {other:?}"
            )))
        }
    }
    Ok(lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn parse_field<T: std::str::FromStr>(row: &[String], idx: usize, what: &str) -> Result<T> {
    row.get(idx)
        .and_then(|f| f.parse::<T>().ok())
        .ok_or_else(|| Error::InvalidArg(format!("{what}: bad field {idx} in {row:?}")))
}

/// Re-derive every derivable summary column from the persisted artifacts and
/// check it against summary.csv, then render the resolved config and the
/// verified table. Any mismatch is an error.
pub fn report(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    cfg.validate()?;
    let hash = cfg.hash8()?;
    let d = cfg.data.means.first().map(|m| m.len()).unwrap_or(0);

    let summary_text = fs::read_to_string(out_dir.join("summary.csv"))
        .map_err(|e| Error::io(&out_dir.join("summary.csv"), e))?;
    let summary_rows = split_csv(
        &summary_text,
        "run_id,config_label,intra_enabled,inter_stages,correction_mode,seed,swd_to_fp,final_cosine,eval_count",
        "summary.csv",
    )?;

    let mut traj_header = String::from("run_id,step_index,t");
    for j in 0..d {
        let _ = write!(traj_header, ",mean_{j}");
    }
    for j in 0..d {
        let _ = write!(traj_header, ",std_{j}");
    }
    traj_header.push_str(",snr_db,cosine,is_estimation_step");
    let traj_text = fs::read_to_string(out_dir.join("trajectory.csv"))
        .map_err(|e| Error::io(&out_dir.join("trajectory.csv"), e))?;
    let traj_rows = split_csv(&traj_text, &traj_header, "trajectory.csv")?;

    // Per run id: row count, estimation count, last cosine (rows are written
    // in step order).
    let cosine_idx = 2 * d + 4;
    let est_idx = 2 * d + 5;
    let mut traj: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
    for row in &traj_rows {
        let id = row
            .first()
            .ok_or_else(|| Error::InvalidArg("trajectory.csv: empty row".into()))?
            .clone();
        let cosine: f64 = parse_field(row, cosine_idx, "trajectory.csv")?;
        let est: bool = parse_field(row, est_idx, "trajectory.csv")?;
        let e = traj.entry(id).or_insert((0, 0, f64::NAN));
        e.0 += 1;
        e.1 += est as usize;
        e.2 = cosine;
    }

    let mut parsed = Vec::new();
    for row in &summary_rows {
        let id = row
            .first()
            .ok_or_else(|| Error::InvalidArg("summary.csv: empty row".into()))?
            .clone();
        let (variant, seed) = parse_run_id(&hash, &id)?;
        parsed.push(ParsedSummary {
            run_id: id,
            variant,
            seed,
            intra_enabled: parse_field(row, 2, "summary.csv")?,
            inter_stages: parse_field(row, 3, "summary.csv")?,
            swd_to_fp: parse_field(row, 6, "summary.csv")?,
            final_cosine: parse_field(row, 7, "summary.csv")?,
            eval_count: parse_field(row, 8, "summary.csv")?,
        });
    }

    let mismatch = |id: &str, what: &str| -> Error {
        Error::InvalidArg(format!(
            "report check failed for {id}: {what} disagrees with the persisted artifacts"
        ))
    };
    for row in &parsed {
        if row.intra_enabled != row.variant.smoothed() {
            return Err(mismatch(&row.run_id, "intra_enabled"));
        }
        let expect_stages =
            if row.variant.staged() { cfg.correction.stages } else { 0 };
        if row.inter_stages != expect_stages {
            return Err(mismatch(&row.run_id, "inter_stages"));
        }
        let (n_rows, n_est, last_cosine) = *traj
            .get(&row.run_id)
            .ok_or_else(|| mismatch(&row.run_id, "trajectory presence"))?;
        if row.eval_count != n_rows + n_est {
            return Err(mismatch(&row.run_id, "eval_count"));
        }
        if row.final_cosine.to_bits() != last_cosine.to_bits() {
            return Err(mismatch(&row.run_id, "final_cosine"));
        }

        let fp_path = out_dir
            .join("samples")
            .join(format!("{}.csv", run_id(&hash, Variant::Fp, row.seed)));
        let own_path = out_dir.join("samples").join(format!("{}.csv", row.run_id));
        let x_fp = read_samples_csv(&fp_path)?;
        let x_own = read_samples_csv(&own_path)?;
        let mut rng = Rng::with_stream(row.seed, SWD_STREAM);
        let swd = sliced_wasserstein(&x_own, &x_fp, cfg.run.swd_projections, &mut rng)?;
        if swd.to_bits() != row.swd_to_fp.to_bits() {
            return Err(mismatch(&row.run_id, "swd_to_fp"));
        }
    }

    let mut s = String::new();
    let _ = writeln!(s, "# experiment {hash}: resolved config");
    s.push_str(&cfg.to_toml_string()?);
    let _ = writeln!(s, "\n# summary ({} rows, all re-derivable columns verified)", parsed.len());
    s.push_str(&summary_text);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::{CorrectionMode, SamplerKind};
    use crate::denoiser::FusionStyle;
    use crate::train::{TrainOpts, TrainPhase};

    fn tiny_config(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            data: crate::config::DataConfig {
                weights: vec![0.5, 0.5],
                means: vec![vec![1.5, 0.0], vec![-1.5, 0.0]],
                stds: vec![0.3, 0.3],
            },
            schedule: crate::config::ScheduleConfig {
                t_max: 12,
                beta_start: 1e-4,
                beta_end: 0.02,
                sigma: crate::schedule::SigmaChoice::SqrtBeta,
            },
            model: crate::config::ModelConfig {
                n_blocks: 1,
                hidden: 8,
                emb_dim: 6,
                groups: 2,
                style: FusionStyle::ScaleShift,
                weights_path: None,
                imbalance: None,
            },
            train: TrainOpts {
                batch: 16,
                seed: 11,
                momentum: 0.9,
                symmetrize: true,
                phases: vec![TrainPhase {
                    iters: 300,
                    lr: 3e-3,
                    decay: 1.0,
                    hi_frac: 0.0,
                    hi_from: 10,
                }],
            },
            quant: crate::config::QuantConfig {
                bits: "W4A8".parse().unwrap(),
                calibration_samples: 64,
                calibration_seed: 97,
                grid: 20,
                exempt_emb_out: false,
                stratified: false,
            },
            correction: crate::config::CorrectionConfig {
                intra: false,
                stages: 2,
                mode: CorrectionMode::MeanOnly,
                antithetic: true,
            },
            run: crate::config::RunConfig {
                sampler: SamplerKind::Ddpm,
                n_samples: 32,
                seeds: vec![1, 2],
                out_dir: out.to_path_buf(),
                swd_projections: 16,
            },
        }
    }

    fn read(dir: &Path, name: &str) -> String {
        fs::read_to_string(dir.join(name)).unwrap()
    }

    #[test]
    fn variant_grammar() {
        assert_eq!(run_id("abcd1234", Variant::Full, 7), "abcd1234-full-s7");
        assert_eq!(Variant::from_token("intra"), Some(Variant::Intra));
        assert_eq!(Variant::from_token("qncd"), None);
        let c = |intra, stages| crate::config::CorrectionConfig {
            intra,
            stages,
            mode: CorrectionMode::MeanOnly,
            antithetic: true,
        };
        assert_eq!(Variant::of(&c(false, 0)), Variant::Ptq);
        assert_eq!(Variant::of(&c(true, 0)), Variant::Intra);
        assert_eq!(Variant::of(&c(false, 3)), Variant::Inter);
        assert_eq!(Variant::of(&c(true, 3)), Variant::Full);
        let ids = ["abcd1234-fp-s3", "abcd1234-inter-s12"];
        assert_eq!(parse_run_id("abcd1234", ids[0]).unwrap(), (Variant::Fp, 3));
        assert_eq!(parse_run_id("abcd1234", ids[1]).unwrap(), (Variant::Inter, 12));
        assert!(parse_run_id("ffff0000", ids[0]).is_err());
        assert!(parse_run_id("abcd1234", "abcd1234-qncd-s3").is_err());
    }

    #[test]
    fn running_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let rows = run_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 4); // fp + inter, two seeds
        let names = ["trajectory.csv", "summary.csv", "layers.csv", "plot_data.csv"];
        let first: Vec<String> = names.iter().map(|n| read(dir.path(), n)).collect();
        let sample_first = read(dir.path(), &format!("samples/{}.csv", rows[1].run_id));
        run_experiment(&cfg).unwrap();
        let second: Vec<String> = names.iter().map(|n| read(dir.path(), n)).collect();
        assert_eq!(first, second);
        assert_eq!(sample_first, read(dir.path(), &format!("samples/{}.csv", rows[1].run_id)));
    }

    #[test]
    fn ablate_emits_the_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let rows = ablate(&cfg).unwrap();
        assert_eq!(rows.len(), 10); // 5 variants x 2 seeds

        let hash = cfg.hash8().unwrap();
        let mut expect = Vec::new();
        for s in [1u64, 2] {
            for v in Variant::ALL {
                expect.push(run_id(&hash, v, s));
            }
        }
        let got: Vec<String> = rows.iter().map(|r| r.run_id.clone()).collect();
        assert_eq!(got, expect);

        for row in &rows {
            let (variant, seed) = parse_run_id(&hash, &row.run_id).unwrap();
            assert_eq!(row.seed, seed);
            assert_eq!(row.intra_enabled, variant.smoothed());
            assert_eq!(row.inter_stages, if variant.staged() { 2 } else { 0 });
            // 12 sampling steps, plus one probe per stage when staged.
            assert_eq!(row.eval_count, if variant.staged() { 14 } else { 12 });
            if variant == Variant::Fp {
                assert_eq!(row.swd_to_fp, 0.0);
                assert_eq!(row.config_label, "WfpAfp");
            } else {
                assert_eq!(row.config_label, "W4A8");
            }
        }

        // Layer profile: one block of hook rows per quantized variant; the
        // ptq/inter pair shares a network, as does intra/full.
        let layers = read(dir.path(), "layers.csv");
        let data_rows: Vec<&str> = layers.lines().skip(1).collect();
        assert_eq!(data_rows.len(), 4 * 4); // 4 variants x 4 hooks (1 block)
        for v in Variant::QUARTET {
            assert!(data_rows.iter().any(|l| l.starts_with(&run_id(&hash, v, 1))));
        }

        // Plot data: medians for all 5 variants at each of 12 steps.
        let plot = read(dir.path(), "plot_data.csv");
        assert_eq!(plot.lines().count(), 1 + 5 * 12);
        assert!(plot.starts_with("variant,step_index,t,snr_db,cosine,gap_abs_0,gap_abs_1\n"));
        let fp_line = plot.lines().find(|l| l.starts_with("fp,0,")).unwrap();
        let fields: Vec<&str> = fp_line.split(',').collect();
        assert_eq!(fields[3], "inf");
        assert_eq!(&fields[5..7], &["0", "0"]);

        for v in Variant::QUARTET {
            assert!(dir.path().join(format!("params_{}.json", v.token())).exists());
        }
        assert!(dir.path().join("plot.gp").exists());
        assert!(dir.path().join("model.dqw").exists());
    }

    #[test]
    fn report_verifies_and_rejects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        run_experiment(&cfg).unwrap();

        let text = report(&cfg, dir.path()).unwrap();
        assert!(text.contains("t_max = 12"));
        assert!(text.contains(&cfg.hash8().unwrap()));
        assert!(text.contains("run_id,config_label"));

        // Bump one eval_count.
        let summary_path = dir.path().join("summary.csv");
        let original = fs::read_to_string(&summary_path).unwrap();
        let mut lines: Vec<String> = original.lines().map(str::to_string).collect();
        let mut fields: Vec<String> = lines[2].split(',').map(str::to_string).collect();
        let n: usize = fields.last().unwrap().parse().unwrap();
        *fields.last_mut().unwrap() = (n + 1).to_string();
        lines[2] = fields.join(",");
        fs::write(&summary_path, lines.join("\n") + "\n").unwrap();
        let err = report(&cfg, dir.path()).unwrap_err().to_string();
        assert!(err.contains("eval_count"), "{err}");
        fs::write(&summary_path, &original).unwrap();

        // Perturb one persisted sample value.
        let rows = split_csv(
            &original,
            "run_id,config_label,intra_enabled,inter_stages,correction_mode,seed,swd_to_fp,final_cosine,eval_count",
            "summary.csv",
        )
        .unwrap();
        let q_id = &rows[1][0];
        let sample_path = dir.path().join("samples").join(format!("{q_id}.csv"));
        let samples = fs::read_to_string(&sample_path).unwrap();
        let mut sample_lines: Vec<String> = samples.lines().map(str::to_string).collect();
        sample_lines[1] = "9.5,-9.5".to_string();
        fs::write(&sample_path, sample_lines.join("\n") + "\n").unwrap();
        let err = report(&cfg, dir.path()).unwrap_err().to_string();
        assert!(err.contains("swd_to_fp"), "{err}");
    }

    #[test]
    fn saved_weights_reload_reproduces_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("a"));
        let rows_a = run_experiment(&cfg).unwrap();

        let (path, rep) = train_to_disk(&{
            let mut c = cfg.clone();
            c.run.out_dir = dir.path().join("w");
            c
        })
        .unwrap();
        assert!(rep.final_loss.is_finite());

        // Same experiment but loading the saved network under a different
        // training seed: identical weights must give identical results.
        let mut cfg_b = tiny_config(&dir.path().join("b"));
        cfg_b.model.weights_path = Some(path.clone());
        cfg_b.train.seed = 999;
        let rows_b = run_experiment(&cfg_b).unwrap();
        for (a, b) in rows_a.iter().zip(&rows_b) {
            assert_eq!(a.swd_to_fp.to_bits(), b.swd_to_fp.to_bits());
            assert_eq!(a.final_cosine.to_bits(), b.final_cosine.to_bits());
            assert_eq!(a.eval_count, b.eval_count);
        }

        let mut cfg_c = cfg_b.clone();
        cfg_c.model.hidden = 16;
        cfg_c.model.imbalance = None;
        let err = prepare(&cfg_c).unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn fp_bits_plain_variant_is_an_exact_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.quant.bits = "WfpAfp".parse().unwrap();
        cfg.correction.stages = 0;
        cfg.run.seeds = vec![1];
        let rows = run_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        let ptq = &rows[1];
        assert!(ptq.run_id.ends_with("-ptq-s1"));
        assert_eq!(ptq.swd_to_fp, 0.0);
        assert!((ptq.final_cosine - 1.0).abs() < 1e-12);
    }
}
