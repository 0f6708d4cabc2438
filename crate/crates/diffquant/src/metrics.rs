//! Measurement apparatus: per-step prediction fidelity (SNR, cosine), a
//! sliced Wasserstein distance between sample sets, per-hook error profiles,
//! and the CSV writers every experiment reports through.
//!
//! Runs are always compared pairwise against a full-precision reference
//! produced with the same seeds, so every number here is attributable to
//! quantization (plus whatever correction is under test), not to sampling
//! luck.

use std::fmt::Write as _;
use std::path::Path;

use crate::correction::RunDiagnostics;
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::quantizer::QuantizedDenoiser;
use crate::rng::Rng;
use crate::tensor::{cosine, Tensor};

/// Default projection count for the sliced distance in every report.
pub const SWD_PROJECTIONS: usize = 128;

/// Prediction signal-to-noise in dB: 10 log10(|fp|^2 / |q - fp|^2).
/// Identical tensors have no noise to measure; that is reported as +inf
/// rather than an error so paired FP-vs-FP rows stay representable.
pub fn snr(eps_fp: &Tensor, eps_q: &Tensor) -> Result<f64> {
    if eps_fp.shape() != eps_q.shape() {
        return Err(Error::shape("snr", eps_fp.shape(), eps_q.shape()));
    }
    let signal = eps_fp.norm();
    if signal == 0.0 {
        return Err(Error::InvalidArg("snr needs a nonzero reference".into()));
    }
    let noise = eps_q.sub(eps_fp)?.norm();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal * signal / (noise * noise)).log10())
}

/// Cosine similarity over the flattened tensors; zero vectors are rejected.
pub fn cosine_similarity(eps_fp: &Tensor, eps_q: &Tensor) -> Result<f64> {
    cosine(eps_fp, eps_q)
}

/// Sliced Wasserstein-1 distance: average over random unit directions of the
/// 1-D W1 between the projected empirical distributions (equal sample counts
/// required; the 1-D distance is then a sorted elementwise mean gap).
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, rng: &mut Rng) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::shape("sliced_wasserstein", a.shape(), b.shape()));
    }
    if a.rows() != b.rows() {
        return Err(Error::InvalidArg(format!(
            "sliced distance needs equal sample counts, got {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::InvalidArg("sliced distance of empty sets".into()));
    }
    if n_projections == 0 {
        return Err(Error::InvalidArg("need at least one projection".into()));
    }
    let (n, d) = a.shape();
    let mut acc = 0.0;
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    for _ in 0..n_projections {
        let dir = rng.unit_vector(d);
        for r in 0..n {
            let (ra, rb) = (a.row_slice(r), b.row_slice(r));
            pa[r] = ra.iter().zip(&dir).map(|(x, w)| x * w).sum();
            pb[r] = rb.iter().zip(&dir).map(|(x, w)| x * w).sum();
        }
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        let w1: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
        acc += w1;
    }
    Ok(acc / n_projections as f64)
}

/// One hook's fidelity in a paired forward pass.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub hook_path: String,
    pub cosine: f64,
    pub mse: f64,
}

/// Run the full-precision model and the quantized model on the same batch
/// and compare what flows out of every hook point, in execution order. The
/// quantized side contributes its post-quantization values (what the next
/// layer actually consumes).
pub fn layer_error_profile(
    base: &DenoiserModel,
    qmodel: &QuantizedDenoiser,
    x: &Tensor,
    ts: &[usize],
) -> Result<Vec<LayerRecord>> {
    if base.blocks.len() != qmodel.fp_model().blocks.len()
        || base.data_dim != qmodel.fp_model().data_dim
        || base.emb_dim != qmodel.fp_model().emb_dim
    {
        return Err(Error::InvalidArg("architecture mismatch in layer profile".into()));
    }
    let mut fp_trace = Vec::new();
    base.forward_with(x, ts, |id, ten| {
        fp_trace.push((id, ten.clone()));
        Ok(ten)
    })?;
    let (_, q_trace) = qmodel.forward_traced(x, ts)?;
    if fp_trace.len() != q_trace.len() {
        return Err(Error::InvalidArg("hook count mismatch in layer profile".into()));
    }
    let mut out = Vec::with_capacity(fp_trace.len());
    for ((id_a, a), (id_b, b)) in fp_trace.iter().zip(&q_trace) {
        if id_a != id_b {
            return Err(Error::InvalidArg("hook order mismatch in layer profile".into()));
        }
        let mse = a.sub(b)?.data().iter().map(|v| v * v).sum::<f64>() / a.data().len() as f64;
        out.push(LayerRecord { hook_path: id_a.path(), cosine: cosine(a, b)?, mse });
    }
    Ok(out)
}

/// Per-step comparison of a run against its paired full-precision reference.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub step_index: usize,
    pub t: usize,
    /// Batch statistics of the (quantized) run's state after the update.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub snr_db: f64,
    pub cosine: f64,
    pub is_estimation: bool,
}

/// Pair two diagnostics streams step by step. `q` may be the FP run itself,
/// in which case SNR is +inf and cosine 1 throughout.
pub fn trajectory_stats(fp: &RunDiagnostics, q: &RunDiagnostics) -> Result<Vec<TrajectoryRecord>> {
    if fp.steps.len() != q.steps.len() {
        return Err(Error::InvalidArg("paired runs have different step counts".into()));
    }
    let mut out = Vec::with_capacity(q.steps.len());
    for (f, r) in fp.steps.iter().zip(&q.steps) {
        if f.t != r.t || f.step_index != r.step_index {
            return Err(Error::InvalidArg("paired runs disagree on the step sequence".into()));
        }
        out.push(TrajectoryRecord {
            step_index: r.step_index,
            t: r.t,
            mean: r.mean.clone(),
            std: r.std.clone(),
            snr_db: snr(&f.eps, &r.eps)?,
            cosine: cosine(&f.eps, &r.eps)?,
            is_estimation: r.is_estimation,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub run_id: String,
    pub record: TrajectoryRecord,
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub run_id: String,
    pub config_label: String,
    pub intra_enabled: bool,
    pub inter_stages: usize,
    pub correction_mode: String,
    pub seed: u64,
    pub swd_to_fp: f64,
    pub final_cosine: f64,
    pub eval_count: usize,
}

#[derive(Debug, Clone)]
pub struct LayerRow {
    pub run_id: String,
    pub record: LayerRecord,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// trajectory.csv: one row per (run, step), d mean and d std columns.
pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow], d: usize) -> Result<()> {
    let mut s = String::from("run_id,step_index,t");
    for j in 0..d {
        let _ = write!(s, ",mean_{j}");
    }
    for j in 0..d {
        let _ = write!(s, ",std_{j}");
    }
    s.push_str(",snr_db,cosine,is_estimation_step\n");
    for row in rows {
        let r = &row.record;
        if r.mean.len() != d || r.std.len() != d {
            return Err(Error::InvalidArg("trajectory row dimension mismatch".into()));
        }
        let _ = write!(s, "{},{},{}", row.run_id, r.step_index, r.t);
        for v in r.mean.iter().chain(&r.std) {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{},{},{}", r.snr_db, r.cosine, r.is_estimation);
    }
    write_file(path, &s)
}

/// summary.csv: one row per run.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut s = String::from(
        "run_id,config_label,intra_enabled,inter_stages,correction_mode,seed,swd_to_fp,final_cosine,eval_count\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.config_label,
            r.intra_enabled,
            r.inter_stages,
            r.correction_mode,
            r.seed,
            r.swd_to_fp,
            r.final_cosine,
            r.eval_count
        );
    }
    write_file(path, &s)
}

/// Median with the usual midpoint convention on even counts.
pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidArg("median of empty slice".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// layers.csv: one row per (run, hook).
pub fn write_layers_csv(path: &Path, rows: &[LayerRow]) -> Result<()> {
    let mut s = String::from("run_id,hook_path,cosine,mse\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.run_id, r.record.hook_path, r.record.cosine, r.record.mse);
    }
    write_file(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::FusionStyle;
    use crate::quantizer::{collect_calibration, execution_order_paths, quantize_model, QuantizeOptions};
    use crate::schedule::{NoiseSchedule, SigmaChoice};

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert_eq!(median(&[7.0]).unwrap(), 7.0);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn snr_worked_examples() {
        let a = Tensor::from_row(vec![10.0, 0.0]).unwrap();
        assert_eq!(snr(&a, &a).unwrap(), f64::INFINITY);

        // Unit-norm noise on a unit-norm signal: 0 dB.
        let sig = Tensor::from_row(vec![1.0, 0.0]).unwrap();
        let noisy = Tensor::from_row(vec![1.0, 1.0]).unwrap();
        assert!(snr(&sig, &noisy).unwrap().abs() < 1e-12);

        // |signal|^2 = 100, |noise|^2 = 1 -> 20 dB.
        let noisy = Tensor::from_row(vec![10.0, 1.0]).unwrap();
        assert!((snr(&a, &noisy).unwrap() - 20.0).abs() < 1e-12);

        assert!(snr(&Tensor::zeros(1, 2), &a).is_err());
    }

    #[test]
    fn snr_decreases_with_bigger_noise() {
        let mut rng = Rng::new(70);
        let fp = rng.randn(64, 2);
        let dir = rng.randn(64, 2);
        let mut prev = f64::INFINITY;
        for k in 1..=4 {
            let q = fp.add(&dir.scale(0.05 * k as f64)).unwrap();
            let s = snr(&fp, &q).unwrap();
            assert!(s < prev, "snr should fall as noise grows");
            prev = s;
        }
    }

    #[test]
    fn cosine_worked_examples() {
        let a = Tensor::from_row(vec![1.0, 2.0]).unwrap();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&a, &a.scale(-3.0)).unwrap() + 1.0).abs() < 1e-12);
        let b = Tensor::from_row(vec![-2.0, 1.0]).unwrap();
        assert!(cosine_similarity(&a, &b).unwrap().abs() < 1e-12);
        assert!(cosine_similarity(&a, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn swd_identical_sets_and_point_masses() {
        let mut rng = Rng::new(71);
        let a = rng.randn(100, 2);
        assert_eq!(sliced_wasserstein(&a, &a, 16, &mut rng).unwrap(), 0.0);

        // 1-D deltas at 0 and at c: every +-1 projection gives W1 = c.
        let zeros = Tensor::zeros(50, 1);
        let c = 2.5;
        let shifted = zeros.map(|_| c);
        let d = sliced_wasserstein(&zeros, &shifted, 7, &mut rng).unwrap();
        assert!((d - c).abs() < 1e-12);

        let b = rng.randn(99, 2);
        assert!(sliced_wasserstein(&a, &b, 4, &mut rng).is_err());
    }

    #[test]
    fn swd_is_symmetric() {
        let mut rng = Rng::new(72);
        let a = rng.randn(256, 2);
        let b = rng.randn(256, 2).map(|v| v + 0.3);
        let mut r1 = Rng::new(1234);
        let mut r2 = Rng::new(1234);
        let ab = sliced_wasserstein(&a, &b, 32, &mut r1).unwrap();
        let ba = sliced_wasserstein(&b, &a, 32, &mut r2).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab > 0.0);
    }

    /// Shifted-Gaussian oracle: for N(0,I) vs N((1,0),I) the projected pair
    /// differs by a mean shift of cos(theta), and W1 of two equal-variance
    /// Gaussians is |mean gap|, so the sliced distance tends to
    /// E|cos(theta)| = 2/pi. Checked against an independently coded
    /// estimator sharing nothing but the samples.
    #[test]
    fn swd_matches_reference_implementation_on_gaussians() {
        let mut rng = Rng::new(73);
        let n = 10_000;
        let a = rng.randn(n, 2);
        let b = rng.randn(n, 2);
        let mut b_shift = b.clone();
        for r in 0..n {
            b_shift.set(r, 0, b_shift.get(r, 0) + 1.0);
        }
        let d = sliced_wasserstein(&a, &b_shift, 128, &mut Rng::new(1234)).unwrap();

        // Straight-line reference: draw its own directions, project, sort.
        let mut rrng = Rng::new(4321);
        let mut acc = 0.0;
        for _ in 0..128 {
            let theta = rrng.uniform() * std::f64::consts::TAU;
            let (c, s) = (theta.cos(), theta.sin());
            let mut pa: Vec<f64> = (0..n).map(|r| a.get(r, 0) * c + a.get(r, 1) * s).collect();
            let mut pb: Vec<f64> = (0..n).map(|r| b_shift.get(r, 0) * c + b_shift.get(r, 1) * s).collect();
            pa.sort_by(f64::total_cmp);
            pb.sort_by(f64::total_cmp);
            acc += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
        }
        let reference = acc / 128.0;
        let rel = (d - reference).abs() / reference;
        assert!(rel < 0.05, "{d} vs reference {reference}");
        // And both sit near the analytic 2/pi for this configuration.
        assert!((d - std::f64::consts::FRAC_2_PI).abs() < 0.05, "{d}");
    }

    fn toy_quant(style: FusionStyle, label: &str, inject: bool) -> (DenoiserModel, QuantizedDenoiser) {
        let mut rng = Rng::new(74);
        let mut model = DenoiserModel::init(3, 2, 8, 6, 2, style, &mut rng).unwrap();
        if inject {
            model.inject_imbalance(&[0, 4], 8.0).unwrap();
        }
        let sched = NoiseSchedule::linear(12, 1e-4, 0.02, SigmaChoice::SqrtBeta).unwrap();
        let mut crng = Rng::with_stream(7, 9);
        let calib = collect_calibration(&model, &sched, 32, false, &mut crng).unwrap();
        let q = quantize_model(&model, &calib, label.parse().unwrap(), &QuantizeOptions::default()).unwrap();
        (model, q)
    }

    #[test]
    fn profile_is_perfect_without_quantization() {
        let (model, q) = toy_quant(FusionStyle::ScaleShift, "WfpAfp", false);
        let mut rng = Rng::new(75);
        let x = rng.randn(16, 2);
        let prof = layer_error_profile(&model, &q, &x, &vec![5; 16]).unwrap();
        assert_eq!(prof.len(), 12);
        for rec in prof {
            assert!((rec.cosine - 1.0).abs() < 1e-12, "{}: {}", rec.hook_path, rec.cosine);
            assert_eq!(rec.mse, 0.0);
        }
    }

    #[test]
    fn injected_imbalance_dips_at_fusion_hooks() {
        let (model, q) = toy_quant(FusionStyle::ScaleShift, "W8A8", true);
        let mut rng = Rng::new(76);
        let x = rng.randn(64, 2);
        let prof = layer_error_profile(&model, &q, &x, &vec![5; 64]).unwrap();
        // Fusion hooks should be the sore spot within each block: lower
        // cosine than that block's input hooks.
        for b in 0..3 {
            let get = |suffix: &str| {
                prof.iter()
                    .find(|r| r.hook_path == format!("block{b}.{suffix}"))
                    .map(|r| r.cosine)
                    .unwrap()
            };
            assert!(
                get("fusion") < get("emb_in"),
                "block {b}: fusion {} vs emb_in {}",
                get("fusion"),
                get("emb_in")
            );
        }
    }

    #[test]
    fn disabling_downstream_quantizers_preserves_upstream_hooks() {
        let (_, q) = toy_quant(FusionStyle::ScaleShift, "W4A4", false);
        let mut rng = Rng::new(77);
        let x = rng.randn(16, 2);
        let ts = vec![5usize; 16];
        let (_, full) = q.forward_traced(&x, &ts).unwrap();

        let order = execution_order_paths(3);
        // Cut after block1.fusion (index 12): everything earlier must agree
        // bit for bit with the fully-quantized trace.
        let cut = 12;
        let mut partial = q.clone();
        for p in &order[cut + 1..] {
            let _ = partial.set_path_enabled(p, false);
        }
        let (_, trace2) = partial.forward_traced(&x, &ts).unwrap();
        let upstream: Vec<&str> = order[..=cut].iter().map(String::as_str).collect();
        for ((id, a), (_, b)) in full.iter().zip(&trace2) {
            if upstream.contains(&id.path().as_str()) {
                assert_eq!(a.data(), b.data(), "hook {} changed", id.path());
            }
        }
    }

    #[test]
    fn csv_writers_are_deterministic_and_schema_stable() {
        let dir = tempfile::tempdir().unwrap();
        let rec = TrajectoryRecord {
            step_index: 0,
            t: 12,
            mean: vec![0.25, -1.5],
            std: vec![1.0, 2.0],
            snr_db: f64::INFINITY,
            cosine: 1.0,
            is_estimation: true,
        };
        let rows = vec![TrajectoryRow { run_id: "abc-fp-s1".into(), record: rec.clone() }];
        let p1 = dir.path().join("trajectory.csv");
        write_trajectory_csv(&p1, &rows, 2).unwrap();
        let first = std::fs::read_to_string(&p1).unwrap();
        assert!(first.starts_with("run_id,step_index,t,mean_0,mean_1,std_0,std_1,snr_db,cosine,is_estimation_step\n"));
        assert!(first.contains("abc-fp-s1,0,12,0.25,-1.5,1,2,inf,1,true"));
        write_trajectory_csv(&p1, &rows, 2).unwrap();
        assert_eq!(first, std::fs::read_to_string(&p1).unwrap());

        let srow = SummaryRow {
            run_id: "abc-full-s1".into(),
            config_label: "W8A8".into(),
            intra_enabled: true,
            inter_stages: 4,
            correction_mode: "mean_only".into(),
            seed: 1,
            swd_to_fp: 0.0625,
            final_cosine: 0.875,
            eval_count: 104,
        };
        let p2 = dir.path().join("summary.csv");
        write_summary_csv(&p2, &[srow]).unwrap();
        let s = std::fs::read_to_string(&p2).unwrap();
        assert!(s.starts_with("run_id,config_label,intra_enabled,inter_stages,correction_mode,seed,swd_to_fp,final_cosine,eval_count\n"));
        assert!(s.contains("abc-full-s1,W8A8,true,4,mean_only,1,0.0625,0.875,104"));

        let lrow = LayerRow {
            run_id: "abc-ptq-s1".into(),
            record: LayerRecord { hook_path: "block0.fusion".into(), cosine: 0.5, mse: 0.125 },
        };
        let p3 = dir.path().join("layers.csv");
        write_layers_csv(&p3, &[lrow]).unwrap();
        let s = std::fs::read_to_string(&p3).unwrap();
        assert!(s.starts_with("run_id,hook_path,cosine,mse\n"));
        assert!(s.contains("abc-ptq-s1,block0.fusion,0.5,0.125"));
    }
}
