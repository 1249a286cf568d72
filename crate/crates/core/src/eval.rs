//! Agreement metrics between predicted and measured waveforms, and the report
//! files built from them.

use crate::align::AlignmentMode;
use crate::encode::{CHANNEL_NAMES, N_CHANNELS};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Six stance-normalized channels (Fx, Fy, Fz, Mx, My, Mz) of one trial.
pub type TrialWaveforms = [Vec<f64>; N_CHANNELS];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("zero variance: correlation undefined")]
    ZeroVariance,
    #[error("both signals have zero range in trial {0}")]
    ZeroRange(usize),
    #[error("prediction and truth differ in trial count or length")]
    ShapeMismatch,
    #[error("no trials to evaluate")]
    Empty,
}

#[derive(Debug, Error)]
#[error("{path}: {source}")]
pub struct EmitError {
    pub path: PathBuf,
    pub source: std::io::Error,
}

fn check_shapes(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<(), EvalError> {
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.len() != t.len() || p.is_empty()) {
        return Err(EvalError::ShapeMismatch);
    }
    Ok(())
}

fn correlation(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation over the concatenation of all trials of one channel.
pub fn pearson_r(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, EvalError> {
    check_shapes(pred, truth)?;
    let x: Vec<f64> = pred.iter().flatten().copied().collect();
    let y: Vec<f64> = truth.iter().flatten().copied().collect();
    correlation(&x, &y)
}

/// Mean of per-trial correlations, skipping trials where r is undefined.
pub fn pearson_r_trial_mean(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, EvalError> {
    check_shapes(pred, truth)?;
    let rs: Vec<f64> = pred.iter().zip(truth).filter_map(|(p, t)| correlation(p, t).ok()).collect();
    if rs.is_empty() {
        return Err(EvalError::ZeroVariance);
    }
    Ok(rs.iter().sum::<f64>() / rs.len() as f64)
}

fn range(xs: &[f64]) -> f64 {
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Per-trial RMSE over the mean of both signals' peak-to-peak ranges, in
/// percent, averaged over trials.
pub fn rrmse(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, EvalError> {
    check_shapes(pred, truth)?;
    let mut total = 0.0;
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        let denom = 0.5 * (range(p) + range(t));
        if denom == 0.0 {
            return Err(EvalError::ZeroRange(i));
        }
        let mse = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        total += 100.0 * mse.sqrt() / denom;
    }
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanSummary {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlandAltmanPoint {
    pub pair_mean: f64,
    pub difference: f64,
    /// Sample index from foot strike.
    pub time_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlandAltman {
    pub summary: BlandAltmanSummary,
    pub points: Vec<BlandAltmanPoint>,
}

/// Differences `pred − truth` pooled over trials and time; limits of agreement
/// at `bias ± 1.96·sd` with the sample standard deviation.
pub fn bland_altman(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<BlandAltman, EvalError> {
    check_shapes(pred, truth)?;
    let points: Vec<BlandAltmanPoint> = pred
        .iter()
        .zip(truth)
        .flat_map(|(p, t)| {
            p.iter().zip(t).enumerate().map(|(i, (a, b))| BlandAltmanPoint { pair_mean: 0.5 * (a + b), difference: a - b, time_index: i })
        })
        .collect();
    let n = points.len() as f64;
    let bias = points.iter().map(|p| p.difference).sum::<f64>() / n;
    let sd = if points.len() > 1 {
        (points.iter().map(|p| (p.difference - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(BlandAltman {
        summary: BlandAltmanSummary { bias, sd, loa_low: bias - 1.96 * sd, loa_high: bias + 1.96 * sd },
        points,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub channel: usize,
    /// Pooled correlation; `None` when undefined (zero variance).
    pub r: Option<f64>,
    pub r_trial_mean: Option<f64>,
    /// `None` when some trial has zero range in both signals.
    pub rrmse_pct: Option<f64>,
    pub bland_altman: BlandAltmanSummary,
}

impl ChannelStats {
    pub fn name(&self) -> &'static str {
        CHANNEL_NAMES[self.channel]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub experiment_id: String,
    pub movement: String,
    pub stance_limb: String,
    pub alignment: AlignmentMode,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub meta: ExperimentMeta,
    pub channels: Vec<ChannelStats>,
    pub f_mean_r: Option<f64>,
    pub m_mean_r: Option<f64>,
}

fn mean_of(rs: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = rs.iter().copied().collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Assembles a report from six channel statistics; a channel mean is
/// undefined when any of its channels is.
pub fn build_report(meta: ExperimentMeta, channels: Vec<ChannelStats>) -> Result<EvalReport, EvalError> {
    if channels.len() != N_CHANNELS || channels.iter().enumerate().any(|(i, c)| c.channel != i) {
        return Err(EvalError::ShapeMismatch);
    }
    let rs: Vec<Option<f64>> = channels.iter().map(|c| c.r).collect();
    Ok(EvalReport { f_mean_r: mean_of(&rs[..3]), m_mean_r: mean_of(&rs[3..]), meta, channels })
}

/// Per-channel band of the trials at each stance sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub stance_pct: Vec<f64>,
    pub truth: [Vec<f64>; 3],
    pub pred: [Vec<f64>; 3],
}

fn band(sets: &[Vec<f64>]) -> [Vec<f64>; 3] {
    let n = sets[0].len();
    let mut out = [vec![f64::INFINITY; n], vec![0.0; n], vec![f64::NEG_INFINITY; n]];
    for s in sets {
        for (i, v) in s.iter().enumerate() {
            out[0][i] = out[0][i].min(*v);
            out[1][i] += v / sets.len() as f64;
            out[2][i] = out[2][i].max(*v);
        }
    }
    out
}

pub fn overlay(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Overlay, EvalError> {
    check_shapes(pred, truth)?;
    let n = truth[0].len();
    if truth.iter().any(|t| t.len() != n) {
        return Err(EvalError::ShapeMismatch);
    }
    let stance_pct = (0..n).map(|i| if n > 1 { 100.0 * i as f64 / (n - 1) as f64 } else { 0.0 }).collect();
    Ok(Overlay { stance_pct, truth: band(truth), pred: band(pred) })
}

/// Metrics, overlays and Bland-Altman data for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub overlays: Vec<Overlay>,
    pub bland_altman: Vec<BlandAltman>,
}

fn channel(sets: &[TrialWaveforms], c: usize) -> Vec<Vec<f64>> {
    sets.iter().map(|w| w[c].clone()).collect()
}

pub fn evaluate(meta: ExperimentMeta, pred: &[TrialWaveforms], truth: &[TrialWaveforms]) -> Result<Evaluation, EvalError> {
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    if pred.len() != truth.len() {
        return Err(EvalError::ShapeMismatch);
    }
    let mut stats = Vec::with_capacity(N_CHANNELS);
    let mut overlays = Vec::with_capacity(N_CHANNELS);
    let mut bas = Vec::with_capacity(N_CHANNELS);
    for c in 0..N_CHANNELS {
        let (p, t) = (channel(pred, c), channel(truth, c));
        let ba = bland_altman(&p, &t)?;
        stats.push(ChannelStats {
            channel: c,
            r: pearson_r(&p, &t).ok(),
            r_trial_mean: pearson_r_trial_mean(&p, &t).ok(),
            rrmse_pct: rrmse(&p, &t).ok(),
            bland_altman: ba.summary,
        });
        overlays.push(overlay(&p, &t)?);
        bas.push(ba);
    }
    Ok(Evaluation { report: build_report(meta, stats)?, overlays, bland_altman: bas })
}

pub const REPORT_CSV: &str = "report.csv";
const UNDEFINED: &str = "undefined";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>, String> {
    if s == UNDEFINED {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
    }
}

pub fn report_header() -> Vec<String> {
    let mut h: Vec<String> = ["experiment", "movement", "stance_limb", "alignment", "n_train", "n_test"].map(String::from).to_vec();
    h.extend(CHANNEL_NAMES.iter().map(|c| format!("r_{c}")));
    h.extend(["r_F_mean".into(), "r_M_mean".into()]);
    h.extend(CHANNEL_NAMES.iter().map(|c| format!("rrmse_{c}")));
    h.extend(CHANNEL_NAMES.iter().map(|c| format!("r_trial_mean_{c}")));
    for c in CHANNEL_NAMES {
        h.extend(["bias", "loa_low", "loa_high"].map(|s| format!("{s}_{c}")));
    }
    h
}

impl EvalReport {
    pub fn csv_row(&self) -> Vec<String> {
        let m = &self.meta;
        let mut row = vec![
            m.experiment_id.clone(),
            m.movement.clone(),
            m.stance_limb.clone(),
            m.alignment.to_string(),
            m.n_train.to_string(),
            m.n_test.to_string(),
        ];
        row.extend(self.channels.iter().map(|c| fmt_opt(c.r)));
        row.extend([fmt_opt(self.f_mean_r), fmt_opt(self.m_mean_r)]);
        row.extend(self.channels.iter().map(|c| fmt_opt(c.rrmse_pct)));
        row.extend(self.channels.iter().map(|c| fmt_opt(c.r_trial_mean)));
        for c in &self.channels {
            let b = c.bland_altman;
            row.extend([b.bias, b.loa_low, b.loa_high].map(|v| v.to_string()));
        }
        row
    }

    /// Inverse of [`EvalReport::csv_row`]; the Bland-Altman sd is recovered
    /// from the limits.
    pub fn from_csv_row(row: &[String]) -> Result<EvalReport, String> {
        if row.len() != report_header().len() {
            return Err(format!("expected {} columns, found {}", report_header().len(), row.len()));
        }
        let num = |i: usize| row[i].parse::<usize>().map_err(|e| format!("{}: {e}", row[i]));
        let real = |i: usize| row[i].parse::<f64>().map_err(|e| format!("{}: {e}", row[i]));
        let meta = ExperimentMeta {
            experiment_id: row[0].clone(),
            movement: row[1].clone(),
            stance_limb: row[2].clone(),
            alignment: serde_json::from_value(serde_json::Value::String(row[3].clone())).map_err(|e| e.to_string())?,
            n_train: num(4)?,
            n_test: num(5)?,
        };
        let mut channels = Vec::with_capacity(N_CHANNELS);
        for c in 0..N_CHANNELS {
            let ba = 26 + 3 * c;
            let (bias, loa_low, loa_high) = (real(ba)?, real(ba + 1)?, real(ba + 2)?);
            channels.push(ChannelStats {
                channel: c,
                r: parse_opt(&row[6 + c])?,
                rrmse_pct: parse_opt(&row[14 + c])?,
                r_trial_mean: parse_opt(&row[20 + c])?,
                bland_altman: BlandAltmanSummary { bias, sd: (loa_high - bias) / 1.96, loa_low, loa_high },
            });
        }
        Ok(EvalReport { meta, channels, f_mean_r: parse_opt(&row[12])?, m_mean_r: parse_opt(&row[13])? })
    }
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), EmitError> {
    let err = |e: csv::Error| EmitError { path: path.to_path_buf(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|source| EmitError { path: path.to_path_buf(), source })
}

/// One row per experiment in the table layout.
pub fn write_report_csv(reports: &[EvalReport], path: &Path) -> Result<(), EmitError> {
    write_csv(path, &report_header(), reports.iter().map(EvalReport::csv_row))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<EvalReport>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header: Vec<String> = r.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    if header != report_header() {
        return Err(format!("{}: unexpected header", path.display()));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            EvalReport::from_csv_row(&rec.iter().map(String::from).collect::<Vec<_>>())
        })
        .collect()
}

/// Writes `report.csv`, `overlay_<ch>.csv`, `bland_altman_<ch>.csv` and, when
/// asked, `overlay_<ch>.svg` into `dir`.
pub fn emit_report(eval: &Evaluation, dir: &Path, svg: bool) -> Result<(), EmitError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EmitError { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_report_csv(std::slice::from_ref(&eval.report), &dir.join(REPORT_CSV))?;
    for (c, name) in CHANNEL_NAMES.iter().enumerate() {
        let ov = &eval.overlays[c];
        let header = ["stance_pct", "truth_min", "truth_mean", "truth_max", "pred_min", "pred_mean", "pred_max"].map(String::from);
        let rows = (0..ov.stance_pct.len()).map(|i| {
            let mut r = vec![ov.stance_pct[i].to_string()];
            r.extend(ov.truth.iter().chain(&ov.pred).map(|b| b[i].to_string()));
            r
        });
        write_csv(&dir.join(format!("overlay_{name}.csv")), &header, rows)?;

        let header = ["pair_mean", "difference", "time_index"].map(String::from);
        let rows = eval.bland_altman[c].points.iter().map(|p| vec![p.pair_mean.to_string(), p.difference.to_string(), p.time_index.to_string()]);
        write_csv(&dir.join(format!("bland_altman_{name}.csv")), &header, rows)?;

        if svg {
            let path = dir.join(format!("overlay_{name}.svg"));
            fs::write(&path, overlay_svg(name, ov)).map_err(io(&path))?;
        }
    }
    Ok(())
}

/// Truth band in blue and prediction band in red over 0–100 % stance.
pub fn overlay_svg(title: &str, ov: &Overlay) -> String {
    let (w, h, pad) = (480.0, 300.0, 30.0);
    let all = ov.truth.iter().chain(&ov.pred).flatten();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |pct: f64| pad + pct / 100.0 * (w - 2.0 * pad);
    let y = |v: f64| h - pad - (v - lo) / span * (h - 2.0 * pad);
    let path = |vals: &[f64]| {
        let mut s = String::new();
        for (i, (p, v)) in ov.stance_pct.iter().zip(vals).enumerate() {
            let _ = write!(s, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, x(*p), y(*v));
        }
        s
    };
    let area = |b: &[Vec<f64>; 3]| {
        let mut s = path(&b[2]);
        for (p, v) in ov.stance_pct.iter().zip(&b[0]).rev() {
            let _ = write!(s, "L{:.2},{:.2} ", x(*p), y(*v));
        }
        s + "Z"
    };
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    let _ = writeln!(svg, "<text x=\"{pad}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>");
    for (band, colour) in [(&ov.truth, "#1f5fbf"), (&ov.pred, "#c8321e")] {
        let _ = writeln!(svg, "<path d=\"{}\" fill=\"{colour}\" fill-opacity=\"0.2\" stroke=\"none\"/>", area(band));
        let _ = writeln!(svg, "<path d=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>", path(&band[1]));
    }
    svg + "</svg>\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn one(xs: &[f64]) -> Vec<Vec<f64>> {
        vec![xs.to_vec()]
    }

    #[test]
    fn correlation_examples() {
        let x = one(&[1.0, 2.0, 3.0]);
        assert_eq!(pearson_r(&x, &x).unwrap(), 1.0);
        assert_eq!(pearson_r(&one(&[-1.0, -2.0, -3.0]), &x).unwrap(), -1.0);
        let r = pearson_r(&x, &one(&[1.0, 2.0, 4.0])).unwrap();
        assert!((r - 9.0 / 84f64.sqrt()).abs() <= 1e-9);
        assert!((r - 0.9820).abs() < 5e-5);
        assert_eq!(pearson_r(&one(&[2.0; 3]), &x), Err(EvalError::ZeroVariance));
        assert_eq!(pearson_r(&x, &one(&[1.0, 2.0])), Err(EvalError::ShapeMismatch));
        assert_eq!(pearson_r(&[], &[]), Err(EvalError::Empty));
    }

    #[test]
    fn pooled_and_trial_mean_differ() {
        let truth = vec![vec![0.0, 1.0, 0.0], vec![10.0, 11.0, 10.0]];
        let pred = vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert_eq!(pearson_r_trial_mean(&pred, &truth).unwrap(), 1.0);
        assert!(pearson_r(&pred, &truth).unwrap() < 0.2);
    }

    #[test]
    fn rrmse_examples() {
        let truth: Vec<f64> = (0..=400).map(|i| (std::f64::consts::TAU * i as f64 / 400.0).sin()).collect();
        assert_eq!(rrmse(&[truth.clone()], &[truth.clone()]).unwrap(), 0.0);
        let pred: Vec<f64> = truth.iter().map(|v| v + 0.2).collect();
        // the sampled sine hits both ±1 exactly only up to rounding
        assert!((rrmse(&[pred], &[truth]).unwrap() - 10.0).abs() <= 1e-9);
        assert_eq!(rrmse(&one(&[1.0; 4]), &one(&[3.0; 4])), Err(EvalError::ZeroRange(0)));
    }

    #[test]
    fn bland_altman_exact_cases() {
        let t = vec![vec![1.0, 2.5, -3.0, 4.0]];
        let ba = bland_altman(&t, &t).unwrap().summary;
        assert_eq!((ba.bias, ba.loa_low, ba.loa_high), (0.0, 0.0, 0.0));
        let shifted = vec![t[0].iter().map(|v| v + 0.5).collect()];
        let ba = bland_altman(&shifted, &t).unwrap();
        assert_eq!((ba.summary.bias, ba.summary.sd), (0.5, 0.0));
        assert_eq!(ba.points[2], BlandAltmanPoint { pair_mean: -2.75, difference: 0.5, time_index: 2 });
    }

    #[test]
    fn bland_altman_matches_sampling_oracle() {
        let sigma = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, sigma).unwrap();
        let truth: Vec<Vec<f64>> = (0..100).map(|t| (0..100).map(|i| (t * i) as f64 * 0.01).collect()).collect();
        let pred: Vec<Vec<f64>> = truth.iter().map(|w| w.iter().map(|v| v + noise.sample(&mut rng)).collect()).collect();
        let s = bland_altman(&pred, &truth).unwrap().summary;
        let n = 1e4f64;
        assert!(s.bias.abs() <= 3.0 * sigma / n.sqrt());
        let width = s.loa_high - s.loa_low;
        assert!((width / (2.0 * 1.96 * sigma) - 1.0).abs() <= 0.1);
    }

    fn stats(rs: [f64; 6]) -> Vec<ChannelStats> {
        rs.iter()
            .enumerate()
            .map(|(channel, &r)| ChannelStats {
                channel,
                r: Some(r),
                r_trial_mean: Some(r),
                rrmse_pct: Some(1.5),
                bland_altman: BlandAltmanSummary { bias: 0.1, sd: 0.2, loa_low: 0.1 - 1.96 * 0.2, loa_high: 0.1 + 1.96 * 0.2 },
            })
            .collect()
    }

    fn meta() -> ExperimentMeta {
        ExperimentMeta {
            experiment_id: "1".into(),
            movement: "sidestep".into(),
            stance_limb: "combined".into(),
            alignment: AlignmentMode::Pca,
            n_train: 10,
            n_test: 4,
        }
    }

    #[test]
    fn channel_means() {
        let rep = build_report(meta(), stats([1.0; 6])).unwrap();
        assert_eq!((rep.f_mean_r, rep.m_mean_r), (Some(1.0), Some(1.0)));
        let rep = build_report(meta(), stats([0.87, 0.90, 0.89, 0.5, 0.6, 0.7])).unwrap();
        assert!((rep.f_mean_r.unwrap() - 0.8867).abs() < 5e-5);
        let mut undefined = stats([0.9; 6]);
        undefined[4].r = None;
        let rep = build_report(meta(), undefined).unwrap();
        assert_eq!(rep.m_mean_r, None);
        assert!(rep.f_mean_r.is_some());
        assert_eq!(build_report(meta(), stats([1.0; 6])[..5].to_vec()), Err(EvalError::ShapeMismatch));
    }

    #[test]
    fn report_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = stats([0.87, 0.90, 0.89, 0.1 + 0.2, 0.6, -0.7]);
        s[5].r = None;
        s[2].rrmse_pct = None;
        let rep = build_report(meta(), s).unwrap();
        let path = dir.path().join(REPORT_CSV);
        write_report_csv(&[rep.clone(), rep.clone()], &path).unwrap();
        let back = read_report_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back[0].channels.iter().zip(&rep.channels) {
            assert_eq!((a.r, a.rrmse_pct, a.r_trial_mean), (b.r, b.rrmse_pct, b.r_trial_mean));
            assert_eq!(a.bland_altman.bias, b.bland_altman.bias);
            assert_eq!(a.bland_altman.loa_high, b.bland_altman.loa_high);
        }
        assert_eq!((back[0].f_mean_r, back[0].m_mean_r), (rep.f_mean_r, rep.m_mean_r));
        assert_eq!(back[0].meta, rep.meta);
    }

    #[test]
    fn identical_waveforms_evaluate_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let waves: Vec<TrialWaveforms> = (0..3)
            .map(|t| std::array::from_fn(|c| (0..11).map(|i| ((i * (c + 1) + t) as f64).sin()).collect()))
            .collect();
        let ev = evaluate(meta(), &waves, &waves).unwrap();
        for c in &ev.report.channels {
            assert!((c.r.unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(c.rrmse_pct, Some(0.0));
        }
        emit_report(&ev, dir.path(), true).unwrap();
        for f in ["report.csv", "overlay_Fz.csv", "bland_altman_Mx.csv", "overlay_My.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = fs::read_to_string(dir.path().join("overlay_Fx.csv")).unwrap();
        assert_eq!(text.lines().count(), 12);
        assert!(text.lines().nth(11).unwrap().starts_with("100,"));
    }

    proptest! {
        #[test]
        fn pearson_is_affine_invariant(
            pred in proptest::collection::vec(-10.0f64..10.0, 8..40),
            noise in proptest::collection::vec(-1.0f64..1.0, 40),
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
        ) {
            let truth: Vec<f64> = pred.iter().zip(&noise).map(|(p, n)| p + n).collect();
            let r0 = pearson_r(&one(&pred), &one(&truth));
            prop_assume!(r0.is_ok());
            let scaled: Vec<f64> = pred.iter().map(|p| a * p + b).collect();
            let r1 = pearson_r(&one(&scaled), &one(&truth)).unwrap();
            prop_assert!((r0.unwrap() - r1).abs() <= 1e-12);
        }

        #[test]
        fn rrmse_is_scale_invariant(
            pred in proptest::collection::vec(-10.0f64..10.0, 4..40),
            shift in -3.0f64..3.0,
            k in 0.01f64..100.0,
        ) {
            let truth: Vec<f64> = pred.iter().enumerate().map(|(i, p)| p * 0.5 + shift + i as f64 * 0.1).collect();
            let e0 = rrmse(&one(&pred), &one(&truth));
            prop_assume!(e0.is_ok());
            let sp: Vec<f64> = pred.iter().map(|v| v * k).collect();
            let st: Vec<f64> = truth.iter().map(|v| v * k).collect();
            let e1 = rrmse(&one(&sp), &one(&st)).unwrap();
            prop_assert!((e0.unwrap() - e1).abs() <= 1e-12 * e1.max(1.0));
        }

        #[test]
        fn bland_altman_bias_is_the_offset(truth in proptest::collection::vec(-100i32..100, 1..50), c in -64i32..64) {
            // quarter-integer values keep every sum exact
            let t: Vec<f64> = truth.iter().map(|&v| f64::from(v) / 4.0).collect();
            let c = f64::from(c) / 4.0;
            let p: Vec<f64> = t.iter().map(|v| v + c).collect();
            let s = bland_altman(&one(&p), &one(&t)).unwrap().summary;
            prop_assert_eq!(s.bias, c);
            prop_assert_eq!(s.sd, 0.0);
        }
    }
}
