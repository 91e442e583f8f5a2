//! Waveform processing, HR estimation and evaluation metrics, including the
//! incremental-performance summary over a lower-triangular result matrix.

use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

/// Physiologically plausible HR band in Hz (40-180 bpm).
pub const DEFAULT_HR_BAND: (f64, f64) = (0.66, 3.0);

/// A sampled signal with its sampling rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    fs: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidWaveform(format!(
                "length {} < 2",
                samples.len()
            )));
        }
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(Error::InvalidWaveform(format!("fs {fs} must be positive")));
        }
        if !samples.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidWaveform("non-finite sample".into()));
        }
        Ok(Waveform { samples, fs })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Width of one periodogram frequency bin, in bpm.
    pub fn bin_width_bpm(&self) -> f64 {
        60.0 * self.fs / self.samples.len() as f64
    }
}

/// Periodogram of the mean-removed signal: power at bins k = 0..=N/2,
/// frequency of bin k being `k * fs / N`.
pub fn periodogram(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = samples
        .iter()
        .map(|&x| Complex::new(x - mean, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    fft.process(&mut buf);
    buf.iter().take(n / 2 + 1).map(|c| c.norm_sqr()).collect()
}

/// Estimate heart rate in bpm as the peak of the periodogram restricted to
/// `band` (Hz). Ties between equal peaks resolve to the lower frequency.
pub fn estimate_hr(w: &Waveform, band: (f64, f64)) -> Result<f64> {
    let (f_lo, f_hi) = band;
    if !(f_lo > 0.0 && f_hi > f_lo && f_hi <= w.fs / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "band [{f_lo}, {f_hi}] must satisfy 0 < lo < hi <= fs/2 = {}",
            w.fs / 2.0
        )));
    }
    let n = w.len();
    let power = periodogram(w.samples());
    let df = w.fs / n as f64;
    let k_lo = (f_lo / df).ceil() as usize;
    let k_hi = ((f_hi / df).floor() as usize).min(power.len() - 1);
    if k_lo > k_hi || k_lo == 0 && k_hi == 0 {
        return Err(Error::BandUnresolvable);
    }
    let k_lo = k_lo.max(1);
    if k_lo > k_hi {
        return Err(Error::BandUnresolvable);
    }
    let mut best_k = k_lo;
    for k in k_lo..=k_hi {
        if power[k] > power[best_k] {
            best_k = k;
        }
    }
    Ok(60.0 * best_k as f64 * df)
}

/// Pearson's correlation coefficient.
///
/// If both sequences are constant the correlation is undefined and an error
/// is returned; if exactly one is constant, 0 is returned.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 && vb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-evaluation error statistics. Std is the population standard deviation
/// of the error, so `rmse^2 = std^2 + mean_error^2` holds exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub std: f64,
    pub mae: f64,
    pub rmse: f64,
    pub r: f64,
    pub n: usize,
}

/// Compute Std/MAE/RMSE/R between predicted and ground-truth HRs (bpm).
pub fn compute_metrics(pred_hrs: &[f64], gt_hrs: &[f64]) -> Result<MetricReport> {
    if pred_hrs.len() != gt_hrs.len() {
        return Err(Error::LengthMismatch(pred_hrs.len(), gt_hrs.len()));
    }
    if pred_hrs.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 pairs".into()));
    }
    let n = pred_hrs.len() as f64;
    let errs: Vec<f64> = pred_hrs
        .iter()
        .zip(gt_hrs.iter())
        .map(|(p, g)| p - g)
        .collect();
    let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / n;
    let mse = errs.iter().map(|e| e * e).sum::<f64>() / n;
    let me = errs.iter().sum::<f64>() / n;
    let var = (mse - me * me).max(0.0);
    let r = match pearson_r(pred_hrs, gt_hrs) {
        Ok(r) => r,
        Err(Error::UndefinedCorrelation) => {
            return Err(Error::UndefinedCorrelation);
        }
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        std: var.sqrt(),
        mae,
        rmse: mse.sqrt(),
        r,
        n: pred_hrs.len(),
    })
}

/// Which scalar of a [`MetricReport`] to summarize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Std,
    Mae,
    Rmse,
    R,
}

impl MetricName {
    pub const ALL: [MetricName; 4] = [
        MetricName::Std,
        MetricName::Mae,
        MetricName::Rmse,
        MetricName::R,
    ];

    pub fn get(&self, m: &MetricReport) -> f64 {
        match self {
            MetricName::Std => m.std,
            MetricName::Mae => m.mae,
            MetricName::Rmse => m.rmse,
            MetricName::R => m.r,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricName::Std => "std",
            MetricName::Mae => "mae",
            MetricName::Rmse => "rmse",
            MetricName::R => "r",
        }
    }
}

/// Lower-triangular matrix of per-task metrics: `entry(i, j)` is the metric
/// on task j's test set after training through task i (0-based, j <= i).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultMatrix {
    n_tasks: usize,
    entries: Vec<Vec<Option<MetricReport>>>,
}

impl ResultMatrix {
    pub fn new(n_tasks: usize) -> Self {
        ResultMatrix {
            n_tasks,
            entries: (0..n_tasks).map(|i| vec![None; i + 1]).collect(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn set(&mut self, i: usize, j: usize, m: MetricReport) {
        assert!(j <= i && i < self.n_tasks, "entry ({i},{j}) out of triangle");
        self.entries[i][j] = Some(m);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&MetricReport> {
        self.entries.get(i).and_then(|row| row.get(j)?.as_ref())
    }

    pub fn is_complete(&self) -> bool {
        self.entries
            .iter()
            .all(|row| row.iter().all(|e| e.is_some()))
    }

    /// Final row fully populated (required for `incremental_performance`).
    pub fn final_row_complete(&self) -> bool {
        self.entries
            .last()
            .map(|row| row.iter().all(|e| e.is_some()))
            .unwrap_or(false)
    }

    /// CSV of one metric, rows = after-task index i, columns = task j.
    /// Cells above the diagonal are left empty.
    pub fn to_csv(&self, metric: MetricName) -> String {
        let mut out = String::new();
        out.push_str("after_task");
        for j in 0..self.n_tasks {
            out.push_str(&format!(",task{}", j + 1));
        }
        out.push('\n');
        for i in 0..self.n_tasks {
            out.push_str(&format!("{}", i + 1));
            for j in 0..self.n_tasks {
                out.push(',');
                if let Some(m) = self.get(i, j) {
                    out.push_str(&format!("{}", metric.get(m)));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Final incremental performance: the mean of the named metric over the
/// final row of the matrix.
pub fn incremental_performance(m: &ResultMatrix, metric: MetricName) -> Result<f64> {
    let n = m.n_tasks();
    if n == 0 {
        return Err(Error::InvalidArgument("empty result matrix".into()));
    }
    let i = n - 1;
    let mut sum = 0.0;
    for j in 0..n {
        let entry = m
            .get(i, j)
            .ok_or(Error::MissingMatrixEntry { i, j })?;
        sum += metric.get(entry);
    }
    Ok(sum / n as f64)
}

/// Natural cubic spline through `(xs, ys)`: second derivative zero at both
/// ends. Returns the interpolant evaluated at `ts`.
pub fn cubic_spline_eval(xs: &[f64], ys: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 knots".into()));
    }
    for w in xs.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidArgument(
                "source times must be strictly increasing".into(),
            ));
        }
    }
    for &t in ts {
        if t < xs[0] || t > xs[n - 1] {
            return Err(Error::Extrapolation(t));
        }
    }

    // Solve the tridiagonal system for second derivatives m_i (natural BC:
    // m_0 = m_{n-1} = 0) with the Thomas algorithm.
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2; // interior unknowns
        let mut diag = vec![0.0; k];
        let mut upper = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            let h0 = xs[i + 1] - xs[i];
            let h1 = xs[i + 2] - xs[i + 1];
            diag[i] = 2.0 * (h0 + h1);
            upper[i] = h1;
            rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0);
        }
        // forward sweep (lower diagonal equals the previous upper)
        for i in 1..k {
            let lower = xs[i + 1] - xs[i];
            let w = lower / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for i in (1..k).rev() {
            m[i] = (rhs[i - 1] - upper[i - 1] * m[i + 1]) / diag[i - 1];
        }
    }

    let mut out = Vec::with_capacity(ts.len());
    for &t in ts {
        // binary search for the segment containing t
        let seg = match xs.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(idx) => idx.min(n - 2),
            Err(idx) => idx.saturating_sub(1).min(n - 2),
        };
        let h = xs[seg + 1] - xs[seg];
        let a = (xs[seg + 1] - t) / h;
        let b = (t - xs[seg]) / h;
        let v = a * ys[seg]
            + b * ys[seg + 1]
            + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * h * h / 6.0;
        out.push(v);
    }
    Ok(out)
}

/// Resample a label signal from its own time base onto target times using a
/// natural cubic spline. Target times must lie within the source range.
pub fn align_labels(signal: &Waveform, source_times: &[f64], target_times: &[f64]) -> Result<Vec<f64>> {
    if source_times.len() != signal.len() {
        return Err(Error::LengthMismatch(source_times.len(), signal.len()));
    }
    cubic_spline_eval(source_times, signal.samples(), target_times)
}
