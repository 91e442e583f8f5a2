//! Synthetic multi-domain rPPG task generation and clip windowing.
//!
//! Each task is a stand-in for a real dataset: a set of video clips showing a
//! spatially smooth "skin region" whose color oscillates at the heart-rate
//! frequency, with per-task domain factors (skin tone, illumination gain and
//! flicker, translational motion, pixel noise) controlling the distribution.

use crate::error::{Error, Result};
use crate::nn::tensor::{normal_draw, Tensor};
use crate::signal::Waveform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Relative amplitude of the skin-color pulse oscillation (of dynamic range).
pub const PULSE_AMPLITUDE: f64 = 0.01;
/// Second-harmonic amplitude relative to the fundamental.
pub const SECOND_HARMONIC: f64 = 0.2;
/// Per-channel gain of the pulse oscillation (green strongest, rPPG-like).
pub const CHANNEL_PULSE_GAIN: [f64; 3] = [0.6, 1.0, 0.8];
/// Relative amplitude of illumination flicker when flicker_hz > 0.
pub const FLICKER_AMPLITUDE: f64 = 0.05;
/// Background gray level before illumination gain.
pub const BACKGROUND_LEVEL: f64 = 0.35;

/// Domain factors controlling one task's input distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainFactors {
    /// Skin tone proxy, RGB in [0,1].
    pub base_color: [f64; 3],
    /// Multiplicative illumination gain (> 0).
    pub illumination_gain: f64,
    /// Illumination flicker frequency in Hz (0 = steady light).
    pub illumination_flicker_hz: f64,
    /// Translational jitter amplitude in pixels.
    pub motion_amplitude: f64,
    /// Standard deviation of i.i.d. pixel noise.
    pub noise_sigma: f64,
    /// Frame rate in Hz.
    pub fs: f64,
}

impl Default for DomainFactors {
    fn default() -> Self {
        DomainFactors {
            base_color: [0.65, 0.5, 0.42],
            illumination_gain: 1.0,
            illumination_flicker_hz: 0.0,
            motion_amplitude: 0.0,
            noise_sigma: 0.0,
            fs: 30.0,
        }
    }
}

impl DomainFactors {
    pub fn validate(&self) -> Result<()> {
        let finite = self.base_color.iter().all(|c| c.is_finite())
            && self.illumination_gain.is_finite()
            && self.illumination_flicker_hz.is_finite()
            && self.motion_amplitude.is_finite()
            && self.noise_sigma.is_finite()
            && self.fs.is_finite();
        if !finite {
            return Err(Error::InvalidArgument("non-finite domain factor".into()));
        }
        if self.illumination_gain <= 0.0 {
            return Err(Error::InvalidArgument(
                "illumination_gain must be > 0".into(),
            ));
        }
        if self.illumination_flicker_hz < 0.0
            || self.motion_amplitude < 0.0
            || self.noise_sigma < 0.0
            || self.fs <= 0.0
        {
            return Err(Error::InvalidArgument("negative domain factor".into()));
        }
        Ok(())
    }
}

fn default_frames() -> usize {
    160
}
fn default_side() -> usize {
    32
}

/// Declarative description of one synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub domain: DomainFactors,
    pub n_train_clips: usize,
    pub n_test_clips: usize,
    /// Heart-rate range [bpm_lo, bpm_hi], drawn uniformly per clip.
    pub hr_range: (f64, f64),
    pub seed: u64,
    /// Frames per clip.
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let (lo, hi) = self.hr_range;
        if !(40.0 <= lo && lo <= hi && hi <= 180.0) {
            return Err(Error::InvalidArgument(format!(
                "hr_range [{lo}, {hi}] must satisfy 40 <= lo <= hi <= 180"
            )));
        }
        if self.n_train_clips < 1 || self.n_test_clips < 1 {
            return Err(Error::InvalidArgument("clip counts must be >= 1".into()));
        }
        if self.frames < 2 || self.height < 4 || self.width < 4 {
            return Err(Error::InvalidArgument(
                "clip must be at least 2 frames and 4x4 pixels".into(),
            ));
        }
        Ok(())
    }
}

/// A video clip paired with its aligned ground-truth waveform and HR label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipSample {
    /// Video array [3, T, H, W] with values in [0, 1].
    pub video: Tensor,
    /// Clean pulse waveform, length T.
    pub label: Waveform,
    /// Ground-truth heart rate in bpm.
    pub hr: f64,
    pub task_id: usize,
    pub sample_id: String,
    /// Recording this clip was cut from; clips sharing a record_id are
    /// aggregated to one video-level HR during evaluation.
    pub record_id: String,
}

/// Gaussian skin-region weight at (y, x) for a blob centered at (cy, cx).
fn blob_weight(y: f64, x: f64, cy: f64, cx: f64, radius: f64) -> f64 {
    let dy = (y - cy) / radius;
    let dx = (x - cx) / radius;
    (-(dy * dy + dx * dx)).exp()
}

/// Mean blob weight over the frame for the default centered blob; this is
/// the effective "skin-region fraction" entering channel-mean arithmetic.
pub fn skin_region_fraction(height: usize, width: usize) -> f64 {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let radius = 0.3 * height.min(width) as f64;
    let mut sum = 0.0;
    for y in 0..height {
        for x in 0..width {
            sum += blob_weight(y as f64, x as f64, cy, cx, radius);
        }
    }
    sum / (height * width) as f64
}

/// Clean pulse waveform: unit fundamental at hr/60 Hz plus a small second
/// harmonic, mimicking PPG morphology.
pub fn pulse_waveform(hr: f64, fs: f64, frames: usize, phase: f64) -> Vec<f64> {
    let f = hr / 60.0;
    (0..frames)
        .map(|t| {
            let ang = 2.0 * PI * f * t as f64 / fs + phase;
            ang.sin() + SECOND_HARMONIC * (2.0 * ang).sin()
        })
        .collect()
}

/// Generate one synthetic clip at the requested heart rate.
///
/// The skin region is a Gaussian blob whose color oscillates at hr/60 Hz with
/// amplitude `PULSE_AMPLITUDE` (about 1% of dynamic range); illumination
/// gain/flicker, translational jitter and i.i.d. pixel noise are applied per
/// the task's `DomainFactors`. The label is the clean oscillation waveform.
pub fn make_clip<R: Rng>(spec: &TaskSpec, hr: f64, rng: &mut R) -> Result<ClipSample> {
    spec.validate()?;
    if !hr.is_finite() || hr < spec.hr_range.0 || hr > spec.hr_range.1 {
        return Err(Error::InvalidArgument(format!(
            "hr {hr} outside task range {:?}",
            spec.hr_range
        )));
    }
    let d = &spec.domain;
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);

    let phase = rng.gen::<f64>() * 2.0 * PI;
    let flicker_phase = rng.gen::<f64>() * 2.0 * PI;
    let wave = pulse_waveform(hr, d.fs, t_len, phase);

    // Smooth translational jitter: a sinusoidal drift with random frequency
    // and phase per axis, scaled to motion_amplitude pixels.
    let (mfy, mpy) = (0.2 + 0.6 * rng.gen::<f64>(), rng.gen::<f64>() * 2.0 * PI);
    let (mfx, mpx) = (0.2 + 0.6 * rng.gen::<f64>(), rng.gen::<f64>() * 2.0 * PI);

    let cy0 = (h as f64 - 1.0) / 2.0;
    let cx0 = (w as f64 - 1.0) / 2.0;
    let radius = 0.3 * h.min(w) as f64;

    let mut video = Tensor::zeros(&[3, t_len, h, w]);
    let plane = h * w;
    let frame_stride = t_len * plane;
    {
        let data = video.data_mut();
        let mut blob = vec![0.0; plane];
        for t in 0..t_len {
            let ts = t as f64 / d.fs;
            let cy = cy0 + d.motion_amplitude * (2.0 * PI * mfy * ts + mpy).sin();
            let cx = cx0 + d.motion_amplitude * (2.0 * PI * mfx * ts + mpx).sin();
            for y in 0..h {
                for x in 0..w {
                    blob[y * w + x] = blob_weight(y as f64, x as f64, cy, cx, radius);
                }
            }
            let gain = if d.illumination_flicker_hz > 0.0 {
                d.illumination_gain
                    * (1.0
                        + FLICKER_AMPLITUDE
                            * (2.0 * PI * d.illumination_flicker_hz * ts + flicker_phase).sin())
            } else {
                d.illumination_gain
            };
            for (c, base) in d.base_color.iter().enumerate() {
                let skin = base + PULSE_AMPLITUDE * CHANNEL_PULSE_GAIN[c] * wave[t];
                let off = c * frame_stride + t * plane;
                for p in 0..plane {
                    let v = BACKGROUND_LEVEL + (skin - BACKGROUND_LEVEL) * blob[p];
                    data[off + p] = (gain * v).clamp(0.0, 1.0);
                }
            }
            if d.noise_sigma > 0.0 {
                for c in 0..3 {
                    let off = c * frame_stride + t * plane;
                    for p in 0..plane {
                        let v = data[off + p] + d.noise_sigma * normal_draw(rng);
                        data[off + p] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    Ok(ClipSample {
        video,
        label: Waveform::new(wave, d.fs)?,
        hr,
        task_id: 0,
        sample_id: String::new(),
        record_id: String::new(),
    })
}

fn clip_rng(task_seed: u64, role: &str, index: usize) -> ChaCha8Rng {
    // Sub-seed derivation keyed by role and index so train/test draws are
    // disjoint and clips can be generated independently.
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&task_seed.to_le_bytes());
    let rb = role.as_bytes();
    key[8..8 + rb.len().min(8)].copy_from_slice(&rb[..rb.len().min(8)]);
    key[16..24].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Generate a task's train and test splits. Deterministic given the spec;
/// train and test use disjoint sub-seeds (subject-exclusive analogue).
pub fn generate_task(
    spec: &TaskSpec,
    task_id: usize,
) -> Result<(Vec<ClipSample>, Vec<ClipSample>)> {
    spec.validate()?;
    let split = |role: &str, count: usize| -> Result<Vec<ClipSample>> {
        (0..count)
            .map(|i| {
                let mut rng = clip_rng(spec.seed, role, i);
                let (lo, hi) = spec.hr_range;
                let hr = if hi > lo {
                    lo + (hi - lo) * rng.gen::<f64>()
                } else {
                    lo
                };
                let mut clip = make_clip(spec, hr, &mut rng)?;
                clip.task_id = task_id;
                clip.sample_id = format!("{}-{}-{:03}", spec.name, role, i);
                clip.record_id = clip.sample_id.clone();
                Ok(clip)
            })
            .collect()
    };
    Ok((
        split("train", spec.n_train_clips)?,
        split("test", spec.n_test_clips)?,
    ))
}

/// Cut a recording into overlapping windows of length `win` at stride `step`.
/// The trailing remainder shorter than `win` is dropped; a recording shorter
/// than `win` yields an empty list.
pub fn window_clips(
    video: &Tensor,
    label: &Waveform,
    win: usize,
    step: usize,
    task_id: usize,
    record_id: &str,
) -> Result<Vec<ClipSample>> {
    if win < 1 || step < 1 {
        return Err(Error::InvalidArgument("win and step must be >= 1".into()));
    }
    let shape = video.shape();
    if shape.len() != 4 || shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected video [3, T, H, W], got {shape:?}"
        )));
    }
    let (t_len, h, w) = (shape[1], shape[2], shape[3]);
    if label.len() != t_len {
        return Err(Error::LengthMismatch(label.len(), t_len));
    }
    let plane = h * w;
    let frame_stride = t_len * plane;
    let mut out = Vec::new();
    let mut start = 0;
    while start + win <= t_len {
        let mut v = Tensor::zeros(&[3, win, h, w]);
        {
            let dst = v.data_mut();
            let src = video.data();
            for c in 0..3 {
                for t in 0..win {
                    let s = c * frame_stride + (start + t) * plane;
                    let d = c * (win * plane) + t * plane;
                    dst[d..d + plane].copy_from_slice(&src[s..s + plane]);
                }
            }
        }
        let lw = Waveform::new(label.samples()[start..start + win].to_vec(), label.fs())?;
        let hr = crate::signal::estimate_hr(&lw, crate::signal::DEFAULT_HR_BAND)?;
        out.push(ClipSample {
            video: v,
            label: lw,
            hr,
            task_id,
            sample_id: format!("{record_id}-w{start}"),
            record_id: record_id.to_string(),
        });
        start += step;
    }
    Ok(out)
}

/// Spatial mean of one channel over the skin region (blob-weighted) per
/// frame. Used by tests and the data-inspection tooling.
pub fn skin_mean_trace(video: &Tensor, channel: usize) -> Vec<f64> {
    let shape = video.shape();
    let (t_len, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let radius = 0.3 * h.min(w) as f64;
    let mut weights = vec![0.0; plane];
    let mut wsum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let wgt = blob_weight(y as f64, x as f64, cy, cx, radius);
            weights[y * w + x] = wgt;
            wsum += wgt;
        }
    }
    let data = video.data();
    (0..t_len)
        .map(|t| {
            let off = channel * t_len * plane + t * plane;
            let mut acc = 0.0;
            for p in 0..plane {
                acc += data[off + p] * weights[p];
            }
            acc / wsum
        })
        .collect()
}
