use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::FrontendError;
use crate::tensor::Tensor;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveForm {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl WaveForm {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Result<Self, FrontendError> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(FrontendError::NonFinite(i));
        }
        Ok(Self { sample_rate, samples })
    }
}

/// Reads 16-bit PCM mono WAV.
pub fn read_wav(path: impl AsRef<Path>) -> Result<WaveForm, FrontendError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| FrontendError::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(FrontendError::Wav(format!(
            "expected 16-bit PCM mono, got {} channels of {}-bit {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| FrontendError::Wav(e.to_string()))?;
    WaveForm::new(spec.sample_rate, samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    fn coefficients(self, n: usize) -> Vec<f64> {
        let denom = (n.max(2) - 1) as f64;
        (0..n)
            .map(|i| {
                let x = 2.0 * std::f64::consts::PI * i as f64 / denom;
                match self {
                    Window::Hann => 0.5 - 0.5 * x.cos(),
                    Window::Hamming => 0.54 - 0.46 * x.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// FFT length; 0 picks the next power of two above the window.
    pub n_fft: usize,
    pub window: Window,
    /// Floor applied to mel energies before the log.
    pub log_floor: f64,
    /// Pre-emphasis coefficient; 0 disables it.
    pub preemphasis: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            n_fft: 0,
            window: Window::Hann,
            log_floor: 1e-10,
            preemphasis: 0.0,
        }
    }
}

impl FeatureConfig {
    pub fn window_len(&self, rate: u32) -> usize {
        (f64::from(rate) * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self, rate: u32) -> usize {
        (f64::from(rate) * self.hop_ms / 1000.0).round() as usize
    }

    fn fft_len(&self, window: usize) -> usize {
        if self.n_fft > 0 {
            self.n_fft.max(window)
        } else {
            window.next_power_of_two()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    LogMel,
    Deltas,
    Stacked,
}

/// Frames by dimensions, tagged with the pipeline stage that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub stage: Stage,
    pub data: Tensor,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        if self.data.is_empty() {
            self.data.shape().first().copied().unwrap_or(0)
        } else {
            self.data.rows()
        }
    }

    pub fn dim(&self) -> usize {
        self.data.shape().get(1).copied().unwrap_or(0)
    }

    fn expect(&self, stage: Stage) -> Result<(), FrontendError> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(FrontendError::WrongStage {
                expected: stage,
                got: self.stage,
            })
        }
    }
}

/// `floor((samples - window) / hop) + 1`, or 0 when shorter than a window.
pub fn frame_count(samples: usize, window: usize, hop: usize) -> usize {
    if samples < window {
        0
    } else {
        (samples - window) / hop + 1
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters over `[0, rate / 2]`, evaluated at each bin.
fn mel_filters(n_mels: usize, n_fft: usize, rate: u32) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let nyquist = f64::from(rate) / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * f64::from(rate) / n_fft as f64;
                    if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Log-Mel filterbank energies of the power spectrum.
pub fn logmel(wave: &WaveForm, config: &FeatureConfig) -> Result<FeatureMatrix, FrontendError> {
    let rate = wave.sample_rate;
    if rate < 8000 {
        return Err(FrontendError::SampleRate(rate));
    }
    let win = config.window_len(rate);
    let hop = config.hop_len(rate);
    let frames = frame_count(wave.samples.len(), win, hop);
    if frames == 0 {
        return Err(FrontendError::TooShort {
            samples: wave.samples.len(),
            window: win,
        });
    }
    let samples: Vec<f64> = if config.preemphasis > 0.0 {
        let s = &wave.samples;
        (0..s.len())
            .map(|i| {
                if i == 0 {
                    s[0]
                } else {
                    s[i] - config.preemphasis * s[i - 1]
                }
            })
            .collect()
    } else {
        wave.samples.clone()
    };
    let n_fft = config.fft_len(win);
    let coeffs = config.window.coefficients(win);
    let filters = mel_filters(config.n_mels, n_fft, rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut out = Vec::with_capacity(frames * config.n_mels);
    for t in 0..frames {
        let frame = &samples[t * hop..t * hop + win];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(if i < win { frame[i] * coeffs[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for f in &filters {
            let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(config.log_floor).ln());
        }
    }
    Ok(FeatureMatrix {
        stage: Stage::LogMel,
        data: Tensor::matrix(frames, config.n_mels, out)?,
    })
}

/// `sum_{n=1..2} n (c[t+n] - c[t-n]) / 10` with edge frames replicated.
fn regression_deltas(x: &[f64], frames: usize, dim: usize) -> Vec<f64> {
    let at = |t: isize, j: usize| x[(t.clamp(0, frames as isize - 1) as usize) * dim + j];
    let mut out = vec![0.0; frames * dim];
    for t in 0..frames as isize {
        for j in 0..dim {
            let mut acc = 0.0;
            for n in 1..=2isize {
                acc += n as f64 * (at(t + n, j) - at(t - n, j));
            }
            out[t as usize * dim + j] = acc / 10.0;
        }
    }
    out
}

/// Appends first- and second-order regression deltas.
pub fn add_deltas(features: &FeatureMatrix) -> Result<FeatureMatrix, FrontendError> {
    features.expect(Stage::LogMel)?;
    let (frames, dim) = (features.frames(), features.dim());
    if frames == 0 {
        return Err(FrontendError::TooFewFrames {
            stage: Stage::LogMel,
            needed: 1,
            got: 0,
        });
    }
    let base = features.data.data();
    let d1 = regression_deltas(base, frames, dim);
    let d2 = regression_deltas(&d1, frames, dim);
    let mut out = Vec::with_capacity(frames * dim * 3);
    for t in 0..frames {
        for src in [base, &d1[..], &d2[..]] {
            out.extend_from_slice(&src[t * dim..(t + 1) * dim]);
        }
    }
    Ok(FeatureMatrix {
        stage: Stage::Deltas,
        data: Tensor::matrix(frames, dim * 3, out)?,
    })
}

/// Per-utterance mean and variance normalisation of every dimension.
pub fn cmvn(features: &FeatureMatrix) -> Result<FeatureMatrix, FrontendError> {
    let (frames, dim) = (features.frames(), features.dim());
    if frames < 2 {
        return Err(FrontendError::TooFewFrames {
            stage: features.stage,
            needed: 2,
            got: frames,
        });
    }
    let x = features.data.data();
    let mut out = x.to_vec();
    for j in 0..dim {
        let mean = (0..frames).map(|t| x[t * dim + j]).sum::<f64>() / frames as f64;
        let var = (0..frames).map(|t| (x[t * dim + j] - mean).powi(2)).sum::<f64>() / frames as f64;
        let denom = var.sqrt() + 1e-8;
        for t in 0..frames {
            out[t * dim + j] = (x[t * dim + j] - mean) / denom;
        }
    }
    Ok(FeatureMatrix {
        stage: features.stage,
        data: Tensor::matrix(frames, dim, out)?,
    })
}

/// Concatenates non-overlapping triples of frames; a trailing remainder of
/// one or two frames is dropped.
pub fn stack3(features: &FeatureMatrix) -> Result<FeatureMatrix, FrontendError> {
    features.expect(Stage::Deltas)?;
    let (frames, dim) = (features.frames(), features.dim());
    let out_frames = frames / 3;
    let data = features.data.data()[..out_frames * 3 * dim].to_vec();
    Ok(FeatureMatrix {
        stage: Stage::Stacked,
        data: Tensor::new(vec![out_frames, dim * 3], data)?,
    })
}

/// `logmel -> add_deltas -> cmvn -> stack3`.
pub fn speech_features(wave: &WaveForm, config: &FeatureConfig) -> Result<FeatureMatrix, FrontendError> {
    let m = logmel(wave, config)?;
    let d = add_deltas(&m)?;
    let n = if d.frames() >= 2 { cmvn(&d)? } else { d };
    stack3(&n)
}

impl From<crate::tensor::TensorError> for FrontendError {
    fn from(e: crate::tensor::TensorError) -> Self {
        FrontendError::Corrupt(e.to_string())
    }
}
