//! Toy residual-vector-quantization codec.
//!
//! Stands in for an off-the-shelf neural audio codec: waveforms are cut into
//! non-overlapping frames, each frame is mean-removed and energy-normalized,
//! and the normalized frame vectors are quantized by a stack of k-means
//! codebooks where stage `n` encodes the residual left by stage `n-1`.
//! Decoding sums the selected centroids and restores per-frame scales.
//! The codec is trained once and then frozen; it never sees gradients.

mod format;
mod kmeans;

pub use format::{read_codebooks, write_codebooks, CodebookFormatError};
pub use kmeans::kmeans;

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::SeedRng;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FRAME_RATE: u32 = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecError {
    EmptyInput,
    TooShort { samples: usize, frame_len: usize },
    TooFewFrames { frames: usize, k: usize },
    FeatureDimMismatch { expected: usize, got: usize },
    CodeOutOfRange { code: u32, k: u32 },
    BadConfig(&'static str),
    NonFinite,
}

impl core::fmt::Display for CodecError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::EmptyInput => write!(f, "empty input"),
            Self::TooShort { samples, frame_len } => {
                write!(f, "waveform of {samples} samples is shorter than one frame ({frame_len})")
            }
            Self::TooFewFrames { frames, k } => {
                write!(f, "{frames} training frames cannot populate {k} centroids")
            }
            Self::FeatureDimMismatch { expected, got } => {
                write!(f, "feature dimension mismatch: expected {expected}, got {got}")
            }
            Self::CodeOutOfRange { code, k } => {
                write!(f, "code {code} out of range for codebook size {k}")
            }
            Self::BadConfig(msg) => write!(f, "bad codec config: {msg}"),
            Self::NonFinite => write!(f, "non-finite sample encountered"),
        }
    }
}

/// Mono audio buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn all_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }

    /// Samplewise sum, clipped to [-1, 1].
    pub fn mix(&self, other: &Waveform) -> Waveform {
        assert_eq!(self.sample_rate, other.sample_rate);
        let n = self.samples.len().max(other.samples.len());
        let mut out = vec![0.0f32; n];
        for (i, o) in out.iter_mut().enumerate() {
            let a = self.samples.get(i).copied().unwrap_or(0.0);
            let b = other.samples.get(i).copied().unwrap_or(0.0);
            *o = (a + b).clamp(-1.0, 1.0);
        }
        Waveform::new(out, self.sample_rate)
    }
}

/// `N_q x T` matrix of codebook indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    n_q: usize,
    len: usize,
    k: u32,
    frame_rate: u32,
    codes: Vec<u32>,
}

impl TokenGrid {
    pub fn new(
        n_q: usize,
        len: usize,
        k: u32,
        frame_rate: u32,
        codes: Vec<u32>,
    ) -> Result<Self, CodecError> {
        if n_q == 0 || k < 2 {
            return Err(CodecError::BadConfig("need n_q >= 1 and k >= 2"));
        }
        if codes.len() != n_q * len {
            return Err(CodecError::BadConfig("code count must equal n_q * len"));
        }
        for &c in &codes {
            if c >= k {
                return Err(CodecError::CodeOutOfRange { code: c, k });
            }
        }
        Ok(Self {
            n_q,
            len,
            k,
            frame_rate,
            codes,
        })
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn get(&self, q: usize, t: usize) -> u32 {
        self.codes[q * self.len + t]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    /// The `N_q` codes of frame `t`.
    pub fn column(&self, t: usize) -> Vec<u32> {
        (0..self.n_q).map(|q| self.get(q, t)).collect()
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.n_q == other.n_q
            && self.len == other.len
            && self.k == other.k
            && self.frame_rate == other.frame_rate
    }
}

/// Frames of a waveform after mean removal and energy normalization,
/// together with the per-frame scales needed to invert the normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FramedClip {
    pub frame_len: usize,
    pub frame_rate: u32,
    /// Flattened `[frames x frame_len]` feature matrix.
    pub features: Vec<f32>,
    /// Per-frame RMS scale; zero marks an all-silent frame.
    pub scales: Vec<f32>,
}

impl FramedClip {
    pub fn frames(&self) -> usize {
        self.scales.len()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.features[i * self.frame_len..(i + 1) * self.frame_len]
    }
}

/// Cuts a waveform into non-overlapping frames of `sample_rate / frame_rate`
/// samples, removing the per-frame mean and normalizing the remainder to
/// unit RMS. Trailing samples that do not fill a frame are dropped.
pub fn frame_features(waveform: &Waveform, frame_rate: u32) -> Result<FramedClip, CodecError> {
    if frame_rate == 0 || waveform.sample_rate % frame_rate != 0 {
        return Err(CodecError::BadConfig(
            "frame rate must divide the sample rate",
        ));
    }
    if !waveform.all_finite() {
        return Err(CodecError::NonFinite);
    }
    let frame_len = (waveform.sample_rate / frame_rate) as usize;
    if waveform.samples.len() < frame_len {
        return Err(CodecError::TooShort {
            samples: waveform.samples.len(),
            frame_len,
        });
    }
    let n_frames = waveform.samples.len() / frame_len;
    let mut features = Vec::with_capacity(n_frames * frame_len);
    let mut scales = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let frame = &waveform.samples[i * frame_len..(i + 1) * frame_len];
        let mean = frame.iter().sum::<f32>() / frame_len as f32;
        let mut energy = 0.0f64;
        for &s in frame {
            let d = (s - mean) as f64;
            energy += d * d;
        }
        let rms = libm::sqrt(energy / frame_len as f64) as f32;
        if rms <= 1e-9 {
            features.extend(core::iter::repeat(0.0).take(frame_len));
            scales.push(0.0);
        } else {
            features.extend(frame.iter().map(|&s| (s - mean) / rms));
            scales.push(rms);
        }
    }
    Ok(FramedClip {
        frame_len,
        frame_rate,
        features,
        scales,
    })
}

/// Trained RVQ stages. Frozen after training.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    n_q: usize,
    k: usize,
    dim: usize,
    sample_rate: u32,
    frame_rate: u32,
    /// Mean training-frame RMS; used as the decode scale when no per-frame
    /// sidecar scales are available (generated tokens).
    default_scale: f32,
    /// `n_q` stages, each `[k x dim]` centroids, flattened.
    stages: Vec<Vec<f32>>,
}

impl CodebookSet {
    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn default_scale(&self) -> f32 {
        self.default_scale
    }

    /// Sets the scale used when decoding without a sidecar (typically the
    /// mean frame RMS of the training corpus).
    pub fn set_default_scale(&mut self, scale: f32) {
        self.default_scale = scale;
    }

    pub fn stage(&self, s: usize) -> &[f32] {
        &self.stages[s]
    }

    pub fn centroid(&self, stage: usize, code: usize) -> &[f32] {
        &self.stages[stage][code * self.dim..(code + 1) * self.dim]
    }

    pub(crate) fn from_parts(
        n_q: usize,
        k: usize,
        dim: usize,
        sample_rate: u32,
        frame_rate: u32,
        default_scale: f32,
        stages: Vec<Vec<f32>>,
    ) -> Self {
        assert_eq!(stages.len(), n_q);
        for s in &stages {
            assert_eq!(s.len(), k * dim);
        }
        Self {
            n_q,
            k,
            dim,
            sample_rate,
            frame_rate,
            default_scale,
            stages,
        }
    }
}

/// RVQ training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvqConfig {
    pub n_q: usize,
    pub k: usize,
    pub iterations: usize,
    pub sample_rate: u32,
    pub frame_rate: u32,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self {
            n_q: 4,
            k: 64,
            iterations: 20,
            sample_rate: DEFAULT_SAMPLE_RATE,
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }
}

/// Trains the residual quantizer: stage 1 clusters the normalized frames,
/// stage `n` clusters the residuals left by stage `n-1`. Stages past the
/// first pin one centroid to the zero vector so quantizing a residual can
/// never increase its energy.
pub fn train_rvq(
    frames: &[f32],
    dim: usize,
    config: &RvqConfig,
    seed: u64,
) -> Result<CodebookSet, CodecError> {
    if config.n_q == 0 || config.k < 2 {
        return Err(CodecError::BadConfig("need n_q >= 1 and k >= 2"));
    }
    if dim == 0 || frames.len() % dim != 0 {
        return Err(CodecError::BadConfig("frame data must be a multiple of dim"));
    }
    let n = frames.len() / dim;
    if n < config.k {
        return Err(CodecError::TooFewFrames {
            frames: n,
            k: config.k,
        });
    }
    let mut rng = SeedRng::new(seed);
    let mut residuals = frames.to_vec();
    let mut stages = Vec::with_capacity(config.n_q);
    for stage_idx in 0..config.n_q {
        let mut centroids = kmeans(&residuals, dim, config.k, config.iterations, &mut rng);
        if stage_idx == 0 {
            // The quantizer's input space is unit-RMS frames; keeping stage-1
            // centroids on the same sphere makes centroid-valued frames
            // exactly representable after the encode-side normalization.
            renormalize_centroids(&mut centroids, dim);
        } else {
            pin_zero_centroid(&mut centroids, dim);
        }
        // Replace each residual by what this stage leaves behind.
        for f in 0..n {
            let frame = residuals[f * dim..(f + 1) * dim].to_vec();
            let code = nearest_centroid(&frame, &centroids, dim);
            let c = &centroids[code * dim..(code + 1) * dim];
            for (r, &cv) in residuals[f * dim..(f + 1) * dim].iter_mut().zip(c) {
                *r -= cv;
            }
        }
        stages.push(centroids);
    }
    Ok(CodebookSet::from_parts(
        config.n_q,
        config.k,
        dim,
        config.sample_rate,
        config.frame_rate,
        1.0,
        stages,
    ))
}

/// Lowest-index nearest centroid under squared Euclidean distance.
fn nearest_centroid(frame: &[f32], centroids: &[f32], dim: usize) -> usize {
    let k = centroids.len() / dim;
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let cent = &centroids[c * dim..(c + 1) * dim];
        let mut d = 0.0f64;
        for (&a, &b) in frame.iter().zip(cent) {
            let diff = (a - b) as f64;
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Rescales each centroid to unit RMS (skipping degenerate near-zero ones).
fn renormalize_centroids(centroids: &mut [f32], dim: usize) {
    let k = centroids.len() / dim;
    for c in 0..k {
        let cent = &mut centroids[c * dim..(c + 1) * dim];
        let ms: f64 = cent.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / dim as f64;
        let rms = libm::sqrt(ms);
        if rms > 1e-9 {
            let inv = (1.0 / rms) as f32;
            for v in cent.iter_mut() {
                *v *= inv;
            }
        }
    }
}

/// Forces the centroid nearest the origin to be exactly zero.
fn pin_zero_centroid(centroids: &mut [f32], dim: usize) {
    let k = centroids.len() / dim;
    let mut best = 0usize;
    let mut best_norm = f64::INFINITY;
    for c in 0..k {
        let norm: f64 = centroids[c * dim..(c + 1) * dim]
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        if norm < best_norm {
            best_norm = norm;
            best = c;
        }
    }
    centroids[best * dim..(best + 1) * dim].fill(0.0);
}

/// A token grid plus the per-frame scale sidecar needed for exact decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedClip {
    pub grid: TokenGrid,
    pub scales: Vec<f32>,
}

/// Greedy residual quantization of every frame through all stages.
pub fn encode(waveform: &Waveform, codebooks: &CodebookSet) -> Result<EncodedClip, CodecError> {
    if waveform.sample_rate != codebooks.sample_rate {
        return Err(CodecError::BadConfig("waveform sample rate differs from codec"));
    }
    let framed = frame_features(waveform, codebooks.frame_rate)?;
    if framed.frame_len != codebooks.dim {
        return Err(CodecError::FeatureDimMismatch {
            expected: codebooks.dim,
            got: framed.frame_len,
        });
    }
    encode_frames(&framed, codebooks)
}

/// Quantizes already-framed features.
pub fn encode_frames(
    framed: &FramedClip,
    codebooks: &CodebookSet,
) -> Result<EncodedClip, CodecError> {
    if framed.frame_len != codebooks.dim {
        return Err(CodecError::FeatureDimMismatch {
            expected: codebooks.dim,
            got: framed.frame_len,
        });
    }
    let t = framed.frames();
    let dim = codebooks.dim;
    let mut codes = vec![0u32; codebooks.n_q * t];
    let mut residual = vec![0.0f32; dim];
    for f in 0..t {
        residual.copy_from_slice(framed.frame(f));
        for stage in 0..codebooks.n_q {
            let code = nearest_centroid(&residual, &codebooks.stages[stage], dim);
            let cent = codebooks.centroid(stage, code);
            for (r, &cv) in residual.iter_mut().zip(cent) {
                *r -= cv;
            }
            codes[stage * t + f] = code as u32;
        }
    }
    let grid = TokenGrid::new(
        codebooks.n_q,
        t,
        codebooks.k as u32,
        codebooks.frame_rate,
        codes,
    )?;
    Ok(EncodedClip {
        grid,
        scales: framed.scales.clone(),
    })
}

/// Per-frame residual energies after each stage (for monotonicity checks);
/// entry `[f][s]` is the squared norm of frame `f`'s residual after `s + 1`
/// stages, with `[f][0] `preceded by the raw feature energy at index 0.
pub fn residual_energies(framed: &FramedClip, codebooks: &CodebookSet) -> Vec<Vec<f64>> {
    let dim = codebooks.dim;
    let mut out = Vec::with_capacity(framed.frames());
    let mut residual = vec![0.0f32; dim];
    for f in 0..framed.frames() {
        residual.copy_from_slice(framed.frame(f));
        let mut energies = Vec::with_capacity(codebooks.n_q + 1);
        energies.push(norm_sq(&residual));
        for stage in 0..codebooks.n_q {
            let code = nearest_centroid(&residual, &codebooks.stages[stage], dim);
            let cent = codebooks.centroid(stage, code);
            for (r, &cv) in residual.iter_mut().zip(cent) {
                *r -= cv;
            }
            energies.push(norm_sq(&residual));
        }
        out.push(energies);
    }
    out
}

fn norm_sq(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

/// Reconstructs a waveform by summing selected centroids per frame and
/// restoring scales. With `scales: None` every frame uses the codec's
/// default scale. `stages_used: None` uses all stages.
pub fn decode(
    grid: &TokenGrid,
    codebooks: &CodebookSet,
    scales: Option<&[f32]>,
    stages_used: Option<usize>,
) -> Result<Waveform, CodecError> {
    if grid.n_q() != codebooks.n_q {
        return Err(CodecError::BadConfig("grid stage count differs from codec"));
    }
    if grid.k() != codebooks.k as u32 {
        return Err(CodecError::BadConfig("grid codebook size differs from codec"));
    }
    let stages = stages_used.unwrap_or(codebooks.n_q);
    if stages == 0 || stages > codebooks.n_q {
        return Err(CodecError::BadConfig("stages_used out of range"));
    }
    if let Some(s) = scales {
        if s.len() != grid.len() {
            return Err(CodecError::BadConfig("scale sidecar length differs from grid"));
        }
    }
    let dim = codebooks.dim;
    let t = grid.len();
    let mut samples = vec![0.0f32; t * dim];
    for f in 0..t {
        let scale = match scales {
            Some(s) => s[f],
            None => codebooks.default_scale,
        };
        let out = &mut samples[f * dim..(f + 1) * dim];
        for stage in 0..stages {
            let code = grid.get(stage, f);
            if code as usize >= codebooks.k {
                return Err(CodecError::CodeOutOfRange {
                    code,
                    k: codebooks.k as u32,
                });
            }
            let cent = codebooks.centroid(stage, code as usize);
            for (o, &cv) in out.iter_mut().zip(cent) {
                *o += cv;
            }
        }
        for o in out.iter_mut() {
            *o = (*o * scale).clamp(-1.0, 1.0);
        }
    }
    Ok(Waveform::new(samples, codebooks.sample_rate))
}

/// Frame-space mean squared reconstruction error using the first `stages`
/// stages, averaged over frames.
pub fn reconstruction_mse(framed: &FramedClip, codebooks: &CodebookSet, stages: usize) -> f64 {
    let energies = residual_energies(framed, codebooks);
    if energies.is_empty() {
        return 0.0;
    }
    let dim = codebooks.dim as f64;
    let total: f64 = energies.iter().map(|e| e[stages] / dim).sum();
    total / energies.len() as f64
}

#[cfg(test)]
mod tests;
