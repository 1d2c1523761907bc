//! Builders for the conditioning sequence the decoder cross-attends to:
//! lyric token embeddings through a small bidirectional encoder, caption
//! text through another, and a frozen multi-scale voice feature stack
//! aggregated by a learned layer combination. The three segments are
//! projected to the decoder width and concatenated voice, text, lyrics.

pub mod bpe;

pub use bpe::LyricTokenizer;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::Waveform;
use crate::numerics::attention::{multi_head_attention, MhaWeights};
use crate::numerics::{sinusoidal_positions, Bindings, NumericsError, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CondError {
    Config(&'static str),
    UnknownToken(String),
    UnknownId { id: u32, vocab: usize },
    InputError(&'static str),
    Parse { line: usize, what: &'static str },
    Numerics(NumericsError),
}

impl core::fmt::Display for CondError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "conditioning config error: {msg}"),
            Self::UnknownToken(tok) => write!(f, "token not in vocabulary: {tok:?}"),
            Self::UnknownId { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of {vocab}")
            }
            Self::InputError(msg) => write!(f, "conditioning input error: {msg}"),
            Self::Parse { line, what } => write!(f, "parse error at line {line}: {what}"),
            Self::Numerics(e) => write!(f, "conditioning numerics error: {e}"),
        }
    }
}

impl From<NumericsError> for CondError {
    fn from(e: NumericsError) -> Self {
        Self::Numerics(e)
    }
}

/// Word-level vocabulary for captions; id 0 is the reserved unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextVocab {
    words: Vec<String>,
    ids: BTreeMap<String, u32>,
}

pub const UNK_ID: u32 = 0;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            words.push(core::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

impl TextVocab {
    pub fn build<S: AsRef<str>>(captions: &[S]) -> Self {
        let mut words: Vec<String> = captions
            .iter()
            .flat_map(|c| tokenize_words(c.as_ref()))
            .collect();
        words.sort();
        words.dedup();
        let mut all = vec!["<unk>".to_string()];
        all.extend(words);
        let ids = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words: all, ids }
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    /// Maps a caption to word ids; unknown words become the unknown id.
    /// Captions are mandatory, so an empty one is a config error.
    pub fn encode(&self, caption: &str) -> Result<Vec<u32>, CondError> {
        let words = tokenize_words(caption);
        if words.is_empty() {
            return Err(CondError::Config("caption must not be empty"));
        }
        Ok(words
            .iter()
            .map(|w| self.ids.get(w).copied().unwrap_or(UNK_ID))
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("text-vocab v1\n");
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CondError> {
        let mut lines = text.lines();
        if lines.next() != Some("text-vocab v1") {
            return Err(CondError::Parse {
                line: 1,
                what: "unrecognized text vocab header",
            });
        }
        let words: Vec<String> = lines.map(str::to_string).collect();
        if words.first().map(String::as_str) != Some("<unk>") {
            return Err(CondError::Parse {
                line: 2,
                what: "first vocab entry must be the unknown token",
            });
        }
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Self { words, ids })
    }
}

/// Sizes of the conditioning encoders. Desk defaults stay small; the paper's
/// 6-layer / 1024-wide lyric encoder remains a valid configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CondConfig {
    pub lyric_width: usize,
    pub lyric_layers: usize,
    pub lyric_heads: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub voice_width: usize,
    /// Pseudo-layer count of the frozen voice feature stack.
    pub voice_layers: usize,
    pub voice_frame_rate: u32,
    pub voice_secs: f32,
}

impl Default for CondConfig {
    fn default() -> Self {
        Self {
            lyric_width: 64,
            lyric_layers: 2,
            lyric_heads: 2,
            text_width: 48,
            text_layers: 1,
            text_heads: 2,
            voice_width: 32,
            voice_layers: 5,
            voice_frame_rate: 50,
            voice_secs: 3.0,
        }
    }
}

/// Frozen multi-scale voice features for one 3-second reference clip,
/// stored as a `[frames * width, layers]` matrix ready for the learned
/// layer-combination matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct VoiceFeatures {
    pub frames: usize,
    pub width: usize,
    pub layers: usize,
    pub stacked: Vec<f32>,
}

/// Computes the frozen feature stack: the rectified waveform smoothed at
/// `voice_layers` dyadic window scales, then reduced to `voice_width`
/// sub-band energies per frame at each scale.
pub fn voice_features(reference: &Waveform, cfg: &CondConfig) -> Result<VoiceFeatures, CondError> {
    let sr = reference.sample_rate;
    if cfg.voice_frame_rate == 0 || sr % cfg.voice_frame_rate != 0 {
        return Err(CondError::Config("voice frame rate must divide sample rate"));
    }
    let frame_len = (sr / cfg.voice_frame_rate) as usize;
    if frame_len % cfg.voice_width != 0 {
        return Err(CondError::Config("voice width must divide the frame length"));
    }
    let expected = (cfg.voice_secs as f64 * sr as f64) as usize;
    let n = reference.samples.len();
    if n + frame_len < expected || n > expected + frame_len {
        return Err(CondError::InputError(
            "reference voice clip must be 3 seconds (within one frame)",
        ));
    }
    let target_frames = (cfg.voice_secs as f64 * cfg.voice_frame_rate as f64) as usize;
    let frames = (n / frame_len).min(target_frames);
    let width = cfg.voice_width;
    let layers = cfg.voice_layers;
    let sub = frame_len / width;

    let rectified: Vec<f32> = reference.samples.iter().map(|s| s.abs()).collect();
    let mut stacked = vec![0.0f32; frames * width * layers];
    for layer in 0..layers {
        let window = 16usize << layer;
        let smoothed = moving_average(&rectified, window);
        for t in 0..frames {
            for f in 0..width {
                let start = t * frame_len + f * sub;
                let mean: f32 = smoothed[start..start + sub].iter().sum::<f32>() / sub as f32;
                stacked[(t * width + f) * layers + layer] = mean;
            }
        }
    }
    Ok(VoiceFeatures {
        frames,
        width,
        layers,
        stacked,
    })
}

fn moving_average(x: &[f32], window: usize) -> Vec<f32> {
    let w = window.max(1).min(x.len().max(1));
    let mut out = vec![0.0f32; x.len()];
    let mut acc = 0.0f64;
    for i in 0..x.len() {
        acc += x[i] as f64;
        if i >= w {
            acc -= x[i - w] as f64;
        }
        out[i] = (acc / w.min(i + 1) as f64) as f32;
    }
    out
}

/// Per-clip conditioning inputs, precomputed outside the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInputs {
    pub lyric_ids: Vec<u32>,
    pub text_ids: Vec<u32>,
    pub voice: Option<VoiceFeatures>,
}

/// Assembled conditioning sequence on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ConditionBundle {
    pub e_voice: Option<Var>,
    pub e_text: Var,
    pub e_lyrics: Var,
    pub e_cond: Var,
    pub voice_rows: usize,
    pub text_rows: usize,
    pub lyric_rows: usize,
}

impl ConditionBundle {
    pub fn rows(&self) -> usize {
        self.voice_rows + self.text_rows + self.lyric_rows
    }
}

/// A pre-norm bidirectional transformer encoder stack.
#[derive(Debug, Clone)]
struct EncoderStack {
    prefix: String,
    width: usize,
    layers: usize,
    heads: usize,
}

impl EncoderStack {
    fn init(&self, params: &mut ParamSet, seed: u64) {
        let w = self.width;
        for l in 0..self.layers {
            let p = format!("{}.l{l}", self.prefix);
            for name in ["wq", "wk", "wv", "wo"] {
                params.init_normal(&format!("{p}.attn.{name}"), &[w, w], 0.02, seed);
            }
            params.init_const(&format!("{p}.ln1.g"), &[w], 1.0);
            params.init_zeros(&format!("{p}.ln1.b"), &[w]);
            params.init_const(&format!("{p}.ln2.g"), &[w], 1.0);
            params.init_zeros(&format!("{p}.ln2.b"), &[w]);
            params.init_normal(&format!("{p}.ffn.w1"), &[w, 4 * w], 0.02, seed);
            params.init_zeros(&format!("{p}.ffn.b1"), &[4 * w]);
            params.init_normal(&format!("{p}.ffn.w2"), &[4 * w, w], 0.02, seed);
            params.init_zeros(&format!("{p}.ffn.b2"), &[w]);
        }
        params.init_const(&format!("{}.ln_f.g", self.prefix), &[w], 1.0);
        params.init_zeros(&format!("{}.ln_f.b", self.prefix), &[w]);
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        params: &ParamSet,
        mut x: Var,
    ) -> Result<Var, NumericsError> {
        for l in 0..self.layers {
            let p = format!("{}.l{l}", self.prefix);
            let ln1_g = binds.bind(tape, params, &format!("{p}.ln1.g"));
            let ln1_b = binds.bind(tape, params, &format!("{p}.ln1.b"));
            let normed = tape.layer_norm(x, ln1_g, ln1_b, 1e-5);
            let weights = MhaWeights {
                wq: binds.bind(tape, params, &format!("{p}.attn.wq")),
                wk: binds.bind(tape, params, &format!("{p}.attn.wk")),
                wv: binds.bind(tape, params, &format!("{p}.attn.wv")),
                wo: binds.bind(tape, params, &format!("{p}.attn.wo")),
            };
            let (attn, _) = multi_head_attention(tape, normed, normed, weights, self.heads, None)?;
            x = tape.add(x, attn);

            let ln2_g = binds.bind(tape, params, &format!("{p}.ln2.g"));
            let ln2_b = binds.bind(tape, params, &format!("{p}.ln2.b"));
            let normed2 = tape.layer_norm(x, ln2_g, ln2_b, 1e-5);
            let w1 = binds.bind(tape, params, &format!("{p}.ffn.w1"));
            let b1 = binds.bind(tape, params, &format!("{p}.ffn.b1"));
            let w2 = binds.bind(tape, params, &format!("{p}.ffn.w2"));
            let b2 = binds.bind(tape, params, &format!("{p}.ffn.b2"));
            let h = tape.matmul(normed2, w1);
            let h = tape.add_row(h, b1);
            let h = tape.gelu(h);
            let h = tape.matmul(h, w2);
            let h = tape.add_row(h, b2);
            x = tape.add(x, h);
        }
        let g = binds.bind(tape, params, &format!("{}.ln_f.g", self.prefix));
        let b = binds.bind(tape, params, &format!("{}.ln_f.b", self.prefix));
        Ok(tape.layer_norm(x, g, b, 1e-5))
    }
}

/// Owns the conditioning parameter layout and tape assembly.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub config: CondConfig,
    pub d_model: usize,
    pub lyric_vocab: usize,
    pub text_vocab: usize,
    lyric_stack: EncoderStack,
    text_stack: EncoderStack,
}

impl ConditionEncoder {
    pub fn new(
        config: CondConfig,
        d_model: usize,
        lyric_vocab: usize,
        text_vocab: usize,
    ) -> Result<Self, CondError> {
        if config.lyric_width % config.lyric_heads != 0
            || config.text_width % config.text_heads != 0
        {
            return Err(CondError::Config("head count must divide encoder width"));
        }
        let lyric_stack = EncoderStack {
            prefix: "cond.lyrics".to_string(),
            width: config.lyric_width,
            layers: config.lyric_layers,
            heads: config.lyric_heads,
        };
        let text_stack = EncoderStack {
            prefix: "cond.text".to_string(),
            width: config.text_width,
            layers: config.text_layers,
            heads: config.text_heads,
        };
        Ok(Self {
            config,
            d_model,
            lyric_vocab,
            text_vocab,
            lyric_stack,
            text_stack,
        })
    }

    pub fn init(&self, params: &mut ParamSet, seed: u64) {
        let c = &self.config;
        params.init_normal("cond.lyrics.embed", &[self.lyric_vocab, c.lyric_width], 0.02, seed);
        self.lyric_stack.init(params, seed);
        params.init_normal("cond.text.embed", &[self.text_vocab, c.text_width], 0.02, seed);
        self.text_stack.init(params, seed);
        params.init_normal("cond.voice.mix", &[c.voice_layers, 1], 0.02, seed);
        params.init_zeros("cond.voice.bias", &[c.voice_width]);
        params.init_normal("cond.proj.voice.w", &[c.voice_width, self.d_model], 0.02, seed);
        params.init_zeros("cond.proj.voice.b", &[self.d_model]);
        params.init_normal("cond.proj.text.w", &[c.text_width, self.d_model], 0.02, seed);
        params.init_zeros("cond.proj.text.b", &[self.d_model]);
        params.init_normal("cond.proj.lyrics.w", &[c.lyric_width, self.d_model], 0.02, seed);
        params.init_zeros("cond.proj.lyrics.b", &[self.d_model]);
        params.init_normal("cond.null_voice", &[1, self.d_model], 0.02, seed);
    }

    /// Bidirectional lyric encoding: one row per lyric token.
    pub fn encode_lyrics(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        params: &ParamSet,
        lyric_ids: &[u32],
    ) -> Result<Var, CondError> {
        for &id in lyric_ids {
            if id as usize >= self.lyric_vocab {
                return Err(CondError::UnknownId {
                    id,
                    vocab: self.lyric_vocab,
                });
            }
        }
        let table = binds.bind(tape, params, "cond.lyrics.embed");
        let emb = tape.embed(table, lyric_ids);
        let pos = tape.constant(sinusoidal_positions(lyric_ids.len(), self.config.lyric_width));
        let x = tape.add(emb, pos);
        Ok(self.lyric_stack.forward(tape, binds, params, x)?)
    }

    /// Caption encoding: one row per word token.
    pub fn embed_text(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        params: &ParamSet,
        text_ids: &[u32],
    ) -> Result<Var, CondError> {
        if text_ids.is_empty() {
            return Err(CondError::Config("caption must not be empty"));
        }
        for &id in text_ids {
            if id as usize >= self.text_vocab {
                return Err(CondError::UnknownId {
                    id,
                    vocab: self.text_vocab,
                });
            }
        }
        let table = binds.bind(tape, params, "cond.text.embed");
        let emb = tape.embed(table, text_ids);
        let pos = tape.constant(sinusoidal_positions(text_ids.len(), self.config.text_width));
        let x = tape.add(emb, pos);
        Ok(self.text_stack.forward(tape, binds, params, x)?)
    }

    /// Learned layer combination over the frozen voice feature stack.
    pub fn embed_voice(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        params: &ParamSet,
        feats: &VoiceFeatures,
    ) -> Result<Var, CondError> {
        if feats.width != self.config.voice_width || feats.layers != self.config.voice_layers {
            return Err(CondError::Config("voice feature stack shape mismatch"));
        }
        let stack = tape.constant(Tensor::from_rows(
            feats.frames * feats.width,
            feats.layers,
            feats.stacked.clone(),
        ));
        let mix = binds.bind(tape, params, "cond.voice.mix");
        let combined = tape.matmul(stack, mix);
        let shaped = tape.reshape(combined, vec![feats.frames, feats.width]);
        let bias = binds.bind(tape, params, "cond.voice.bias");
        Ok(tape.add_row(shaped, bias))
    }

    /// Projects each segment to the decoder width and concatenates them in
    /// the order voice, text, lyrics. A missing voice reference contributes
    /// a single learned null-voice row instead.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        params: &ParamSet,
        inputs: &ConditionInputs,
    ) -> Result<ConditionBundle, CondError> {
        let e_lyrics = self.encode_lyrics(tape, binds, params, &inputs.lyric_ids)?;
        let e_text = self.embed_text(tape, binds, params, &inputs.text_ids)?;
        let e_voice = match &inputs.voice {
            Some(f) => Some(self.embed_voice(tape, binds, params, f)?),
            None => None,
        };

        let project = |tape: &mut Tape, binds: &mut Bindings, x: Var, which: &str| -> Var {
            let w = binds.bind(tape, params, &format!("cond.proj.{which}.w"));
            let b = binds.bind(tape, params, &format!("cond.proj.{which}.b"));
            let y = tape.matmul(x, w);
            tape.add_row(y, b)
        };

        let voice_proj = match e_voice {
            Some(v) => project(tape, binds, v, "voice"),
            None => binds.bind(tape, params, "cond.null_voice"),
        };
        let text_proj = project(tape, binds, e_text, "text");
        let lyric_proj = project(tape, binds, e_lyrics, "lyrics");

        let voice_rows = tape.shape(voice_proj)[0];
        let text_rows = tape.shape(text_proj)[0];
        let lyric_rows = tape.shape(lyric_proj)[0];
        let e_cond = tape.concat_rows(&[voice_proj, text_proj, lyric_proj]);
        Ok(ConditionBundle {
            e_voice,
            e_text,
            e_lyrics,
            e_cond,
            voice_rows,
            text_rows,
            lyric_rows,
        })
    }
}

#[cfg(test)]
mod tests;
