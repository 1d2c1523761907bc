//! Single-stage autoregressive transformer decoder over patterned audio
//! tokens, conditioned through cross-attention on voice/text/lyrics.

mod generate;
#[cfg(test)]
mod tests;

pub use generate::{Generation, FinalizedGeneration, SamplingOptions};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::conditioning::{CondConfig, CondError, ConditionBundle, ConditionEncoder, ConditionInputs};
use crate::numerics::attention::{multi_head_attention, MhaWeights};
use crate::numerics::{
    sinusoidal_positions, AttnMask, Bindings, NumericsError, ParamSet, Tape, Tensor, Var,
};
use crate::patterns::{PatternError, PatternKind, SpecialTokens, TargetTrack, TrackRole, TrainingIo};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config(&'static str),
    Capacity { len: usize, max: usize },
    BadWeights(&'static str),
    Malformed { what: &'static str, track: usize, row: usize },
    Cond(CondError),
    Numerics(NumericsError),
    Pattern(PatternError),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "model config error: {msg}"),
            Self::Capacity { len, max } => {
                write!(f, "sequence length {len} exceeds the model capacity {max}")
            }
            Self::BadWeights(msg) => write!(f, "bad codebook loss weights: {msg}"),
            Self::Malformed { what, track, row } => {
                write!(f, "malformed generation: {what} (track {track}, codebook {row})")
            }
            Self::Cond(e) => write!(f, "{e}"),
            Self::Numerics(e) => write!(f, "{e}"),
            Self::Pattern(e) => write!(f, "{e}"),
        }
    }
}

impl From<CondError> for ModelError {
    fn from(e: CondError) -> Self {
        Self::Cond(e)
    }
}

impl From<NumericsError> for ModelError {
    fn from(e: NumericsError) -> Self {
        Self::Numerics(e)
    }
}

impl From<PatternError> for ModelError {
    fn from(e: PatternError) -> Self {
        Self::Pattern(e)
    }
}

/// Decoder hyperparameters. The desk default is 4 layers at width 128; the
/// paper-scale preset (24 layers, width 1024, 8 codebooks of 1024 codes)
/// stays a valid configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub n_q: usize,
    pub codebook_size: u32,
    pub pattern: PatternKind,
    /// Auxiliary vocal loss weight (mixed-pro).
    pub vocal_loss_weight: f32,
    pub max_seq_len: usize,
    pub cond: CondConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 128,
            heads: 4,
            ff_mult: 4,
            n_q: 4,
            codebook_size: 64,
            pattern: PatternKind::MixedPro,
            vocal_loss_weight: 0.1,
            max_seq_len: 2048,
            cond: CondConfig::default(),
        }
    }
}

impl DecoderConfig {
    /// Paper-scale preset, documented but far beyond desk budgets.
    pub fn paper_scale() -> Self {
        Self {
            layers: 24,
            d_model: 1024,
            heads: 16,
            ff_mult: 4,
            n_q: 8,
            codebook_size: 1024,
            pattern: PatternKind::MixedPro,
            vocal_loss_weight: 0.1,
            max_seq_len: 4096,
            cond: CondConfig {
                lyric_width: 1024,
                lyric_layers: 6,
                lyric_heads: 16,
                ..CondConfig::default()
            },
        }
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::for_codebook_size(self.codebook_size)
    }

    /// Per-codebook vocabulary: content codes plus PAD/BOS/EOS.
    pub fn vocab_size(&self) -> usize {
        self.specials().vocab_size() as usize
    }

    fn embed_group_name(&self, group: usize) -> &'static str {
        if self.pattern.is_parallel() {
            ["vocal", "acc"][group]
        } else if self.pattern.is_interleaving() {
            "track"
        } else {
            "mix"
        }
    }

    fn head_group_name(&self, group: usize) -> &'static str {
        self.embed_group_name(group)
    }
}

/// Per-track loss values for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackLossReport {
    pub role: TrackRole,
    pub per_codebook: Vec<f32>,
    pub weighted: f32,
}

/// Loss node plus the evaluated breakdown.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: Var,
    pub value: f32,
    pub tracks: Vec<TrackLossReport>,
    pub aux: Option<TrackLossReport>,
}

/// Attention maps recorded during one forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttnTrace {
    /// `[layer][head]` row-stochastic self-attention matrices.
    pub self_maps: Vec<Vec<Tensor>>,
    /// `[layer][head]` cross-attention matrices over the conditioning rows.
    pub cross_maps: Vec<Vec<Tensor>>,
}

/// The full trainable model: decoder, token embeddings, prediction heads,
/// and the conditioning encoders.
#[derive(Debug, Clone)]
pub struct SongModel {
    pub config: DecoderConfig,
    pub cond: ConditionEncoder,
    pub params: ParamSet,
}

impl SongModel {
    pub fn new(
        config: DecoderConfig,
        lyric_vocab: usize,
        text_vocab: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if config.d_model % config.heads != 0 {
            return Err(ModelError::Config("head count must divide hidden width"));
        }
        if config.vocal_loss_weight < 0.0 {
            return Err(ModelError::Config("vocal loss weight must be nonnegative"));
        }
        let cond = ConditionEncoder::new(config.cond.clone(), config.d_model, lyric_vocab, text_vocab)?;
        let mut params = ParamSet::new();
        cond.init(&mut params, seed);
        init_decoder(&config, &mut params, seed);
        Ok(Self {
            config,
            cond,
            params,
        })
    }

    pub fn specials(&self) -> SpecialTokens {
        self.config.specials()
    }

    /// Replaces decoder-side weights with those of another model wherever
    /// parameter names coincide (pattern-specific embeddings and heads keep
    /// their fresh initialization). Returns the loaded names.
    pub fn load_shared_from(&mut self, other: &ParamSet) -> Vec<String> {
        self.params.load_shared(other)
    }

    /// Embeds decoder input columns: per codebook table lookups summed
    /// (averaged across the doubled groups for parallel kinds) plus a
    /// sinusoidal positional encoding.
    pub fn embed_steps(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        inputs: &[Vec<u32>],
    ) -> Result<Var, ModelError> {
        let n_q = self.config.n_q;
        let groups = self.config.pattern.groups_per_step();
        let len = inputs.len();
        let width = groups * n_q;
        let vocab = self.config.vocab_size() as u32;
        for col in inputs {
            if col.len() != width {
                return Err(ModelError::Config("input column width mismatch"));
            }
            if col.iter().any(|&c| c >= vocab) {
                return Err(ModelError::Config("input code outside vocabulary"));
            }
        }
        let mut total: Option<Var> = None;
        for g in 0..groups {
            for q in 0..n_q {
                let ids: Vec<u32> = inputs.iter().map(|col| col[g * n_q + q]).collect();
                let table = binds.bind(
                    tape,
                    &self.params,
                    &format!("embed.{}.k{q}", self.config.embed_group_name(g)),
                );
                let e = tape.embed(table, &ids);
                total = Some(match total {
                    Some(t) => tape.add(t, e),
                    None => e,
                });
            }
        }
        let mut x = total.expect("at least one embedding group");
        if groups == 2 {
            // Parallel kinds average over both groups' embeddings.
            x = tape.scale(x, 1.0 / (2 * n_q) as f32);
        }
        let pos = tape.constant(sinusoidal_positions(len, self.config.d_model));
        Ok(tape.add(x, pos))
    }

    /// Runs the decoder stack: per layer, causal self-attention, then
    /// cross-attention over the conditioning rows, then the feed-forward
    /// block, each on a pre-norm residual path.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        x: Var,
        e_cond: Var,
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<Var, ModelError> {
        let len = tape.shape(x)[0];
        if len > self.config.max_seq_len {
            return Err(ModelError::Capacity {
                len,
                max: self.config.max_seq_len,
            });
        }
        let causal = AttnMask::causal(len);
        let mut h = x;
        for l in 0..self.config.layers {
            let p = format!("dec.l{l}");
            let bind4 = |tape: &mut Tape, binds: &mut Bindings, stem: &str| MhaWeights {
                wq: binds.bind(tape, &self.params, &format!("{p}.{stem}.wq")),
                wk: binds.bind(tape, &self.params, &format!("{p}.{stem}.wk")),
                wv: binds.bind(tape, &self.params, &format!("{p}.{stem}.wv")),
                wo: binds.bind(tape, &self.params, &format!("{p}.{stem}.wo")),
            };
            let ln = |tape: &mut Tape, binds: &mut Bindings, stem: &str, x: Var| {
                let g = binds.bind(tape, &self.params, &format!("{p}.{stem}.g"));
                let b = binds.bind(tape, &self.params, &format!("{p}.{stem}.b"));
                tape.layer_norm(x, g, b, 1e-5)
            };

            let normed = ln(tape, binds, "ln1", h);
            let weights = bind4(tape, binds, "self");
            let (attn, self_maps) =
                multi_head_attention(tape, normed, normed, weights, self.config.heads, Some(&causal))?;
            h = tape.add(h, attn);

            let normed = ln(tape, binds, "ln2", h);
            let weights = bind4(tape, binds, "cross");
            let (cross, cross_maps) =
                multi_head_attention(tape, normed, e_cond, weights, self.config.heads, None)?;
            h = tape.add(h, cross);

            let normed = ln(tape, binds, "ln3", h);
            let w1 = binds.bind(tape, &self.params, &format!("{p}.ffn.w1"));
            let b1 = binds.bind(tape, &self.params, &format!("{p}.ffn.b1"));
            let w2 = binds.bind(tape, &self.params, &format!("{p}.ffn.w2"));
            let b2 = binds.bind(tape, &self.params, &format!("{p}.ffn.b2"));
            let f = tape.matmul(normed, w1);
            let f = tape.add_row(f, b1);
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            h = tape.add(h, f);

            if let Some(t) = trace.as_deref_mut() {
                t.self_maps
                    .push(self_maps.iter().map(|&v| tape.value_tensor(v)).collect());
                t.cross_maps
                    .push(cross_maps.iter().map(|&v| tape.value_tensor(v)).collect());
            }
        }
        let g = binds.bind(tape, &self.params, "dec.ln_f.g");
        let b = binds.bind(tape, &self.params, "dec.ln_f.b");
        Ok(tape.layer_norm(h, g, b, 1e-5))
    }

    /// Logits for every codebook of one head group: `n_q` matrices of shape
    /// `[len, vocab]`.
    pub fn head_logits(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        hidden: Var,
        group_name: &str,
    ) -> Vec<Var> {
        (0..self.config.n_q)
            .map(|q| {
                let w = binds.bind(tape, &self.params, &format!("heads.{group_name}.k{q}.w"));
                let b = binds.bind(tape, &self.params, &format!("heads.{group_name}.k{q}.b"));
                let logits = tape.matmul(hidden, w);
                tape.add_row(logits, b)
            })
            .collect()
    }

    /// Pattern-dependent training loss.
    ///
    /// Mixed: the `w`-weighted sum of per-codebook cross-entropies.
    /// Mixed-pro: adds `lambda` times the same weighted sum over the
    /// auxiliary vocal heads. Dual-track: the mean of the two tracks'
    /// weighted sums. `w` must be nonnegative and sum to one.
    pub fn compute_loss(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        hidden: Var,
        io: &TrainingIo,
        w: &[f32],
    ) -> Result<LossReport, ModelError> {
        if w.len() != self.config.n_q {
            return Err(ModelError::BadWeights("need one weight per codebook"));
        }
        if w.iter().any(|&x| x < 0.0) {
            return Err(ModelError::BadWeights("weights must be nonnegative"));
        }
        let sum: f64 = w.iter().map(|&x| x as f64).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ModelError::BadWeights("weights must sum to one"));
        }
        let len = tape.shape(hidden)[0];
        for track in &io.tracks {
            if track.len != len {
                return Err(ModelError::Config("target length differs from hidden length"));
            }
        }

        // Shared logits per head group.
        let mut group_logits: Vec<Vec<Var>> = Vec::new();
        for g in 0..self.config.pattern.head_groups() {
            let name = self.config.head_group_name(g);
            group_logits.push(self.head_logits(tape, binds, hidden, name));
        }

        let mut track_total = |tape: &mut Tape, track: &TargetTrack, logits: &[Var]| -> (Var, TrackLossReport) {
            let mut per_codebook = Vec::with_capacity(self.config.n_q);
            let mut acc: Option<Var> = None;
            for q in 0..self.config.n_q {
                let (codes, keep) = track.codebook_row(q);
                let ce = tape.cross_entropy_mean(logits[q], codes, keep);
                per_codebook.push(tape.value(ce)[0]);
                let weighted = tape.scale(ce, w[q]);
                acc = Some(match acc {
                    Some(a) => tape.add(a, weighted),
                    None => weighted,
                });
            }
            let total = acc.expect("n_q >= 1");
            let report = TrackLossReport {
                role: track.role,
                per_codebook,
                weighted: tape.value(total)[0],
            };
            (total, report)
        };

        let mut reports = Vec::new();
        let mut totals = Vec::new();
        for track in &io.tracks {
            let (t, r) = track_total(tape, track, &group_logits[track.head_group]);
            totals.push(t);
            reports.push(r);
        }
        let mut total = if totals.len() == 2 {
            let s = tape.add(totals[0], totals[1]);
            tape.scale(s, 0.5)
        } else {
            totals[0]
        };

        let mut aux_report = None;
        if let Some(aux) = &io.aux {
            if self.config.pattern != PatternKind::MixedPro {
                return Err(ModelError::Config("auxiliary targets require mixed_pro"));
            }
            let aux_logits = self.head_logits(tape, binds, hidden, "vocal_aux");
            let (aux_total, r) = track_total(tape, aux, &aux_logits);
            aux_report = Some(r);
            let scaled = tape.scale(aux_total, self.config.vocal_loss_weight);
            total = tape.add(total, scaled);
        } else if self.config.pattern == PatternKind::MixedPro {
            return Err(ModelError::Config("mixed_pro training needs auxiliary targets"));
        }

        Ok(LossReport {
            total,
            value: tape.value(total)[0],
            tracks: reports,
            aux: aux_report,
        })
    }

    /// Assembles conditions, embeds inputs, runs the decoder, and computes
    /// the loss for one clip.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        io: &TrainingIo,
        cond_inputs: &ConditionInputs,
        w: &[f32],
    ) -> Result<(LossReport, ConditionBundle), ModelError> {
        let bundle = self.cond.assemble(tape, binds, &self.params, cond_inputs)?;
        let x = self.embed_steps(tape, binds, &io.inputs)?;
        let hidden = self.decoder_forward(tape, binds, x, bundle.e_cond, None)?;
        let report = self.compute_loss(tape, binds, hidden, io, w)?;
        Ok((report, bundle))
    }

    /// Teacher-forced greedy accuracy: fraction of kept target cells whose
    /// argmax logit matches.
    pub fn teacher_forced_accuracy(
        &self,
        io: &TrainingIo,
        cond_inputs: &ConditionInputs,
    ) -> Result<(usize, usize), ModelError> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let bundle = self.cond.assemble(&mut tape, &mut binds, &self.params, cond_inputs)?;
        let x = self.embed_steps(&mut tape, &mut binds, &io.inputs)?;
        let hidden = self.decoder_forward(&mut tape, &mut binds, x, bundle.e_cond, None)?;
        let vocab = self.config.vocab_size();
        let mut correct = 0;
        let mut total = 0;
        let mut tracks: Vec<&TargetTrack> = io.tracks.iter().collect();
        if let Some(aux) = &io.aux {
            tracks.push(aux);
        }
        for track in tracks {
            let group = if track.role == TrackRole::Vocal && self.config.pattern == PatternKind::MixedPro
            {
                "vocal_aux"
            } else {
                self.config.head_group_name(track.head_group)
            };
            let logits = self.head_logits(&mut tape, &mut binds, hidden, group);
            for q in 0..self.config.n_q {
                let vals = tape.value(logits[q]).to_vec();
                let (codes, keep) = track.codebook_row(q);
                for i in 0..track.len {
                    if !keep[i] {
                        continue;
                    }
                    let row = &vals[i * vocab..(i + 1) * vocab];
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(core::cmp::Ordering::Equal))
                        .map(|(j, _)| j)
                        .unwrap_or(0);
                    if argmax == codes[i] as usize {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        Ok((correct, total))
    }

    /// Teacher-forced pass that records every attention map.
    pub fn attention_trace(
        &self,
        io: &TrainingIo,
        cond_inputs: &ConditionInputs,
    ) -> Result<AttnTrace, ModelError> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let bundle = self.cond.assemble(&mut tape, &mut binds, &self.params, cond_inputs)?;
        let x = self.embed_steps(&mut tape, &mut binds, &io.inputs)?;
        let mut trace = AttnTrace::default();
        self.decoder_forward(&mut tape, &mut binds, x, bundle.e_cond, Some(&mut trace))?;
        Ok(trace)
    }
}

fn init_decoder(config: &DecoderConfig, params: &mut ParamSet, seed: u64) {
    let d = config.d_model;
    let ff = config.ff_mult * d;
    for l in 0..config.layers {
        let p = format!("dec.l{l}");
        for stem in ["self", "cross"] {
            for name in ["wq", "wk", "wv", "wo"] {
                params.init_normal(&format!("{p}.{stem}.{name}"), &[d, d], 0.02, seed);
            }
        }
        for stem in ["ln1", "ln2", "ln3"] {
            params.init_const(&format!("{p}.{stem}.g"), &[d], 1.0);
            params.init_zeros(&format!("{p}.{stem}.b"), &[d]);
        }
        params.init_normal(&format!("{p}.ffn.w1"), &[d, ff], 0.02, seed);
        params.init_zeros(&format!("{p}.ffn.b1"), &[ff]);
        params.init_normal(&format!("{p}.ffn.w2"), &[ff, d], 0.02, seed);
        params.init_zeros(&format!("{p}.ffn.b2"), &[d]);
    }
    params.init_const("dec.ln_f.g", &[d], 1.0);
    params.init_zeros("dec.ln_f.b", &[d]);

    let vocab = config.vocab_size();
    for g in 0..config.pattern.embed_groups() {
        let name = config.embed_group_name(g);
        for q in 0..config.n_q {
            params.init_normal(&format!("embed.{name}.k{q}"), &[vocab, d], 0.02, seed);
        }
    }
    for g in 0..config.pattern.head_groups() {
        let name = config.head_group_name(g);
        for q in 0..config.n_q {
            params.init_normal(&format!("heads.{name}.k{q}.w"), &[d, vocab], 0.02, seed);
            params.init_zeros(&format!("heads.{name}.k{q}.b"), &[vocab]);
        }
    }
    if config.pattern == PatternKind::MixedPro {
        for q in 0..config.n_q {
            params.init_normal(&format!("heads.vocal_aux.k{q}.w"), &[d, vocab], 0.02, seed);
            params.init_zeros(&format!("heads.vocal_aux.k{q}.b"), &[vocab]);
        }
    }
}
