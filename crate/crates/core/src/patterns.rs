//! Token-pattern algebra for mixed and dual-track layouts.
//!
//! Every layout starts from the codebook-delay transform: row `q` of a token
//! grid is shifted right by `q` steps so one decoder step predicts one code
//! per codebook with the right causal structure. On top of that:
//!
//! * mixed mode feeds the delayed grid directly (optionally with an
//!   auxiliary vocal target sharing the same geometry),
//! * parallel mode stacks two delayed grids along the codebook axis, with
//!   variants that shift one track by a step,
//! * interleaving mode alternates the two tracks along time.
//!
//! Each builder also emits the teacher-forcing streams: inputs begin with a
//! BOS column, and each codebook row's target gets an EOS right after its
//! content ends, so row `q` finishes `q` steps after row 0 and a generator
//! can flush delayed codebooks before stopping. Cells the geometry forces to
//! PAD are masked out of the loss.
//!
//! Every layout is exactly invertible back to its source grid(s).

use alloc::vec;
use alloc::vec::Vec;

use crate::codec::TokenGrid;
use crate::numerics::checkpoint::Cursor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternError {
    AlignmentError(&'static str),
    Malformed {
        what: &'static str,
        step: usize,
        row: usize,
    },
    BadLength {
        steps: usize,
        kind: PatternKind,
    },
    BadSerialization(&'static str),
}

impl core::fmt::Display for PatternError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::AlignmentError(msg) => write!(f, "track alignment error: {msg}"),
            Self::Malformed { what, step, row } => {
                write!(f, "malformed pattern: {what} at step {step}, codebook {row}")
            }
            Self::BadLength { steps, kind } => {
                write!(f, "step count {steps} is invalid for {} pattern", kind.name())
            }
            Self::BadSerialization(msg) => write!(f, "bad pattern serialization: {msg}"),
        }
    }
}

/// Reserved per-codebook token ids appended after the `K` content codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    k: u32,
}

impl SpecialTokens {
    pub fn for_codebook_size(k: u32) -> Self {
        Self { k }
    }

    pub fn pad(&self) -> u32 {
        self.k
    }

    pub fn bos(&self) -> u32 {
        self.k + 1
    }

    pub fn eos(&self) -> u32 {
        self.k + 2
    }

    /// Content codes plus PAD/BOS/EOS.
    pub fn vocab_size(&self) -> u32 {
        self.k + 3
    }

    pub fn is_content(&self, code: u32) -> bool {
        code < self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Mixed,
    MixedPro,
    ParallelStd,
    ParallelVA,
    ParallelAV,
    InterleavingAV,
    InterleavingVA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackRole {
    Mixed,
    Vocal,
    Acc,
}

impl TrackRole {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mixed => "mixed",
            Self::Vocal => "vocal",
            Self::Acc => "accompaniment",
        }
    }
}

/// How one track maps onto decoder steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackSpec {
    pub role: TrackRole,
    /// Which group of linear heads predicts this track.
    pub head_group: usize,
    /// Which group of code embeddings carries this track's inputs.
    pub embed_group: usize,
    /// Step delay relative to the sequence start (parallel variants).
    pub offset: usize,
    /// For interleaving kinds, the step parity this track occupies.
    pub parity: Option<usize>,
}

pub const ALL_PATTERN_KINDS: [PatternKind; 7] = [
    PatternKind::Mixed,
    PatternKind::MixedPro,
    PatternKind::ParallelStd,
    PatternKind::ParallelVA,
    PatternKind::ParallelAV,
    PatternKind::InterleavingAV,
    PatternKind::InterleavingVA,
];

impl PatternKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mixed => "mixed",
            Self::MixedPro => "mixed_pro",
            Self::ParallelStd => "parallel_std",
            Self::ParallelVA => "parallel_va",
            Self::ParallelAV => "parallel_av",
            Self::InterleavingAV => "interleaving_av",
            Self::InterleavingVA => "interleaving_va",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        ALL_PATTERN_KINDS.iter().copied().find(|k| k.name() == name)
    }

    fn tag(&self) -> u8 {
        ALL_PATTERN_KINDS.iter().position(|k| *k == *self).unwrap() as u8
    }

    fn from_tag(tag: u8) -> Option<Self> {
        ALL_PATTERN_KINDS.get(tag as usize).copied()
    }

    pub fn is_mixed(&self) -> bool {
        matches!(self, Self::Mixed | Self::MixedPro)
    }

    pub fn is_parallel(&self) -> bool {
        matches!(self, Self::ParallelStd | Self::ParallelVA | Self::ParallelAV)
    }

    pub fn is_interleaving(&self) -> bool {
        matches!(self, Self::InterleavingAV | Self::InterleavingVA)
    }

    pub fn is_dual_track(&self) -> bool {
        !self.is_mixed()
    }

    /// Code groups carried by each sequence step (2 only for parallel).
    pub fn groups_per_step(&self) -> usize {
        if self.is_parallel() {
            2
        } else {
            1
        }
    }

    /// Groups of linear prediction heads, auxiliary heads not included.
    pub fn head_groups(&self) -> usize {
        if self.is_parallel() {
            2
        } else {
            1
        }
    }

    /// Groups of code embedding tables.
    pub fn embed_groups(&self) -> usize {
        if self.is_parallel() {
            2
        } else {
            1
        }
    }

    pub fn tracks(&self) -> Vec<TrackSpec> {
        let t = |role, head_group, embed_group, offset, parity| TrackSpec {
            role,
            head_group,
            embed_group,
            offset,
            parity,
        };
        match self {
            Self::Mixed | Self::MixedPro => vec![t(TrackRole::Mixed, 0, 0, 0, None)],
            Self::ParallelStd => vec![
                t(TrackRole::Vocal, 0, 0, 0, None),
                t(TrackRole::Acc, 1, 1, 0, None),
            ],
            // A-V: accompaniment first, vocal delayed one step.
            Self::ParallelAV => vec![
                t(TrackRole::Vocal, 0, 0, 1, None),
                t(TrackRole::Acc, 1, 1, 0, None),
            ],
            Self::ParallelVA => vec![
                t(TrackRole::Vocal, 0, 0, 0, None),
                t(TrackRole::Acc, 1, 1, 1, None),
            ],
            // A-V: accompaniment tokens precede vocal tokens at each frame.
            Self::InterleavingAV => vec![
                t(TrackRole::Vocal, 0, 0, 0, Some(1)),
                t(TrackRole::Acc, 0, 0, 0, Some(0)),
            ],
            Self::InterleavingVA => vec![
                t(TrackRole::Vocal, 0, 0, 0, Some(0)),
                t(TrackRole::Acc, 0, 0, 0, Some(1)),
            ],
        }
    }

    fn max_offset(&self) -> usize {
        self.tracks().iter().map(|t| t.offset).max().unwrap_or(0)
    }

    /// Steps in the canonical (content-only) sequence for source length `t`.
    pub fn canonical_len(&self, t: usize, n_q: usize) -> usize {
        let t_prime = t + n_q - 1;
        if self.is_interleaving() {
            2 * t_prime
        } else {
            t_prime + self.max_offset()
        }
    }

    /// Steps in the teacher-forcing streams (inputs and targets) for source
    /// length `t`: the canonical steps plus the EOS tail.
    pub fn target_len(&self, t: usize, n_q: usize) -> usize {
        let ext = t + n_q; // delayed length of the EOS-extended source
        if self.is_interleaving() {
            2 * ext
        } else {
            ext + self.max_offset()
        }
    }

    /// Which (track, track-column) each head group addresses at `step`.
    /// `None` column means the group emits a full PAD group there.
    pub fn step_slots(&self, step: usize) -> Vec<(usize, Option<usize>)> {
        let tracks = self.tracks();
        if self.is_interleaving() {
            let parity = step % 2;
            let idx = tracks
                .iter()
                .position(|t| t.parity == Some(parity))
                .expect("interleaving kinds define both parities");
            vec![(idx, Some(step / 2))]
        } else {
            tracks
                .iter()
                .enumerate()
                .map(|(i, t)| (i, step.checked_sub(t.offset)))
                .collect()
        }
    }
}

/// Codebook-delay transform of a token grid: row `q` shifted right by `q`,
/// vacated cells PAD. May also carry special tokens when built raw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayedGrid {
    n_q: usize,
    len: usize,
    source_len: usize,
    k: u32,
    frame_rate: u32,
    codes: Vec<u32>,
}

impl DelayedGrid {
    /// Raw constructor for hand-built (possibly malformed) layouts.
    pub fn from_codes(
        n_q: usize,
        source_len: usize,
        k: u32,
        frame_rate: u32,
        codes: Vec<u32>,
    ) -> Self {
        let len = source_len + n_q - 1;
        assert_eq!(codes.len(), n_q * len);
        Self {
            n_q,
            len,
            source_len,
            k,
            frame_rate,
            codes,
        }
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    /// `T' = T + N_q - 1`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn get(&self, q: usize, c: usize) -> u32 {
        self.codes[q * self.len + c]
    }

    pub fn set(&mut self, q: usize, c: usize, code: u32) {
        self.codes[q * self.len + c] = code;
    }
}

/// Cell of the delayed grid computed straight from the source grid.
fn delayed_cell(grid: &TokenGrid, specials: SpecialTokens, q: usize, c: usize) -> u32 {
    if c < q || c - q >= grid.len() {
        specials.pad()
    } else {
        grid.get(q, c - q)
    }
}

/// Cell of the EOS-extended delayed grid (valid for `c` in `0..=T'`): the
/// first vacated cell after row `q`'s content becomes that row's EOS.
fn extended_cell(grid: &TokenGrid, specials: SpecialTokens, q: usize, c: usize) -> u32 {
    if c < q {
        specials.pad()
    } else if c - q < grid.len() {
        grid.get(q, c - q)
    } else if c - q == grid.len() {
        specials.eos()
    } else {
        specials.pad()
    }
}

/// Applies the codebook-delay pattern: `N_q x T` -> `N_q x (T + N_q - 1)`.
pub fn apply_delay(grid: &TokenGrid) -> DelayedGrid {
    let specials = SpecialTokens::for_codebook_size(grid.k());
    let n_q = grid.n_q();
    let len = grid.len() + n_q - 1;
    let mut codes = vec![0u32; n_q * len];
    for q in 0..n_q {
        for c in 0..len {
            codes[q * len + c] = delayed_cell(grid, specials, q, c);
        }
    }
    DelayedGrid {
        n_q,
        len,
        source_len: grid.len(),
        k: grid.k(),
        frame_rate: grid.frame_rate(),
        codes,
    }
}

/// Inverts [`apply_delay`], rejecting grids whose PAD cells do not match the
/// delay geometry exactly.
pub fn undo_delay(delayed: &DelayedGrid) -> Result<TokenGrid, PatternError> {
    let specials = SpecialTokens::for_codebook_size(delayed.k);
    let t = delayed.source_len;
    let mut codes = vec![0u32; delayed.n_q * t];
    for q in 0..delayed.n_q {
        for c in 0..delayed.len {
            let code = delayed.get(q, c);
            let geometric_pad = c < q || c - q >= t;
            if geometric_pad {
                if code != specials.pad() {
                    return Err(PatternError::Malformed {
                        what: "expected PAD in delay corner",
                        step: c,
                        row: q,
                    });
                }
            } else {
                if !specials.is_content(code) {
                    return Err(PatternError::Malformed {
                        what: "special token in content cell",
                        step: c,
                        row: q,
                    });
                }
                codes[q * t + (c - q)] = code;
            }
        }
    }
    TokenGrid::new(delayed.n_q, t, delayed.k, delayed.frame_rate, codes)
        .map_err(|_| PatternError::BadSerialization("token grid reconstruction"))
}

/// A pattern-transformed token layout with enough metadata for exact
/// inversion. Steps carry one code group (`n_q` codes) for mixed and
/// interleaving kinds, two groups (vocal then accompaniment) for parallel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternedSequence {
    kind: PatternKind,
    n_q: usize,
    k: u32,
    frame_rate: u32,
    source_len: usize,
    steps: Vec<Vec<u32>>,
}

impl PatternedSequence {
    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::for_codebook_size(self.k)
    }

    /// Source grid length `T`.
    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, i: usize) -> &[u32] {
        &self.steps[i]
    }

    pub fn steps(&self) -> &[Vec<u32>] {
        &self.steps
    }

    /// Builds a sequence from raw steps, deriving the source length from the
    /// step count. An interleaving sequence with an odd step count has its
    /// final incomplete frame dropped and is flagged as truncated.
    pub fn from_steps(
        kind: PatternKind,
        n_q: usize,
        k: u32,
        frame_rate: u32,
        mut steps: Vec<Vec<u32>>,
    ) -> Result<(Self, bool), PatternError> {
        let group_width = kind.groups_per_step() * n_q;
        for s in &steps {
            if s.len() != group_width {
                return Err(PatternError::BadSerialization("step width mismatch"));
            }
        }
        let mut truncated = false;
        if kind.is_interleaving() && steps.len() % 2 == 1 {
            steps.pop();
            truncated = true;
        }
        let min_len = kind.canonical_len(0, n_q);
        if steps.len() < min_len {
            return Err(PatternError::BadLength {
                steps: steps.len(),
                kind,
            });
        }
        let source_len = if kind.is_interleaving() {
            steps.len() / 2 - (n_q - 1)
        } else {
            steps.len() - kind.max_offset() - (n_q - 1)
        };
        Ok((
            Self {
                kind,
                n_q,
                k,
                frame_rate,
                source_len,
                steps,
            },
            truncated,
        ))
    }

    /// Versioned binary serialization: magic, kind tag, n_q, k, frame rate,
    /// source length, step count, then step payloads.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"PSQ1");
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.n_q as u32).to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.frame_rate.to_le_bytes());
        out.extend_from_slice(&(self.source_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.steps.len() as u32).to_le_bytes());
        for step in &self.steps {
            for &c in step {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PatternError> {
        let bad = |msg| PatternError::BadSerialization(msg);
        let mut cur = Cursor::new(bytes);
        if cur.take(4).map_err(|_| bad("truncated"))? != b"PSQ1" {
            return Err(bad("bad magic"));
        }
        let tag = cur.take(1).map_err(|_| bad("truncated"))?[0];
        let kind = PatternKind::from_tag(tag).ok_or(bad("unknown kind tag"))?;
        let n_q = cur.u32().map_err(|_| bad("truncated"))? as usize;
        let k = cur.u32().map_err(|_| bad("truncated"))?;
        let frame_rate = cur.u32().map_err(|_| bad("truncated"))?;
        let source_len = cur.u32().map_err(|_| bad("truncated"))? as usize;
        let count = cur.u32().map_err(|_| bad("truncated"))? as usize;
        if n_q == 0 || n_q > 64 {
            return Err(bad("implausible n_q"));
        }
        if count != kind.canonical_len(source_len, n_q) {
            return Err(bad("step count does not match source length"));
        }
        let width = kind.groups_per_step() * n_q;
        let mut steps = Vec::with_capacity(count);
        for _ in 0..count {
            let mut step = Vec::with_capacity(width);
            for _ in 0..width {
                step.push(cur.u32().map_err(|_| bad("truncated"))?);
            }
            steps.push(step);
        }
        if cur.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            kind,
            n_q,
            k,
            frame_rate,
            source_len,
            steps,
        })
    }
}

/// One track's teacher-forcing targets: `codes[q * len + i]` is the target
/// for codebook `q` of this track's head group at position `i`, and `keep`
/// masks in exactly the positions that carry real content or EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetTrack {
    pub role: TrackRole,
    pub head_group: usize,
    pub n_q: usize,
    pub len: usize,
    pub codes: Vec<u32>,
    pub keep: Vec<bool>,
}

impl TargetTrack {
    pub fn code(&self, q: usize, i: usize) -> u32 {
        self.codes[q * self.len + i]
    }

    pub fn kept(&self, q: usize, i: usize) -> bool {
        self.keep[q * self.len + i]
    }

    pub fn codebook_row(&self, q: usize) -> (&[u32], &[bool]) {
        (
            &self.codes[q * self.len..(q + 1) * self.len],
            &self.keep[q * self.len..(q + 1) * self.len],
        )
    }
}

/// Teacher-forcing streams produced alongside a patterned sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingIo {
    /// Decoder input columns; entry 0 is the BOS column. Each column has
    /// `groups_per_step * n_q` codes matching the sequence's step layout.
    pub inputs: Vec<Vec<u32>>,
    /// Primary targets, one per track.
    pub tracks: Vec<TargetTrack>,
    /// Auxiliary vocal targets (mixed-pro only), aligned index-for-index
    /// with the primary targets.
    pub aux: Option<TargetTrack>,
}

impl TrainingIo {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A built pattern: the canonical sequence plus its training streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPattern {
    pub seq: PatternedSequence,
    pub io: TrainingIo,
}

fn make_target_track(
    grid: &TokenGrid,
    specials: SpecialTokens,
    role: TrackRole,
    head_group: usize,
    len: usize,
    col_of: impl Fn(usize) -> Option<usize>,
) -> TargetTrack {
    let n_q = grid.n_q();
    let mut codes = vec![specials.pad(); n_q * len];
    let mut keep = vec![false; n_q * len];
    for i in 0..len {
        if let Some(c) = col_of(i) {
            for q in 0..n_q {
                let code = extended_cell(grid, specials, q, c);
                codes[q * len + i] = code;
                keep[q * len + i] = code != specials.pad();
            }
        }
    }
    TargetTrack {
        role,
        head_group,
        n_q,
        len,
        codes,
        keep,
    }
}

/// Mixed-mode builder. With a vocal grid the layout is Mixed-Pro and the
/// returned IO carries auxiliary vocal targets; the sequence itself is the
/// delayed mixed grid either way.
pub fn build_mixed(mixed: &TokenGrid, vocal: Option<&TokenGrid>) -> Result<BuiltPattern, PatternError> {
    if let Some(v) = vocal {
        if !v.same_shape(mixed) {
            return Err(PatternError::AlignmentError(
                "vocal grid must be aligned frame-by-frame with the mixed grid",
            ));
        }
    }
    let kind = if vocal.is_some() {
        PatternKind::MixedPro
    } else {
        PatternKind::Mixed
    };
    let specials = SpecialTokens::for_codebook_size(mixed.k());
    let n_q = mixed.n_q();
    let t = mixed.len();

    let canonical = kind.canonical_len(t, n_q);
    let steps: Vec<Vec<u32>> = (0..canonical)
        .map(|c| (0..n_q).map(|q| delayed_cell(mixed, specials, q, c)).collect())
        .collect();

    let l = kind.target_len(t, n_q);
    let mut inputs = Vec::with_capacity(l);
    inputs.push(vec![specials.bos(); n_q]);
    for c in 0..l - 1 {
        inputs.push((0..n_q).map(|q| extended_cell(mixed, specials, q, c)).collect());
    }
    let primary = make_target_track(mixed, specials, TrackRole::Mixed, 0, l, |i| Some(i));
    let aux = vocal.map(|v| make_target_track(v, specials, TrackRole::Vocal, 0, l, |i| Some(i)));

    Ok(BuiltPattern {
        seq: PatternedSequence {
            kind,
            n_q,
            k: mixed.k(),
            frame_rate: mixed.frame_rate(),
            source_len: t,
            steps,
        },
        io: TrainingIo {
            inputs,
            tracks: vec![primary],
            aux,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParallelVariant {
    Std,
    VA,
    AV,
}

impl ParallelVariant {
    pub fn kind(&self) -> PatternKind {
        match self {
            Self::Std => PatternKind::ParallelStd,
            Self::VA => PatternKind::ParallelVA,
            Self::AV => PatternKind::ParallelAV,
        }
    }
}

/// Parallel builder: each step stacks one vocal group and one accompaniment
/// group along the codebook dimension.
pub fn build_parallel(
    vocal: &TokenGrid,
    acc: &TokenGrid,
    variant: ParallelVariant,
) -> Result<BuiltPattern, PatternError> {
    build_dual(vocal, acc, variant.kind())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterleavingVariant {
    AV,
    VA,
}

impl InterleavingVariant {
    pub fn kind(&self) -> PatternKind {
        match self {
            Self::AV => PatternKind::InterleavingAV,
            Self::VA => PatternKind::InterleavingVA,
        }
    }
}

/// Interleaving builder: after the per-track delay transform, each frame
/// emits two consecutive steps, one per track.
pub fn build_interleaving(
    vocal: &TokenGrid,
    acc: &TokenGrid,
    variant: InterleavingVariant,
) -> Result<BuiltPattern, PatternError> {
    build_dual(vocal, acc, variant.kind())
}

fn build_dual(vocal: &TokenGrid, acc: &TokenGrid, kind: PatternKind) -> Result<BuiltPattern, PatternError> {
    if !vocal.same_shape(acc) {
        return Err(PatternError::AlignmentError(
            "vocal and accompaniment grids must share shape",
        ));
    }
    let specials = SpecialTokens::for_codebook_size(vocal.k());
    let n_q = vocal.n_q();
    let t = vocal.len();
    let tracks = kind.tracks();
    let grid_for = |role: TrackRole| match role {
        TrackRole::Vocal => vocal,
        TrackRole::Acc => acc,
        TrackRole::Mixed => unreachable!("dual builders carry no mixed track"),
    };

    let canonical = kind.canonical_len(t, n_q);
    let mut steps = Vec::with_capacity(canonical);
    for s in 0..canonical {
        let mut step = Vec::with_capacity(kind.groups_per_step() * n_q);
        for (track_idx, col) in kind.step_slots(s) {
            let spec = &tracks[track_idx];
            let grid = grid_for(spec.role);
            match col {
                Some(c) if c < t + n_q - 1 => {
                    step.extend((0..n_q).map(|q| delayed_cell(grid, specials, q, c)));
                }
                _ => step.extend(core::iter::repeat(specials.pad()).take(n_q)),
            }
        }
        steps.push(step);
    }

    let l = kind.target_len(t, n_q);
    let mut inputs = Vec::with_capacity(l);
    inputs.push(vec![specials.bos(); kind.groups_per_step() * n_q]);
    for s in 0..l - 1 {
        let mut col = Vec::with_capacity(kind.groups_per_step() * n_q);
        for (track_idx, c) in kind.step_slots(s) {
            let spec = &tracks[track_idx];
            let grid = grid_for(spec.role);
            match c {
                Some(c) if c <= t + n_q - 1 => {
                    col.extend((0..n_q).map(|q| extended_cell(grid, specials, q, c)));
                }
                _ => col.extend(core::iter::repeat(specials.pad()).take(n_q)),
            }
        }
        inputs.push(col);
    }

    let mut target_tracks = Vec::with_capacity(tracks.len());
    for (track_idx, spec) in tracks.iter().enumerate() {
        let grid = grid_for(spec.role);
        let col_of = |i: usize| -> Option<usize> {
            kind.step_slots(i)
                .into_iter()
                .find(|(idx, _)| *idx == track_idx)
                .and_then(|(_, c)| c)
                .filter(|&c| c <= t + n_q - 1)
        };
        target_tracks.push(make_target_track(
            grid,
            specials,
            spec.role,
            spec.head_group,
            l,
            col_of,
        ));
    }

    Ok(BuiltPattern {
        seq: PatternedSequence {
            kind,
            n_q,
            k: vocal.k(),
            frame_rate: vocal.frame_rate(),
            source_len: t,
            steps,
        },
        io: TrainingIo {
            inputs,
            tracks: target_tracks,
            aux: None,
        },
    })
}

/// Grids recovered from a patterned sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvertedGrids {
    Mixed(TokenGrid),
    Dual { vocal: TokenGrid, acc: TokenGrid },
}

/// Exact inversion of a well-formed canonical sequence. PAD cells must sit
/// exactly where the layout geometry dictates and nowhere else.
pub fn invert_pattern(seq: &PatternedSequence) -> Result<InvertedGrids, PatternError> {
    let specials = seq.specials();
    let n_q = seq.n_q;
    let t = seq.source_len;
    if seq.steps.len() != seq.kind.canonical_len(t, n_q) {
        return Err(PatternError::BadLength {
            steps: seq.steps.len(),
            kind: seq.kind,
        });
    }
    let t_prime = t + n_q - 1;

    let recover_track = |track_idx: usize| -> Result<TokenGrid, PatternError> {
        let mut codes = vec![0u32; n_q * t];
        for (s, step) in seq.steps.iter().enumerate() {
            let slots = seq.kind.step_slots(s);
            for (slot_i, (idx, col)) in slots.iter().enumerate() {
                if *idx != track_idx {
                    continue;
                }
                let group_offset = if seq.kind.is_parallel() { slot_i * n_q } else { 0 };
                for q in 0..n_q {
                    let code = step[group_offset + q];
                    let geometric_pad = match col {
                        Some(c) if *c < t_prime => *c < q || *c - q >= t,
                        _ => true,
                    };
                    if geometric_pad {
                        if code != specials.pad() {
                            return Err(PatternError::Malformed {
                                what: "expected PAD by pattern geometry",
                                step: s,
                                row: q,
                            });
                        }
                    } else {
                        let c = col.unwrap();
                        if !specials.is_content(code) {
                            return Err(PatternError::Malformed {
                                what: "special token in content cell",
                                step: s,
                                row: q,
                            });
                        }
                        codes[q * t + (c - q)] = code;
                    }
                }
            }
        }
        TokenGrid::new(n_q, t, seq.k, seq.frame_rate, codes)
            .map_err(|_| PatternError::BadSerialization("token grid reconstruction"))
    };

    if seq.kind.is_mixed() {
        Ok(InvertedGrids::Mixed(recover_track(0)?))
    } else {
        let vocal = recover_track(0)?;
        let acc = recover_track(1)?;
        Ok(InvertedGrids::Dual { vocal, acc })
    }
}

/// Outcome of inverting raw steps (typically generator output).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertOutcome {
    pub grids: InvertedGrids,
    pub truncated: bool,
}

/// Inverts a raw step stream, recovering every complete source frame.
///
/// A frame is complete once all codebooks of all tracks have emitted it;
/// a stream cut early (odd interleaving count, or a hard step budget) has
/// its incomplete trailing frames dropped and the outcome flagged as
/// truncated. Geometry violations in the surviving region (PAD where
/// content belongs or vice versa) are still hard errors.
pub fn invert_steps(
    kind: PatternKind,
    n_q: usize,
    k: u32,
    frame_rate: u32,
    mut steps: Vec<Vec<u32>>,
) -> Result<InvertOutcome, PatternError> {
    let specials = SpecialTokens::for_codebook_size(k);
    let group_width = kind.groups_per_step() * n_q;
    for s in &steps {
        if s.len() != group_width {
            return Err(PatternError::BadSerialization("step width mismatch"));
        }
    }
    let mut truncated = false;
    if kind.is_interleaving() && steps.len() % 2 == 1 {
        steps.pop();
        truncated = true;
    }

    let tracks = kind.tracks();
    // Columns each track actually has in the stream.
    let track_cols = |track_idx: usize| -> usize {
        let spec = &tracks[track_idx];
        if kind.is_interleaving() {
            steps.len() / 2
        } else {
            steps.len().saturating_sub(spec.offset)
        }
    };
    let mut t_rec = usize::MAX;
    for idx in 0..tracks.len() {
        let cols = track_cols(idx);
        if cols < n_q - 1 {
            return Err(PatternError::BadLength {
                steps: steps.len(),
                kind,
            });
        }
        t_rec = t_rec.min(cols - (n_q - 1));
    }

    let mut grids: Vec<TokenGrid> = Vec::with_capacity(tracks.len());
    for track_idx in 0..tracks.len() {
        let mut codes = vec![0u32; n_q * t_rec];
        for (s, step) in steps.iter().enumerate() {
            for (slot_i, (idx, col)) in kind.step_slots(s).into_iter().enumerate() {
                if idx != track_idx {
                    continue;
                }
                let group_offset = if kind.is_parallel() { slot_i * n_q } else { 0 };
                for q in 0..n_q {
                    let code = step[group_offset + q];
                    match col {
                        None => {
                            // Whole group vacated by the track shift.
                            if code != specials.pad() {
                                return Err(PatternError::Malformed {
                                    what: "expected PAD in vacated group",
                                    step: s,
                                    row: q,
                                });
                            }
                        }
                        Some(c) if c < q => {
                            if code != specials.pad() {
                                return Err(PatternError::Malformed {
                                    what: "expected PAD in delay corner",
                                    step: s,
                                    row: q,
                                });
                            }
                        }
                        Some(c) if c - q < t_rec => {
                            if !specials.is_content(code) {
                                return Err(PatternError::Malformed {
                                    what: "special token in content cell",
                                    step: s,
                                    row: q,
                                });
                            }
                            codes[q * t_rec + (c - q)] = code;
                        }
                        Some(_) => {
                            // Tail wedge: belongs to frames that never
                            // completed. Content here is dropped.
                            if code != specials.pad() {
                                truncated = true;
                            }
                        }
                    }
                }
            }
        }
        grids.push(
            TokenGrid::new(n_q, t_rec, k, frame_rate, codes)
                .map_err(|_| PatternError::BadSerialization("token grid reconstruction"))?,
        );
    }

    let grids = if kind.is_mixed() {
        InvertedGrids::Mixed(grids.pop().unwrap())
    } else {
        let acc = grids.pop().unwrap();
        let vocal = grids.pop().unwrap();
        InvertedGrids::Dual { vocal, acc }
    };
    Ok(InvertOutcome { grids, truncated })
}
