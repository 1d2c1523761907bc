use super::*;
use crate::numerics::{Bindings, ParamSet, Tape};

fn small_config() -> CondConfig {
    CondConfig {
        lyric_width: 8,
        lyric_layers: 1,
        lyric_heads: 2,
        text_width: 8,
        text_layers: 1,
        text_heads: 2,
        voice_width: 4,
        voice_layers: 2,
        voice_frame_rate: 50,
        voice_secs: 3.0,
    }
}

fn encoder() -> (ConditionEncoder, ParamSet) {
    let enc = ConditionEncoder::new(small_config(), 16, 12, 10).unwrap();
    let mut params = ParamSet::new();
    enc.init(&mut params, 42);
    (enc, params)
}

fn three_second_tone() -> Waveform {
    let n = 48_000;
    let samples = (0..n)
        .map(|i| 0.3 * libm::sinf(2.0 * core::f32::consts::PI * 220.0 * i as f32 / 16_000.0))
        .collect();
    Waveform::new(samples, 16_000)
}

#[test]
fn text_vocab_maps_unknown_words_to_unk() {
    let vocab = TextVocab::build(&["calm piano melody", "fast drum beat"]);
    let ids = vocab.encode("calm banjo beat").unwrap();
    assert_eq!(ids.len(), 3);
    assert_eq!(ids[1], UNK_ID);
    assert_ne!(ids[0], UNK_ID);
    assert_ne!(ids[2], UNK_ID);
}

#[test]
fn empty_caption_is_a_config_error() {
    let vocab = TextVocab::build(&["some caption"]);
    assert!(matches!(vocab.encode("  "), Err(CondError::Config(_))));
}

#[test]
fn text_vocab_roundtrips_through_text() {
    let vocab = TextVocab::build(&["slow sad song", "bright happy tune"]);
    let back = TextVocab::from_text(&vocab.to_text()).unwrap();
    assert_eq!(vocab, back);
}

#[test]
fn voice_features_give_150_rows_for_3_seconds_at_50hz() {
    let cfg = small_config();
    let f = voice_features(&three_second_tone(), &cfg).unwrap();
    assert_eq!(f.frames, 150);
    assert_eq!(f.width, 4);
    assert_eq!(f.layers, 2);
}

#[test]
fn wrong_reference_duration_is_an_input_error() {
    let cfg = small_config();
    let short = Waveform::new(alloc::vec![0.1; 16_000], 16_000);
    assert!(matches!(
        voice_features(&short, &cfg),
        Err(CondError::InputError(_))
    ));
}

#[test]
fn reference_duration_tolerates_one_frame() {
    let cfg = small_config();
    let w = Waveform::new(alloc::vec![0.1; 48_000 - 300], 16_000);
    let f = voice_features(&w, &cfg).unwrap();
    assert_eq!(f.frames, 149);
}

#[test]
fn silent_reference_yields_identical_bias_only_rows() {
    let (enc, params) = encoder();
    let silent = Waveform::new(alloc::vec![0.0; 48_000], 16_000);
    let feats = voice_features(&silent, &enc.config).unwrap();
    assert!(feats.stacked.iter().all(|&v| v == 0.0));

    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let v = enc.embed_voice(&mut tape, &mut binds, &params, &feats).unwrap();
    let rows = tape.shape(v)[0];
    let vals = tape.value(v);
    let first = &vals[0..4];
    for r in 1..rows {
        assert_eq!(&vals[r * 4..(r + 1) * 4], first);
    }
}

#[test]
fn voice_embedding_is_deterministic() {
    let (enc, params) = encoder();
    let feats = voice_features(&three_second_tone(), &enc.config).unwrap();
    let feats2 = voice_features(&three_second_tone(), &enc.config).unwrap();
    assert_eq!(feats, feats2);
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let a = enc.embed_voice(&mut tape, &mut binds, &params, &feats).unwrap();
    let b = enc.embed_voice(&mut tape, &mut binds, &params, &feats2).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn empty_lyrics_give_zero_rows() {
    let (enc, params) = encoder();
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let e = enc.encode_lyrics(&mut tape, &mut binds, &params, &[]).unwrap();
    assert_eq!(tape.shape(e), &[0, 8]);
}

#[test]
fn lyric_encoding_has_one_row_per_token_and_is_position_sensitive() {
    let (enc, params) = encoder();
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let a = enc
        .encode_lyrics(&mut tape, &mut binds, &params, &[1, 2, 3, 4])
        .unwrap();
    assert_eq!(tape.shape(a), &[4, 8]);
    let b = enc
        .encode_lyrics(&mut tape, &mut binds, &params, &[1, 3, 2, 4])
        .unwrap();
    assert_ne!(tape.value(a), tape.value(b));
}

#[test]
fn unknown_lyric_id_is_rejected() {
    let (enc, params) = encoder();
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    assert!(matches!(
        enc.encode_lyrics(&mut tape, &mut binds, &params, &[99]),
        Err(CondError::UnknownId { .. })
    ));
}

#[test]
fn captions_differing_in_word_order_embed_differently() {
    let (enc, params) = encoder();
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let a = enc.embed_text(&mut tape, &mut binds, &params, &[2, 5, 7]).unwrap();
    let b = enc.embed_text(&mut tape, &mut binds, &params, &[7, 5, 2]).unwrap();
    assert_eq!(tape.shape(a), &[3, 8]);
    assert_ne!(tape.value(a), tape.value(b));
}

#[test]
fn one_word_caption_has_one_row() {
    let (enc, params) = encoder();
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let t = enc.embed_text(&mut tape, &mut binds, &params, &[3]).unwrap();
    assert_eq!(tape.shape(t)[0], 1);
}

#[test]
fn assembled_rows_are_additive_in_segment_lengths() {
    let (enc, params) = encoder();
    let inputs = ConditionInputs {
        lyric_ids: alloc::vec![1, 2, 3, 4, 5],
        text_ids: alloc::vec![2, 4],
        voice: Some(voice_features(&three_second_tone(), &enc.config).unwrap()),
    };
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let bundle = enc.assemble(&mut tape, &mut binds, &params, &inputs).unwrap();
    assert_eq!(bundle.voice_rows, 150);
    assert_eq!(bundle.text_rows, 2);
    assert_eq!(bundle.lyric_rows, 5);
    assert_eq!(tape.shape(bundle.e_cond), &[157, 16]);
}

#[test]
fn absent_voice_uses_the_learned_null_row_first() {
    let (enc, params) = encoder();
    let inputs = ConditionInputs {
        lyric_ids: alloc::vec![1, 2],
        text_ids: alloc::vec![3],
        voice: None,
    };
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let bundle = enc.assemble(&mut tape, &mut binds, &params, &inputs).unwrap();
    assert_eq!(bundle.voice_rows, 1);
    assert_eq!(tape.shape(bundle.e_cond), &[1 + 1 + 2, 16]);
    let null = params.get("cond.null_voice").unwrap();
    assert_eq!(&tape.value(bundle.e_cond)[0..16], null.data());
    assert!(bundle.e_voice.is_none());
}

#[test]
fn assembly_is_deterministic_for_fixed_weights() {
    let (enc, params) = encoder();
    let inputs = ConditionInputs {
        lyric_ids: alloc::vec![5, 6, 7],
        text_ids: alloc::vec![1, 2, 3],
        voice: None,
    };
    let mut t1 = Tape::new();
    let mut b1 = Bindings::new();
    let r1 = enc.assemble(&mut t1, &mut b1, &params, &inputs).unwrap();
    let mut t2 = Tape::new();
    let mut b2 = Bindings::new();
    let r2 = enc.assemble(&mut t2, &mut b2, &params, &inputs).unwrap();
    assert_eq!(t1.value(r1.e_cond), t2.value(r2.e_cond));
}
