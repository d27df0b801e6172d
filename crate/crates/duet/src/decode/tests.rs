use super::*;
use crate::autodiff::Array;
use crate::model::{hat_joint, init_params, label_col, Pass};
use crate::text::UnitKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn test_cfg() -> ModelConfig {
    ModelConfig { out_vocab: 12, in_vocab: 10, ..ModelConfig::default() }
}

fn test_vocab() -> Vocab {
    // ids 4..=11: _, a, b, c, d, e, f, g
    Vocab::new(
        UnitKind::WordPiece,
        ["_", "a", "b", "c", "d", "e", "f", "g"].iter().map(|s| s.to_string()).collect(),
    )
    .unwrap()
}

fn rand_features(t: usize, dim: usize, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::new(vec![t, dim], (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Independent greedy decoder: per frame, repeatedly take the argmax of
/// blank and all labels, advancing on blank or at the symbol cap.
fn greedy_labels(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pass: DecoderPass,
    enc: &EncoderStates,
    max_symbols: usize,
) -> Vec<u32> {
    let mut labels: Vec<u32> = Vec::new();
    let d = cfg.model_dim;
    for t in 0..enc.len {
        let mut emitted = 0;
        loop {
            let frame_vals = g.value(enc.node).data()[t * d..(t + 1) * d].to_vec();
            let frame = g.constant(Array::row(frame_vals));
            let pred = crate::model::prediction_forward(g, store, cfg, pass, &labels).unwrap();
            let out = hat_joint(g, store, pass, frame, pred).unwrap();
            let blank = g.value(out.blank_lp).item();
            let lps = g.value(out.label_lp).data().to_vec();
            let (mut best_col, mut best_lp) = (None, blank);
            for (col, &lp) in lps.iter().enumerate() {
                let id = col_label(col);
                if id == MASK_ID || id == PAD_ID {
                    continue;
                }
                if lp > best_lp {
                    best_lp = lp;
                    best_col = Some(col);
                }
            }
            match best_col {
                None => break,
                Some(col) => {
                    let id = col_label(col);
                    labels.push(id);
                    emitted += 1;
                    if id == EOS_ID {
                        return labels;
                    }
                    if emitted >= max_symbols {
                        break;
                    }
                }
            }
        }
    }
    labels
}

#[test]
fn beam_one_equals_greedy() {
    let cfg = test_cfg();
    let vocab = test_vocab();
    for seed in 0..6u64 {
        let store = init_params(&cfg, 100 + seed).unwrap();
        let features = rand_features(16, cfg.feature_dim, seed);
        let mut g = Graph::new();
        let (causal, _) =
            encoder_forward(&mut g, &store, &cfg, EncoderInput::Speech(&features)).unwrap();
        let beam = BeamConfig { beam_size: 1, max_symbols_per_frame: 4 };
        let trace =
            beam_search(&mut g, &store, &cfg, DecoderPass::First, &causal, &beam, &vocab).unwrap();
        let greedy = greedy_labels(&mut g, &store, &cfg, DecoderPass::First, &causal, 4);
        assert_eq!(trace.nbest[0].labels, greedy, "seed {seed}");
    }
}

/// Parameters rigged so frame t demands one specific label once, then blank.
fn rigged_store(cfg: &ModelConfig) -> ParamStore {
    let k = cfg.label_count();
    let mut store = init_params(cfg, 0).unwrap();
    let zero = |store: &mut ParamStore, name: &str| {
        for v in store.get_mut(name).unwrap().data_mut() {
            *v = 0.0;
        }
    };
    let p = "dec1";
    // prediction state ~ one-hot of the previous label (pad rows stay zero)
    zero(&mut store, &format!("{p}.pred.embed"));
    {
        let emb = store.get_mut(&format!("{p}.pred.embed")).unwrap();
        let pe = cfg.pred_embed_dim;
        for id in 0..cfg.out_vocab {
            if id as u32 != PAD_ID {
                emb.data_mut()[id * pe + id] = 1.0;
            }
        }
    }
    zero(&mut store, &format!("{p}.pred.w"));
    {
        let w = store.get_mut(&format!("{p}.pred.w")).unwrap();
        let (rows, cols) = (2 * cfg.pred_embed_dim, cfg.pred_dim);
        // use only the prev1 half, scaled into tanh saturation
        for i in 0..cfg.pred_embed_dim.min(cols) {
            w.data_mut()[(cfg.pred_embed_dim + i) * cols + i] = 5.0;
        }
        let _ = rows;
    }
    zero(&mut store, &format!("{p}.pred.b"));
    // joint: enc one-hot drives the label, pred one-hot inhibits a repeat
    zero(&mut store, &format!("{p}.joint.enc_w"));
    for i in 0..k.min(cfg.model_dim).min(cfg.joint_dim) {
        store.get_mut(&format!("{p}.joint.enc_w")).unwrap().data_mut()[i * cfg.joint_dim + i] =
            1.0;
    }
    zero(&mut store, &format!("{p}.joint.pred_w"));
    {
        let w = store.get_mut(&format!("{p}.joint.pred_w")).unwrap();
        for id in 1..cfg.out_vocab {
            let col = id - 1;
            if col < cfg.joint_dim && id < cfg.pred_dim {
                w.data_mut()[id * cfg.joint_dim + col] = -24.0;
            }
        }
    }
    zero(&mut store, &format!("{p}.joint.b"));
    zero(&mut store, &format!("{p}.joint.label_w"));
    for i in 0..k.min(cfg.joint_dim) {
        store.get_mut(&format!("{p}.joint.label_w")).unwrap().data_mut()[i * k + i] = 10.0;
    }
    zero(&mut store, &format!("{p}.joint.label_b"));
    // blank logit = -8 * sum(hidden) - 4: low before the emission, high after
    {
        let w = store.get_mut(&format!("{p}.joint.blank_w")).unwrap();
        for v in w.data_mut() {
            *v = -8.0;
        }
    }
    store.get_mut(&format!("{p}.joint.blank_b")).unwrap().data_mut()[0] = -4.0;
    store
}

#[test]
fn planted_sequence_is_decoded_exactly() {
    let cfg = ModelConfig {
        model_dim: 11,
        joint_dim: 11,
        pred_dim: 12,
        pred_embed_dim: 12,
        out_vocab: 12,
        in_vocab: 10,
        ..ModelConfig::default()
    };
    let vocab = test_vocab();
    let store = rigged_store(&cfg);
    let planted: Vec<u32> = vec![5, 7, 9, 4, 8, EOS_ID];

    let mut g = Graph::new();
    let mut rows = Vec::new();
    for &label in &planted {
        let mut row = vec![0.0; cfg.model_dim];
        row[label_col(label)] = 12.0;
        rows.extend(row);
    }
    let enc_node = g.constant(Array::new(vec![planted.len(), cfg.model_dim], rows));
    let enc = EncoderStates { node: enc_node, len: planted.len(), pass: Pass::Causal };
    let beam = BeamConfig::default();
    let trace =
        beam_search(&mut g, &store, &cfg, DecoderPass::First, &enc, &beam, &vocab).unwrap();
    assert_eq!(trace.nbest[0].labels, planted);
    assert_eq!(trace.eos_frame, Some(planted.len() - 1));
}

#[test]
fn nbest_scores_are_sorted_and_nonpositive() {
    let cfg = test_cfg();
    let vocab = test_vocab();
    let store = init_params(&cfg, 21).unwrap();
    let features = rand_features(14, cfg.feature_dim, 22);
    let (first, second) =
        streaming_decode(&store, &cfg, &features, &BeamConfig::default(), &vocab).unwrap();
    for trace in [&first, &second] {
        assert!(!trace.nbest.is_empty());
        for pair in trace.nbest.windows(2) {
            assert!(pair[0].log_prob >= pair[1].log_prob);
        }
        for h in &trace.nbest {
            assert!(h.log_prob <= 0.0);
            if h.labels.contains(&EOS_ID) {
                assert!(h.ended(), "EOS must be final");
            }
        }
    }
}

#[test]
fn larger_beams_never_lose_the_top_hypothesis() {
    let cfg = test_cfg();
    let vocab = test_vocab();
    for seed in 0..8u64 {
        let store = init_params(&cfg, 200 + seed).unwrap();
        let features = rand_features(12, cfg.feature_dim, 300 + seed);
        let mut g = Graph::new();
        let (causal, _) =
            encoder_forward(&mut g, &store, &cfg, EncoderInput::Speech(&features)).unwrap();
        let mut prev_best = f64::NEG_INFINITY;
        for beam_size in [1usize, 2, 4, 8] {
            let beam = BeamConfig { beam_size, max_symbols_per_frame: 4 };
            let trace =
                beam_search(&mut g, &store, &cfg, DecoderPass::First, &causal, &beam, &vocab)
                    .unwrap();
            let best = trace.nbest[0].log_prob;
            assert!(
                best >= prev_best - 1e-12,
                "seed {seed}: beam {beam_size} best {best} < {prev_best}"
            );
            prev_best = best;
        }
    }
}

#[test]
fn decoding_is_deterministic() {
    let cfg = test_cfg();
    let vocab = test_vocab();
    let store = init_params(&cfg, 23).unwrap();
    let features = rand_features(18, cfg.feature_dim, 24);
    let beam = BeamConfig::default();
    let (a1, a2) = streaming_decode(&store, &cfg, &features, &beam, &vocab).unwrap();
    let (b1, b2) = streaming_decode(&store, &cfg, &features, &beam, &vocab).unwrap();
    assert_eq!(a1.to_lines(), b1.to_lines());
    assert_eq!(a2.to_lines(), b2.to_lines());
}

#[test]
fn first_pass_partials_depend_only_on_the_prefix() {
    let cfg = test_cfg();
    let vocab = test_vocab();
    let store = init_params(&cfg, 25).unwrap();
    let features = rand_features(20, cfg.feature_dim, 26);
    let beam = BeamConfig::default();
    let (full, _) = streaming_decode(&store, &cfg, &features, &beam, &vocab).unwrap();

    let prefix_raw = 12usize;
    let prefix = Array::new(
        vec![prefix_raw, cfg.feature_dim],
        features.data()[..prefix_raw * cfg.feature_dim].to_vec(),
    );
    let (pre, _) = streaming_decode(&store, &cfg, &prefix, &beam, &vocab).unwrap();
    let prefix_frames = prefix_raw / cfg.subsample;
    let full_cut: Vec<_> =
        full.partials.iter().filter(|p| p.frame < prefix_frames).collect();
    let pre_cut: Vec<_> = pre.partials.iter().filter(|p| p.frame < prefix_frames).collect();
    assert_eq!(full_cut.len(), pre_cut.len());
    for (a, b) in full_cut.iter().zip(&pre_cut) {
        assert_eq!((a.frame, &a.text), (b.frame, &b.text));
        assert_eq!(a.wall_ms, b.wall_ms);
    }
}

#[test]
fn second_pass_wall_offsets_add_the_lookahead() {
    let cfg = test_cfg();
    let vocab = test_vocab();
    let store = init_params(&cfg, 27).unwrap();
    let features = rand_features(16, cfg.feature_dim, 28);
    let (first, second) =
        streaming_decode(&store, &cfg, &features, &BeamConfig::default(), &vocab).unwrap();
    assert_eq!(first.lookahead_ms, 0.0);
    assert_eq!(second.lookahead_ms, cfg.lookahead_ms());
    for p in &first.partials {
        assert_eq!(p.wall_ms, (p.frame + 1) as f64 * cfg.frame_ms);
    }
    for p in &second.partials {
        assert_eq!(p.wall_ms, (p.frame + 1) as f64 * cfg.frame_ms + cfg.lookahead_ms());
    }
}

#[test]
fn oracle_wer_fixtures() {
    let mk = |text: &str, lp: f64| Hypothesis {
        labels: vec![],
        log_prob: lp,
        text: text.to_string(),
        path: vec![],
    };
    let reference = words("a b c");
    // reference present in the N-best
    let nbest = vec![mk("a x c", -1.0), mk("a b c", -2.0)];
    assert_eq!(oracle_wer(&nbest, &reference).unwrap(), 0);
    // singleton equals its own error count
    assert_eq!(oracle_wer(&[mk("a x c", -1.0)], &reference).unwrap(), 1);
    assert!(matches!(oracle_wer(&[], &reference), Err(DecodeError::EmptyNBest)));
}

fn words(s: &str) -> Vec<String> {
    crate::metrics::words(s)
}

#[test]
fn oracle_wer_matches_per_hypothesis_dp_min() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let alphabet = ["u", "v", "w"];
    for _ in 0..100 {
        let reference: Vec<String> =
            (0..rng.gen_range(1..5)).map(|_| alphabet[rng.gen_range(0..3)].to_string()).collect();
        let nbest: Vec<Hypothesis> = (0..rng.gen_range(1..6))
            .map(|i| {
                let text: Vec<&str> =
                    (0..rng.gen_range(0..5)).map(|_| alphabet[rng.gen_range(0..3)]).collect();
                Hypothesis {
                    labels: vec![],
                    log_prob: -(i as f64),
                    text: text.join(" "),
                    path: vec![],
                }
            })
            .collect();
        let want = nbest
            .iter()
            .map(|h| crate::metrics::edit_distance(&words(&h.text), &reference).total)
            .min()
            .unwrap();
        assert_eq!(oracle_wer(&nbest, &reference).unwrap(), want);
    }
}

#[test]
fn trace_dump_format_is_stable() {
    let trace = DecodeTrace {
        pass: DecoderPass::First,
        partials: vec![
            Partial { frame: 3, wall_ms: 120.0, text: "go".into() },
            Partial { frame: 7, wall_ms: 240.0, text: "go on".into() },
        ],
        nbest: vec![
            Hypothesis { labels: vec![], log_prob: -2.345678, text: "go on".into(), path: vec![] },
            Hypothesis { labels: vec![], log_prob: -4.0, text: "go".into(), path: vec![] },
        ],
        eos_frame: Some(9),
        forced_advances: 2,
        frame_ms: 30.0,
        lookahead_ms: 0.0,
    };
    assert_eq!(
        trace.to_lines(),
        "partial,first,3,120,go\n\
         partial,first,7,240,go on\n\
         eos,first,9,300\n\
         forced,first,2\n\
         nbest,first,1,-2.345678,go on\n\
         nbest,first,2,-4.000000,go\n"
    );
}
