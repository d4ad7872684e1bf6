use super::*;
use crate::attention::AttentionBase;
use crate::autodiff::grad_check;

fn all_kinds() -> Vec<AttentionKind> {
    let mut out: Vec<AttentionKind> = AttentionBase::ALL.into_iter().map(AttentionKind::plain).collect();
    for b in AttentionBase::ALL.into_iter().filter(|b| b.is_location()) {
        out.push(AttentionKind::new(b, true, false).unwrap());
        out.push(AttentionKind::new(b, true, true).unwrap());
    }
    out
}

fn micro(kind: AttentionKind, seed: u64) -> Model<f64> {
    let config = ModelConfig {
        d: 8,
        d_e: 4,
        ..ModelConfig::new(6, kind)
    };
    Model::new(config, &mut RngStream::new(seed)).unwrap()
}

fn fill(model: &mut Model<f64>, pred: impl Fn(&str) -> bool, value: f64) {
    for p in model.store.iter_mut() {
        if pred(p.name()) {
            p.value_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}

fn random_tokens(rng: &mut RngStream, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.range(3, vocab - 1)).collect()
}

fn values(g: &Graph<f64>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

#[test]
fn zero_gru_weights_give_zero_states() {
    let mut m = micro(AttentionKind::plain(AttentionBase::Content), 1);
    fill(&mut m, |n| n.starts_with("encoder."), 0.0);
    let mut g = Graph::new();
    let enc = m.encode(&mut g, &[vec![3, 4, 5, 3]], false, &mut RngStream::new(0)).unwrap();
    assert!(values(&g, enc.states).iter().all(|&x| x == 0.0));
    assert!(values(&g, enc.cls).iter().all(|&x| x == 0.0));
}

#[test]
fn encodings_concatenate_direction_states() {
    let m = micro(AttentionKind::plain(AttentionBase::Content), 2);
    let src = vec![3, 5, 4];
    let mut g = Graph::new();
    let enc = m.encode(&mut g, std::slice::from_ref(&src), false, &mut RngStream::new(0)).unwrap();
    let e = values(&g, enc.states);
    let layer = &m.params.encoder[0];
    let h = m.config.d / 2;
    let run = |g: &mut Graph<f64>, gru: &Gru, order: Vec<usize>| {
        let mut state = g.constant(Tensor::zeros(&[1, h]));
        let mut out = vec![Vec::new(); src.len()];
        for t in order {
            let x = m.embed(g, vec![src[t]]).unwrap();
            state = gru.step(g, &m.store, x, state).unwrap();
            out[t] = values(g, state);
        }
        out
    };
    let fwd = run(&mut g, &layer.forward, vec![0, 1, 2]);
    let bwd = run(&mut g, &layer.backward, vec![2, 1, 0]);
    for i in 0..3 {
        let row = &e[i * 2 * h..(i + 1) * 2 * h];
        let want: Vec<f64> = fwd[i].iter().chain(&bwd[i]).copied().collect();
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }
    let cls = values(&g, enc.cls);
    let want: Vec<f64> = fwd[2].iter().chain(&bwd[0]).copied().collect();
    for (a, b) in cls.iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn single_token_source() {
    let m = micro(AttentionKind::plain(AttentionBase::Onestep), 3);
    let mut g = Graph::new();
    let enc = m.encode(&mut g, &[vec![4]], false, &mut RngStream::new(0)).unwrap();
    assert_eq!(g.shape(enc.states), &[1, 1, 8]);
    assert_eq!(values(&g, enc.states), values(&g, enc.cls));
}

#[test]
fn zero_dropout_matches_evaluation() {
    let mut m = micro(AttentionKind::plain(AttentionBase::Relative), 4);
    m.config.dropout = 0.0;
    let src = [vec![3, 4, 5], vec![5, 3]];
    let mut g = Graph::new();
    let a = m.encode(&mut g, &src, true, &mut RngStream::new(9)).unwrap();
    let b = m.encode(&mut g, &src, false, &mut RngStream::new(9)).unwrap();
    assert_eq!(values(&g, a.encodings), values(&g, b.encodings));
}

#[test]
fn dropout_spares_cls() {
    let m = micro(AttentionKind::plain(AttentionBase::Relative), 4);
    let src = [vec![3, 4, 5, 4, 3, 5]];
    let mut g = Graph::new();
    let a = m.encode(&mut g, &src, true, &mut RngStream::new(9)).unwrap();
    let b = m.encode(&mut g, &src, false, &mut RngStream::new(9)).unwrap();
    assert_ne!(values(&g, a.encodings), values(&g, b.encodings));
    assert_eq!(values(&g, a.cls), values(&g, b.cls));
}

#[test]
fn batched_encoding_matches_single_rows() {
    let m = micro(AttentionKind::plain(AttentionBase::BiRelative), 5);
    let src = [vec![3, 4, 5, 4], vec![5, 3], vec![4]];
    let mut g = Graph::new();
    let batch = m.encode(&mut g, &src, false, &mut RngStream::new(0)).unwrap();
    let e = values(&g, batch.states);
    let cls = values(&g, batch.cls);
    for (row, s) in src.iter().enumerate() {
        let one = m.encode(&mut g, std::slice::from_ref(s), false, &mut RngStream::new(0)).unwrap();
        let e1 = values(&g, one.states);
        let c1 = values(&g, one.cls);
        let width = 4 * 8;
        for (a, b) in e[row * width..row * width + s.len() * 8].iter().zip(&e1) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in cls[row * 8..(row + 1) * 8].iter().zip(&c1) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn out_of_vocabulary_source_is_rejected() {
    let m = micro(AttentionKind::plain(AttentionBase::Content), 6);
    let mut g = Graph::new();
    let err = m.encode(&mut g, &[vec![3, 6]], false, &mut RngStream::new(0)).unwrap_err();
    assert!(matches!(err, Error::Vocabulary(_)));
    assert!(m.encode(&mut g, &[vec![]], false, &mut RngStream::new(0)).is_err());
}

#[test]
fn step_logits_cover_the_vocabulary() {
    let mut m = micro(AttentionKind::new(AttentionBase::Monotonic, true, false).unwrap(), 7);
    let mut g = Graph::new();
    let enc = m.encode(&mut g, &[vec![3, 4], vec![5]], false, &mut RngStream::new(0)).unwrap();
    let st = m.initial_state(&mut g, &enc);
    let a = m.decode_step(&mut g, &enc, &[GO, GO], &st).unwrap();
    let b = m.decode_step(&mut g, &enc, &[GO, GO], &st).unwrap();
    assert_eq!(g.shape(a.logits), &[2, 6]);
    assert_eq!(values(&g, a.logits), values(&g, b.logits));

    fill(&mut m, |n| n.starts_with("project."), 0.0);
    let mut g = Graph::new();
    let enc = m.encode(&mut g, &[vec![3, 4]], false, &mut RngStream::new(0)).unwrap();
    let st = m.initial_state(&mut g, &enc);
    let out = m.decode_step(&mut g, &enc, &[GO], &st).unwrap();
    assert!(values(&g, out.logits).iter().all(|&x| x == 0.0));
}

#[test]
fn uninitialized_state_is_rejected() {
    let m = micro(AttentionKind::plain(AttentionBase::Content), 7);
    let mut g = Graph::new();
    let enc = m.encode(&mut g, &[vec![3, 4]], false, &mut RngStream::new(0)).unwrap();
    let mut st = m.initial_state(&mut g, &enc);
    st.attention.t = 0;
    assert!(matches!(m.decode_step(&mut g, &enc, &[GO], &st), Err(Error::State(_))));
}

#[test]
fn uniform_logits_give_log_vocabulary_loss() {
    let config = ModelConfig {
        d: 8,
        d_e: 4,
        ..ModelConfig::new(16, AttentionKind::plain(AttentionBase::Content))
    };
    let mut m = Model::<f64>::new(config, &mut RngStream::new(8)).unwrap();
    fill(&mut m, |n| n.starts_with("project."), 0.0);
    let mut g = Graph::new();
    let loss = m
        .loss_forward(&mut g, &[vec![3, 4, 5]], &[vec![6, 7, 8, 9]], true, &mut RngStream::new(1))
        .unwrap();
    assert!((g.value(loss).data()[0] - 16f64.ln()).abs() < 1e-12);
}

#[test]
fn batch_loss_is_a_token_weighted_mean() {
    let m = micro(AttentionKind::new(AttentionBase::Onestep, true, true).unwrap(), 9);
    let src = [vec![3, 4, 5], vec![5]];
    let tgt = [vec![4], vec![3, 3, 5, 4, 5]];
    let mut g = Graph::new();
    let both = m.loss_forward(&mut g, &src, &tgt, false, &mut RngStream::new(0)).unwrap();
    let both = g.value(both).data()[0];
    let mut weighted = 0.0;
    for (s, t) in src.iter().zip(&tgt) {
        let l = m
            .loss_forward(&mut g, std::slice::from_ref(s), std::slice::from_ref(t), false, &mut RngStream::new(0))
            .unwrap();
        weighted += g.value(l).data()[0] * (t.len() + 1) as f64;
    }
    let n = (tgt[0].len() + tgt[1].len() + 2) as f64;
    assert!((both - weighted / n).abs() < 1e-12);
}

// Loss scaled down so rounding noise of the central difference stays under
// the 1e-8 floor of the relative error.
const LOSS_SCALE: f64 = 1e-4;

#[test]
fn micro_model_gradients_match_finite_differences() {
    for (ki, kind) in all_kinds().into_iter().enumerate() {
        let m = micro(kind, 100 + ki as u64);
        let mut rng = RngStream::new(200 + ki as u64);
        let src: Vec<Vec<usize>> = (0..2).map(|_| {
            let n = rng.range(1, 4);
            random_tokens(&mut rng, n, 6)
        }).collect();
        let tgt: Vec<Vec<usize>> = (0..2).map(|_| {
            let n = rng.range(1, 4);
            random_tokens(&mut rng, n, 6)
        }).collect();
        let report = grad_check(
            |g, p| {
                let model = Model {
                    config: m.config.clone(),
                    params: m.params.clone(),
                    store: p.clone(),
                };
                let loss = model.loss_forward(g, &src, &tgt, true, &mut RngStream::new(7))?;
                g.scale(loss, LOSS_SCALE)
            },
            &m.store,
            1e-5,
            1e-4,
        )
        .unwrap();
        let worst = report.worst().unwrap();
        assert!(report.passed(), "{kind}: {} rel {:e}", worst.name, worst.max_rel_error);
    }
}

fn identity_readout(kind: AttentionKind, favored: usize) -> Model<f64> {
    let config = ModelConfig {
        d: 8,
        d_e: 6,
        ..ModelConfig::new(6, kind)
    };
    let mut m = Model::<f64>::new(config, &mut RngStream::new(10)).unwrap();
    let e = m.params.embedding;
    let data = m.store.get_mut(e).value_mut();
    for (i, v) in data.iter_mut().enumerate() {
        *v = if i / 6 == i % 6 { 1.0 } else { 0.0 };
    }
    fill(&mut m, |n| n == "project.weight", 0.0);
    let b = m.params.project.bias;
    m.store.get_mut(b).value_mut()[favored] = 1.0;
    m
}

#[test]
fn immediate_end_marker_gives_empty_output() {
    let m = identity_readout(AttentionKind::plain(AttentionBase::Content), EOS);
    assert_eq!(m.greedy_decode(&[vec![3, 4, 5]]).unwrap(), vec![Vec::<usize>::new()]);
}

#[test]
fn decoding_stops_at_the_cap() {
    let m = identity_readout(AttentionKind::plain(AttentionBase::Location), 4);
    let out = m.greedy_decode(&[vec![3, 4, 5], vec![3]]).unwrap();
    assert_eq!(out[0], vec![4; 2 * 3 + 10]);
    assert_eq!(out[1], vec![4; 2 + 10]);
}

#[test]
fn ties_go_to_the_lowest_index() {
    let mut m = identity_readout(AttentionKind::plain(AttentionBase::Content), 0);
    fill(&mut m, |n| n == "project.bias", 0.0);
    let out = m.greedy_decode(&[vec![3]]).unwrap();
    assert_eq!(out[0], vec![0; 12]);
}

#[test]
fn greedy_decoding_is_deterministic_and_batch_independent() {
    for kind in all_kinds() {
        let m = micro(kind, 11);
        let src = vec![vec![3, 4, 5, 4], vec![5, 3], vec![4]];
        let a = m.decode(&src, true).unwrap();
        let b = m.decode(&src, true).unwrap();
        assert_eq!(a.outputs, b.outputs);
        for (row, s) in src.iter().enumerate() {
            let one = m.decode(std::slice::from_ref(s), true).unwrap();
            assert_eq!(one.outputs[0], a.outputs[row], "{kind}");
            assert_eq!(one.traces[0].len(), a.traces[row].len());
            assert!(a.traces[row].iter().all(|r| r.weights.len() == s.len()));
        }
    }
}

#[test]
fn single_key_content_decoding_ignores_key_map() {
    let m = micro(AttentionKind::plain(AttentionBase::Content), 12);
    let mut other = m.clone();
    let mut rng = RngStream::new(3);
    for name in ["attention.f_k.weight", "attention.f_k.bias"] {
        let id = other.store.id(name).unwrap();
        other.store.get_mut(id).value_mut().iter_mut().for_each(|v| *v = rng.normal());
    }
    let logits = |model: &Model<f64>| {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &[vec![4]], false, &mut RngStream::new(0)).unwrap();
        let st = model.initial_state(&mut g, &enc);
        let out = model.decode_step(&mut g, &enc, &[GO], &st).unwrap();
        values(&g, out.logits)
    };
    assert_eq!(logits(&m), logits(&other));
    assert_eq!(m.greedy_decode(&[vec![4]]).unwrap(), other.greedy_decode(&[vec![4]]).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let kind = AttentionKind::new(AttentionBase::Monotonic, true, true).unwrap();
    let m = Model::<f32>::new(ModelConfig::new(13, kind), &mut RngStream::new(5)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.config, m.config);
    for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name(), b.name());
        let bits = |p: &crate::autodiff::Parameter<f32>| p.value().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = Model::<f32>::new(ModelConfig::new(8, AttentionKind::plain(AttentionBase::Content)), &mut RngStream::new(5)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    assert!(matches!(read_checkpoint(&buf[..buf.len() - 4]), Err(Error::Checkpoint(_))));
    let nul = buf.iter().position(|&b| b == 0).unwrap();
    let header = String::from_utf8(buf[..nul].to_vec()).unwrap();
    let bumped = header.replace("\"vocab_size\":8", "\"vocab_size\":9");
    let mut bad = bumped.into_bytes();
    bad.extend_from_slice(&buf[nul..]);
    assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
    assert!(read_checkpoint(&b"{}"[..]).is_err());
}
