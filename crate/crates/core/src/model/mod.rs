//! Bidirectional GRU encoder and GRU decoder around one cross-attention layer.
//!
//! Batches are padded at the end with [`PAD`]. Padded encoder steps carry the
//! previous hidden state through, so every row is encoded exactly as it would
//! be on its own, and the attention layer masks padded keys.

mod checkpoint;
mod gru;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionKind, AttentionMemory, AttentionOutput, AttentionParams, AttentionRecord, AttentionState};
use crate::autodiff::{Graph, Linear, ParamId, ParamStore, RngStream, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::taskgen::{EOS, GO, PAD};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use gru::Gru;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_e: usize,
    pub d: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub attention: AttentionKind,
    pub max_decode_factor: usize,
    pub decode_slack: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, attention: AttentionKind) -> Self {
        ModelConfig {
            vocab_size,
            d_e: 64,
            d: 128,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.5,
            attention,
            max_decode_factor: 2,
            decode_slack: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(Error::contract(format!("hidden size must be even and positive, got {}", self.d)));
        }
        if self.d_e == 0 || self.vocab_size <= EOS {
            return Err(Error::contract("embedding size and vocabulary must be nonempty"));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::contract("at least one encoder and one decoder layer"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Most tokens greedy decoding emits for a source of `len` tokens.
    pub fn decode_cap(&self, len: usize) -> usize {
        self.max_decode_factor * len + self.decode_slack
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub forward: Gru,
    pub backward: Gru,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    /// `[|V|, d_e]`, shared by input embedding and output scoring.
    pub embedding: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<Gru>,
    /// `d -> d_e` before scoring against the embeddings.
    pub project: Linear,
    pub attention: AttentionParams,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub lengths: Vec<usize>,
    /// `[B, S, d]`, `concat(forward_i, backward_i)` before dropout.
    pub states: Var,
    /// `[B, S, d]` after dropout; the attention layer reads these.
    pub encodings: Var,
    /// `[B, d]`, `concat(forward_final, backward_first)`.
    pub cls: Var,
    pub memory: AttentionMemory,
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    /// One `[B, d]` state per decoder layer.
    pub hidden: Vec<Var>,
    pub attention: AttentionState,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `[B, |V|]`.
    pub logits: Var,
    pub state: DecoderState,
    pub attention: AttentionOutput,
}

/// Greedy outputs, without the end marker, plus optional attention traces.
#[derive(Debug, Clone, Default)]
pub struct Decoded {
    pub outputs: Vec<Vec<usize>>,
    pub traces: Vec<Vec<AttentionRecord>>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (d, h) = (config.d, config.d / 2);
        let embedding = store.add_glorot("embedding", &[config.vocab_size, config.d_e], rng)?;
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let input = if l == 0 { config.d_e } else { d };
            encoder.push(EncoderLayer {
                forward: Gru::new(&mut store, &format!("encoder.{l}.forward"), input, h, rng)?,
                backward: Gru::new(&mut store, &format!("encoder.{l}.backward"), input, h, rng)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let input = if l == 0 { config.d_e + d } else { d };
            decoder.push(Gru::new(&mut store, &format!("decoder.{l}"), input, d, rng)?);
        }
        let project = Linear::new(&mut store, "project", d, config.d_e, rng)?;
        let attention = AttentionParams::new(&mut store, "attention", d, rng)?;
        Ok(Model {
            config,
            params: ModelParams {
                embedding,
                encoder,
                decoder,
                project,
                attention,
            },
            store,
        })
    }

    /// The same model at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            store: self.store.cast(),
        }
    }

    fn check_tokens(&self, seqs: &[Vec<usize>], what: &str) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::contract(format!("empty batch of {what}")));
        }
        for s in seqs {
            if s.is_empty() {
                return Err(Error::contract(format!("empty {what} sequence")));
            }
            if let Some(&bad) = s.iter().find(|&&x| x >= self.config.vocab_size) {
                return Err(Error::Vocabulary(format!("index {bad} outside a vocabulary of {}", self.config.vocab_size)));
            }
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<T>, tokens: Vec<usize>) -> Result<Var> {
        let table = g.param(&self.store, self.params.embedding);
        g.gather(table, tokens)
    }

    /// Runs the encoder over a padded batch and prepares the attention memory.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        sources: &[Vec<usize>],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<EncoderOutput> {
        self.check_tokens(sources, "source")?;
        let lengths: Vec<usize> = sources.iter().map(Vec::len).collect();
        let (b, s) = (sources.len(), *lengths.iter().max().expect("nonempty"));
        let flat: Vec<usize> = sources
            .iter()
            .flat_map(|src| src.iter().copied().chain(std::iter::repeat(PAD)).take(s))
            .collect();
        let emb = self.embed(g, flat)?;
        let mut x = g.reshape(emb, &[b, s, self.config.d_e])?;

        // `keep[t]` is `[B, 1]` with 1 on rows where step t is real, absent when all are.
        let mut keep = Vec::with_capacity(s);
        for t in 0..s {
            if lengths.iter().all(|&l| t < l) {
                keep.push(None);
            } else {
                let m: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
                let m = g.constant_f64(&[b, 1], &m)?;
                let rest = g.one_minus(m)?;
                keep.push(Some((m, rest)));
            }
        }

        let h = self.config.d / 2;
        let mut cls = None;
        for layer in &self.params.encoder {
            let run = |g: &mut Graph<T>, gru: &Gru, order: &mut dyn Iterator<Item = usize>| -> Result<(Vec<Var>, Var)> {
                let xw = gru.project_input(g, &self.store, x)?;
                let mut state = g.constant(Tensor::zeros(&[b, h]));
                let mut out = vec![state; s];
                for t in order {
                    let xt = g.slice(xw, 1, t, 1)?;
                    let xt = g.reshape(xt, &[b, 3 * h])?;
                    let next = gru.step_projected(g, &self.store, xt, state)?;
                    state = match keep[t] {
                        None => next,
                        Some((m, rest)) => {
                            let a = g.mul(m, next)?;
                            let c = g.mul(rest, state)?;
                            g.add(a, c)?
                        }
                    };
                    out[t] = state;
                }
                Ok((out, state))
            };
            let (fwd, fwd_final) = run(g, &layer.forward, &mut (0..s))?;
            let (bwd, bwd_first) = run(g, &layer.backward, &mut (0..s).rev())?;
            let mut steps = Vec::with_capacity(s);
            for t in 0..s {
                let both = g.concat(&[fwd[t], bwd[t]], 1)?;
                steps.push(g.reshape(both, &[b, 1, 2 * h])?);
            }
            x = g.concat(&steps, 1)?;
            cls = Some(g.concat(&[fwd_final, bwd_first], 1)?);
        }
        let states = x;
        let cls = cls.expect("at least one layer");
        let encodings = if training && self.config.dropout > 0.0 {
            g.dropout(states, self.config.dropout, true, rng)?
        } else {
            states
        };
        let memory = attention::prepare(
            g,
            &self.store,
            &self.params.attention,
            self.config.attention,
            encodings,
            cls,
            &lengths,
        )?;
        Ok(EncoderOutput {
            lengths,
            states,
            encodings,
            cls,
            memory,
        })
    }

    /// Every decoder layer starts from `e_cls`; attention from its initial state.
    pub fn initial_state(&self, g: &mut Graph<T>, enc: &EncoderOutput) -> DecoderState {
        DecoderState {
            hidden: vec![enc.cls; self.params.decoder.len()],
            attention: attention::initial_state(g, &enc.memory),
        }
    }

    /// One decoder step from the previous tokens of each row.
    pub fn decode_step(
        &self,
        g: &mut Graph<T>,
        enc: &EncoderOutput,
        prev: &[usize],
        state: &DecoderState,
    ) -> Result<StepOutput> {
        if prev.len() != enc.lengths.len() || state.hidden.len() != self.params.decoder.len() {
            return Err(Error::contract("decoder step does not match the batch"));
        }
        if state.attention.t == 0 {
            return Err(Error::State("attention state not initialized".into()));
        }
        let top = *state.hidden.last().expect("at least one layer");
        let (attn, next_attn) = attention::attend(
            g,
            &self.store,
            &self.params.attention,
            self.config.attention,
            &enc.memory,
            top,
            &state.attention,
        )?;
        let emb = self.embed(g, prev.to_vec())?;
        let mut x = g.concat(&[emb, attn.context], 1)?;
        let mut hidden = Vec::with_capacity(state.hidden.len());
        for (gru, &h) in self.params.decoder.iter().zip(&state.hidden) {
            x = gru.step(g, &self.store, x, h)?;
            hidden.push(x);
        }
        let p = self.params.project.forward(g, &self.store, x)?;
        let table = g.param(&self.store, self.params.embedding);
        let table_t = g.transpose(table)?;
        let logits = g.matmul(p, table_t)?;
        Ok(StepOutput {
            logits,
            state: DecoderState {
                hidden,
                attention: next_attn,
            },
            attention: attn,
        })
    }

    /// Teacher-forced mean cross entropy over every target token and the end marker.
    pub fn loss_forward(
        &self,
        g: &mut Graph<T>,
        sources: &[Vec<usize>],
        targets: &[Vec<usize>],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Var> {
        if sources.len() != targets.len() {
            return Err(Error::contract("sources and targets differ in batch size"));
        }
        self.check_tokens(targets, "target")?;
        let enc = self.encode(g, sources, training, rng)?;
        let mut state = self.initial_state(g, &enc);
        let steps = targets.iter().map(Vec::len).max().expect("nonempty") + 1;
        let count: usize = targets.iter().map(|t| t.len() + 1).sum();
        let mut total = None;
        for t in 0..steps {
            let prev: Vec<usize> = targets
                .iter()
                .map(|y| match t {
                    0 => GO,
                    _ => y.get(t - 1).copied().unwrap_or(PAD),
                })
                .collect();
            let gold: Vec<usize> = targets
                .iter()
                .map(|y| match t.cmp(&y.len()) {
                    std::cmp::Ordering::Less => y[t],
                    std::cmp::Ordering::Equal => EOS,
                    std::cmp::Ordering::Greater => PAD,
                })
                .collect();
            let out = self.decode_step(g, &enc, &prev, &state)?;
            let ce = g.cross_entropy(out.logits, gold)?;
            let ce = if targets.iter().all(|y| t <= y.len()) {
                ce
            } else {
                let m: Vec<f64> = targets.iter().map(|y| if t <= y.len() { 1.0 } else { 0.0 }).collect();
                let m = g.constant_f64(&[targets.len()], &m)?;
                g.mul(ce, m)?
            };
            let step_sum = g.sum(ce, 0)?;
            total = Some(match total {
                Some(acc) => g.add(acc, step_sum)?,
                None => step_sum,
            });
            state = out.state;
        }
        g.scale(total.expect("at least one step"), 1.0 / count as f64)
    }

    /// Greedy decoding of a batch, lowest index winning ties.
    pub fn greedy_decode(&self, sources: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        Ok(self.decode(sources, false)?.outputs)
    }

    /// Greedy decoding that optionally records attention at every emitted step.
    pub fn decode(&self, sources: &[Vec<usize>], trace: bool) -> Result<Decoded> {
        let mut g = Graph::no_grad();
        let enc = self.encode(&mut g, sources, false, &mut RngStream::new(0))?;
        for (id, _) in self.store.iter() {
            g.param(&self.store, id);
        }
        let mark = g.len();
        let b = sources.len();
        let caps: Vec<usize> = enc.lengths.iter().map(|&l| self.config.decode_cap(l)).collect();
        let mut outputs = vec![Vec::new(); b];
        let mut traces = vec![Vec::new(); if trace { b } else { 0 }];
        let mut done: Vec<bool> = caps.iter().map(|&c| c == 0).collect();
        let mut prev = vec![GO; b];
        let mut state = self.initial_state(&mut g, &enc);
        let vocab = self.config.vocab_size;
        while done.iter().any(|d| !d) {
            let out = self.decode_step(&mut g, &enc, &prev, &state)?;
            let logits = g.value(out.logits).data();
            for row in 0..b {
                if done[row] {
                    prev[row] = PAD;
                    continue;
                }
                let scores = &logits[row * vocab..(row + 1) * vocab];
                let mut best = 0;
                for (i, v) in scores.iter().enumerate() {
                    if v.f64() > scores[best].f64() {
                        best = i;
                    }
                }
                if trace {
                    let t = out.state.attention.t - 1;
                    let rec = AttentionRecord::from_output(&g, &out.attention, self.config.attention, t, row, enc.lengths[row]);
                    traces[row].push(rec);
                }
                if best == EOS {
                    done[row] = true;
                } else {
                    outputs[row].push(best);
                    done[row] = outputs[row].len() >= caps[row];
                }
                prev[row] = best;
            }
            let hidden: Vec<Tensor<T>> = out.state.hidden.iter().map(|&h| g.value(h).clone()).collect();
            let pa = g.value(out.state.attention.pa).clone();
            let lambda = g.value(out.state.attention.lambda).clone();
            let t = out.state.attention.t;
            g.truncate(mark);
            state = DecoderState {
                hidden: hidden.into_iter().map(|h| g.constant(h)).collect(),
                attention: AttentionState {
                    pa: g.constant(pa),
                    lambda: g.constant(lambda),
                    t,
                },
            };
        }
        Ok(Decoded { outputs, traces })
    }
}

#[cfg(test)]
mod tests;
