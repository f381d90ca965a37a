use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{Decoder, DecoderState};
use super::encoder::{Encoder, EncoderOutput};
use super::vocab::{CharVocab, EOS, PAD, SOS};
use crate::error::{HtrError, Result};
use crate::session::Session;
use crate::tensor::{ParamStore, Scalar, Tensor, Var};
use crate::vision::{extract, pad_batch, Cnn, CnnConfig, FeatureSequence, ImageBatch, LineImage, LINE_HEIGHT};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cnn: CnnConfig,
    pub hidden: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size network: 256-unit cells, two layers on each side.
    pub fn standard() -> Self {
        Self::with_cnn(CnnConfig::standard(), 256)
    }

    /// Halved convolutional filters and `hidden`-unit cells.
    pub fn reduced(hidden: usize) -> Self {
        Self::with_cnn(CnnConfig::halved(), hidden)
    }

    pub fn with_cnn(cnn: CnnConfig, hidden: usize) -> Self {
        Self { cnn, hidden, embed_dim: hidden, attn_dim: hidden, encoder_layers: 2, decoder_layers: 2, dropout: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn.validate()?;
        if self.hidden < 2 || self.embed_dim == 0 || self.attn_dim == 0 {
            return Err(HtrError::Config("hidden size must be at least 2 and embed/attention sizes nonzero".into()));
        }
        if self.encoder_layers == 0 || self.decoder_layers != self.encoder_layers {
            return Err(HtrError::Config(format!(
                "decoder layers ({}) must equal encoder layers ({}) and be nonzero",
                self.decoder_layers, self.encoder_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HtrError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.cnn.feature_dim(LINE_HEIGHT).is_none() {
            return Err(HtrError::Config("cnn does not fit a 32-pixel line".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.cnn.feature_dim(LINE_HEIGHT).unwrap_or(0)
    }

    pub fn key_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Gold token rows `[<sos>, y₁, …, <eos>, <pad>…]` of a batch, with the
/// per-step decoder inputs and loss targets derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub rows: Vec<Vec<usize>>,
    /// Decoder steps Td.
    pub steps: usize,
    /// Row-major `[B×Td]` targets; `None` after `<eos>`.
    pub gold: Vec<Option<usize>>,
}

impl TargetBatch {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let len = rows.first().map(Vec::len).ok_or_else(|| HtrError::Data("empty target batch".into()))?;
        if len < 2 {
            return Err(HtrError::Data("target rows need <sos> and <eos>".into()));
        }
        let steps = len - 1;
        let mut gold = Vec::with_capacity(rows.len() * steps);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != len {
                return Err(HtrError::Data(format!("target row {i} has length {}, expected {len}", row.len())));
            }
            if row[0] != SOS {
                return Err(HtrError::Data(format!("target row {i} does not start with <sos>")));
            }
            let eos: Vec<usize> = (0..len).filter(|&j| row[j] == EOS).collect();
            let [e] = eos[..] else {
                return Err(HtrError::Data(format!("target row {i} must contain exactly one <eos>, found {}", eos.len())));
            };
            if row[e + 1..].iter().any(|&t| t != PAD) || row[1..e].iter().any(|&t| t == PAD || t == SOS) {
                return Err(HtrError::Data(format!("target row {i} is malformed: {row:?}")));
            }
            gold.extend((1..len).map(|j| (j <= e).then_some(row[j])));
        }
        Ok(Self { rows, steps, gold })
    }

    pub fn from_texts<S: AsRef<str>>(vocab: &CharVocab, texts: &[S]) -> Result<Self> {
        let encoded: Vec<Vec<usize>> = texts.iter().map(|t| vocab.encode(t.as_ref())).collect::<Result<_>>()?;
        let longest = encoded.iter().map(Vec::len).max().unwrap_or(0);
        let rows = encoded
            .into_iter()
            .map(|toks| {
                let pad = longest - toks.len();
                std::iter::once(SOS).chain(toks).chain(std::iter::once(EOS)).chain(std::iter::repeat(PAD).take(pad)).collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    pub fn batch(&self) -> usize {
        self.rows.len()
    }

    /// Decoder input tokens at step `t`.
    pub fn inputs(&self, t: usize) -> Vec<usize> {
        self.rows.iter().map(|r| r[t]).collect()
    }
}

/// The complete recognizer: CNN, encoder, attention decoder and the
/// parameters they share.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: CharVocab,
    pub params: ParamStore<T>,
    pub cnn: Cnn,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, vocab: CharVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cnn = Cnn::new(config.cnn.clone(), &mut params, &mut rng)?;
        let dh = config.hidden;
        let encoder = Encoder::new(&mut params, config.feature_dim(), dh, config.encoder_layers, config.dropout, &mut rng);
        let decoder = Decoder::new(
            &mut params,
            vocab.len(),
            config.embed_dim,
            dh,
            config.key_dim(),
            config.attn_dim,
            config.decoder_layers,
            config.dropout,
            &mut rng,
        );
        Ok(Self { config, vocab, params, cnn, encoder, decoder })
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn features(&self, s: &mut Session<'_, T>, batch: &ImageBatch) -> Result<FeatureSequence> {
        extract(s, &self.cnn, batch)
    }

    pub fn encode(&self, s: &mut Session<'_, T>, batch: &ImageBatch) -> Result<EncoderOutput> {
        let seq = self.features(s, batch)?;
        self.encoder.encode(s, &seq)
    }

    /// Logits `[B×Td×N]` with gold tokens fed as decoder inputs.
    pub fn forward_teacher_forced(&self, s: &mut Session<'_, T>, batch: &ImageBatch, targets: &TargetBatch) -> Result<Var> {
        if targets.batch() != batch.len() {
            return Err(crate::error::dim_err!("{} target rows for {} images", targets.batch(), batch.len()));
        }
        let enc = self.encode(s, batch)?;
        unroll(&self.decoder, s, &enc, targets)
    }

    /// Encodes one line for step-by-step decoding.
    pub fn encode_line(&self, img: &LineImage) -> Result<EncodedLine<T>> {
        let batch = pad_batch(std::slice::from_ref(img), &self.config.cnn)?;
        let mut s = Session::inference(&self.params);
        let enc = self.encode(&mut s, &batch)?;
        let mem = self.decoder.attention.memory(&mut s, enc.annotations, enc.mask.clone())?;
        Ok(EncodedLine {
            annotations: s.graph.value(mem.annotations).clone(),
            keys: s.graph.value(mem.keys).clone(),
            final_cells: enc.final_cells.iter().map(|&v| s.graph.value(v).clone()).collect(),
            mask: enc.mask,
            steps: enc.steps,
        })
    }

    pub fn initial_state(&self, enc: &EncodedLine<T>) -> Result<DecodeState<T>> {
        let mut s = Session::inference(&self.params);
        let cells: Vec<Var> = enc.final_cells.iter().map(|t| s.graph.constant(t.clone())).collect();
        let st = self.decoder.init(&mut s, &cells)?;
        Ok(DecodeState::capture(&s, &st))
    }

    /// One decoder step for every state row; returns per-row log-probabilities.
    pub fn decode_step(&self, enc: &EncodedLine<T>, state: &DecodeState<T>, tokens: &[usize]) -> Result<(Vec<Vec<f64>>, DecodeState<T>)> {
        let mut s = Session::inference(&self.params);
        let mem = super::attention::AttentionMemory {
            annotations: s.graph.constant(enc.annotations.clone()),
            keys: s.graph.constant(enc.keys.clone()),
            mask: enc.mask.clone(),
            steps: enc.steps,
        };
        let st = state.restore(&mut s);
        let out = self.decoder.step(&mut s, tokens, &st, &mem)?;
        let lp = s.graph.log_softmax(out.logits)?;
        let n = self.num_classes();
        let rows = s.graph.data(lp).chunks(n).map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()).collect();
        Ok((rows, DecodeState::capture(&s, &out.state)))
    }
}

/// Runs the decoder over every target step with teacher forcing.
pub fn unroll<T: Scalar>(decoder: &Decoder, s: &mut Session<'_, T>, enc: &EncoderOutput, targets: &TargetBatch) -> Result<Var> {
    if targets.batch() != enc.batch {
        return Err(crate::error::dim_err!("{} target rows for a batch of {}", targets.batch(), enc.batch));
    }
    let mem = decoder.attention.memory(s, enc.annotations, enc.mask.clone())?;
    let mut state = decoder.init(s, &enc.final_cells)?;
    let mut logits = Vec::with_capacity(targets.steps);
    for t in 0..targets.steps {
        let out = decoder.step(s, &targets.inputs(t), &state, &mem)?;
        logits.push(out.logits);
        state = out.state;
    }
    s.graph.stack_steps(&logits)
}

/// Encoder results of one line, detached from any graph.
#[derive(Debug, Clone)]
pub struct EncodedLine<T> {
    pub annotations: Tensor<T>,
    pub keys: Tensor<T>,
    pub final_cells: Vec<Tensor<T>>,
    pub mask: Vec<bool>,
    pub steps: usize,
}

/// Decoder state values for a set of rows, detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState<T> {
    pub h: Vec<Tensor<T>>,
    pub c: Vec<Tensor<T>>,
    pub prev_context: Tensor<T>,
}

impl<T: Scalar> DecodeState<T> {
    fn capture(s: &Session<'_, T>, st: &DecoderState) -> Self {
        Self {
            h: st.h.iter().map(|&v| s.graph.value(v).clone()).collect(),
            c: st.c.iter().map(|&v| s.graph.value(v).clone()).collect(),
            prev_context: s.graph.value(st.prev_context).clone(),
        }
    }

    fn restore(&self, s: &mut Session<'_, T>) -> DecoderState {
        DecoderState {
            h: self.h.iter().map(|t| s.graph.constant(t.clone())).collect(),
            c: self.c.iter().map(|t| s.graph.constant(t.clone())).collect(),
            prev_context: s.graph.constant(self.prev_context.clone()),
        }
    }

    pub fn rows(&self) -> usize {
        self.prev_context.shape()[0]
    }

    /// New state made of the given rows (indices may repeat).
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let (n, d) = (t.shape()[0], t.shape()[1]);
            if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                return Err(crate::error::dim_err!("state row {bad} out of {n}"));
            }
            let data = rows.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].iter().copied()).collect();
            Tensor::new(vec![rows.len(), d], data)
        };
        Ok(Self {
            h: self.h.iter().map(pick).collect::<Result<_>>()?,
            c: self.c.iter().map(pick).collect::<Result<_>>()?,
            prev_context: pick(&self.prev_context)?,
        })
    }
}
