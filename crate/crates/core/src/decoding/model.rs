use super::{beam_search, default_max_len, greedy_decode, Decoded, StepModel};
use crate::error::Result;
use crate::tensor::Scalar;
use crate::transducer::{DecodeState, EncodedLine, Model, EOS, SOS, SPECIALS};
use crate::vision::LineImage;

/// Adapts a trained [`Model`] and one encoded line to [`StepModel`].
pub struct ModelStepper<'m, T: Scalar> {
    pub model: &'m Model<T>,
    pub line: EncodedLine<T>,
}

impl<'m, T: Scalar> ModelStepper<'m, T> {
    pub fn new(model: &'m Model<T>, img: &LineImage) -> Result<Self> {
        Ok(Self { model, line: model.encode_line(img)? })
    }
}

impl<T: Scalar> StepModel for ModelStepper<'_, T> {
    type State = DecodeState<T>;

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn emittable(&self, token: usize) -> bool {
        token == EOS || token >= SPECIALS
    }

    fn frames(&self) -> usize {
        self.line.steps
    }

    fn initial(&mut self) -> Result<Self::State> {
        self.model.initial_state(&self.line)
    }

    fn step(&mut self, state: &Self::State, prev: Option<&[usize]>) -> Result<(Vec<Vec<f64>>, Self::State)> {
        let sos = vec![SOS; state.rows()];
        self.model.decode_step(&self.line, state, prev.unwrap_or(&sos))
    }

    fn select(&mut self, state: &Self::State, rows: &[usize]) -> Result<Self::State> {
        state.select(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    /// Beam of the given width; `None` uses the class count N.
    Beam(Option<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recognition {
    pub text: String,
    pub decoded: Decoded,
}

/// Transcribes one normalized 32-pixel line.
pub fn recognize<T: Scalar>(model: &Model<T>, img: &LineImage, mode: DecodeMode) -> Result<Recognition> {
    let mut stepper = ModelStepper::new(model, img)?;
    let max_len = default_max_len(stepper.frames());
    let decoded = match mode {
        DecodeMode::Greedy => greedy_decode(&mut stepper, max_len)?,
        DecodeMode::Beam(k) => {
            let k = k.unwrap_or_else(|| model.num_classes());
            beam_search(&mut stepper, k, max_len)?
        }
    };
    Ok(Recognition { text: model.vocab.decode(&decoded.tokens), decoded })
}
