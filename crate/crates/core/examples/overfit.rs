//! Trains the reduced model on a small synthetic corpus until it transcribes
//! its own training lines.
//!
//! ```text
//! cargo run --release -p htr-core --example overfit -- [epochs] [dropout] [augment]
//! ```

use std::time::Instant;

use htr_core::decoding::DecodeMode;
use htr_core::eval::{cer, synth_lines, SynthConfig};
use htr_core::training::{fit_with, TrainConfig};
use htr_core::transducer::{CharVocab, Model, ModelConfig};
use htr_core::vision::LineImage;

fn main() -> htr_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|a| a.parse().ok()).unwrap_or(150);
    let dropout = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0.5);
    let augment = args.get(2).map_or(false, |a| a == "1");

    let synth = SynthConfig { alphabet: "abcdefghijklmn ".chars().collect(), lines: 32, max_words: 2, max_word_len: 5, ..SynthConfig::default() };
    let lines: Vec<LineImage> = synth_lines(&synth)?
        .into_iter()
        .map(|l| l.to_line_image())
        .collect::<htr_core::Result<_>>()?;
    let vocab = CharVocab::new(synth.alphabet.iter().copied())?;
    let config = ModelConfig { dropout, ..ModelConfig::reduced(64) };
    let model = Model::<f32>::new(config, vocab, 7)?;
    let cfg = TrainConfig { batch_size: 8, max_epochs: epochs, augment, target_cer: Some(0.0), seed: 11, ..TrainConfig::default() };
    let start = Instant::now();
    let out = fit_with(model, &lines, &lines, &cfg, |e| {
        println!("epoch {:>3}  loss {:.4}  val_cer {:?}  {:.1}s", e.epoch, e.mean_loss, e.val_cer, e.seconds);
    })?;
    let model = &out.best.model;
    let mut beam = 0.0;
    for img in &lines {
        let r = htr_core::decoding::recognize(model, img, DecodeMode::Beam(None))?;
        beam += cer(img.transcript.as_deref().unwrap_or(""), &r.text)?;
    }
    println!("best greedy cer {:?}  beam cer {:.4}  total {:.1}s", out.best.val_cer, beam / lines.len() as f64, start.elapsed().as_secs_f64());
    Ok(())
}
