//! Conversational samples, response loss masking, and instruction tuning.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::FreezeMask;
use super::schedule::Schedule;
use super::trainer::{train_loop, TrainItem, TrainOutcome, TrainPlan};
use super::TrainError;
use crate::corpus::vocab::{ASSISTANT, EOD, SYSTEM, USER};
use crate::corpus::Vocabulary;
use crate::model::RetroModel;
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn marker(self) -> u32 {
        match self {
            Role::System => SYSTEM,
            Role::User => USER,
            Role::Assistant => ASSISTANT,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Multi-turn conversation: one system turn first, alternating user and
/// assistant turns, ending with the assistant response that carries the
/// loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversationSample {
    pub turns: Vec<Turn>,
}

impl ConversationSample {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::BadConversation(msg.to_string()));
        if self.turns.is_empty() {
            return bad("conversation has no turns");
        }
        if self.turns[0].role != Role::System {
            return bad("first turn must be the system turn");
        }
        if self.turns[1..].iter().any(|t| t.role == Role::System) {
            return bad("exactly one system turn is allowed");
        }
        match self.turns.last() {
            Some(t) if t.role == Role::Assistant => Ok(()),
            _ => bad("final turn must be an assistant response"),
        }
    }
}

/// Renders a conversation to tokens and builds the response loss mask.
///
/// Each turn becomes its role marker followed by the turn's text tokens;
/// the final assistant response ends with the end-of-document token. The
/// mask is set exactly over the final response tokens (its text plus the
/// terminating end-of-document), never over the role marker or any context
/// turn.
pub fn build_loss_mask(
    sample: &ConversationSample,
    vocab: &Vocabulary,
) -> Result<(Vec<u32>, Vec<bool>), TrainError> {
    sample.validate()?;
    let mut tokens = Vec::new();
    let mut mask = Vec::new();
    let last = sample.turns.len() - 1;
    for (i, turn) in sample.turns.iter().enumerate() {
        tokens.push(turn.role.marker());
        mask.push(false);
        let text_tokens = vocab.tokenize(&turn.text);
        let in_response = i == last;
        mask.extend(std::iter::repeat(in_response).take(text_tokens.len()));
        tokens.extend(text_tokens);
        if in_response {
            tokens.push(EOD);
            mask.push(true);
        }
    }
    Ok((tokens, mask))
}

/// Instruction-tuning hyperparameters. The defaults are the recorded
/// full-scale recipe: batch 128, LR 5e-6 held constant for 1000 steps,
/// weight decay 0.01, Adam(0.9, 0.98).
#[derive(Debug, Clone)]
pub struct SftHyperparams {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for SftHyperparams {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 5e-6,
            steps: 1000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct SftOutcome {
    pub outcome: TrainOutcome,
    /// Samples dropped because they exceed the context window.
    pub skipped: usize,
}

/// Supervised fine-tuning on conversations with the loss on the final
/// assistant response only.
///
/// The gate is forced off: the encoder is bypassed, so encoder and
/// cross-attention parameters receive zero gradient and are additionally
/// frozen out of weight decay; only the decoder backbone updates.
/// Samples longer than the context window are skipped and counted.
pub fn instruction_tune<T: Scalar>(
    model: &mut RetroModel<T>,
    samples: &[ConversationSample],
    vocab: &Vocabulary,
    hp: &SftHyperparams,
) -> Result<SftOutcome, TrainError> {
    let max_seq = model.config.max_seq;
    let mut items = Vec::new();
    let mut skipped = 0usize;
    for sample in samples {
        let (tokens, label_mask) = build_loss_mask(sample, vocab)?;
        if tokens.len() > max_seq {
            skipped += 1;
            continue;
        }
        // Shift: position i predicts token i+1; the mask follows the label.
        let t = tokens.len();
        let mut targets = vec![0u32; t];
        let mut mask = vec![false; t];
        for i in 0..t - 1 {
            targets[i] = tokens[i + 1];
            mask[i] = label_mask[i + 1];
        }
        if mask.iter().any(|&m| m) {
            items.push(TrainItem {
                tokens,
                targets,
                mask,
                neighbors: None,
            });
        }
    }
    if items.is_empty() {
        return Err(TrainError::NoTrainingItems);
    }
    let plan = TrainPlan {
        steps: hp.steps,
        batch_size: hp.batch_size,
        schedule: Schedule::constant(hp.lr),
        beta1: hp.beta1,
        beta2: hp.beta2,
        weight_decay: hp.weight_decay,
        clip_norm: 1.0,
        seed: hp.seed,
        val_interval: 0,
        val_windows: 0,
        divergence_factor: 2.0,
        divergence_patience: 100,
    };
    // Gate off implies zero gradients for enc./cca.; freezing them as well
    // keeps weight decay from touching them.
    let freeze = FreezeMask::by_prefix(&model.params, &["enc.", "cca."]);
    let outcome = train_loop(model, &items, 0, &freeze, &plan, None)?;
    Ok(SftOutcome { outcome, skipped })
}

/// Line-delimited conversation file.
pub fn load_sft_set(path: &Path) -> Result<Vec<ConversationSample>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(crate::io::FileError::from)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: ConversationSample = serde_json::from_str(line).map_err(|e| {
            TrainError::BadConversation(format!("line {}: {e}", i + 1))
        })?;
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

pub fn save_sft_set(path: &Path, samples: &[ConversationSample]) -> Result<(), TrainError> {
    let mut text = String::new();
    for s in samples {
        text.push_str(&serde_json::to_string(s).expect("serializable sample"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(crate::io::FileError::from)?;
    Ok(())
}
