//! The bundled miniature backend: [`ToyModel`] behind the [`Backend`] trait.
//!
//! Text is laid out as `<bos> tokens`; row `j` of the text predicts the
//! following token and the final row predicts `<eos>`. The end-of-sequence
//! prediction is always part of the loss, so every target is terminated.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{
    digest_bytes, AttentionCapture, Backend, BackendError, Capabilities, GenerationParams, StepSettings, Tokenizer,
    TrainExample, TrainStepStats,
};
use crate::fusion::FrameClip;

use super::model::{ToyModel, ToyModelConfig};
use super::optim::AdamW;
use super::vocab::{ToyTokenizer, BOS, EOS};

/// Model inputs with the token each text row predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub predict: Vec<bool>,
}

impl Layout {
    pub fn new(token_ids: &[u32], loss_mask: &[bool]) -> Self {
        let mut inputs = Vec::with_capacity(token_ids.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(token_ids);
        let mut targets = token_ids.to_vec();
        targets.push(EOS);
        let mut predict = loss_mask.to_vec();
        predict.push(true);
        Self {
            inputs,
            targets,
            predict,
        }
    }

    /// `(fused row, target id)` pairs for the rows in the loss.
    pub fn pairs(&self, n_video: usize) -> Vec<(usize, u32)> {
        (0..self.targets.len())
            .filter(|&j| self.predict[j])
            .map(|j| (n_video + j, self.targets[j]))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    model: ToyModel,
    tokenizer: ToyTokenizer,
    optim: AdamW,
}

pub fn make_toy_backend(cfg: ToyModelConfig, seed: u64) -> Result<ToyBackend, BackendError> {
    let tokenizer = ToyTokenizer::default();
    if cfg.vocab_size != tokenizer.vocab_size() {
        return Err(BackendError::InvalidInput(format!(
            "vocab_size {} does not match the bundled vocabulary of {}",
            cfg.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let model = ToyModel::new(cfg, seed)?;
    let optim = AdamW::new(model.n_params());
    Ok(ToyBackend {
        model,
        tokenizer,
        optim,
    })
}

impl ToyBackend {
    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ToyModel {
        &mut self.model
    }

    pub fn toy_tokenizer(&self) -> &ToyTokenizer {
        &self.tokenizer
    }

    fn n_video(&self, clip: &FrameClip) -> Result<usize, BackendError> {
        Ok(self.model.patches(clip)?.grid.token_count())
    }

    fn check_example(ex: &TrainExample) -> Result<(), BackendError> {
        if ex.loss_mask.len() != ex.token_ids.len() {
            return Err(BackendError::InvalidInput(format!(
                "example {:?}: {} mask entries for {} tokens",
                ex.id,
                ex.loss_mask.len(),
                ex.token_ids.len()
            )));
        }
        if ex.masked_count() == 0 {
            return Err(BackendError::EmptyLossMask(ex.id.clone()));
        }
        Ok(())
    }

    /// Sum of NLL over the predicted rows of `layout` and their count.
    pub fn layout_nll(&self, clip: &FrameClip, layout: &Layout) -> Result<(f64, usize), BackendError> {
        let pairs = layout.pairs(self.n_video(clip)?);
        let nll = self.model.nll(clip, &layout.inputs, &pairs, 1.0, None)?;
        Ok((nll, pairs.len()))
    }

    /// Mean masked-token loss and its gradient over a batch.
    pub fn loss_and_grad(&self, batch: &[TrainExample]) -> Result<(f64, Vec<f64>, usize), BackendError> {
        let mut prepared = Vec::with_capacity(batch.len());
        for ex in batch {
            Self::check_example(ex)?;
            let layout = Layout::new(&ex.token_ids, &ex.loss_mask);
            let pairs = layout.pairs(self.n_video(&ex.clip)?);
            prepared.push((ex, layout, pairs));
        }
        let total: usize = prepared.iter().map(|p| p.2.len()).sum();
        let scale = 1.0 / total as f64;
        let n = self.model.n_params();
        let work = |(ex, layout, pairs): &(&TrainExample, Layout, Vec<(usize, u32)>)| {
            let mut g = vec![0.0; n];
            self.model.nll(&ex.clip, &layout.inputs, pairs, scale, Some(&mut g)).map(|l| (l, g))
        };
        #[cfg(feature = "parallel")]
        let results: Vec<_> = {
            use rayon::prelude::*;
            prepared.par_iter().map(work).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<_> = prepared.iter().map(work).collect();

        let mut grad = vec![0.0; n];
        let mut sum = 0.0;
        let mut bad = Vec::new();
        for ((ex, _, _), r) in prepared.iter().zip(results) {
            let (l, g) = r?;
            if !l.is_finite() {
                bad.push(ex.id.clone());
            }
            sum += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if !bad.is_empty() {
            return Err(BackendError::NonFiniteLoss(bad));
        }
        Ok((sum * scale, grad, total))
    }

    fn prompt_ids(&self, prompt: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenizer.encode(prompt).iter().map(|t| t.id));
        ids
    }

    fn parameter_bytes(&self) -> Vec<u8> {
        self.model.params().iter().flat_map(|p| p.to_le_bytes()).collect()
    }
}

fn argmax(row: &ndarray::Array1<f64>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Temperature plus nucleus sampling from one logit row.
fn sample(row: &ndarray::Array1<f64>, temperature: f64, top_p: f64, rng: &mut ChaCha8Rng) -> u32 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = row.iter().map(|&v| ((v - max) / temperature).exp()).enumerate().collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = 0.0;
    let cut = probs
        .iter()
        .position(|p| {
            kept += p.1;
            kept >= top_p
        })
        .map_or(probs.len(), |i| i + 1);
    probs.truncate(cut);
    let mut u = rng.random::<f64>() * kept;
    for &(i, p) in &probs {
        if u < p {
            return i as u32;
        }
        u -= p;
    }
    probs.last().map_or(0, |p| p.0 as u32)
}

impl Backend for ToyBackend {
    fn model_id(&self) -> String {
        let c = self.model.config();
        let digest = digest_bytes(&self.parameter_bytes());
        format!("toy-d{}-l{}-h{}@{}", c.d, c.layers, c.heads, &digest[..12])
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            generate: true,
            train: true,
            attention: true,
        }
    }

    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        Some(&self.tokenizer)
    }

    fn config_values(&self) -> BTreeMap<String, String> {
        self.model.config().key_values()
    }

    fn generate(&self, clip: &FrameClip, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        params.validate()?;
        let prefix = self.prompt_ids(prompt);
        let ids = if params.temperature == 0.0 {
            self.model.decode(clip, &prefix, params.max_new_tokens, EOS, argmax)?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            self.model.decode(clip, &prefix, params.max_new_tokens, EOS, |row| {
                sample(row, params.temperature, params.top_p, &mut rng)
            })?
        };
        Ok(self.tokenizer.decode(&ids))
    }

    fn begin_stage(&mut self) -> Result<(), BackendError> {
        self.optim.reset();
        Ok(())
    }

    fn train_step(&mut self, batch: &[TrainExample], settings: &StepSettings) -> Result<TrainStepStats, BackendError> {
        if batch.is_empty() {
            return Err(BackendError::InvalidInput("empty batch".into()));
        }
        let (loss, mut grad, tokens) = self.loss_and_grad(batch)?;
        let slots = self.model.slots().to_vec();
        let norm = self.optim.step(self.model.params_mut(), &mut grad, &slots, settings);
        Ok(TrainStepStats {
            step: settings.step,
            loss,
            lr_by_group: settings.lr_by_group.iter().map(|(g, lr)| (g.name().to_string(), *lr)).collect(),
            grad_norm_preclip: norm,
            tokens_in_loss: tokens,
        })
    }

    fn eval_loss(&self, batch: &[TrainExample]) -> Result<f64, BackendError> {
        let mut sum = 0.0;
        let mut count = 0;
        for ex in batch {
            Self::check_example(ex)?;
            let (l, n) = self.layout_nll(&ex.clip, &Layout::new(&ex.token_ids, &ex.loss_mask))?;
            sum += l;
            count += n;
        }
        if count == 0 {
            return Err(BackendError::InvalidInput("empty batch".into()));
        }
        Ok(sum / count as f64)
    }

    fn capture_attention(&self, clip: &FrameClip, prompt: &str) -> Result<AttentionCapture, BackendError> {
        self.model.attention(clip, &self.prompt_ids(prompt))
    }

    fn export_parameters(&self) -> Result<Vec<u8>, BackendError> {
        Ok(self.parameter_bytes())
    }

    fn import_parameters(&mut self, blob: &[u8]) -> Result<(), BackendError> {
        let n = self.model.n_params();
        if blob.len() != n * 8 {
            return Err(BackendError::InvalidInput(format!(
                "parameter blob holds {} bytes, model needs {}",
                blob.len(),
                n * 8
            )));
        }
        for (p, chunk) in self.model.params_mut().iter_mut().zip(blob.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(())
    }
}
