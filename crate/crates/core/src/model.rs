//! Encoder, frozen decoder and text resources bundled over one parameter
//! store, with the per-instance forward passes used by training and
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SECTION_BASE, SECTION_DECODER, SECTION_TRAINABLE};
use crate::decoder::{loss_it, loss_prompt, Decoder, DecoderConfig, SpecialIds};
use crate::encoder::{encode, Encoder, EncoderConfig, EncoderInput, InputBuilder};
use crate::instance::{SamplingConfig, TaskInstance};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::tasktext::{EmbedderConfig, TaskText, TextEmbedder};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub sampling: SamplingConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder.d_model != self.encoder.d_h {
            return Err(Error::Config(format!(
                "decoder width {} must equal encoder width {}",
                self.decoder.d_model, self.encoder.d_h
            )));
        }
        if self.sampling.max_nodes == 0 {
            return Err(Error::Config("sampling.max_nodes must be positive".into()));
        }
        Ok(())
    }
}

/// How the decoder is conditioned. The two ablations remove the alignment
/// channel or the task-aware description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Full,
    ZeroPrefix,
    GenericDesc,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub text: TaskText,
    pub builder: InputBuilder,
    pub specials: SpecialIds,
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceLoss {
    pub l_it: Var,
    pub l_prompt: Var,
    pub total: Var,
}

impl<T: Real> Model<T> {
    /// Fresh model. The decoder is randomly initialised and trainable until
    /// pretrained weights are loaded.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let text = TaskText::default();
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, config.encoder, seed)?;
        let decoder = Decoder::init(&mut store, config.decoder, text.vocab.len(), seed)?;
        let embedder = TextEmbedder::new(EmbedderConfig {
            dim: config.encoder.d_h,
            hash_buckets: config.encoder.hash_buckets,
            seed,
        });
        let builder = InputBuilder::new(embedder, &text);
        let specials = SpecialIds::from_vocab(&text.vocab);
        Ok(Self { config, seed, store, encoder, decoder, text, builder, specials })
    }

    /// Loads a pretrained decoder and freezes it.
    pub fn load_decoder(&mut self, ck: &Checkpoint) -> Result<()> {
        let n = ck.load_params(SECTION_DECODER, &mut self.store)?;
        if n != self.decoder.params().len() {
            return Err(Error::Checkpoint(format!("decoder section has {n} tensors, model {}", self.decoder.params().len())));
        }
        self.decoder.freeze(&mut self.store);
        Ok(())
    }

    /// Loads encoder weights (trainable subset and base).
    pub fn load_encoder(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_params(SECTION_TRAINABLE, &mut self.store)?;
        ck.load_params(SECTION_BASE, &mut self.store)?;
        Ok(())
    }

    /// Writes all three parameter sections.
    pub fn add_to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.add_params(SECTION_TRAINABLE, &self.store, &self.encoder.trainable_params());
        ck.add_params(SECTION_BASE, &self.store, &self.encoder.base_params());
        ck.add_params(SECTION_DECODER, &self.store, &self.decoder.params());
    }

    pub fn input(&self, inst: &TaskInstance, cond: Conditioning) -> Result<EncoderInput> {
        match cond {
            Conditioning::GenericDesc => self.builder.assemble_generic(inst, &self.text, &self.encoder),
            _ => self.builder.assemble_input(inst, &self.text, &self.encoder),
        }
    }

    /// Both losses for one instance on `tape`.
    pub fn losses(&self, tape: &mut Tape<T>, inst: &TaskInstance) -> Result<InstanceLoss> {
        let input = self.input(inst, Conditioning::Full)?;
        let h_a = encode(tape, &self.store, &self.encoder, &input)?;
        let l_it = loss_it(tape, &self.store, &self.decoder, self.specials, h_a, &inst.detail_tokens, &inst.target_tokens)?;
        let l_prompt = loss_prompt(tape, &self.store, &self.decoder, self.specials, h_a, &inst.reconstruction_tokens)?;
        let total = tape.add(l_it, l_prompt)?;
        Ok(InstanceLoss { l_it, l_prompt, total })
    }

    /// `L_total` for one instance without recording gradients.
    pub fn loss_value(&self, inst: &TaskInstance) -> Result<f64> {
        let mut tape = Tape::inference();
        let l = self.losses(&mut tape, inst)?;
        Ok(tape.value(l.total).item().as_f64())
    }

    /// `H_A` under the requested conditioning.
    pub fn h_a(&self, inst: &TaskInstance, cond: Conditioning) -> Result<Tensor<T>> {
        let input = self.input(inst, cond)?;
        let mut tape = Tape::inference();
        let h = encode(&mut tape, &self.store, &self.encoder, &input)?;
        let v = tape.value(h).clone();
        Ok(match cond {
            Conditioning::ZeroPrefix => Tensor::zeros(v.shape()),
            _ => v,
        })
    }
}
