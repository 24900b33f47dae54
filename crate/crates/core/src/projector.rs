//! Emotion projector: templated prompt -> word embeddings -> one linear map
//! into the segmentation feature space.

use candle_core::Tensor;

use crate::dataset::{Vocabulary, BOS, PAD, PROMPT_TEMPLATE};
use crate::emotion::Emotion;
use crate::encoders::TextEmbedding;
use crate::error::Result;
use crate::nn::{Linear, ParamGroup, ParamStore};

/// `BOS generate the mask for the emotion <word>`, fitted to exactly
/// `len` ids: the template is truncated or PAD-filled, the emotion word
/// always takes the last slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionPrompt {
    pub emotion: Emotion,
    pub token_ids: Vec<u32>,
}

impl EmotionPrompt {
    pub fn new(emotion: Emotion, vocab: &Vocabulary, len: usize) -> Self {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode_words(PROMPT_TEMPLATE));
        ids.truncate(len - 1);
        ids.resize(len - 1, PAD);
        ids.push(vocab.emotion_id(emotion));
        EmotionPrompt {
            emotion,
            token_ids: ids,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmotionProjector {
    pub linear: Linear,
}

impl EmotionProjector {
    pub fn new(store: &mut ParamStore, d_w: usize, d_k: usize) -> Result<Self> {
        Ok(EmotionProjector {
            linear: Linear::new(store, "projector", d_w, d_k, ParamGroup::Projector)?,
        })
    }

    /// `ids (B, l_e)` -> prompt tokens `(B, l_e, d_k)`.
    pub fn project(&self, embedding: &TextEmbedding, ids: &Tensor) -> Result<Tensor> {
        self.linear.forward(&embedding.embed(ids)?)
    }
}
