//! Prompt tokenisation and the small trainable text encoder standing in for
//! a pretrained language model.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Vb};
use crate::synth::{PromptPool, TextPrompt};

/// Token slots per prompt.
pub const TEXT_TOKENS: usize = 77;
pub const PAD: &str = "<pad>";

/// Closed vocabulary; id 0 is the padding token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut w: Vec<String> = words.into_iter().filter(|w| w != PAD).collect();
        w.sort();
        w.dedup();
        w.insert(0, PAD.to_string());
        Self { words: w }
    }

    pub fn from_pool(pool: &PromptPool) -> Self {
        Self::new(pool.vocabulary())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Token ids padded or truncated to `len` slots.
    pub fn encode(&self, prompt: &TextPrompt, len: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(len);
        for tok in prompt.tokens() {
            let id = self.id(tok).ok_or_else(|| Error::OutOfVocabulary { token: tok.to_string() })?;
            if ids.len() < len {
                ids.push(id);
            }
        }
        ids.resize(len, 0);
        Ok(ids)
    }
}

/// Token + slot embedding followed by one residual MLP and a layer norm.
pub struct TextEncoder {
    pub vocab: Vocab,
    pub width: usize,
    pub slots: usize,
    tok: Tensor,
    pos: Tensor,
    fc1: Linear,
    fc2: Linear,
    ln: LayerNorm,
}

impl TextEncoder {
    pub fn new(vb: &Vb, vocab: Vocab, width: usize, slots: usize) -> Result<Self> {
        Ok(Self {
            tok: vb.get(&[vocab.len(), width], "tok", Init::Normal(1.0))?,
            pos: vb.get(&[slots, width], "pos", Init::Normal(0.1))?,
            fc1: Linear::new(&vb.pp("fc1"), width, 2 * width)?,
            fc2: Linear::new(&vb.pp("fc2"), 2 * width, width)?,
            ln: LayerNorm::new(&vb.pp("ln"), width)?,
            vocab,
            width,
            slots,
        })
    }

    /// `(slots, width)` embedding of `prompt`.
    pub fn embed(&self, prompt: &TextPrompt) -> Result<Tensor> {
        let ids = self.vocab.encode(prompt, self.slots)?;
        let ids = Tensor::from_vec(ids.iter().map(|i| *i as u32).collect::<Vec<_>>(), self.slots, self.tok.device())?;
        let x = (self.tok.index_select(&ids, 0)? + &self.pos)?;
        let h = self.fc2.forward(&self.fc1.forward(&x)?.silu()?)?;
        Ok(self.ln.forward(&(x + h)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::synth::Polarity;
    use candle_core::DType;

    #[test]
    fn vocab_ids_and_padding() {
        let pool = PromptPool::toy();
        let v = Vocab::from_pool(&pool);
        assert_eq!(v.id(PAD), Some(0));
        let p = pool.get(0).unwrap();
        let ids = v.encode(p, 6).unwrap();
        assert_eq!(ids.len(), 6);
        assert!(ids[..4].iter().all(|i| *i > 0));
        assert_eq!(&ids[4..], &[0, 0]);
        assert_eq!(v.encode(p, 2).unwrap().len(), 2);
    }

    #[test]
    fn out_of_vocabulary_token_is_named() {
        let v = Vocab::from_pool(&PromptPool::toy());
        let p = TextPrompt::new(0, "ego-car hits a tram", Polarity::Positive).unwrap();
        match v.encode(&p, TEXT_TOKENS) {
            Err(Error::OutOfVocabulary { token }) => assert_eq!(token, "tram"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn embedding_is_deterministic_and_sized() {
        let pool = PromptPool::toy();
        let store = ParamStore::new(3, DType::F32);
        let enc = TextEncoder::new(&store.root(), Vocab::from_pool(&pool), 16, TEXT_TOKENS).unwrap();
        let a = enc.embed(pool.get(1).unwrap()).unwrap();
        let b = enc.embed(pool.get(1).unwrap()).unwrap();
        assert_eq!(a.dims(), &[TEXT_TOKENS, 16]);
        let (a, b) = (a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.is_finite()));
    }
}
