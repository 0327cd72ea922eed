//! Text side of the generator: vocabulary, template captioner and the
//! mean-pooled text encoder that produces conditioning vectors.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Binding, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::{SceneId, SCENES, TEXTURES};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const CLS: &str = "[CLS]";

const FUNCTION_WORDS: [&str; 12] = [
    "a", "photo", "of", "walk", "past", "the", "stop", "at", ",", "then", "into", "go",
];

pub type TokenId = usize;

/// Dense token ids; the special tokens come first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        for special in [PAD, MASK, CLS] {
            if !ids.contains_key(special) {
                return Err(Error::invalid(format!("vocabulary lacks {special}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Special tokens, template words, texture names and scene labels.
    pub fn standard() -> Self {
        let tokens = [PAD, MASK, CLS]
            .iter()
            .chain(FUNCTION_WORDS.iter())
            .chain(TEXTURES.iter())
            .chain(SCENES.iter())
            .map(|s| s.to_string())
            .collect();
        Vocabulary::new(tokens).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::invalid(format!("out-of-vocabulary token {token:?}")))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn mask_id(&self) -> TokenId {
        self.ids[MASK]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .ok_or_else(|| Error::invalid(format!("token id {i} out of range")))
            })
            .collect()
    }
}

/// Splits on whitespace, keeping commas as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.replace(',', " , ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && t != "," {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// What the captioner knows about a sub-view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewMeta {
    pub scene: SceneId,
}

/// Deterministic caption: "a photo of <texture> <scene>".
pub fn synth_caption(meta: Option<&ViewMeta>) -> Result<Vec<String>> {
    let meta = meta.ok_or_else(|| Error::invalid("sub-view has no scene metadata"))?;
    Ok(vec![
        "a".into(),
        "photo".into(),
        "of".into(),
        meta.scene.texture().name().into(),
        meta.scene.label().into(),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
}

/// Bag-of-embeddings encoder: mean of token embeddings, then a linear
/// projection. Weights live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub prefix: String,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, prefix: impl Into<String>) -> Self {
        TextEncoder {
            cfg,
            prefix: prefix.into(),
        }
    }

    pub fn embedding_name(&self) -> String {
        format!("{}.emb", self.prefix)
    }

    pub fn projection_name(&self) -> String {
        format!("{}.proj", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.cfg;
        store.insert(
            self.embedding_name(),
            Tensor::randn(&[c.vocab_size, c.embed_dim], 1.0, rng),
        );
        store.insert(
            self.projection_name(),
            Tensor::randn(&[c.cond_dim, c.embed_dim], 1.0 / (c.embed_dim as f64).sqrt(), rng),
        );
    }

    fn check(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!("out-of-vocabulary token id {t}")));
        }
        Ok(())
    }

    /// Mean-pooled embedding before projection, `1 × embed_dim`.
    pub fn pooled<'t>(&self, b: &Binding<'t>, tokens: &[TokenId]) -> Result<Var<'t>> {
        self.check(tokens)?;
        b.param(&self.embedding_name())?.gather_rows(tokens)?.mean_rows()
    }

    /// Conditioning vector `1 × cond_dim`. The projection goes through
    /// [`crate::lora::linear`], so an attached adapter applies.
    pub fn encode<'t>(&self, b: &Binding<'t>, tokens: &[TokenId]) -> Result<Var<'t>> {
        let pooled = self.pooled(b, tokens)?;
        crate::lora::linear(b, &self.projection_name(), &pooled)
    }

    /// Plain-value encoding outside of training.
    pub fn encode_value(&self, store: &ParamStore, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let tape = crate::autodiff::Tape::new();
        let b = Binding::new(&tape, store);
        Ok(self.encode(&b, tokens)?.value().into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng;
    use crate::testutil::check_store_gradients;

    fn encoder() -> (TextEncoder, ParamStore) {
        let v = Vocabulary::standard();
        let enc = TextEncoder::new(
            TextEncoderConfig {
                vocab_size: v.len(),
                embed_dim: 6,
                cond_dim: 4,
            },
            "txt",
        );
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng::from_seed(2));
        (enc, store)
    }

    #[test]
    fn caption_template() {
        let kitchen = SceneId::from_label("kitchen").unwrap();
        assert_eq!(kitchen.texture().name(), "checker");
        let cap = synth_caption(Some(&ViewMeta { scene: kitchen })).unwrap();
        assert_eq!(cap, ["a", "photo", "of", "checker", "kitchen"]);
        assert_eq!(cap, synth_caption(Some(&ViewMeta { scene: kitchen })).unwrap());
        assert!(synth_caption(None).is_err());
    }

    #[test]
    fn distinct_scenes_give_distinct_captions() {
        for a in 0..SCENES.len() {
            for b in 0..SCENES.len() {
                if a != b {
                    let ca = synth_caption(Some(&ViewMeta { scene: SceneId(a) })).unwrap();
                    let cb = synth_caption(Some(&ViewMeta { scene: SceneId(b) })).unwrap();
                    assert!(ca.iter().zip(&cb).any(|(x, y)| x != y));
                }
            }
        }
    }

    #[test]
    fn vocabulary_round_trip_and_oov() {
        let v = Vocabulary::standard();
        assert_eq!(v.id(PAD).unwrap(), 0);
        let toks = tokenize("walk past the kitchen, stop at the gym");
        assert_eq!(toks[3], "kitchen");
        assert_eq!(toks[4], ",");
        let ids = v.encode(&toks).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), toks);
        assert_eq!(detokenize(&toks), "walk past the kitchen, stop at the gym");
        assert!(v.id("spaceship").is_err());
    }

    #[test]
    fn single_token_encodes_to_projected_embedding() {
        let (enc, store) = encoder();
        let got = enc.encode_value(&store, &[7]).unwrap();
        let emb = store.get("txt.emb").unwrap();
        let row = Tensor::matrix(1, 6, emb.data()[7 * 6..8 * 6].to_vec()).unwrap();
        let want = crate::autodiff::matmul(&row, &store.get("txt.proj").unwrap().transpose2()).unwrap();
        for (a, b) in got.iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let (enc, store) = encoder();
        let a = enc.encode_value(&store, &[3, 9, 12, 20]).unwrap();
        let b = enc.encode_value(&store, &[20, 12, 3, 9]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(enc.encode_value(&store, &[]).is_err());
        assert!(enc.encode_value(&store, &[999]).is_err());
    }

    #[test]
    fn pooled_norm_bounded_by_max_embedding_norm() {
        let (enc, store) = encoder();
        let emb = store.get("txt.emb").unwrap();
        let max_norm = emb
            .data()
            .chunks(6)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let tape = Tape::new();
        let b = Binding::new(&tape, &store);
        let p = enc.pooled(&b, &[4, 5, 30, 31, 2]).unwrap().value();
        let n = p.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n.is_finite() && n <= max_norm + 1e-12);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (enc, store) = encoder();
        let worst = check_store_gradients(&store, |b| enc.encode(b, &[3, 8, 8, 21])?.tanh()?.sum());
        assert!(worst < 1e-4, "{worst}");
    }
}
