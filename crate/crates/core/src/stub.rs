//! Small trainable stand-in for the multimodal language model: pooled
//! content features plus a prompt produce a fixed five-slot hidden sequence,
//! a language head scores the answer tokens, and the hidden state at the
//! `[SEG]` slot is projected into the decoder space.
//!
//! Hidden slots hold the template inputs `[BOS, class, type, [SEG], EOS]`;
//! the logits at slot `i` predict answer token `i`, one step ahead, so the
//! class token is read from slot 0 and the `[SEG]` state sits at slot 3.

use std::collections::HashMap;
use std::fmt;

use crate::backbone::ContentFeatureMap;
use crate::nn::{Graph, LayerNorm, Linear, Mlp2, ParamId, ParamInit, ParamStore};
use crate::tensor::{Real, Result, TensorError, Var};

pub const SEQ_LEN: usize = 5;
pub const SEG_POSITION: usize = 3;
/// Answer position carrying `<REAL>` / `<FAKE>`.
pub const CLASS_SLOT: usize = 0;
pub const TYPE_SLOT: usize = 1;

pub const PAD: &str = "<PAD>";
pub const EOS: &str = "<EOS>";
pub const SEG: &str = "[SEG]";
pub const NOSEG: &str = "[NOSEG]";
pub const REAL: &str = "<REAL>";
pub const FAKE: &str = "<FAKE>";
pub const NONE: &str = "none";
pub const SPLICE: &str = "splice";
pub const COPY_MOVE: &str = "copy-move";
pub const REMOVE: &str = "remove";

pub const SPECIAL: [&str; 6] = [PAD, EOS, SEG, NOSEG, REAL, FAKE];
const WORDS: [&str; 16] = [
    NONE, SPLICE, COPY_MOVE, REMOVE, "is", "this", "image", "real", "or", "fake", "?", "if", "so", "segment", "the",
    "tampered-region",
];

/// Default detection request.
pub const DEFAULT_PROMPT: &str = "is this image real or fake ? if so segment the tampered-region";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn contains(&self, id: TokenId) -> bool {
        self.0.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing special token {0:?}")]
    MissingSpecial(&'static str),
}

/// Ordered token list. Ids are line positions in the vocabulary file.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    special: Vec<bool>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let entries = SPECIAL
            .iter()
            .map(|t| (t.to_string(), true))
            .chain(WORDS.iter().map(|t| (t.to_string(), false)));
        Vocabulary::from_entries(entries).expect("built-in vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, bool)>) -> std::result::Result<Self, VocabError> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            special: Vec::new(),
            index: HashMap::new(),
        };
        for (tok, special) in entries {
            if v.index.contains_key(&tok) {
                return Err(VocabError::Duplicate(tok));
            }
            v.index.insert(tok.clone(), TokenId(v.tokens.len() as u32));
            v.tokens.push(tok);
            v.special.push(special);
        }
        for s in SPECIAL {
            match v.index.get(s) {
                Some(id) if v.special[id.index()] => {}
                _ => return Err(VocabError::MissingSpecial(s)),
            }
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> std::result::Result<TokenId, VocabError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| VocabError::UnknownToken(token.to_string()))
    }

    /// Id of a token the vocabulary is guaranteed to hold.
    pub fn special(&self, token: &'static str) -> TokenId {
        self.index[token]
    }

    pub fn token(&self, id: TokenId) -> std::result::Result<&str, VocabError> {
        self.tokens
            .get(id.index())
            .map(String::as_str)
            .ok_or(VocabError::IdOutOfRange {
                id: id.0,
                size: self.len(),
            })
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special.get(id.index()).copied().unwrap_or(false)
    }

    pub fn encode(&self, text: &str) -> std::result::Result<TokenSequence, VocabError> {
        text.split_whitespace().map(|t| self.id(t)).collect::<std::result::Result<_, _>>().map(TokenSequence)
    }

    pub fn decode(&self, seq: &TokenSequence) -> std::result::Result<String, VocabError> {
        let words = seq.0.iter().map(|&id| self.token(id)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    /// One token per line; special tokens carry a tab and `special`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (t, &sp) in self.tokens.iter().zip(&self.special) {
            s.push_str(t);
            if sp {
                s.push_str("\tspecial");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, VocabError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, special) = match line.split_once('\t') {
                Some((t, "special")) => (t, true),
                Some((_, m)) => {
                    return Err(VocabError::Parse {
                        line: i + 1,
                        reason: format!("unknown marker {m:?}"),
                    })
                }
                None => (line, false),
            };
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(VocabError::Parse {
                    line: i + 1,
                    reason: format!("invalid token {tok:?}"),
                });
            }
            entries.push((tok.to_string(), special));
        }
        Vocabulary::from_entries(entries)
    }
}

/// Token ids of the detection request.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    ids: Vec<TokenId>,
}

impl PromptSpec {
    pub fn new(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "prompt",
                reason: "empty prompt".into(),
            });
        }
        if let Some(bad) = ids.iter().find(|id| id.index() >= vocab.len()) {
            return Err(TensorError::InvalidArgument {
                op: "prompt",
                reason: format!("token id {} outside vocabulary of {}", bad.0, vocab.len()),
            });
        }
        Ok(PromptSpec { ids })
    }

    pub fn default_for(vocab: &Vocabulary) -> Self {
        let seq = vocab.encode(DEFAULT_PROMPT).expect("default prompt uses vocabulary words");
        PromptSpec { ids: seq.0 }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HiddenStates {
    /// `[SEQ_LEN, d_llm]`
    pub states: Var,
    pub seg_position: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SegPromptEmbedding {
    /// `[1, d_dec]`
    pub embedding: Var,
}

#[derive(Debug, Clone)]
pub struct StubConfig {
    pub content_dim: usize,
    pub prompt_dim: usize,
    pub d_llm: usize,
    pub hidden: usize,
    pub d_dec: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone)]
pub struct MllmStub {
    pub cfg: StubConfig,
    pub prompt_embed: ParamId,
    pub fuse: Mlp2,
    pub slot_embed: ParamId,
    pub norm: LayerNorm,
    pub lm_head: Linear,
    pub gamma: Mlp2,
}

impl MllmStub {
    pub fn new(init: &mut ParamInit, name: &str, cfg: StubConfig) -> Self {
        init.scoped(name, |init| MllmStub {
            prompt_embed: init.normal("prompt_embed", &[cfg.vocab_size, cfg.prompt_dim], 1.0),
            fuse: Mlp2::new(init, "fuse", cfg.content_dim + cfg.prompt_dim, cfg.hidden, SEQ_LEN * cfg.d_llm),
            slot_embed: init.normal("slot_embed", &[SEQ_LEN, cfg.d_llm], 1.0),
            norm: LayerNorm::new(init, "norm", cfg.d_llm),
            lm_head: Linear::new(init, "lm_head", cfg.d_llm, cfg.vocab_size, true),
            gamma: Mlp2::new(init, "gamma", cfg.d_llm, 2 * cfg.d_llm, cfg.d_dec),
            cfg,
        })
    }

    /// Hidden states `[SEQ_LEN, d_llm]` and token logits `[SEQ_LEN, vocab]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        content: &ContentFeatureMap,
        prompt: &PromptSpec,
    ) -> Result<(HiddenStates, Var)> {
        let pooled = g.tape.reduce(content.features, crate::tensor::Reduce::Mean, Some(0))?;
        let pooled = g.tape.reshape(pooled, &[1, self.cfg.content_dim])?;
        // Mean prompt embedding as a constant-weight matmul with the table.
        let mut weights = vec![T::zero(); self.cfg.vocab_size];
        let w = T::of(1.0 / prompt.ids().len() as f64);
        for id in prompt.ids() {
            weights[id.index()] += w;
        }
        let sel = g.tape.constant(&[1, self.cfg.vocab_size], weights)?;
        let table = g.param(self.prompt_embed);
        let p = g.tape.matmul(sel, table)?;
        let x = g.tape.concat(&[pooled, p], 1)?;
        let h = self.fuse.forward(g, x)?;
        let h = g.tape.reshape(h, &[SEQ_LEN, self.cfg.d_llm])?;
        let slots = g.param(self.slot_embed);
        let h = g.tape.add(h, slots)?;
        let h = self.norm.forward(g, h)?;
        let logits = self.lm_head.forward(g, h)?;
        Ok((
            HiddenStates {
                states: h,
                seg_position: SEG_POSITION,
            },
            logits,
        ))
    }

    /// `γ(h̃[seg_position])` as a `[1, d_dec]` row.
    pub fn seg_embedding<T: Real>(&self, g: &mut Graph<'_, T>, h: &HiddenStates) -> Result<SegPromptEmbedding> {
        let rows = g.tape.shape(h.states)[0];
        if h.seg_position >= rows {
            return Err(TensorError::InvalidArgument {
                op: "seg_embedding",
                reason: format!("seg position {} outside {rows} hidden rows", h.seg_position),
            });
        }
        let row = g.tape.slice(h.states, 0, h.seg_position, 1)?;
        let e = self.gamma.forward(g, row)?;
        Ok(SegPromptEmbedding { embedding: e })
    }

    /// Sets `γ` to the exact identity `gelu(x) − gelu(−x) = x`, which needs
    /// `d_llm == d_dec`.
    pub fn set_gamma_identity<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let d = self.cfg.d_llm;
        if self.cfg.d_dec != d {
            return Err(TensorError::InvalidArgument {
                op: "set_gamma_identity",
                reason: format!("d_llm {d} != d_dec {}", self.cfg.d_dec),
            });
        }
        let fc1 = store.get_mut(self.gamma.fc1.weight).data_mut();
        fc1.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..d {
            fc1[i * 2 * d + i] = T::one();
            fc1[i * 2 * d + d + i] = -T::one();
        }
        let fc2 = store.get_mut(self.gamma.fc2.weight).data_mut();
        fc2.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..d {
            fc2[i * d + i] = T::one();
            fc2[(d + i) * d + i] = -T::one();
        }
        for b in [self.gamma.fc1.bias, self.gamma.fc2.bias].into_iter().flatten() {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(())
    }
}

/// Greedy argmax per row of `[len, vocab]` logits; ties go to the lower id.
pub fn decode_text<T: Real>(logits: &[T], vocab_size: usize) -> TokenSequence {
    TokenSequence(
        logits
            .chunks_exact(vocab_size)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                TokenId(best as u32)
            })
            .collect(),
    )
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.0.iter().map(|t| t.0.to_string()).collect();
        write!(f, "{}", ids.join(" "))
    }
}
