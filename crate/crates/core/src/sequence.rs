//! Sequences, block geometry and decode state.
//!
//! Positions are absolute indices into the full sequence, prompt included.
//! The generation window is `[prompt_len, prompt_len + gen_len)` and is split
//! into `gen_len / block_len` contiguous blocks, numbered from 1.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Dense token identifier in `[0, vocab.size)`.
pub type TokenId = u32;

/// Sentinel used for masked positions unless a vocabulary says otherwise.
pub const MASK: TokenId = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: u32,
    pub mask_id: TokenId,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self, ConfigError> {
        Self::with_mask(size, MASK)
    }

    pub fn with_mask(size: u32, mask_id: TokenId) -> Result<Self, ConfigError> {
        if size < 2 {
            return Err(ConfigError::VocabTooSmall(size));
        }
        if mask_id < size {
            return Err(ConfigError::MaskCollides { mask_id, size });
        }
        Ok(Self { size, mask_id })
    }

    pub fn len(&self) -> usize {
        self.size as usize
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token < self.size
    }
}

/// Splits the generation window into `gen_len / block_len` half-open ranges.
pub fn partition_blocks(
    gen_len: usize,
    block_len: usize,
    prompt_len: usize,
) -> Result<Vec<Range<usize>>, ConfigError> {
    if gen_len == 0 {
        return Err(ConfigError::EmptyGeneration);
    }
    if block_len == 0 || gen_len % block_len != 0 {
        return Err(ConfigError::BlockMismatch { gen_len, block_len });
    }
    Ok((0..gen_len / block_len)
        .map(|b| prompt_len + b * block_len..prompt_len + (b + 1) * block_len)
        .collect())
}

/// Token array with mask sentinels and its block layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    prompt_len: usize,
    gen_len: usize,
    block_len: usize,
    mask_id: TokenId,
    tokens: Vec<TokenId>,
}

impl MaskedSequence {
    pub fn new(
        prompt: &[TokenId],
        gen_len: usize,
        block_len: usize,
        vocab: Vocabulary,
    ) -> Result<Self, ConfigError> {
        partition_blocks(gen_len, block_len, prompt.len())?;
        if let Some(&bad) = prompt.iter().find(|&&t| !vocab.contains(t)) {
            return Err(ConfigError::BadPromptToken(bad));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(prompt.len() + gen_len, vocab.mask_id);
        Ok(Self {
            prompt_len: prompt.len(),
            gen_len,
            block_len,
            mask_id: vocab.mask_id,
            tokens,
        })
    }

    /// Builds a sequence from explicit generated tokens; entries equal to
    /// the vocabulary's mask id stay masked.
    pub fn from_generated(
        prompt: &[TokenId],
        generated: &[TokenId],
        block_len: usize,
        vocab: Vocabulary,
    ) -> Result<Self, ConfigError> {
        let mut seq = Self::new(prompt, generated.len(), block_len, vocab)?;
        for (i, &t) in generated.iter().enumerate() {
            if t != vocab.mask_id {
                if !vocab.contains(t) {
                    return Err(ConfigError::invalid(format!("token {t} outside vocabulary")));
                }
                seq.tokens[prompt.len() + i] = t;
            }
        }
        Ok(seq)
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn gen_len(&self) -> usize {
        self.gen_len
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn num_blocks(&self) -> usize {
        self.gen_len / self.block_len
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn window(&self) -> Range<usize> {
        self.prompt_len..self.prompt_len + self.gen_len
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.tokens.get(position) == Some(&self.mask_id)
    }

    pub fn is_complete(&self) -> bool {
        !self.generated().contains(&self.mask_id)
    }

    /// Half-open range of block `b` (1-based).
    pub fn block(&self, b: usize) -> Range<usize> {
        assert!(b >= 1 && b <= self.num_blocks(), "block {b} out of range");
        let start = self.prompt_len + (b - 1) * self.block_len;
        start..start + self.block_len
    }

    /// 1-based block index holding a generated position.
    pub fn block_of(&self, position: usize) -> usize {
        debug_assert!(self.window().contains(&position));
        (position - self.prompt_len) / self.block_len + 1
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.window().filter(move |&p| self.tokens[p] == self.mask_id)
    }

    /// Writes a token into a masked generated position.
    pub(crate) fn unmask(&mut self, position: usize, token: TokenId) {
        debug_assert!(self.window().contains(&position));
        debug_assert!(self.is_masked(position));
        debug_assert_ne!(token, self.mask_id);
        self.tokens[position] = token;
    }

    /// Sequence with the given generated tokens and no masks.
    pub fn filled(&self, generated: &[TokenId]) -> Self {
        assert_eq!(generated.len(), self.gen_len);
        let mut out = self.clone();
        out.tokens[self.prompt_len..].copy_from_slice(generated);
        out
    }
}

/// Mutable decode state owned by one scheduler run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub(crate) seq: MaskedSequence,
    pub(crate) step: u64,
    pub(crate) active_block: usize,
    pub(crate) masked: BTreeSet<usize>,
    pub(crate) rng_seed: u64,
}

impl DecodeState {
    pub fn seq(&self) -> &MaskedSequence {
        &self.seq
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn active_block(&self) -> usize {
        self.active_block
    }

    pub fn masked_set(&self) -> &BTreeSet<usize> {
        &self.masked
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn is_fresh(&self) -> bool {
        self.masked.len() == self.seq.gen_len()
    }

    pub(crate) fn set_active_block(&mut self, b: usize) {
        debug_assert!(b >= 1 && b <= self.seq.num_blocks());
        self.active_block = b;
    }

    pub(crate) fn advance(&mut self, steps: u64) {
        self.step += steps;
    }

    /// Commits a token at a masked position. Returns false if the position
    /// was not masked.
    pub(crate) fn commit(&mut self, position: usize, token: TokenId) -> bool {
        if !self.masked.remove(&position) {
            return false;
        }
        self.seq.unmask(position, token);
        true
    }

    /// Masked positions of block `b`.
    pub fn masked_in_block(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        self.masked.range(self.seq.block(b)).copied()
    }
}

/// Builds the all-masked starting state `prompt ++ [M]^gen_len`.
pub fn make_initial_state(
    prompt: &[TokenId],
    gen_len: usize,
    block_len: usize,
    vocab: Vocabulary,
    seed: u64,
) -> Result<DecodeState, ConfigError> {
    let seq = MaskedSequence::new(prompt, gen_len, block_len, vocab)?;
    let masked = seq.window().collect();
    Ok(DecodeState {
        seq,
        step: 0,
        active_block: 1,
        masked,
        rng_seed: seed,
    })
}
