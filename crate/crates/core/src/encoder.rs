//! Glyph-level prompt encoding.
//!
//! The conditioning sequence is a fixed-length utility prompt (all `NULL`
//! tokens) followed by one independently encoded, variable-length prompt per
//! instance. Instance prompts carry only the target string.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BOS: usize = 16;
pub const EOS: usize = 17;
pub const NULL: usize = 18;
pub const VOCAB_SIZE: usize = 19;
pub const DEFAULT_ALPHABET: &str = "ABCDEFGHIJKLMNOP";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphVocab {
    pub alphabet: Vec<char>,
    pub max_str_len: usize,
}

impl Default for GlyphVocab {
    fn default() -> Self {
        Self {
            alphabet: DEFAULT_ALPHABET.chars().collect(),
            max_str_len: 6,
        }
    }
}

impl GlyphVocab {
    pub fn id(&self, c: char) -> Result<usize> {
        self.alphabet
            .iter()
            .position(|&a| a == c)
            .ok_or(Error::UnknownGlyph(c))
    }

    pub fn glyph(&self, id: usize) -> Option<char> {
        self.alphabet.get(id).copied()
    }
}

/// `[BOS, glyph ids…, EOS]`, never padded.
pub fn encode_instance_prompt(tgt: &str, vocab: &GlyphVocab) -> Result<Vec<usize>> {
    if tgt.chars().count() > vocab.max_str_len {
        return Err(Error::StringTooLong(tgt.to_owned(), vocab.max_str_len));
    }
    let mut ids = Vec::with_capacity(tgt.len() + 2);
    ids.push(BOS);
    for c in tgt.chars() {
        ids.push(vocab.id(c)?);
    }
    ids.push(EOS);
    Ok(ids)
}

/// How instance prompts are sized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptPadding {
    /// Each prompt is as long as its content.
    #[default]
    Variable,
    /// Each prompt is padded with `NULL` to `max_str_len + 2` tokens.
    Fixed,
}

/// Token ids of the full text block plus its segment boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptBundle {
    pub token_ids: Vec<usize>,
    pub global_len: usize,
    pub inst_lens: Vec<usize>,
}

impl PromptBundle {
    pub fn total_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn num_instances(&self) -> usize {
        self.inst_lens.len()
    }

    /// Ids of segment `k`: 0 is the utility prompt, `n ≥ 1` is instance `n`.
    pub fn segment(&self, k: usize) -> &[usize] {
        let start = if k == 0 {
            0
        } else {
            self.global_len + self.inst_lens[..k - 1].iter().sum::<usize>()
        };
        let len = if k == 0 { self.global_len } else { self.inst_lens[k - 1] };
        &self.token_ids[start..start + len]
    }

    /// Position of each token in the text block.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.total_len()).collect()
    }

    /// Position of each token inside its own segment.
    pub fn segment_positions(&self) -> Vec<usize> {
        let mut pos: Vec<usize> = (0..self.global_len).collect();
        for &l in &self.inst_lens {
            pos.extend(0..l);
        }
        pos
    }

    /// Looks every token up in an embedding table of `VOCAB_SIZE` rows.
    pub fn embeddings(&self, table: &Tensor) -> Result<Tensor> {
        if table.rows() != VOCAB_SIZE {
            return Err(Error::Shape(format!(
                "embedding table has {} rows, vocabulary {VOCAB_SIZE}",
                table.rows()
            )));
        }
        let data: Vec<f64> = self
            .token_ids
            .iter()
            .flat_map(|&id| table.row(id).iter().copied())
            .collect();
        Tensor::new(vec![self.total_len(), table.cols()], data)
    }
}

pub fn assemble(global_len: usize, instance_strings: &[&str], vocab: &GlyphVocab) -> Result<PromptBundle> {
    assemble_with(global_len, instance_strings, vocab, PromptPadding::Variable)
}

pub fn assemble_with(
    global_len: usize,
    instance_strings: &[&str],
    vocab: &GlyphVocab,
    padding: PromptPadding,
) -> Result<PromptBundle> {
    if global_len == 0 {
        return Err(Error::Layout("utility prompt needs at least one token".into()));
    }
    let mut token_ids = vec![NULL; global_len];
    let mut inst_lens = Vec::with_capacity(instance_strings.len());
    for s in instance_strings {
        let mut ids = encode_instance_prompt(s, vocab)?;
        if padding == PromptPadding::Fixed {
            ids.resize(vocab.max_str_len + 2, NULL);
        }
        inst_lens.push(ids.len());
        token_ids.extend(ids);
    }
    Ok(PromptBundle {
        token_ids,
        global_len,
        inst_lens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{build_layout, BoxSpec};
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        let v = GlyphVocab::default();
        assert_eq!(encode_instance_prompt("AB", &v).unwrap(), vec![16, 0, 1, 17]);
        assert_eq!(encode_instance_prompt("", &v).unwrap(), vec![16, 17]);
        assert!(matches!(encode_instance_prompt("AZ", &v), Err(Error::UnknownGlyph('Z'))));
        assert!(matches!(encode_instance_prompt("ABCDEFG", &v), Err(Error::StringTooLong(..))));
    }

    #[test]
    fn assemble_lengths() {
        let v = GlyphVocab::default();
        let b = assemble(8, &["AB", "C"], &v).unwrap();
        assert_eq!(b.total_len(), 15);
        assert_eq!(b.inst_lens, vec![4, 3]);
        assert_eq!(b.segment(0), &[NULL; 8]);
        assert_eq!(b.segment(2), &[BOS, 2, EOS]);
        assert_eq!(b.positions()[8..], [8, 9, 10, 11, 12, 13, 14]);
        assert_eq!(b.segment_positions()[8..], [0, 1, 2, 3, 0, 1, 2]);
    }

    #[test]
    fn instance_segments_are_independent() {
        let v = GlyphVocab::default();
        let mut rng = rand::rng();
        let table = Tensor::randn(&[VOCAB_SIZE, 5], 1.0, &mut rng);
        let a = assemble(8, &["AB", "C"], &v).unwrap();
        let b = assemble(8, &["AB", "PPPP"], &v).unwrap();
        let ea = a.embeddings(&table).unwrap();
        let eb = b.embeddings(&table).unwrap();
        // rows 8..12 hold instance 1 in both bundles
        assert_eq!(&ea.data()[8 * 5..12 * 5], &eb.data()[8 * 5..12 * 5]);
        assert_eq!(a.segment(1), b.segment(1));
    }

    #[test]
    fn no_instances() {
        let b = assemble(8, &[], &GlyphVocab::default()).unwrap();
        assert_eq!(b.token_ids, vec![NULL; 8]);
        assert!(b.inst_lens.is_empty());
    }

    #[test]
    fn fixed_padding_for_comparison() {
        let v = GlyphVocab::default();
        let b = assemble_with(4, &["A", "BCD"], &v, PromptPadding::Fixed).unwrap();
        assert_eq!(b.inst_lens, vec![8, 8]);
        assert_eq!(b.total_len(), 20);
    }

    proptest! {
        #[test]
        fn encoded_length(s in "[A-P]{0,6}") {
            let ids = encode_instance_prompt(&s, &GlyphVocab::default()).unwrap();
            prop_assert_eq!(ids.len(), s.len() + 2);
        }

        #[test]
        fn segments_agree_with_layout(strings in prop::collection::vec("[A-P]{0,6}", 0..4), glen in 1usize..10) {
            let v = GlyphVocab::default();
            let refs: Vec<&str> = strings.iter().map(String::as_str).collect();
            let bundle = assemble(glen, &refs, &v).unwrap();
            let boxes: Vec<BoxSpec> = (0..refs.len()).map(|i| BoxSpec::new(4 * i, 0, 4, 4)).collect();
            let layout = build_layout(glen, &bundle.inst_lens, &boxes, 4, 3, 4).unwrap();
            prop_assert_eq!(layout.t_g.clone(), 0..bundle.global_len);
            prop_assert_eq!(layout.text_len(), bundle.total_len());
            let mut start = glen;
            for (n, r) in layout.t_inst.iter().enumerate() {
                prop_assert_eq!(r.clone(), start..start + bundle.inst_lens[n]);
                prop_assert_eq!(bundle.segment(n + 1), &bundle.token_ids[r.clone()]);
                start = r.end;
            }
            let again = assemble(glen, &refs, &v).unwrap();
            prop_assert_eq!(bundle, again);
        }
    }
}
