//! Attention masks for instance-disentangled joint attention.
//!
//! Two regimes are built from a [`PartitionLayout`]:
//!
//! * **disentangle** (`Regime::Dis`): global prompt, background latents and
//!   background context attend everything except instance-prompt keys; the
//!   prompt, latent and context tokens of instance `n` form a closed group.
//! * **harmonize** (`Regime::Har`): every non-prompt token attends every
//!   non-prompt token; instance prompt `n` attends only its own group.
//!
//! Group membership is existential: a token covered by two overlapping boxes
//! belongs to both groups. Note that `Har` is not a superset of `Dis`:
//! latent `n` → prompt `n` edges exist only under `Dis`.

mod oracle;
mod schedule;

pub use oracle::oracle_mask;
pub use schedule::{schedule, LayerSchedule, Regime, ABLATION_ROWS};

use crate::image::GrayImage;
use crate::partition::PartitionLayout;

/// Boolean attention pattern; `allowed(i, j)` means query `i` may attend key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    seq_len: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(seq_len: usize) -> Self {
        Self {
            seq_len,
            allowed: vec![true; seq_len * seq_len],
        }
    }

    pub fn from_fn(seq_len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(seq_len * seq_len);
        for i in 0..seq_len {
            for j in 0..seq_len {
                allowed.push(f(i, j));
            }
        }
        Self { seq_len, allowed }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.seq_len + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Additive form: 0 where allowed, −∞ where blocked.
    pub fn additive(&self, i: usize, j: usize) -> f64 {
        if self.allowed(i, j) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Per-token roles packed as instance bitsets, for fast mask construction.
struct TokenRoles {
    words: usize,
    /// Instances whose prompt/latent/context group contains the token.
    groups: Vec<u64>,
    /// Instance whose prompt contains the token.
    prompt_of: Vec<Option<usize>>,
}

impl TokenRoles {
    fn new(layout: &PartitionLayout) -> Self {
        let n = layout.num_instances();
        let words = n.div_ceil(64).max(1);
        let mut groups = vec![0u64; layout.seq_len * words];
        let mut prompt_of = vec![None; layout.seq_len];
        let mut set = |tok: usize, inst: usize| groups[tok * words + inst / 64] |= 1 << (inst % 64);
        for inst in 0..n {
            for tok in layout.t_inst[inst].clone() {
                set(tok, inst);
                prompt_of[tok] = Some(inst);
            }
            for &tok in layout.l_inst[inst].iter().chain(&layout.c_inst[inst]) {
                set(tok, inst);
            }
        }
        Self {
            words,
            groups,
            prompt_of,
        }
    }

    fn group(&self, tok: usize) -> &[u64] {
        &self.groups[tok * self.words..(tok + 1) * self.words]
    }

    fn is_free(&self, tok: usize) -> bool {
        self.group(tok).iter().all(|&w| w == 0)
    }

    fn share_group(&self, a: usize, b: usize) -> bool {
        self.group(a).iter().zip(self.group(b)).any(|(x, y)| x & y != 0)
    }

    fn in_group(&self, tok: usize, inst: usize) -> bool {
        self.group(tok)[inst / 64] & (1 << (inst % 64)) != 0
    }
}

/// Disentanglement mask.
pub fn build_dis(layout: &PartitionLayout) -> AttnMask {
    let roles = TokenRoles::new(layout);
    // free tokens are exactly T_g ∪ L_u ∪ C_u
    AttnMask::from_fn(layout.seq_len, |i, j| {
        (roles.is_free(i) && roles.prompt_of[j].is_none()) || roles.share_group(i, j)
    })
}

/// Harmonization mask.
pub fn build_har(layout: &PartitionLayout) -> AttnMask {
    let roles = TokenRoles::new(layout);
    AttnMask::from_fn(layout.seq_len, |i, j| match roles.prompt_of[i] {
        None => roles.prompt_of[j].is_none(),
        Some(n) => roles.in_group(j, n),
    })
}

pub fn build_mask(layout: &PartitionLayout, regime: Regime) -> AttnMask {
    match regime {
        Regime::Dis => build_dis(layout),
        Regime::Har => build_har(layout),
    }
}

pub const ALLOWED_GRAY: u8 = 128;

/// One pixel per (query, key): gray where allowed, black where blocked.
pub fn mask_to_image(mask: &AttnMask) -> GrayImage {
    let n = mask.seq_len();
    let data = mask
        .allowed
        .iter()
        .map(|&a| if a { ALLOWED_GRAY } else { 0 })
        .collect();
    GrayImage::new(n, n, data).expect("mask image dims are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{build_layout, BoxSpec};

    fn toy_layout() -> PartitionLayout {
        let boxes = [BoxSpec::new(0, 0, 4, 4), BoxSpec::new(0, 4, 4, 4)];
        build_layout(2, &[1, 1], &boxes, 4, 2, 1).unwrap()
    }

    #[test]
    fn dis_examples() {
        let m = build_dis(&toy_layout());
        assert!(m.allowed(0, 4));
        assert!(!m.allowed(0, 2));
        assert!(!m.allowed(2, 3));
        for j in [2, 4, 6] {
            assert!(m.allowed(2, j));
        }
        assert!(!m.allowed(4, 5));
    }

    #[test]
    fn har_examples() {
        let m = build_har(&toy_layout());
        assert!(m.allowed(4, 5));
        assert!(!m.allowed(4, 2));
        assert!(m.allowed(2, 4));
    }

    #[test]
    fn har_is_not_a_relaxation_of_dis() {
        let l = toy_layout();
        let (dis, har) = (build_dis(&l), build_har(&l));
        // latent 1 -> prompt 1 exists only under dis
        assert!(dis.allowed(4, 2) && !har.allowed(4, 2));
        assert!(dis.allowed(6, 2) && !har.allowed(6, 2));
    }

    #[test]
    fn no_instances_gives_full_masks() {
        let l = build_layout(8, &[], &[], 4, 2, 2).unwrap();
        assert!(build_dis(&l).is_full());
        assert!(build_har(&l).is_full());
    }

    #[test]
    fn additive_form() {
        let m = build_dis(&toy_layout());
        assert_eq!(m.additive(0, 4), 0.0);
        assert_eq!(m.additive(0, 2), f64::NEG_INFINITY);
    }

    #[test]
    fn mask_images() {
        let full = mask_to_image(&AttnMask::full(5));
        assert!(full.data().iter().all(|&v| v == ALLOWED_GRAY));
        let diag = mask_to_image(&AttnMask::from_fn(4, |i, j| i == j));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(diag.get(j, i), if i == j { ALLOWED_GRAY } else { 0 });
            }
        }
    }

    #[test]
    fn toy_dis_bitmap_matches_oracle_table() {
        let l = toy_layout();
        let img = mask_to_image(&build_dis(&l));
        // rows: query tokens 0..8 = [Tg Tg T1 T2 L1 L2 C1 C2]
        let table = [
            "11001111", "11001111", "00101010", "00010101", "00101010", "00010101", "00101010",
            "00010101",
        ];
        for (i, row) in table.iter().enumerate() {
            for (j, ch) in row.chars().enumerate() {
                let want = if ch == '1' { ALLOWED_GRAY } else { 0 };
                assert_eq!(img.get(j, i), want, "query {i} key {j}");
            }
        }
        let oracle = mask_to_image(&oracle_mask(&l, Regime::Dis));
        assert_eq!(img, oracle);
    }
}
