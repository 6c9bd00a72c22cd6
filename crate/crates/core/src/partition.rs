//! Index-set partition of the joint token sequence.
//!
//! The sequence is laid out as
//! `[global prompt | instance prompts 1..N | latent patches | context patches]`,
//! with both image blocks in raster order over the same patch grid.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An edit region in pixels (top-left origin) with its source and target text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub src: String,
    pub tgt: String,
}

impl BoxSpec {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self {
            x,
            y,
            w,
            h,
            src: String::new(),
            tgt: String::new(),
        }
    }

    pub fn with_text(mut self, src: &str, tgt: &str) -> Self {
        self.src = src.to_owned();
        self.tgt = tgt.to_owned();
        self
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn check_bounds(&self, index: usize, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.x + self.w > width || self.y + self.h > height {
            return Err(Error::BoxOutOfBounds {
                index,
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            });
        }
        Ok(())
    }
}

/// Raster indices of every patch sharing at least one pixel with `bbox`.
pub fn patchify_box(bbox: &BoxSpec, patch: usize, grid_h: usize, grid_w: usize) -> Result<Vec<usize>> {
    if patch == 0 || grid_h == 0 || grid_w == 0 {
        return Err(Error::Layout("patch size and grid must be positive".into()));
    }
    bbox.check_bounds(0, grid_w * patch, grid_h * patch)?;
    let (c0, c1) = (bbox.x / patch, (bbox.x + bbox.w - 1) / patch);
    let (r0, r1) = (bbox.y / patch, (bbox.y + bbox.h - 1) / patch);
    Ok((r0..=r1)
        .flat_map(|r| (c0..=c1).map(move |c| r * grid_w + c))
        .collect())
}

/// Token index sets of one editing task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLayout {
    pub seq_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    /// Global (utility) prompt tokens.
    pub t_g: Range<usize>,
    /// Per-instance prompt tokens.
    pub t_inst: Vec<Range<usize>>,
    /// Latent tokens outside every box.
    pub l_u: Vec<usize>,
    pub l_inst: Vec<Vec<usize>>,
    /// Context tokens outside every box.
    pub c_u: Vec<usize>,
    pub c_inst: Vec<Vec<usize>>,
}

impl PartitionLayout {
    pub fn num_instances(&self) -> usize {
        self.t_inst.len()
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn text_len(&self) -> usize {
        self.latent_range().start
    }

    pub fn latent_range(&self) -> Range<usize> {
        let start = self.seq_len - 2 * self.num_patches();
        start..start + self.num_patches()
    }

    pub fn context_range(&self) -> Range<usize> {
        let start = self.seq_len - self.num_patches();
        start..self.seq_len
    }

    /// Patch indices (relative to the grid) covered by instance `n`.
    pub fn instance_patches(&self, n: usize) -> Vec<usize> {
        let base = self.latent_range().start;
        self.l_inst[n].iter().map(|i| i - base).collect()
    }
}

/// Lays out the joint sequence for a task with `boxes.len()` instances.
pub fn build_layout(
    global_len: usize,
    inst_prompt_lens: &[usize],
    boxes: &[BoxSpec],
    patch: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<PartitionLayout> {
    if global_len == 0 {
        return Err(Error::Layout("global prompt must hold at least one token".into()));
    }
    if inst_prompt_lens.len() != boxes.len() {
        return Err(Error::Layout(format!(
            "{} instance prompts for {} boxes",
            inst_prompt_lens.len(),
            boxes.len()
        )));
    }
    if let Some(n) = inst_prompt_lens.iter().position(|&l| l == 0) {
        return Err(Error::Layout(format!("instance prompt {n} is empty")));
    }
    let (width, height) = (grid_w * patch, grid_h * patch);
    for (i, b) in boxes.iter().enumerate() {
        b.check_bounds(i, width, height)?;
    }

    let mut t_inst = Vec::with_capacity(boxes.len());
    let mut cursor = global_len;
    for &len in inst_prompt_lens {
        t_inst.push(cursor..cursor + len);
        cursor += len;
    }
    let patches = grid_h * grid_w;
    let latent_start = cursor;
    let context_start = cursor + patches;
    let seq_len = context_start + patches;

    let mut covered = vec![false; patches];
    let mut l_inst = Vec::with_capacity(boxes.len());
    let mut c_inst = Vec::with_capacity(boxes.len());
    for b in boxes {
        let cells = patchify_box(b, patch, grid_h, grid_w)?;
        for &p in &cells {
            covered[p] = true;
        }
        l_inst.push(cells.iter().map(|p| latent_start + p).collect());
        c_inst.push(cells.iter().map(|p| context_start + p).collect());
    }
    let free: Vec<usize> = (0..patches).filter(|&p| !covered[p]).collect();

    Ok(PartitionLayout {
        seq_len,
        grid_h,
        grid_w,
        patch,
        t_g: 0..global_len,
        t_inst,
        l_u: free.iter().map(|p| latent_start + p).collect(),
        l_inst,
        c_u: free.iter().map(|p| context_start + p).collect(),
        c_inst,
    })
}
