//! Procedural glyph-label editing benchmark and its template-matching reader.

pub mod dataset;
pub mod decode;
pub mod font;
pub mod render;

pub use dataset::{gen_dataset, load_split, Manifest, Split, StoredSample};
pub use decode::decode_glyphs;
pub use font::GlyphFont;
pub use render::{draw_label, render_sample, EditSample, SynthConfig};
