//! Edit instruction files: `{"image": "...", "boxes": [{"x","y","w","h","src","tgt"}, ...]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::BoxSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instructions {
    pub image: String,
    pub boxes: Vec<BoxSpec>,
}

impl Instructions {
    /// Parses and reports schema violations as `line L column C: message`.
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("instructions line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        self.boxes
            .iter()
            .enumerate()
            .try_for_each(|(i, b)| b.check_bounds(i, width, height))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schema() {
        let text = r#"{"image": "a.ppm", "boxes": [{"x": 0, "y": 6, "w": 8, "h": 6, "src": "AB", "tgt": "CD"}]}"#;
        let ins = Instructions::parse(text).unwrap();
        assert_eq!(ins.boxes[0], BoxSpec::new(0, 6, 8, 6).with_text("AB", "CD"));
        assert_eq!(Instructions::parse(&ins.to_json()).unwrap(), ins);
    }

    #[test]
    fn empty_box_list() {
        let ins = Instructions::parse(r#"{"image": "a.ppm", "boxes": []}"#).unwrap();
        assert!(ins.boxes.is_empty());
    }

    #[test]
    fn diagnostics_name_line_and_field() {
        let text = "{\"image\": \"a.ppm\",\n \"boxes\": [{\"x\": 0, \"y\": 0, \"w\": 4, \"h\": 6, \"src\": \"A\"}]}";
        let msg = Instructions::parse(text).unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("tgt"), "{msg}");
        let msg = Instructions::parse(r#"{"image": "a", "boxes": [], "extra": 1}"#).unwrap_err().to_string();
        assert!(msg.contains("extra"), "{msg}");
        let msg = Instructions::parse(r#"{"image": "a", "boxes": [{"x": -1, "y": 0, "w": 4, "h": 6, "src": "", "tgt": ""}]}"#)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn bounds() {
        let ins = Instructions {
            image: "a".into(),
            boxes: vec![BoxSpec::new(44, 0, 8, 6)],
        };
        assert!(matches!(ins.check_bounds(48, 48), Err(Error::BoxOutOfBounds { index: 0, .. })));
    }
}
