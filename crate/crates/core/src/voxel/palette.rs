use std::path::Path;

use crate::{file_err, Error, Result};

/// Class ID to display name and color. IDs are contiguous from 0, which is "empty".
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPalette {
    entries: Vec<(String, [u8; 3])>,
}

impl SemanticPalette {
    pub fn new(entries: Vec<(String, [u8; 3])>) -> Result<Self> {
        match entries.first() {
            Some((name, _)) if name == "empty" => Ok(Self { entries }),
            Some((name, _)) => Err(crate::invalid("palette", format!("class 0 must be \"empty\", found {name:?}"))),
            None => Err(crate::invalid("palette", "no classes")),
        }
    }

    /// The eight classes used by the synthetic scenes.
    pub fn toy() -> Self {
        let e = |n: &str, c: [u8; 3]| (n.to_string(), c);
        Self {
            entries: vec![
                e("empty", [0, 0, 0]),
                e("ground", [150, 240, 80]),
                e("road", [255, 0, 255]),
                e("building", [255, 200, 0]),
                e("pole", [255, 240, 150]),
                e("vegetation", [0, 175, 0]),
                e("vehicle", [100, 150, 245]),
                e("other", [90, 30, 150]),
            ],
        }
    }

    /// SemanticKITTI's 20 training classes with their usual colors.
    pub fn semantic_kitti() -> Self {
        let names: [(&str, [u8; 3]); 20] = [
            ("empty", [0, 0, 0]),
            ("car", [100, 150, 245]),
            ("bicycle", [100, 230, 245]),
            ("motorcycle", [30, 60, 150]),
            ("truck", [80, 30, 180]),
            ("other-vehicle", [0, 0, 255]),
            ("person", [255, 30, 30]),
            ("bicyclist", [255, 40, 200]),
            ("motorcyclist", [150, 30, 90]),
            ("road", [255, 0, 255]),
            ("parking", [255, 150, 255]),
            ("sidewalk", [75, 0, 75]),
            ("other-ground", [175, 0, 75]),
            ("building", [255, 200, 0]),
            ("fence", [255, 120, 50]),
            ("vegetation", [0, 175, 0]),
            ("trunk", [135, 60, 0]),
            ("terrain", [150, 240, 80]),
            ("pole", [255, 240, 150]),
            ("traffic-sign", [255, 0, 0]),
        ];
        Self {
            entries: names.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
        }
    }

    /// Parses lines of `id name r g b`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| crate::invalid("palette", format!("line {}: {msg}", lineno + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad("expected `id name r g b`"));
            }
            let id: usize = f[0].parse().map_err(|_| bad("bad id"))?;
            if id != entries.len() {
                return Err(bad(&format!("ids must be contiguous from 0, expected {}", entries.len())));
            }
            let mut rgb = [0u8; 3];
            for (c, s) in rgb.iter_mut().zip(&f[2..]) {
                *c = s.parse().map_err(|_| bad("bad color component"))?;
            }
            entries.push((f[1].to_string(), rgb));
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(file_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Invalid { msg, .. } => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            e => e,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        self.entries.get(id as usize).map(|(n, _)| n.as_str())
    }

    pub fn color(&self, id: u16) -> Option<[u8; 3]> {
        self.entries.get(id as usize).map(|(_, c)| *c)
    }
}
