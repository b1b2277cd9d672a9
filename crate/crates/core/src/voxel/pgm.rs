//! Binary PGM (P5, 8-bit) rasters for sketches and PSA maps.

use std::path::Path;

use super::{ClassMap, Map2};
use crate::{file_err, invalid, Error, Result, Tensor};

/// Sketch edge map plus pseudo-labeled annotation map over the same `L×W` footprint.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPair {
    sketch: Map2<u8>,
    psa: ClassMap,
    num_classes: u16,
}

impl ConditionPair {
    pub fn new(sketch: Map2<u8>, psa: ClassMap, num_classes: u16) -> Result<Self> {
        if (sketch.rows(), sketch.cols()) != (psa.rows(), psa.cols()) {
            return Err(invalid(
                "condition pair",
                format!(
                    "sketch is {}x{} but psa is {}x{}",
                    sketch.rows(),
                    sketch.cols(),
                    psa.rows(),
                    psa.cols()
                ),
            ));
        }
        if let Some(v) = sketch.data().iter().find(|&&v| v != 0 && v != 255) {
            return Err(invalid("condition pair", format!("sketch value {v} is not 0 or 255")));
        }
        if let Some(v) = psa.data().iter().find(|&&v| v >= num_classes) {
            return Err(invalid("condition pair", format!("psa class {v} is not below {num_classes}")));
        }
        Ok(Self {
            sketch,
            psa,
            num_classes,
        })
    }

    /// An all-empty condition.
    pub fn blank(rows: usize, cols: usize, num_classes: u16) -> Self {
        Self {
            sketch: Map2::filled(rows, cols, 0),
            psa: Map2::filled(rows, cols, 0),
            num_classes,
        }
    }

    pub fn sketch(&self) -> &Map2<u8> {
        &self.sketch
    }

    pub fn psa(&self) -> &ClassMap {
        &self.psa
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    /// Channel count of [`ConditionPair::lift`]: one sketch channel plus one-hot PSA.
    pub fn lifted_channels(num_classes: u16) -> usize {
        1 + num_classes as usize
    }

    /// Replicates the 2D maps along a new height axis: `(1 + C, L, W, height)`.
    ///
    /// Channel 0 is the sketch scaled to {0, 1}; channels `1..=C` one-hot encode the PSA.
    pub fn lift(&self, height: usize) -> Tensor {
        let (l, w) = (self.sketch.rows(), self.sketch.cols());
        let plane = l * w * height;
        let c = Self::lifted_channels(self.num_classes);
        let mut data = vec![0.0; c * plane];
        for x in 0..l {
            for y in 0..w {
                let base = (x * w + y) * height;
                let edge = if self.sketch.get(x, y) == 255 { 1.0 } else { 0.0 };
                let cls = 1 + self.psa.get(x, y) as usize;
                for z in 0..height {
                    data[base + z] = edge;
                    data[cls * plane + base + z] = 1.0;
                }
            }
        }
        Tensor::new(vec![c, l, w, height], data).expect("lift shape")
    }
}

fn header_tokens(bytes: &[u8]) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    (i < bytes.len()).then_some((tokens, i + 1))
}

fn decode_pgm(bytes: &[u8]) -> Result<Map2<u8>, String> {
    let (tokens, start) = header_tokens(bytes).ok_or("truncated PGM header")?;
    if tokens[0] != "P5" {
        return Err(format!("expected binary PGM magic P5, found {:?}", tokens[0]));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let cols = parse(&tokens[1], "width")?;
    let rows = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} is not an 8-bit PGM"));
    }
    let raster = &bytes[start..];
    if raster.len() != rows * cols {
        return Err(format!("expected {} raster bytes, found {}", rows * cols, raster.len()));
    }
    Map2::new(rows, cols, raster.to_vec()).map_err(|e| e.to_string())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Map2<u8>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    decode_pgm(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// Writes `map` as P5 with width = columns and height = rows.
pub fn write_pgm(path: impl AsRef<Path>, map: &Map2<u8>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    bytes.extend_from_slice(map.data());
    std::fs::write(path, bytes).map_err(file_err(path))
}

pub fn read_condition_pair(
    sketch_path: impl AsRef<Path>,
    psa_path: impl AsRef<Path>,
    num_classes: u16,
) -> Result<ConditionPair> {
    let sketch = read_pgm(sketch_path)?;
    let psa = read_pgm(psa_path)?.map(u16::from);
    ConditionPair::new(sketch, psa, num_classes)
}
