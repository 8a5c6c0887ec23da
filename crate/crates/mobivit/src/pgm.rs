//! Binary PGM (P5) output and P5/P6 input.

use mobivit_core::merge::GrayGrid;
use mobivit_core::{Error as CoreError, Tensor};

/// `P5` header plus row-major 8-bit pixels.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must match dimensions");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Grid encoded as PGM, each cell drawn as a `scale×scale` block.
pub fn encode_grid(grid: &GrayGrid, scale: usize) -> Vec<u8> {
    let s = scale.max(1);
    let (h, w) = (grid.height * s, grid.width * s);
    let pixels: Vec<u8> = (0..h * w)
        .map(|j| grid.pixels[(j / w / s) * grid.width + (j % w) / s])
        .collect();
    encode_pgm(w, h, &pixels)
}

/// A decoded P5 (gray) or P6 (RGB) image with samples rescaled to 0..=255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Pnm {
    /// `[3×H×W]` in `[0, 1]`; gray images are replicated across channels.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |j| {
            let (c, p) = (j / plane, j % plane);
            let ch = if self.channels == 1 { 0 } else { c };
            self.pixels[p * self.channels + ch] as f64 / 255.0
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> CoreError {
        CoreError::Format {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize, CoreError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("expected a decimal header field"))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm, CoreError> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("not a binary PGM (P5) or PPM (P6) file")),
    };
    c.pos = 2;
    let width = c.number()?;
    let height = c.number()?;
    let maxval = c.number()?;
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(c.err(format!("maxval {maxval} unsupported (8-bit samples only)")));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("missing whitespace after header"));
    }
    c.pos += 1;
    let n = width * height * channels;
    let data = &bytes[c.pos..];
    if data.len() != n {
        return Err(CoreError::Format {
            offset: c.pos + data.len().min(n),
            reason: format!("expected {n} sample bytes, found {}", data.len()),
        });
    }
    let pixels = data
        .iter()
        .map(|&v| {
            if v as usize > maxval {
                Err(c.err(format!("sample {v} above maxval {maxval}")))
            } else {
                Ok(((v as usize * 255 + maxval / 2) / maxval) as u8)
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(Pnm {
        width,
        height,
        channels,
        pixels,
    })
}
