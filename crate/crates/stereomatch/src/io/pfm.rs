//! Portable float map (PFM) disparity files, greyscale `Pf` variant.
//!
//! Header: `Pf\n<width> <height>\n<scale>\n` followed by `width * height`
//! raw 32-bit floats in bottom-up row order. A negative scale marks a
//! little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(path: &str, offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        offset,
        msg: msg.into(),
    }
}

struct TokenReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> TokenReader<R> {
    fn byte(&mut self) -> Result<Option<u8>> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(None),
            _ => {
                self.offset += 1;
                Ok(Some(b[0]))
            }
        }
    }

    /// Next whitespace-delimited token of the text header.
    fn token(&mut self, path: &str) -> Result<String> {
        let mut tok = Vec::new();
        loop {
            match self.byte()? {
                None => {
                    if tok.is_empty() {
                        return Err(parse_err(path, self.offset, "unexpected end of header"));
                    }
                    break;
                }
                Some(b) if b.is_ascii_whitespace() => {
                    if !tok.is_empty() {
                        break;
                    }
                }
                Some(b) => tok.push(b),
            }
        }
        String::from_utf8(tok)
            .map_err(|_| parse_err(path, self.offset, "non-utf8 header token"))
    }
}

/// Read a greyscale PFM file into a `[H, W]` tensor (top-down row order)
/// plus the header's scale magnitude.
pub fn read_pfm(path: &Path) -> Result<(Tensor<f32>, f32)> {
    let display = path.display().to_string();
    let file = File::open(path)?;
    read_pfm_from(BufReader::new(file), &display)
}

/// Stream variant used by tests and the CLI.
pub fn read_pfm_from<R: Read>(reader: R, path: &str) -> Result<(Tensor<f32>, f32)> {
    let mut r = TokenReader {
        inner: reader,
        offset: 0,
    };
    let magic = r.token(path)?;
    if magic == "PF" {
        return Err(parse_err(
            path,
            0,
            "color 'PF' files are not disparity maps; expected greyscale 'Pf'",
        ));
    }
    if magic != "Pf" {
        return Err(parse_err(path, 0, format!("bad magic {magic:?}, expected \"Pf\"")));
    }
    let w: usize = r
        .token(path)?
        .parse()
        .map_err(|_| parse_err(path, r.offset, "bad width"))?;
    let h: usize = r
        .token(path)?
        .parse()
        .map_err(|_| parse_err(path, r.offset, "bad height"))?;
    if w == 0 || h == 0 {
        return Err(parse_err(path, r.offset, "zero extent"));
    }
    let scale: f32 = r
        .token(path)?
        .parse()
        .map_err(|_| parse_err(path, r.offset, "bad scale"))?;
    if scale == 0.0 {
        return Err(parse_err(path, r.offset, "scale must be nonzero"));
    }
    let little_endian = scale < 0.0;

    let mut payload = vec![0u8; w * h * 4];
    let payload_start = r.offset;
    r.inner.read_exact(&mut payload).map_err(|_| {
        parse_err(
            path,
            payload_start,
            format!("truncated payload, expected {} bytes", w * h * 4),
        )
    })?;
    // Reject trailing garbage beyond the payload.
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(parse_err(
            path,
            payload_start + (w * h * 4) as u64,
            "trailing bytes after payload",
        ));
    }

    let mut data = vec![0f32; w * h];
    for y in 0..h {
        // PFM stores the bottom row first.
        let src_row = h - 1 - y;
        for x in 0..w {
            let o = (src_row * w + x) * 4;
            let bytes = [payload[o], payload[o + 1], payload[o + 2], payload[o + 3]];
            let bits = if little_endian {
                u32::from_le_bytes(bytes)
            } else {
                u32::from_be_bytes(bytes)
            };
            data[y * w + x] = f32::from_bits(bits);
        }
    }
    Ok((Tensor::from_vec(data, &[h, w])?, scale.abs()))
}

/// Write a `[H, W]` (or `[1, H, W]`) field as little-endian greyscale PFM.
pub fn write_pfm(path: &Path, field: &Tensor<f32>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_pfm_to(&mut w, field)?;
    w.flush()?;
    Ok(())
}

/// Stream variant used by tests.
pub fn write_pfm_to<W: Write>(writer: &mut W, field: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *field.shape() {
        [h, w] => (h, w),
        [1, h, w] => (h, w),
        _ => {
            return Err(Error::contract(
                "write_pfm",
                format!("expected [H, W] field, got {:?}", field.shape()),
            ))
        }
    };
    write!(writer, "Pf\n{w} {h}\n-1.0\n")?;
    for y in (0..h).rev() {
        for x in 0..w {
            writer.write_all(&field.data()[y * w + x].to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let field = Tensor::from_vec(vec![1.5f32, -2.25, 0.0, 3.75, 1e-7, 42.0], &[2, 3]).unwrap();
        let mut buf = Vec::new();
        write_pfm_to(&mut buf, &field).unwrap();
        let (back, scale) = read_pfm_from(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(scale, 1.0);
        for (a, b) in field.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn negative_scale_little_endian_fixture() {
        // Hand-built 2x3 file: rows bottom-up, little-endian floats
        // 1..=6 laid out so the top-down result reads 1, 2, 3 / 4, 5, 6.
        let mut buf = b"Pf\n3 2\n-1.0\n".to_vec();
        for v in [4.0f32, 5.0, 6.0, 1.0, 2.0, 3.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let (t, _) = read_pfm_from(buf.as_slice(), "mem").unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn positive_scale_big_endian_fixture() {
        let mut buf = b"Pf\n2 1\n1.0\n".to_vec();
        for v in [7.5f32, -0.5] {
            buf.extend_from_slice(&v.to_be_bytes());
        }
        let (t, scale) = read_pfm_from(buf.as_slice(), "mem").unwrap();
        assert_eq!(t.data(), &[7.5, -0.5]);
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn color_header_is_rejected() {
        let buf = b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0".to_vec();
        let err = read_pfm_from(buf.as_slice(), "mem").unwrap_err();
        assert!(err.to_string().contains("Pf"));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut buf = b"Pf\n2 2\n-1.0\n".to_vec();
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        let err = read_pfm_from(buf.as_slice(), "mem").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 12),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn write_then_read_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disp.pfm");
        let field = Tensor::from_vec(vec![1.5f32; 6], &[2, 3]).unwrap();
        write_pfm(&path, &field).unwrap();
        let (back, _) = read_pfm(&path).unwrap();
        assert_eq!(back.data(), field.data());
    }
}
