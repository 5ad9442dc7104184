//! Single-channel PFM rasters: `Pf` header, little-endian payload (negative
//! scale), rows stored bottom-to-top.

use std::fs;
use std::path::Path;

use super::FormatError;
use crate::image::{Channel, DenseImage};

pub fn encode_pfm(img: &DenseImage) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for v in (0..h).rev() {
        for u in 0..w {
            out.extend_from_slice(&img.get(u, v).to_le_bytes());
        }
    }
    out
}

/// Splits off the next whitespace-delimited header token.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], FormatError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(FormatError::Pfm("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_token<T: std::str::FromStr>(tok: &[u8], what: &str) -> Result<T, FormatError> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| FormatError::Pfm(format!("malformed {what}: {:?}", String::from_utf8_lossy(tok))))
}

pub fn decode_pfm(bytes: &[u8], channel: Channel) -> Result<DenseImage, FormatError> {
    let mut pos = 0;
    match next_token(bytes, &mut pos)? {
        b"Pf" => {}
        b"PF" => return Err(FormatError::Pfm("three-channel PFM (\"PF\") is not supported".into())),
        other => return Err(FormatError::Pfm(format!("bad magic {:?}", String::from_utf8_lossy(other)))),
    }
    let w: usize = parse_token(next_token(bytes, &mut pos)?, "width")?;
    let h: usize = parse_token(next_token(bytes, &mut pos)?, "height")?;
    let scale: f64 = parse_token(next_token(bytes, &mut pos)?, "scale")?;
    if scale >= 0.0 {
        return Err(FormatError::Pfm(format!("big-endian PFM (scale {scale}) is not supported")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(FormatError::Truncated { expected: w * h * 4, got: 0 });
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() != w * h * 4 {
        return Err(FormatError::Truncated { expected: w * h * 4, got: payload.len() });
    }
    let mut data = vec![0f32; w * h];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let row_from_bottom = i / w;
        let u = i % w;
        let v = h - 1 - row_from_bottom;
        data[v * w + u] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok(DenseImage::new(w, h, channel, data)?)
}

pub fn write_float_image(path: &Path, img: &DenseImage) -> Result<(), FormatError> {
    fs::write(path, encode_pfm(img)).map_err(|e| FormatError::io(path, e))
}

pub fn read_float_image(path: &Path, channel: Channel) -> Result<DenseImage, FormatError> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_pfm(&bytes, channel).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_one_payload_is_eight_bytes() {
        let img = DenseImage::new(2, 1, Channel::Depth, vec![0.5, 2.0]).unwrap();
        let bytes = encode_pfm(&img);
        let header = b"Pf\n2 1\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 8);
        assert_eq!(&bytes[header.len()..header.len() + 4], &0.5f32.to_le_bytes());
    }

    #[test]
    fn rows_are_bottom_to_top() {
        let img = DenseImage::new(1, 2, Channel::Depth, vec![1.0, 2.0]).unwrap();
        let bytes = encode_pfm(&img);
        let n = bytes.len();
        assert_eq!(&bytes[n - 8..n - 4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_color_and_big_endian_and_truncation() {
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0", Channel::Depth).is_err());
        let be = decode_pfm(b"Pf\n1 1\n1.0\n\0\0\0\0", Channel::Depth).unwrap_err();
        assert!(be.to_string().contains("big-endian"));
        let tr = decode_pfm(b"Pf\n2 1\n-1.0\n\0\0\0\0", Channel::Depth).unwrap_err();
        assert!(matches!(tr, FormatError::Truncated { expected: 8, got: 4 }));
        assert!(decode_pfm(b"Pf\nx 1\n-1.0\n", Channel::Depth).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(w in 1usize..9, h in 1usize..9, seed in any::<u32>()) {
            let img = DenseImage::from_fn(w, h, Channel::Depth, |u, v| {
                f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add((u * 31 + v * 17) as u32) & 0x7f7f_ffff)
            });
            let back = decode_pfm(&encode_pfm(&img), Channel::Depth).unwrap();
            let a: Vec<u32> = img.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
