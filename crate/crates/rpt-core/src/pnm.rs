//! Binary netpbm codec: 8-bit P5 (PGM) and P6 (PPM), maxval 255 only.
//! Values map losslessly between u8 and [0, 1] via v / 255.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Image;
use crate::error::{Error, Result};

/// Parse one header token, skipping whitespace and `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format(String::from("pnm: unexpected end of header")));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = token(bytes, pos)?;
    let s = core::str::from_utf8(tok).map_err(|_| Error::Format(format!("pnm: bad {what}")))?;
    s.parse::<usize>().map_err(|_| Error::Format(format!("pnm: bad {what} '{s}'")))
}

/// Decode a binary PGM (P5) or PPM (P6) byte stream.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Format(format!(
                "pnm: unsupported magic '{}' (binary P5/P6 only)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let w = number(bytes, &mut pos, "width")?;
    let h = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("pnm: unsupported maxval {maxval} (8-bit only)")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format(String::from("pnm: missing payload separator")));
    }
    pos += 1;
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::Truncated("pnm payload"));
    }
    let payload = &bytes[pos..pos + need];
    // Interleaved rows -> channel-major planes.
    let mut data = alloc::vec![0.0f64; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = payload[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Image::new(channels, h, w, data)
}

fn quantize(v: f64) -> u8 {
    libm::floor(v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

fn encode(img: &Image, magic: &str) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", img.w, img.h).into_bytes();
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..img.channels {
                out.push(quantize(img.get(c, y, x)));
            }
        }
    }
    out
}

/// Encode as binary PGM; 3-channel inputs are collapsed by the channel mean.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let gray = img.gray();
    encode(&gray, "P5")
}

/// Encode as binary PPM; grayscale inputs are replicated to three channels.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let rgb = img.to_rgb();
    encode(&rgb, "P6")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_full_scale() {
        let bytes = b"P5\n1 1\n255\n\xff";
        let img = decode(bytes).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
    }

    #[test]
    fn read_write_read_fixpoint() {
        let bytes = b"P5\n# comment\n3 2\n255\nabcdef";
        let img = decode(bytes).unwrap();
        let canon = encode_pgm(&img);
        let img2 = decode(&canon).unwrap();
        assert_eq!(img, img2);
        assert_eq!(encode_pgm(&img2), canon);
    }

    #[test]
    fn sixteen_bit_rejected() {
        let bytes = b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00";
        assert!(matches!(decode(bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = b"P5\n2 2\n255\nab";
        assert!(matches!(decode(bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn malformed_header_rejected() {
        assert!(decode(b"P5\nxx 2\n255\n").is_err());
        assert!(decode(b"P7\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n1").is_err());
    }

    #[test]
    fn ppm_round_trip_bytes() {
        let img = Image::new(3, 2, 2, alloc::vec![
            0.0, 0.5, 1.0, 0.25, // r plane
            0.1, 0.6, 0.9, 0.33, // g plane
            0.2, 0.7, 0.8, 0.41, // b plane
        ])
        .unwrap();
        let bytes = encode_ppm(&img);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode_ppm(&back), bytes);
    }
}
