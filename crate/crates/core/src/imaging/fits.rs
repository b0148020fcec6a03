//! Minimal FITS primary-HDU image reader/writer. Only what SOHO level-1
//! products need: 2-D (or the first plane of 3-D) images with BITPIX
//! 8/16/32/-32/-64 and BSCALE/BZERO.

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array2;

use super::ImagingError;

const BLOCK: usize = 2880;
const CARD: usize = 80;

fn fits_err(msg: impl Into<String>) -> ImagingError {
    ImagingError::Format(format!("FITS: {}", msg.into()))
}

fn parse_header(bytes: &[u8]) -> Result<(HashMap<String, String>, usize), ImagingError> {
    let mut cards = HashMap::new();
    let mut offset = 0;
    loop {
        if offset + CARD > bytes.len() {
            return Err(fits_err("header has no END card"));
        }
        let card = std::str::from_utf8(&bytes[offset..offset + CARD]).map_err(|_| fits_err("non-ASCII header"))?;
        offset += CARD;
        let key = card[..8].trim();
        if key == "END" {
            break;
        }
        if card.len() > 10 && &card[8..10] == "= " {
            let value = card[10..].split('/').next().unwrap_or("").trim().trim_matches('\'').trim();
            cards.insert(key.to_string(), value.to_string());
        }
    }
    let data_start = offset.div_ceil(BLOCK) * BLOCK;
    Ok((cards, data_start))
}

fn int_card(cards: &HashMap<String, String>, key: &str) -> Result<i64, ImagingError> {
    cards
        .get(key)
        .ok_or_else(|| fits_err(format!("missing {key}")))?
        .parse()
        .map_err(|_| fits_err(format!("bad {key}")))
}

fn float_card(cards: &HashMap<String, String>, key: &str, default: f64) -> f64 {
    cards
        .get(key)
        .and_then(|v| v.replace('D', "E").parse().ok())
        .unwrap_or(default)
}

/// Decodes the primary image. Rows follow NAXIS2, columns NAXIS1.
pub fn read_fits_image(bytes: &[u8]) -> Result<Array2<f32>, ImagingError> {
    if !bytes.starts_with(b"SIMPLE") {
        return Err(fits_err("not a FITS file"));
    }
    let (cards, start) = parse_header(bytes)?;
    let bitpix = int_card(&cards, "BITPIX")?;
    let naxis = int_card(&cards, "NAXIS")?;
    if naxis < 2 {
        return Err(fits_err(format!("expected an image, NAXIS = {naxis}")));
    }
    let width = int_card(&cards, "NAXIS1")? as usize;
    let height = int_card(&cards, "NAXIS2")? as usize;
    let bscale = float_card(&cards, "BSCALE", 1.0);
    let bzero = float_card(&cards, "BZERO", 0.0);
    let bytes_per = (bitpix.unsigned_abs() / 8) as usize;
    let n = width * height;
    let data = bytes
        .get(start..start + n * bytes_per)
        .ok_or_else(|| fits_err("data unit truncated"))?;
    let raw: Vec<f64> = match bitpix {
        8 => data.iter().map(|&b| f64::from(b)).collect(),
        16 => data.chunks_exact(2).map(|c| f64::from(i16::from_be_bytes([c[0], c[1]]))).collect(),
        32 => data
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_be_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        -32 => data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_be_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        -64 => data
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect(),
        other => return Err(fits_err(format!("unsupported BITPIX {other}"))),
    };
    let values: Vec<f32> = raw.into_iter().map(|v| (bzero + bscale * v) as f32).collect();
    Array2::from_shape_vec((height, width), values).map_err(|e| fits_err(e.to_string()))
}

fn card(key: &str, value: &str) -> String {
    format!("{key:<8}= {value:>20}{:50}", "")
}

/// Writes `image` as a BITPIX -32 primary HDU.
pub fn write_fits_image<W: Write>(mut w: W, image: &Array2<f32>) -> std::io::Result<()> {
    let (h, wd) = image.dim();
    let mut header = String::new();
    header.push_str(&card("SIMPLE", "T"));
    header.push_str(&card("BITPIX", "-32"));
    header.push_str(&card("NAXIS", "2"));
    header.push_str(&card("NAXIS1", &wd.to_string()));
    header.push_str(&card("NAXIS2", &h.to_string()));
    header.push_str(&format!("{:<80}", "END"));
    while !header.len().is_multiple_of(BLOCK) {
        header.push(' ');
    }
    w.write_all(header.as_bytes())?;
    let mut data = Vec::with_capacity(h * wd * 4);
    for v in image.iter() {
        data.extend_from_slice(&v.to_be_bytes());
    }
    while data.len() % BLOCK != 0 {
        data.push(0);
    }
    w.write_all(&data)
}
