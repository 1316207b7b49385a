use crate::error::{Error, Result};
use crate::model::ALPHABET_SIZE;

use super::attributes::AttributeSet;

pub const MAX_CAPTION_LEN: usize = 45;

/// Rigid caption grammar: size, color, shape, position, background.
pub fn make_caption(a: &AttributeSet) -> String {
    let l = a.level;
    let mut words: Vec<&str> = Vec::with_capacity(8);
    if l.varies_size() {
        words.push(a.size.word());
    }
    if let Some(c) = a.color {
        words.push(c.word());
    }
    words.push(a.shape.word());
    if let Some(q) = a.quadrant {
        let (v, h) = q.words();
        words.extend(["at", v, h]);
    }
    if l.varies_background() {
        words.extend(["on", a.background.word()]);
    }
    words.join(" ")
}

/// Character-level one-hot encoding padded to [`MAX_CAPTION_LEN`] rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionEncoding {
    /// `MAX_CAPTION_LEN × 27`, row-major.
    pub onehot: Vec<f64>,
    pub mask: Vec<bool>,
    pub length: usize,
}

fn symbol_index(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        ' ' => Some(26),
        _ => None,
    }
}

fn symbol(i: usize) -> char {
    if i < 26 {
        (b'a' + i as u8) as char
    } else {
        ' '
    }
}

pub fn encode_caption(caption: &str) -> Result<CaptionEncoding> {
    let length = caption.chars().count();
    if length > MAX_CAPTION_LEN {
        return Err(Error::CaptionTooLong { caption: caption.to_string(), length, max: MAX_CAPTION_LEN });
    }
    let mut onehot = vec![0.0; MAX_CAPTION_LEN * ALPHABET_SIZE];
    for (pos, c) in caption.chars().enumerate() {
        let idx = symbol_index(c).ok_or_else(|| Error::IllegalCharacter {
            caption: caption.to_string(),
            position: pos,
            character: c,
        })?;
        onehot[pos * ALPHABET_SIZE + idx] = 1.0;
    }
    let mask = (0..MAX_CAPTION_LEN).map(|p| p < length).collect();
    Ok(CaptionEncoding { onehot, mask, length })
}

/// Inverse of [`encode_caption`] for well-formed encodings.
pub fn decode_caption(enc: &CaptionEncoding) -> String {
    decode_rows(&enc.onehot, enc.length)
}

/// Per-position argmax over `rows × 27` decoder logits, trailing spaces
/// trimmed.
pub fn decode_caption_logits(logits: &[f64]) -> String {
    let rows = logits.len() / ALPHABET_SIZE;
    decode_rows(logits, rows).trim_end_matches(' ').to_string()
}

fn decode_rows(values: &[f64], rows: usize) -> String {
    values
        .chunks(ALPHABET_SIZE)
        .take(rows)
        .map(|row| {
            let (best, _) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            symbol(best)
        })
        .collect()
}
