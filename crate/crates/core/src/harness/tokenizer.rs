//! Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, followed by four
//! special tokens.

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const SEP: usize = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(id: usize) -> bool {
    (BOS..VOCAB_SIZE).contains(&id)
}

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Byte ids back to text. Special tokens are dropped; invalid UTF-8 (e.g.
/// a sequence cut mid-character) is replaced with U+FFFD.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Ids up to (excluding) the first EOS, with BOS/PAD/SEP removed.
pub fn until_eos(ids: &[usize]) -> &[usize] {
    let end = ids.iter().position(|&i| i == EOS).unwrap_or(ids.len());
    &ids[..end]
}

/// Truncates `ids` to at most `max` tokens without splitting a UTF-8
/// character.
pub fn truncate_bytes(ids: &mut Vec<usize>, max: usize) {
    if ids.len() <= max {
        return;
    }
    let mut end = max;
    // continuation bytes are 0b10xx_xxxx
    while end > 0 && ids[end] < 256 && (ids[end] & 0xC0) == 0x80 {
        end -= 1;
    }
    ids.truncate(end);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(encode("A"), vec![65]);
        assert_eq!(encode("é"), vec![0xC3, 0xA9]);
        assert_eq!(decode(&encode("héllo")), "héllo");
        assert_eq!(decode(&[BOS, 104, 105, EOS, PAD]), "hi");
        assert!(is_special(SEP) && !is_special(255));
    }

    #[test]
    fn truncation_respects_character_boundaries() {
        let mut ids = encode("aé");
        truncate_bytes(&mut ids, 2);
        assert_eq!(decode(&ids), "a");
        let mut ids = encode("abc");
        truncate_bytes(&mut ids, 2);
        assert_eq!(decode(&ids), "ab");
    }
}
