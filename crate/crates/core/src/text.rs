//! Text normalization shared by every equality test in the crate.

use std::sync::OnceLock;

use regex::Regex;
use unicode_normalization::UnicodeNormalization;

/// NFC, trim, and collapse every internal whitespace run to a single ASCII space.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for word in nfc.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Key used for near-duplicate detection: normalized text with all whitespace
/// and Unicode punctuation removed.
pub fn loose_key(text: &str) -> String {
    static STRIP: OnceLock<Regex> = OnceLock::new();
    let re = STRIP.get_or_init(|| Regex::new(r"[\s\p{P}]+").expect("static regex"));
    re.replace_all(&normalize(text), "").into_owned()
}
