//! Tokenization shared by the encoders, the demonstration embedder and the
//! evaluation metrics.
//!
//! Text is split on whitespace. Characters from unsegmented scripts (CJK
//! ideographs, kana, hangul) are split further into one token per character,
//! so `"胃痛 3天"` becomes `["胃", "痛", "3", "天"]`.

use serde::{Deserialize, Serialize};

/// How free text is cut into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// Whitespace split with per-character fallback for unsegmented scripts.
    #[default]
    Auto,
    /// Plain whitespace split.
    Whitespace,
    /// Every non-whitespace character is a token.
    Char,
}

/// Whether `c` belongs to a script written without spaces between words.
pub fn is_unsegmented(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF     // hiragana, katakana
        | 0x3400..=0x4DBF   // CJK ext A
        | 0x4E00..=0x9FFF   // CJK unified
        | 0xAC00..=0xD7AF   // hangul syllables
        | 0xF900..=0xFAFF   // CJK compatibility
        | 0x20000..=0x2FA1F // CJK ext B..
        | 0x3000..=0x303F   // CJK punctuation
        | 0xFF00..=0xFFEF   // full-width forms
    )
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with(text, TokenizerMode::Auto)
}

pub fn tokenize_with(text: &str, mode: TokenizerMode) -> Vec<String> {
    match mode {
        TokenizerMode::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        TokenizerMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        TokenizerMode::Auto => {
            let mut out = Vec::new();
            for word in text.split_whitespace() {
                let mut run = String::new();
                for c in word.chars() {
                    if is_unsegmented(c) {
                        if !run.is_empty() {
                            out.push(std::mem::take(&mut run));
                        }
                        out.push(c.to_string());
                    } else {
                        run.push(c);
                    }
                }
                if !run.is_empty() {
                    out.push(run);
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_text() {
        assert_eq!(tokenize("a  b\tc\n"), vec!["a", "b", "c"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn unsegmented_text_splits_per_character() {
        assert_eq!(tokenize("胃痛 3天"), vec!["胃", "痛", "3", "天"]);
        assert_eq!(tokenize("abc胃def"), vec!["abc", "胃", "def"]);
    }

    #[test]
    fn explicit_modes() {
        assert_eq!(tokenize_with("胃痛 ab", TokenizerMode::Whitespace), vec!["胃痛", "ab"]);
        assert_eq!(tokenize_with("ab c", TokenizerMode::Char), vec!["a", "b", "c"]);
    }
}
