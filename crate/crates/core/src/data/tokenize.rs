//! Whitespace tokenizer with punctuation detachment.

/// Splits on whitespace and emits every ASCII punctuation character as its
/// own token: `"a, b."` → `["a", ",", "b", "."]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Joins tokens with single spaces. `detokenize(tokenize(t))` differs from
/// `t` only in whitespace.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(tokenize("a b"), ["a", "b"]);
        assert_eq!(tokenize("a, b."), ["a", ",", "b", "."]);
        assert_eq!(tokenize("  spaced\tout \n"), ["spaced", "out"]);
        assert!(tokenize("").is_empty());
    }

    fn strip_ws(s: &str) -> String {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    proptest! {
        #[test]
        fn round_trip_changes_whitespace_only(text in "[a-z ,.!?\t]{0,40}") {
            let toks = tokenize(&text);
            let back = detokenize(&toks);
            prop_assert_eq!(strip_ws(&back), strip_ws(&text));
            prop_assert_eq!(tokenize(&back), toks);
        }
    }
}
