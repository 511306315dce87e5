//! Text normalization shared by label comparison, pattern matching, and the
//! mock embedder.
//!
//! Two normal forms exist on purpose:
//!
//! - [`normalize_label`] is the *light* form used when comparing diagnosis
//!   labels: trim, case-fold, collapse internal whitespace. Punctuation is
//!   kept so that e.g. "Type 2 diabetes" and "Type-2 diabetes" stay distinct
//!   unless the data says otherwise.
//! - [`normalize_match`] is the *aggressive* form used for substring pattern
//!   matching and embedding: case-folded with punctuation mapped to spaces,
//!   so "(DVT)." and "dvt" coincide.

/// Light normal form for diagnosis labels: trim, case-fold, collapse runs of
/// whitespace to single spaces.
pub fn normalize_label(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for ch in text.trim().chars() {
        if ch.is_whitespace() {
            if !last_space {
                out.push(' ');
                last_space = true;
            }
        } else {
            for low in ch.to_lowercase() {
                out.push(low);
            }
            last_space = false;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Aggressive normal form for content matching: case-fold, replace every
/// non-alphanumeric char with a space, collapse whitespace.
pub fn normalize_match(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for low in ch.to_lowercase() {
                out.push(low);
            }
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// True when `needle` occurs inside `haystack` under the aggressive normal
/// form. Empty needles never match.
pub fn contains_normalized(haystack: &str, needle: &str) -> bool {
    let needle = normalize_match(needle);
    if needle.is_empty() {
        return false;
    }
    normalize_match(haystack).contains(&needle)
}

/// Splits text into sentences: on line breaks, and on `.`/`!`/`?` followed by
/// whitespace. Bullet markers and blank lines are stripped; returned
/// sentences are trimmed and non-empty.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    for line in text.lines() {
        let line = line
            .trim()
            .trim_start_matches(['-', '*'])
            .trim_start_matches(|c: char| c.is_whitespace());
        if line.is_empty() || line.chars().all(|c| c == '-' || c == '=') {
            continue;
        }
        let mut current = String::new();
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            current.push(chars[i]);
            let terminal = matches!(chars[i], '.' | '!' | '?');
            let at_break = terminal && chars.get(i + 1).map_or(true, |c| c.is_whitespace());
            if at_break {
                let s = current.trim();
                if !s.is_empty() {
                    sentences.push(s.to_string());
                }
                current.clear();
            }
            i += 1;
        }
        let tail = current.trim();
        if !tail.is_empty() {
            sentences.push(tail.to_string());
        }
    }
    sentences
}

/// Words too common to indicate shared clinical content.
pub(crate) const STOPWORDS: &[&str] = &[
    "a", "an", "the", "i", "my", "me", "of", "with", "and", "or", "is", "am", "are", "have",
    "had", "has", "was", "were", "when", "by", "to", "in", "on", "at", "up", "that", "this", "it",
];

/// The aggressive-normal-form words of `text`, minus [`STOPWORDS`].
pub(crate) fn content_tokens(text: &str) -> std::collections::BTreeSet<String> {
    normalize_match(text)
        .split_whitespace()
        .filter(|t| !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect()
}

/// True when the two texts plausibly speak about the same clinical content:
/// one contains the other under the aggressive normal form, or they share at
/// least two content words. The slack covers register shifts between
/// first-person phrasing ("I have had a DVT") and clinical statements
/// ("History of deep vein thrombosis"). Symmetric in its arguments.
pub(crate) fn shares_content(a: &str, b: &str) -> bool {
    let a_norm = normalize_match(a);
    let b_norm = normalize_match(b);
    if a_norm.is_empty() || b_norm.is_empty() {
        return false;
    }
    if a_norm.contains(&b_norm) || b_norm.contains(&a_norm) {
        return true;
    }
    content_tokens(a).intersection(&content_tokens(b)).count() >= 2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_normal_form_folds_case_and_whitespace() {
        assert_eq!(normalize_label("  Pulmonary   Embolism "), "pulmonary embolism");
        assert_eq!(normalize_label("SPONTANEOUS\tPNEUMOTHORAX"), "spontaneous pneumothorax");
    }

    #[test]
    fn match_normal_form_drops_punctuation() {
        assert_eq!(
            normalize_match("I have had a deep vein thrombosis (DVT)."),
            "i have had a deep vein thrombosis dvt"
        );
    }

    #[test]
    fn containment_is_punctuation_insensitive() {
        assert!(contains_normalized(
            "- I have had a deep vein thrombosis (DVT).",
            "Deep vein thrombosis"
        ));
        assert!(!contains_normalized("chest pain", ""));
    }

    #[test]
    fn sentence_split_handles_bullets_and_abbrev_free_text() {
        let text = "Symptoms:\n---------\n- I feel pain. The pain is sharp.\n- I have a cough.";
        let got = split_sentences(text);
        assert_eq!(
            got,
            vec![
                "Symptoms:".to_string(),
                "I feel pain.".to_string(),
                "The pain is sharp.".to_string(),
                "I have a cough.".to_string(),
            ]
        );
    }

    #[test]
    fn sentence_split_no_break_inside_decimal() {
        let got = split_sentences("intensity is 6.5 today");
        assert_eq!(got, vec!["intensity is 6.5 today".to_string()]);
    }

    #[test]
    fn content_sharing_bridges_register_shifts() {
        assert!(shares_content(
            "I have had a deep vein thrombosis (DVT).",
            "History of deep vein thrombosis (DVT)"
        ));
        assert!(shares_content("tachycardia", "I have tachycardia."));
        assert!(!shares_content("I enjoy long mountain hikes.", "History of deep vein thrombosis"));
        assert!(!shares_content("", "anything"));
    }
}
