//! Value normalization, fuzzy comparison and canonicalization.
//!
//! Similarity is the normalized Levenshtein ratio
//! `1 - distance / max(len_a, len_b)` over Unicode scalar values, computed
//! after lowercasing, trimming, collapsing whitespace and mapping known
//! aliases. The `dontcare` sentinel never matches fuzzily.

use crate::schema::SlotSpec;

pub const DONTCARE: &str = "dontcare";
pub const DEFAULT_THRESHOLD: f64 = 0.9;

/// Surface forms that denote the same canonical value.
const ALIASES: &[(&str, &str)] = &[
    ("center", "centre"),
    ("city centre", "centre"),
    ("city center", "centre"),
    ("guesthouse", "guest house"),
    ("guesthouses", "guest house"),
    ("b&b", "bed and breakfast"),
    ("b and b", "bed and breakfast"),
    ("moderately priced", "moderate"),
];

const DONTCARE_FORMS: &[&str] = &[
    "dontcare",
    "don't care",
    "dont care",
    "do not care",
    "does not matter",
    "doesn't matter",
];

/// Lowercases, trims, collapses inner whitespace and applies the alias table.
pub fn normalize(value: &str) -> String {
    let collapsed = collapse(value);
    match ALIASES.iter().find(|(from, _)| *from == collapsed) {
        Some((_, to)) => (*to).to_string(),
        None => collapsed,
    }
}

fn collapse(value: &str) -> String {
    value
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn is_dontcare(value: &str) -> bool {
    let v = collapse(strip_quotes(value.trim()));
    DONTCARE_FORMS.contains(&v.as_str())
}

/// Levenshtein distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let above = row[j + 1];
            let cost = usize::from(ca != cb);
            row[j + 1] = (above + 1).min(row[j] + 1).min(diag + cost);
            diag = above;
        }
    }
    row[b.len()]
}

/// Similarity in `[0, 1]` between two already-normalized strings.
pub fn ratio(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// Similarity after normalization.
pub fn similarity(a: &str, b: &str) -> f64 {
    ratio(&normalize(a), &normalize(b))
}

pub fn fuzzy_equal(a: &str, b: &str, threshold: f64) -> bool {
    match (is_dontcare(a), is_dontcare(b)) {
        (true, true) => return true,
        (true, false) | (false, true) => return false,
        _ => {}
    }
    let (na, nb) = (normalize(a), normalize(b));
    na == nb || ratio(&na, &nb) >= threshold
}

fn strip_quotes(s: &str) -> &str {
    let mut s = s.trim();
    loop {
        let stripped = s
            .strip_prefix('"')
            .and_then(|t| t.strip_suffix('"'))
            .or_else(|| s.strip_prefix('\'').and_then(|t| t.strip_suffix('\'')))
            .or_else(|| s.strip_prefix('\u{201c}').and_then(|t| t.strip_suffix('\u{201d}')));
        match stripped {
            Some(t) => s = t.trim(),
            None => return s,
        }
    }
}

/// Raw value with surrounding quotes removed, lowercased and trimmed.
pub fn normalize_raw(raw: &str) -> String {
    collapse(strip_quotes(raw))
}

/// Maps a raw model value onto the slot's canonical vocabulary.
///
/// Enumerated slots return the closest enumeration member when it clears
/// `threshold`; otherwise (and for open slots) the normalized raw string.
pub fn canonicalize_value(raw: &str, slot: &SlotSpec, threshold: f64) -> String {
    if is_dontcare(raw) {
        return DONTCARE.to_string();
    }
    let cleaned = normalize_raw(raw);
    let Some(values) = slot.values.as_ref() else {
        return cleaned;
    };
    let probe = normalize(&cleaned);
    let mut best: Option<(&String, f64)> = None;
    for candidate in values {
        let score = ratio(&probe, &normalize(candidate));
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((candidate, score));
        }
    }
    match best {
        Some((value, score)) if score >= threshold => value.clone(),
        _ => cleaned,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area() -> SlotSpec {
        SlotSpec::new("area", "").with_values(["north", "east", "west", "south", "centre"])
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("", ""), 0);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("guesthouse", "guest house"), 1);
    }

    #[test]
    fn fuzzy_examples() {
        assert!(fuzzy_equal("Cheap", "cheap", DEFAULT_THRESHOLD));
        assert!(fuzzy_equal("x", "x", DEFAULT_THRESHOLD));
        // one insertion over 11 chars: 10/11 >= 0.9
        assert!(fuzzy_equal("guesthouse", "guest house", 0.9));
        assert!(!fuzzy_equal("cheap", "expensive", DEFAULT_THRESHOLD));
        assert!(!fuzzy_equal("north", "south", DEFAULT_THRESHOLD));
    }

    #[test]
    fn typo_matches() {
        assert!(fuzzy_equal("cambridge", "cambridg", 0.85));
        assert!(fuzzy_equal("the acorn guest house", "the acorn guest hous", 0.9));
    }

    #[test]
    fn dontcare_is_exact() {
        assert!(fuzzy_equal("dontcare", "don't care", 0.9));
        assert!(!fuzzy_equal("dontcare", "dontcar", 0.0));
        assert!(!fuzzy_equal("north", DONTCARE, 0.0));
    }

    #[test]
    fn threshold_one_is_normalized_equality() {
        assert!(fuzzy_equal(" Guest  House ", "guest house", 1.0));
        assert!(!fuzzy_equal("guest hous", "guest house", 1.0));
    }

    #[test]
    fn canonicalize_examples() {
        let price = SlotSpec::new("pricerange", "").with_values(["cheap", "moderate", "expensive"]);
        assert_eq!(canonicalize_value("Cheap", &price, 0.9), "cheap");
        assert_eq!(canonicalize_value("\"cheap\"", &price, 0.9), "cheap");
        assert_eq!(canonicalize_value("chep", &price, 0.75), "cheap");
        assert_eq!(canonicalize_value("dontcare", &price, 0.9), DONTCARE);
        assert_eq!(canonicalize_value("center", &area(), 0.9), "centre");
        assert_eq!(
            canonicalize_value("Centre of Town", &area(), 0.9),
            "centre of town"
        );
        let open = SlotSpec::new("name", "");
        assert_eq!(canonicalize_value("  'The Acorn'  ", &open, 0.9), "the acorn");
    }
}
