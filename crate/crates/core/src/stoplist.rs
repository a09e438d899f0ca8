//! Fixed English stop list used when extracting topic terms.

pub const STOP_WORDS: [&str; 100] = [
    "a", "about", "after", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "because", "been",
    "before", "being", "but", "by", "can", "could", "did", "do", "does", "doing", "don", "for", "from", "get", "got",
    "had", "has", "have", "he", "her", "here", "him", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just",
    "me", "more", "my", "no", "not", "now", "of", "on", "one", "only", "or", "other", "our", "out", "over", "s", "she",
    "so", "some", "such", "t", "than", "that", "the", "their", "them", "then", "there", "these", "they", "this",
    "those", "to", "too", "up", "us", "very", "was", "we", "were", "what", "when", "where", "which", "who", "why",
    "will", "with", "would", "you", "your", "yours", "ll",
];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn hundred_distinct_lowercase_words() {
        let set: BTreeSet<&str> = STOP_WORDS.iter().copied().collect();
        assert_eq!(set.len(), 100);
        assert!(STOP_WORDS.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn membership() {
        assert!(is_stop_word("the"));
        assert!(!is_stop_word("dish"));
    }
}
