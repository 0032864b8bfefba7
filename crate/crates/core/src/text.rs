//! Tokenization shared by the lexical index and the hashing embedder.

/// Function words dropped before scoring. Without this, contractions such as
/// "What's" and "patient's" share the token "s" and every question matches
/// some chunk lexically.
const STOPWORDS: &[&str] = &[
    "a", "about", "am", "an", "and", "are", "as", "at", "be", "been", "but", "by", "can", "could", "d", "did", "do",
    "does", "for", "from", "had", "has", "have", "hello", "hey", "hi", "how", "i", "in", "is", "it", "its", "ll", "m",
    "me", "my", "of", "on", "or", "our", "please", "re", "s", "should", "so", "t", "than", "that", "the", "their",
    "them", "then", "there", "these", "they", "this", "those", "to", "us", "ve", "was", "we", "were", "what", "when",
    "where", "which", "who", "whom", "why", "will", "with", "would", "you", "your",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercases (Unicode-aware), splits on non-alphanumeric characters and
/// drops stopwords. No stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !is_stopword(t))
        .collect()
}
