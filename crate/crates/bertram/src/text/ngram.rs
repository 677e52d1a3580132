//! Character n-grams over boundary-marked words.

use crate::error::{Error, Result};

/// Word-boundary markers; each counts as a single symbol of the augmented
/// word, so "was" yields 4-grams like "<was" and "as>" never splits them.
pub const BOW: char = '<';
pub const EOW: char = '>';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramSet {
    pub word: String,
    pub grams: Vec<String>,
}

/// All contiguous substrings of `<word>` with length in `[min_n, max_n]`,
/// enumerated left to right (duplicates preserved).
pub fn extract_ngrams(word: &str, min_n: usize, max_n: usize) -> Result<NGramSet> {
    if word.is_empty() {
        return Err(Error::domain("cannot extract n-grams of an empty word"));
    }
    if min_n == 0 || min_n > max_n {
        return Err(Error::domain(format!(
            "invalid n-gram range [{min_n}, {max_n}]"
        )));
    }
    let mut symbols: Vec<char> = Vec::with_capacity(word.chars().count() + 2);
    symbols.push(BOW);
    symbols.extend(word.chars());
    symbols.push(EOW);
    let len = symbols.len();
    let mut grams = Vec::new();
    for start in 0..len {
        for n in min_n..=max_n {
            if start + n > len {
                break;
            }
            grams.push(symbols[start..start + n].iter().collect());
        }
    }
    Ok(NGramSet {
        word: word.to_string(),
        grams,
    })
}
