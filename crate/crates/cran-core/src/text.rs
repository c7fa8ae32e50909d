//! Character-level text representation: alphabet lookup and one-hot
//! encoding with fixed-length truncation/padding.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered character inventory with O(1) lookup.
#[derive(Clone, Debug)]
pub struct Alphabet {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Alphabet {
    pub fn from_symbols(symbols: &str) -> Result<Alphabet> {
        if symbols.is_empty() {
            return Err(Error::InvalidArgument("alphabet must not be empty".into()));
        }
        let chars: Vec<char> = symbols.chars().collect();
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "alphabet contains duplicate symbol {c:?}"
                )));
            }
        }
        Ok(Alphabet { symbols: chars, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }
}

/// A raw string together with its one-hot matrix (`alphabet_size x L`).
#[derive(Clone, Debug)]
pub struct TextInstance {
    pub raw: String,
    pub onehot: Tensor,
}

impl TextInstance {
    pub fn encode(raw: &str, alphabet: &Alphabet, len: usize) -> Result<TextInstance> {
        Ok(TextInstance { raw: raw.to_string(), onehot: encode_chars(raw, alphabet, len)? })
    }
}

/// One-hot encode `raw` into an `alphabet_size x L` matrix. Input is
/// lowercased first; characters beyond position L are discarded, positions
/// past the end of the string stay all-zero, and characters outside the
/// alphabet map to an all-zero column.
pub fn encode_chars(raw: &str, alphabet: &Alphabet, len: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::InvalidArgument("sequence length must be positive".into()));
    }
    let rows = alphabet.len();
    let mut data = vec![0.0; rows * len];
    for (col, c) in raw.to_lowercase().chars().take(len).enumerate() {
        if let Some(row) = alphabet.index_of(c) {
            data[row * len + col] = 1.0;
        }
    }
    Tensor::new(data, &[rows, len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::STANDARD_ALPHABET;

    fn standard() -> Alphabet {
        Alphabet::from_symbols(STANDARD_ALPHABET).unwrap()
    }

    fn column(data: &[f64], rows: usize, len: usize, col: usize) -> Vec<f64> {
        (0..rows).map(|r| data[r * len + col]).collect()
    }

    #[test]
    fn empty_alphabet_rejected() {
        assert!(Alphabet::from_symbols("").is_err());
    }

    #[test]
    fn long_input_truncated_to_sequence_length() {
        let a = standard();
        let raw: String = std::iter::repeat('x').take(300).collect();
        let m = encode_chars(&raw, &a, 201).unwrap();
        assert_eq!(m.shape(), vec![70, 201]);
        let d = m.data();
        // every one of the 201 columns carries the 'x' row, nothing more
        let row = a.index_of('x').unwrap();
        for col in 0..201 {
            let c = column(&d, 70, 201, col);
            assert_eq!(c.iter().sum::<f64>(), 1.0);
            assert_eq!(c[row], 1.0);
        }
    }

    #[test]
    fn empty_string_is_all_zero_padding() {
        let a = standard();
        let m = encode_chars("", &a, 60).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_known_char_sets_one_cell() {
        let a = standard();
        let m = encode_chars("a", &a, 5).unwrap();
        let d = m.data();
        // 'a' is row 0, column 0; everything else zero
        assert_eq!(d[0], 1.0);
        assert_eq!(d.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn unknown_chars_become_zero_columns() {
        let a = standard();
        let m = encode_chars("é=", &a, 4).unwrap();
        let d = m.data();
        assert_eq!(column(&d, 70, 4, 0).iter().sum::<f64>(), 0.0);
        assert_eq!(column(&d, 70, 4, 1).iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn input_is_case_folded() {
        let a = standard();
        let upper = encode_chars("CUBE", &a, 10).unwrap();
        let lower = encode_chars("cube", &a, 10).unwrap();
        assert_eq!(upper.data(), lower.data());
    }

    #[test]
    fn columns_have_at_most_one_nonzero_entry() {
        let a = standard();
        let m = encode_chars("a ball, 42 things!", &a, 30).unwrap();
        let d = m.data();
        for col in 0..30 {
            let s: f64 = column(&d, 70, 30, col).iter().sum();
            assert!(s == 0.0 || s == 1.0);
        }
    }
}
