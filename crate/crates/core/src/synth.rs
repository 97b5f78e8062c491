//! Deterministic synthetic data: a patterned character corpus for the toy
//! pretraining runs and a segment-overlap classification task for the
//! finetuning demo.

use std::io::Write;
use std::path::Path;

use crate::rng::Rng;

const WORDS: [&str; 40] = [
    "the", "of", "and", "to", "in", "rock", "river", "stone", "light", "wind", "tree", "bird",
    "cloud", "rain", "fire", "snow", "hill", "vale", "moon", "star", "sun", "sky", "sea", "wave",
    "sand", "leaf", "root", "seed", "grain", "field", "path", "gate", "door", "roof", "wall",
    "lamp", "song", "tale", "word", "name",
];

/// At least `min_bytes` of sentence-like text over a small alphabet.
/// Word choice is rank-weighted so the stream has learnable statistics.
pub fn synthetic_text(min_bytes: usize, seed: u64) -> String {
    let mut rng = Rng::derive(seed, &[0x5155]);
    let weights: Vec<f64> = (0..WORDS.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let total: f64 = weights.iter().sum();
    let pick_word = move |rng: &mut Rng| {
        let mut x = rng.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if x < w {
                return WORDS[i];
            }
            x -= w;
        }
        WORDS[WORDS.len() - 1]
    };
    let mut out = String::with_capacity(min_bytes + 128);
    while out.len() < min_bytes {
        let sentence_len = 3 + rng.below(7);
        for i in 0..sentence_len {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(pick_word(&mut rng));
        }
        out.push('.');
        if rng.bernoulli(0.2) {
            out.push('\n');
        } else {
            out.push(' ');
        }
    }
    out
}

/// One labeled pair for the synthetic classification task: does segment B
/// contain a character that also occurs in segment A?
#[derive(Clone, Debug)]
pub struct OverlapExample {
    pub label: usize,
    pub seg_a: String,
    pub seg_b: String,
}

/// Balanced dataset over a fixed letter alphabet: positive pairs draw every
/// B character from A's character set, negative pairs draw B from letters
/// absent in A, so the label is exactly "B contains a character of A".
/// Every letter also occurs in the synthetic pretraining text, so none of
/// them falls back to the unknown token.
pub fn segment_overlap_dataset(n: usize, seg_len: usize, seed: u64) -> Vec<OverlapExample> {
    let alphabet: Vec<char> = "abcdefghiklmnopr".chars().collect();
    assert!(seg_len >= 1 && seg_len * 2 <= alphabet.len(), "segments must fit the alphabet");
    let mut rng = Rng::derive(seed, &[0x0731]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut pool = alphabet.clone();
        rng.shuffle(&mut pool);
        let a_chars: Vec<char> = pool[..seg_len].to_vec();
        let b_source: &[char] =
            if label == 1 { &a_chars } else { &pool[seg_len..] };
        let b_chars: Vec<char> =
            (0..seg_len).map(|_| b_source[rng.below(b_source.len())]).collect();
        let mut seg_a_chars = a_chars.clone();
        rng.shuffle(&mut seg_a_chars);
        out.push(OverlapExample {
            label,
            seg_a: seg_a_chars.into_iter().collect(),
            seg_b: b_chars.into_iter().collect(),
        });
    }
    out
}

/// Tab-separated: label, segment A, segment B.
pub fn write_overlap_tsv(path: &Path, examples: &[OverlapExample]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    for ex in examples {
        writeln!(f, "{}\t{}\t{}", ex.label, ex.seg_a, ex.seg_b)?;
    }
    Ok(())
}

/// Parse the TSV format written by `write_overlap_tsv`.
pub fn read_overlap_tsv(path: &Path) -> std::io::Result<Vec<OverlapExample>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (label, a, b) = (parts.next(), parts.next(), parts.next());
        match (label.and_then(|l| l.parse::<usize>().ok()), a, b) {
            (Some(label), Some(a), Some(b)) => out.push(OverlapExample {
                label,
                seg_a: a.to_string(),
                seg_b: b.to_string(),
            }),
            _ => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: expected label<TAB>segA<TAB>segB", i + 1),
                ))
            }
        }
    }
    Ok(out)
}
