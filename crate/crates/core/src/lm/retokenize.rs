use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Segments whitespace-separated words into `vocab` tokens by greedy longest
/// match. The first piece of a word prefers word-begin tokens, later pieces
/// prefer continuation tokens; either class is used when the preferred one
/// has no match. Unmatched characters become `<unk>` when the vocabulary has
/// it and are an error otherwise.
pub fn retokenize(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    let max_chars = vocab
        .label_ids()
        .into_iter()
        .map(|id| vocab.token(id).chars().count())
        .max()
        .unwrap_or(0);
    let usable = |id: usize| !vocab.is_special(id) && Some(id) != vocab.unk_id();
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let nchars = bounds.len() - 1;
        let mut pos = 0;
        while pos < nchars {
            let want_begin = pos == 0;
            let longest = |prefer: Option<bool>| {
                (1..=max_chars.min(nchars - pos)).rev().find_map(|n| {
                    let piece = &word[bounds[pos]..bounds[pos + n]];
                    vocab
                        .id(piece)
                        .filter(|&id| usable(id))
                        .filter(|&id| prefer.map_or(true, |b| vocab.begins_word(id) == b))
                        .map(|id| (id, n))
                })
            };
            match longest(Some(want_begin)).or_else(|| longest(None)) {
                Some((id, n)) => {
                    out.push(id);
                    pos += n;
                }
                None => match vocab.unk_id() {
                    Some(unk) => {
                        out.push(unk);
                        pos += 1;
                    }
                    None => return Err(Error::Unsegmentable(word.to_owned())),
                },
            }
        }
    }
    Ok(out)
}
