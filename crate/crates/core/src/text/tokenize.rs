/// A token with its byte range in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Lowercased tokens with byte offsets into `text`.
///
/// Runs of alphanumeric characters form one token; every other
/// non-whitespace character is a token of its own.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |out: &mut Vec<Token>, start: usize, end: usize| {
        out.push(Token {
            text: text[start..end].to_lowercase(),
            start,
            end,
        });
    };
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            flush(&mut out, s, i);
        }
        if !c.is_whitespace() {
            flush(&mut out, i, i + c.len_utf8());
        }
    }
    if let Some(s) = word_start {
        flush(&mut out, s, text.len());
    }
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|t| t.text)
        .collect()
}

/// One sentence cut from running text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSentence {
    /// Exact source slice from the first to the last token.
    pub text: String,
    /// Byte offset of `text` in the source.
    pub offset: usize,
    pub tokens: Vec<Token>,
}

/// Split running text into sentences after `.`, `!` and `?` tokens.
/// Token offsets are relative to the sentence text.
pub fn split_sentences(text: &str) -> Vec<RawSentence> {
    let tokens = tokenize_with_offsets(text);
    let mut out = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut close = |cur: &mut Vec<Token>| {
        if cur.is_empty() {
            return;
        }
        let start = cur[0].start;
        let end = cur[cur.len() - 1].end;
        let tokens = cur
            .drain(..)
            .map(|t| Token {
                text: t.text,
                start: t.start - start,
                end: t.end - start,
            })
            .collect();
        out.push(RawSentence {
            text: text[start..end].to_string(),
            offset: start,
            tokens,
        });
    };
    for t in tokens {
        let terminal = matches!(t.text.as_str(), "." | "!" | "?");
        current.push(t);
        if terminal {
            close(&mut current);
        }
    }
    close(&mut current);
    out
}
