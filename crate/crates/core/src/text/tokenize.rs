/// Punctuation split off as standalone tokens.
pub const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')'];

/// Fill-in-the-blank marker in questions.
pub const BLANK: &str = "_";

pub fn is_punctuation(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCTUATION.contains(&c))
}

/// Lowercases, splits on whitespace and detaches punctuation. A run of
/// underscores becomes the single blank token `_`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let mut current = String::new();
        let mut chars = word.chars().peekable();
        while let Some(ch) = chars.next() {
            if PUNCTUATION.contains(&ch) || ch == '_' {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                if ch == '_' {
                    while chars.peek() == Some(&'_') {
                        chars.next();
                    }
                    tokens.push(BLANK.to_string());
                } else {
                    tokens.push(ch.to_string());
                }
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Splits raw article text after `.`, `!` or `?` when followed by
/// whitespace and an uppercase letter, or by the end of the text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        let end = i + ch.len_utf8();
        let rest = &text[end..];
        let boundary = if rest.trim().is_empty() {
            true
        } else {
            rest.starts_with(char::is_whitespace)
                && rest.trim_start().chars().next().is_some_and(char::is_uppercase)
        };
        if boundary {
            push_trimmed(&mut sentences, &text[start..end]);
            start = end;
        }
    }
    push_trimmed(&mut sentences, &text[start..]);
    sentences
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Shyness is normal."), toks(&["shyness", "is", "normal", "."]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("It is _ ."), toks(&["it", "is", "_", "."]));
        assert_eq!(
            tokenize("\"Don't,\" she said (twice)."),
            toks(&["\"", "don", "'", "t", ",", "\"", "she", "said", "(", "twice", ")", "."])
        );
        assert_eq!(tokenize("The answer is ____."), toks(&["the", "answer", "is", "_", "."]));
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_sentences("A b. C d."), vec!["A b.", "C d."]);
        assert_eq!(split_sentences("one sentence"), vec!["one sentence"]);
        assert_eq!(split_sentences("Hi! Ok? Yes."), vec!["Hi!", "Ok?", "Yes."]);
        assert_eq!(split_sentences("It costs 3.5 dollars. Fine."), vec!["It costs 3.5 dollars.", "Fine."]);
        assert_eq!(split_sentences("lower. case stays"), vec!["lower. case stays"]);
        assert!(split_sentences("   ").is_empty());
    }

    proptest! {
        #[test]
        fn tokenize_is_a_fixed_point(text in "[a-zA-Z_.,!?;:\"'() ]{0,60}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn split_never_yields_empty(text in "[a-zA-Z.!? ]{0,80}") {
            prop_assert!(split_sentences(&text).iter().all(|s| !s.trim().is_empty()));
        }
    }
}
