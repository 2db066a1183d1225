//! Praat TextGrid import for word alignments.
//!
//! Both the long ("verbose") and short text formats are read by the same
//! tokenizer: only quoted strings, numbers and `<exists>` flags carry data,
//! labels such as `xmin =` or `intervals [3]:` are skipped.

use crate::corpus::{is_silence_token, AlignedWord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub xmin: f64,
    pub xmax: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tier {
    Interval { name: String, intervals: Vec<Interval> },
    Point { name: String, points: Vec<(f64, String)> },
}

impl Tier {
    pub fn name(&self) -> &str {
        match self {
            Tier::Interval { name, .. } | Tier::Point { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextGrid {
    pub xmin: f64,
    pub xmax: f64,
    pub tiers: Vec<Tier>,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Text(String),
    Number(f64),
    Exists,
}

fn tokenize(input: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut chars = input.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        match c {
            '"' => {
                chars.next();
                let mut text = String::new();
                loop {
                    match chars.next() {
                        Some((_, '"')) => {
                            if matches!(chars.peek(), Some((_, '"'))) {
                                chars.next();
                                text.push('"');
                            } else {
                                break;
                            }
                        }
                        Some((_, ch)) => text.push(ch),
                        None => return Err(Error::format("TextGrid", "unterminated string")),
                    }
                }
                tokens.push(Token::Text(text));
            }
            '!' => {
                // Comment to end of line.
                while let Some((_, ch)) = chars.next() {
                    if ch == '\n' {
                        break;
                    }
                }
            }
            '[' => {
                // Index labels such as `item [1]:` carry no data.
                for (_, ch) in chars.by_ref() {
                    if ch == ']' {
                        break;
                    }
                }
            }
            c if c.is_whitespace() => {
                chars.next();
            }
            _ => {
                let mut end = start;
                while let Some(&(i, ch)) = chars.peek() {
                    if ch.is_whitespace() || ch == '"' || ch == '[' {
                        break;
                    }
                    end = i + ch.len_utf8();
                    chars.next();
                }
                let word = &input[start..end];
                if word == "<exists>" {
                    tokens.push(Token::Exists);
                } else if let Ok(value) = word.parse::<f64>() {
                    tokens.push(Token::Number(value));
                }
            }
        }
    }
    Ok(tokens)
}

struct Cursor {
    tokens: Vec<Token>,
    position: usize,
}

impl Cursor {
    fn next(&mut self) -> Result<Token> {
        let token = self
            .tokens
            .get(self.position)
            .cloned()
            .ok_or_else(|| Error::format("TextGrid", "unexpected end of file"))?;
        self.position += 1;
        Ok(token)
    }

    fn text(&mut self) -> Result<String> {
        match self.next()? {
            Token::Text(text) => Ok(text),
            other => Err(Error::format("TextGrid", format!("expected string, found {other:?}"))),
        }
    }

    fn number(&mut self) -> Result<f64> {
        match self.next()? {
            Token::Number(value) if value.is_finite() => Ok(value),
            other => Err(Error::format("TextGrid", format!("expected number, found {other:?}"))),
        }
    }

    fn count(&mut self) -> Result<usize> {
        let value = self.number()?;
        let remaining = self.tokens.len().saturating_sub(self.position);
        if value < 0.0 || value.fract() != 0.0 || value as usize > remaining {
            return Err(Error::format("TextGrid", format!("bad count {value}")));
        }
        Ok(value as usize)
    }
}

pub fn parse_textgrid(input: &str) -> Result<TextGrid> {
    let mut cursor = Cursor {
        tokens: tokenize(input)?,
        position: 0,
    };
    if cursor.text()? != "ooTextFile" || cursor.text()? != "TextGrid" {
        return Err(Error::format("TextGrid", "missing ooTextFile/TextGrid header"));
    }
    let xmin = cursor.number()?;
    let xmax = cursor.number()?;
    if cursor.next()? != Token::Exists {
        return Ok(TextGrid {
            xmin,
            xmax,
            tiers: Vec::new(),
        });
    }
    let tier_count = cursor.count()?;
    let mut tiers = Vec::with_capacity(tier_count);
    for _ in 0..tier_count {
        let class = cursor.text()?;
        let name = cursor.text()?;
        let _tier_min = cursor.number()?;
        let _tier_max = cursor.number()?;
        let size = cursor.count()?;
        match class.as_str() {
            "IntervalTier" => {
                let mut intervals = Vec::with_capacity(size);
                for _ in 0..size {
                    let xmin = cursor.number()?;
                    let xmax = cursor.number()?;
                    let text = cursor.text()?;
                    intervals.push(Interval { xmin, xmax, text });
                }
                tiers.push(Tier::Interval { name, intervals });
            }
            "TextTier" => {
                let mut points = Vec::with_capacity(size);
                for _ in 0..size {
                    let time = cursor.number()?;
                    let mark = cursor.text()?;
                    points.push((time, mark));
                }
                tiers.push(Tier::Point { name, points });
            }
            other => return Err(Error::format("TextGrid", format!("unknown tier class `{other}`"))),
        }
    }
    Ok(TextGrid { xmin, xmax, tiers })
}

/// Extracts the word alignment from a TextGrid.
///
/// Uses the interval tier named `words` (case-insensitive) if present,
/// otherwise the first interval tier. Silence intervals are dropped.
pub fn textgrid_to_alignment(grid: &TextGrid) -> Result<Vec<AlignedWord>> {
    let interval_tiers = || {
        grid.tiers.iter().filter_map(|tier| match tier {
            Tier::Interval { name, intervals } => Some((name, intervals)),
            Tier::Point { .. } => None,
        })
    };
    let (_, intervals) = interval_tiers()
        .find(|(name, _)| name.eq_ignore_ascii_case("words"))
        .or_else(|| interval_tiers().next())
        .ok_or_else(|| Error::format("TextGrid", "no interval tier"))?;
    Ok(intervals
        .iter()
        .filter(|interval| !is_silence_token(&interval.text))
        .map(|interval| AlignedWord {
            word: interval.text.trim().to_string(),
            start_s: interval.xmin,
            end_s: interval.xmax,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LONG: &str = r#"File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 1.2
tiers? <exists>
size = 2
item []:
    item [1]:
        class = "IntervalTier"
        name = "phones"
        xmin = 0
        xmax = 1.2
        intervals: size = 1
        intervals [1]:
            xmin = 0
            xmax = 1.2
            text = "AH0"
    item [2]:
        class = "IntervalTier"
        name = "words"
        xmin = 0
        xmax = 1.2
        intervals: size = 3
        intervals [1]:
            xmin = 0
            xmax = 0.35
            text = "the"
        intervals [2]:
            xmin = 0.35
            xmax = 0.5
            text = "sp"
        intervals [3]:
            xmin = 0.5
            xmax = 1.2
            text = "say ""hi"""
"#;

    const SHORT: &str = "File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\n0\n1\n<exists>\n1\n\"IntervalTier\"\n\"w\"\n0\n1\n2\n0\n0.4\n\"hello\"\n0.4\n1\n\"world\"\n";

    #[test]
    fn long_format_words_tier() {
        let grid = parse_textgrid(LONG).unwrap();
        assert_eq!(grid.tiers.len(), 2);
        let words = textgrid_to_alignment(&grid).unwrap();
        assert_eq!(words.len(), 2);
        assert_eq!(words[0].word, "the");
        assert_eq!(words[1].word, "say \"hi\"");
        assert_eq!(words[1].start_s, 0.5);
    }

    #[test]
    fn short_format_falls_back_to_first_interval_tier() {
        let grid = parse_textgrid(SHORT).unwrap();
        let words = textgrid_to_alignment(&grid).unwrap();
        let tokens: Vec<_> = words.iter().map(|w| w.word.as_str()).collect();
        assert_eq!(tokens, ["hello", "world"]);
    }

    #[test]
    fn truncated_input_is_an_error() {
        let cut = &LONG[..LONG.len() / 2];
        assert!(parse_textgrid(cut).is_err());
        assert!(parse_textgrid("").is_err());
        assert!(parse_textgrid("\"ooTextFile\" \"TextGrid\" 0 1 <exists> 99999999999").is_err());
    }
}
