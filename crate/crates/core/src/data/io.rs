//! Plain-text dataset files.
//!
//! | file   | line format                                              |
//! |--------|----------------------------------------------------------|
//! | corpus | `text`                                                   |
//! | pairs  | `input \t target`                                        |
//! | span   | `passage \t question \t start \t end` (`-1 -1` = no answer) |
//! | choice | `passage \t question \t label \t option_1 \t option_2 ...` |
//!
//! Text fields are tokenized with [`tokenize`]; span positions index the
//! passage tokens.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::tokenize::{detokenize, tokenize};
use super::vocab::{TokenId, Vocab};
use crate::error::{bail, Result};

pub type Tokens = Vec<String>;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_owned).filter(|l| !l.trim().is_empty()).collect())
}

fn fields<'a>(line: &'a str, path: &Path, no: usize, min: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() < min {
        bail!(Data, "{}:{}: expected at least {min} tab-separated fields, found {}", path.display(), no + 1, f.len());
    }
    Ok(f)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Tokens>> {
    Ok(read_lines(path.as_ref())?.iter().map(|l| tokenize(l)).collect())
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(Tokens, Tokens)>> {
    let path = path.as_ref();
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(no, l)| {
            let f = fields(l, path, no, 2)?;
            if f.len() != 2 {
                bail!(Data, "{}:{}: expected 2 fields", path.display(), no + 1);
            }
            Ok((tokenize(f[0]), tokenize(f[1])))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanRecord {
    pub passage: Tokens,
    pub question: Tokens,
    pub answer: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChoiceRecord {
    pub passage: Tokens,
    pub question: Tokens,
    pub label: usize,
    pub options: Vec<Tokens>,
}

pub fn read_span(path: impl AsRef<Path>) -> Result<Vec<SpanRecord>> {
    let path = path.as_ref();
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(no, l)| {
            let f = fields(l, path, no, 4)?;
            let parse = |s: &str| -> Result<i64> {
                s.trim()
                    .parse()
                    .map_err(|_| crate::Error::Data(format!("{}:{}: bad position `{s}`", path.display(), no + 1)))
            };
            let passage = tokenize(f[0]);
            let (s, e) = (parse(f[2])?, parse(f[3])?);
            let answer = if s < 0 || e < 0 {
                None
            } else if s <= e && (e as usize) < passage.len() {
                Some((s as usize, e as usize))
            } else {
                bail!(Data, "{}:{}: span ({s}, {e}) outside passage", path.display(), no + 1);
            };
            Ok(SpanRecord {
                passage,
                question: tokenize(f[1]),
                answer,
            })
        })
        .collect()
}

pub fn read_choice(path: impl AsRef<Path>) -> Result<Vec<ChoiceRecord>> {
    let path = path.as_ref();
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(no, l)| {
            let f = fields(l, path, no, 5)?;
            let Ok(label) = f[2].trim().parse::<usize>() else {
                bail!(Data, "{}:{}: bad label `{}`", path.display(), no + 1, f[2]);
            };
            let options: Vec<Tokens> = f[3..].iter().map(|o| tokenize(o)).collect();
            if label >= options.len() {
                bail!(Data, "{}:{}: label {label} out of range", path.display(), no + 1);
            }
            Ok(ChoiceRecord {
                passage: tokenize(f[0]),
                question: tokenize(f[1]),
                label,
                options,
            })
        })
        .collect()
}

pub fn write_lines<S: AsRef<str>>(path: impl AsRef<Path>, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[(Tokens, Tokens)]) -> Result<()> {
    let mut out = String::new();
    for (a, b) in pairs {
        let _ = writeln!(out, "{}\t{}", detokenize(a), detokenize(b));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_span(path: impl AsRef<Path>, records: &[SpanRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let (s, e) = r.answer.map_or((-1, -1), |(s, e)| (s as i64, e as i64));
        let _ = writeln!(out, "{}\t{}\t{s}\t{e}", detokenize(&r.passage), detokenize(&r.question));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_choice(path: impl AsRef<Path>, records: &[ChoiceRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let _ = write!(out, "{}\t{}\t{}", detokenize(&r.passage), detokenize(&r.question), r.label);
        for o in &r.options {
            let _ = write!(out, "\t{}", detokenize(o));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Id sequences back to token strings.
pub fn to_tokens(vocab: &Vocab, ids: &[TokenId]) -> Tokens {
    vocab.decode(ids)
}
