//! Corpus and resource files.
//!
//! * corpus: JSONL, one [`MultimodalExample`] per line
//! * lexicon: `phrase<TAB>POS|NEU|NEG` per line
//! * gazetteer: one phrase per line
//! * ANP vocabulary: one adjective-noun pair per line, line order is the index
//! * token vocabulary: one token per line, line order is the id

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use mabsa_core::corpus::{MultimodalExample, Sentiment};
use mabsa_core::vocab::Vocabulary;
use mabsa_core::weak_label::{AnpVocabulary, AspectGazetteer, OpinionLexicon};

use crate::error::{AppError, Result};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| AppError::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    open(path)?.lines().collect::<std::io::Result<_>>().map_err(|e| AppError::io(path, e))
}

/// Creates `path` (and its parent directories) and hands a buffered writer
/// to `body`.
pub fn write_with<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| AppError::io(path, e))
}

/// Parses and validates JSONL records. Blank lines are skipped; every error
/// names its 1-based line.
pub fn parse_jsonl<R: Read>(reader: R, path: &Path) -> Result<Vec<MultimodalExample>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| AppError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| AppError::format(path, format!("line {}: {}", i + 1, msg));
        let ex: MultimodalExample = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        ex.validate().map_err(|e| at(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<MultimodalExample>> {
    parse_jsonl(open(path)?, path)
}

pub fn to_jsonl(examples: &[MultimodalExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: &Path, examples: &[MultimodalExample]) -> Result<()> {
    write_with(path, |w| w.write_all(to_jsonl(examples).as_bytes()))
}

fn parse_polarity(s: &str) -> Option<Sentiment> {
    Sentiment::ALL.into_iter().find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
}

pub fn load_lexicon(path: &Path) -> Result<OpinionLexicon> {
    let mut entries = Vec::new();
    for (i, line) in read_lines(path)?.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (phrase, pol) = line
            .split_once('\t')
            .ok_or_else(|| AppError::format(path, format!("line {}: expected phrase<TAB>polarity", i + 1)))?;
        let pol = parse_polarity(pol)
            .ok_or_else(|| AppError::format(path, format!("line {}: unknown polarity {:?}", i + 1, pol)))?;
        entries.push((phrase.to_string(), pol));
    }
    OpinionLexicon::new(entries.iter().map(|(p, s)| (p.as_str(), *s)))
        .map_err(|e| AppError::format(path, e.to_string()))
}

pub fn write_lexicon(path: &Path, lexicon: &OpinionLexicon) -> Result<()> {
    write_with(path, |w| {
        for (phrase, pol) in lexicon.entries() {
            writeln!(w, "{}\t{}", phrase, pol.as_str())?;
        }
        Ok(())
    })
}

pub fn load_gazetteer(path: &Path) -> Result<AspectGazetteer> {
    let lines = read_lines(path)?;
    AspectGazetteer::new(lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty()))
        .map_err(|e| AppError::format(path, e.to_string()))
}

pub fn write_gazetteer(path: &Path, gazetteer: &AspectGazetteer) -> Result<()> {
    write_with(path, |w| {
        for phrase in gazetteer.phrases() {
            writeln!(w, "{phrase}")?;
        }
        Ok(())
    })
}

pub fn load_anps(path: &Path) -> Result<AnpVocabulary> {
    let lines: Vec<String> = read_lines(path)?.into_iter().map(|l| l.trim().to_string()).collect();
    AnpVocabulary::new(lines).map_err(|e| AppError::format(path, e.to_string()))
}

pub fn write_anps(path: &Path, anps: &AnpVocabulary) -> Result<()> {
    write_lines(path, anps.entries())
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::from_lines(&read_lines(path)?).map_err(|e| AppError::format(path, e.to_string()))
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_lines(path, vocab.tokens())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    write_with(path, |w| {
        for l in lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })
}
