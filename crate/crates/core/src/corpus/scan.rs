use super::{parse_note_name, CorpusIndex, NoteEntry};
use crate::{Error, Result};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Rules mapping a clip's path (relative to the corpus root, `/`-separated) to
/// its tags.
///
/// `pattern` is a regular expression with named groups: `style`, `octave`, and
/// either `note` (a name such as `C#`) or `semitone` (0–11); `dynamics` is
/// optional. When `styles` is set, clips whose style is not listed are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSchema {
    pub pattern: String,
    #[serde(default)]
    pub styles: Option<Vec<String>>,
    #[serde(default = "default_extensions")]
    pub extensions: Vec<String>,
}

fn default_extensions() -> Vec<String> {
    vec!["wav".into()]
}

impl Default for TagSchema {
    /// Layout written by the synthetic corpus: `style/C#4_mf_003.wav`.
    fn default() -> Self {
        Self {
            pattern: r"^(?P<style>[^/]+)/(?P<note>[A-G][#b]?)(?P<octave>\d+)(?:_(?P<dynamics>[a-z]+))?(?:_\d+)?\.wav$".into(),
            styles: None,
            extensions: default_extensions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ScanReport {
    pub index: CorpusIndex,
    pub skipped: Vec<SkippedFile>,
}

struct Tags {
    semitone: u8,
    octave: u8,
    style: String,
    dynamics: Option<String>,
}

fn extract(re: &Regex, schema: &TagSchema, rel: &str) -> std::result::Result<Tags, String> {
    let caps = re.captures(rel).ok_or("path does not match the tag pattern")?;
    let style = caps
        .name("style")
        .ok_or("pattern has no `style` group")?
        .as_str()
        .to_string();
    if let Some(vocab) = &schema.styles {
        if !vocab.contains(&style) {
            return Err(format!("unknown style token `{style}`"));
        }
    }
    let by_name = caps.name("note").map(|m| {
        parse_note_name(m.as_str()).ok_or_else(|| format!("unparseable note name `{}`", m.as_str()))
    });
    let by_number = caps.name("semitone").map(|m| {
        m.as_str()
            .parse::<u8>()
            .ok()
            .filter(|&s| s < 12)
            .ok_or_else(|| format!("semitone `{}` outside 0-11", m.as_str()))
    });
    let semitone = match (by_name, by_number) {
        (Some(a), Some(b)) => {
            let (a, b) = (a?, b?);
            if a != b {
                return Err(format!("ambiguous semitone: note name gives {a}, number gives {b}"));
            }
            a
        }
        (Some(a), None) => a?,
        (None, Some(b)) => b?,
        (None, None) => return Err("no note or semitone tag".into()),
    };
    let octave_text = caps.name("octave").ok_or("no octave tag")?.as_str();
    let octave = octave_text
        .parse::<u8>()
        .ok()
        .filter(|&o| o <= 8)
        .ok_or_else(|| format!("octave `{octave_text}` outside 0-8"))?;
    Ok(Tags {
        semitone,
        octave,
        style,
        dynamics: caps.name("dynamics").map(|m| m.as_str().to_string()),
    })
}

/// Walks `root` and tags every audio file with `schema`.
///
/// Files whose tags cannot be extracted, or whose header is unreadable, are
/// listed in [`ScanReport::skipped`] with a reason.
pub fn scan_corpus(root: &Path, schema: &TagSchema) -> Result<ScanReport> {
    let re = Regex::new(&schema.pattern)
        .map_err(|e| Error::invalid(format!("tag pattern: {e}")))?;
    std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for item in walkdir::WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !item.file_type().is_file() {
            continue;
        }
        let path = item.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if !schema.extensions.iter().any(|e| e.eq_ignore_ascii_case(&ext)) {
            continue;
        }
        let rel = path
            .strip_prefix(root)
            .expect("walkdir yields children of root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let tags = match extract(&re, schema, &rel) {
            Ok(tags) => tags,
            Err(reason) => {
                skipped.push(SkippedFile {
                    path: path.to_path_buf(),
                    reason,
                });
                continue;
            }
        };
        if let Err(e) = hound::WavReader::open(path) {
            skipped.push(SkippedFile {
                path: path.to_path_buf(),
                reason: format!("unreadable audio: {e}"),
            });
            continue;
        }
        entries.push(NoteEntry {
            audio_ref: rel,
            semitone: tags.semitone,
            octave: tags.octave,
            style: tags.style,
            dynamics: tags.dynamics,
            split: None,
        });
    }
    if entries.is_empty() {
        return Err(Error::ZeroUsableEntries);
    }

    let present = |s: &String| entries.iter().any(|e| &e.style == s);
    let style_vocab: Vec<String> = match &schema.styles {
        Some(vocab) => vocab.iter().filter(|s| present(s)).cloned().collect(),
        None => {
            let mut v: Vec<String> = entries.iter().map(|e| e.style.clone()).collect();
            v.sort();
            v.dedup();
            v
        }
    };
    let mut index = CorpusIndex::new(entries, style_vocab)?;
    index.root = Some(root.to_path_buf());
    Ok(ScanReport { index, skipped })
}
