//! Dataset construction: masks to boxes, YOLO label files, label-space
//! unification, the per-class term repository and phrase assembly, text
//! statistics and the difficulty split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::BBox;
use crate::error::{Error, Result};

/// Terms kept per class.
pub const TOP_TERMS: usize = 30;
/// Term pairs combined into phrases.
pub const TOP_PAIRS: usize = 6;
/// Default minimum number of phrases per class.
pub const MIN_PHRASES: usize = 20;

/// Weight of the target-image similarity in the difficulty score.
pub const DIFFICULTY_SIMILARITY_WEIGHT: f64 = 0.6;
/// Weight of the scale coefficient `1 − A_box/A_img`.
pub const DIFFICULTY_SCALE_WEIGHT: f64 = 0.4;

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub height: usize,
    pub width: usize,
    data: Vec<bool>,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::validation(format!(
                "mask {height}x{width} with {} pixels",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on;
    }

    pub fn fill_rect(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
        for r in rows {
            for c in cols.clone() {
                self.set(r, c, true);
            }
        }
    }

    /// Loads an image file; pixels brighter than mid-gray are foreground.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let data = gray.pixels().map(|p| p.0[0] > 127).collect();
        Self::new(h as usize, w as usize, data)
    }
}

/// Tight box around the foreground. Pixel `(row, col)` covers
/// `[col, col+1] × [row, row+1]`, so a full mask maps to the unit box.
pub fn mask_to_bbox(mask: &MaskImage) -> Result<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                bounds = Some(match bounds {
                    None => (c, r, c, r),
                    Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
                });
            }
        }
    }
    let (c0, r0, c1, r1) = bounds.ok_or(Error::EmptyMask)?;
    let w = mask.width as f64;
    let h = mask.height as f64;
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    BBox::new(
        clamp(c0 as f64 / w),
        clamp(r0 as f64 / h),
        clamp((c1 + 1) as f64 / w),
        clamp((r1 + 1) as f64 / h),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub class_index: u32,
    pub bbox: BBox,
}

/// One `class x_center y_center width height` line per record.
pub fn write_yolo_txt(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let (cx, cy, w, h) = r.bbox.to_center();
        writeln!(out, "{} {cx:.6} {cy:.6} {w:.6} {h:.6}", r.class_index).unwrap();
    }
    out
}

pub fn read_yolo_txt(text: &str) -> Result<Vec<LabelRecord>> {
    const FIELDS: [&str; 4] = ["x_center", "y_center", "width", "height"];
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 5 fields, found {}", parts.len()),
            });
        }
        let class_index: u32 = parts[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("class index `{}` is not a non-negative integer", parts[0]),
        })?;
        let mut vals = [0.0f64; 4];
        for (k, (slot, raw)) in vals.iter_mut().zip(&parts[1..]).enumerate() {
            *slot = raw.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("{} `{raw}` is not a number", FIELDS[k]),
            })?;
        }
        let bad: Vec<&str> = vals
            .iter()
            .zip(FIELDS)
            .filter(|(v, _)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
            .map(|(_, name)| name)
            .collect();
        if !bad.is_empty() {
            return Err(Error::validation(format!(
                "line {line_no}: out-of-range {}",
                bad.join(", ")
            )));
        }
        let bbox = BBox::from_center(vals[0], vals[1], vals[2], vals[3])?;
        out.push(LabelRecord { class_index, bbox });
    }
    Ok(out)
}

/// Canonical class names with their base/novel split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub names: Vec<String>,
    pub novel: Vec<bool>,
}

impl ClassVocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn base_ids(&self) -> Vec<u32> {
        (0..self.len() as u32)
            .filter(|&i| !self.novel[i as usize])
            .collect()
    }

    pub fn novel_ids(&self) -> Vec<u32> {
        (0..self.len() as u32)
            .filter(|&i| self.novel[i as usize])
            .collect()
    }

    pub fn mark_novel(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            let id = self.id_of(n).ok_or_else(|| {
                Error::validation(format!("novel class `{n}` is not in the vocabulary"))
            })?;
            self.novel[id as usize] = true;
        }
        Ok(())
    }

    /// One name per line; the line index is the class id.
    pub fn to_vocab_text(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }

    /// One novel class id per line.
    pub fn to_novel_text(&self) -> String {
        self.novel_ids().iter().map(|i| format!("{i}\n")).collect()
    }

    pub fn from_texts(vocab: &str, novel: Option<&str>) -> Result<Self> {
        let names: Vec<String> = vocab
            .lines()
            .map(|l| l.trim().to_owned())
            .filter(|l| !l.is_empty())
            .collect();
        let mut v = ClassVocabulary {
            novel: vec![false; names.len()],
            names,
        };
        if let Some(text) = novel {
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let id: usize = line.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("`{line}` is not a class id"),
                })?;
                if id >= v.names.len() {
                    return Err(Error::validation(format!(
                        "novel class id {id} out of range"
                    )));
                }
                v.novel[id] = true;
            }
        }
        Ok(v)
    }
}

/// Lowercases, trims, collapses whitespace and removes whole-word modifiers
/// (single- or multi-word) until none remain.
pub fn canonicalize(name: &str, modifiers: &[String]) -> Result<String> {
    let mods: Vec<Vec<String>> = modifiers
        .iter()
        .map(|m| {
            m.split_whitespace()
                .map(str::to_lowercase)
                .collect::<Vec<_>>()
        })
        .filter(|m| !m.is_empty())
        .collect();
    let mut tokens: Vec<String> = name.split_whitespace().map(str::to_lowercase).collect();
    loop {
        let before = tokens.len();
        for m in &mods {
            let mut i = 0;
            while i + m.len() <= tokens.len() {
                if tokens[i..i + m.len()] == m[..] {
                    tokens.drain(i..i + m.len());
                } else {
                    i += 1;
                }
            }
        }
        if tokens.len() == before {
            break;
        }
    }
    if tokens.is_empty() {
        return Err(Error::validation(format!(
            "class name `{name}` is empty after canonicalization"
        )));
    }
    Ok(tokens.join(" "))
}

/// Merges raw names into a vocabulary in first-seen order. The second value
/// maps each raw name to its class id.
pub fn unify_labels(
    raw_names: &[String],
    modifiers: &[String],
) -> Result<(ClassVocabulary, Vec<u32>)> {
    if raw_names.is_empty() {
        return Err(Error::validation("no class names to unify"));
    }
    let mut vocab = ClassVocabulary::default();
    let mut index: HashMap<String, u32> = HashMap::new();
    let mut mapping = Vec::with_capacity(raw_names.len());
    for raw in raw_names {
        let canon = canonicalize(raw, modifiers)?;
        let id = *index.entry(canon.clone()).or_insert_with(|| {
            vocab.names.push(canon);
            vocab.novel.push(false);
            (vocab.names.len() - 1) as u32
        });
        mapping.push(id);
    }
    Ok((vocab, mapping))
}

/// Standard English function words.
pub const DEFAULT_STOPWORDS: &str = include_str!("stopwords_en.txt");

pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

/// Lowercased runs of alphabetic characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCount {
    pub term: String,
    pub frequency: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassTerms {
    pub class_name: String,
    pub terms: Vec<TermCount>,
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TermRepository {
    pub classes: Vec<ClassTerms>,
    pub warnings: Vec<String>,
}

/// Top terms of one class: counted, sorted by frequency then term.
pub fn class_terms(text: &str, stopwords: &HashSet<String>) -> Vec<TermCount> {
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    for tok in tokenize(text) {
        if tok.chars().count() < 2 || stopwords.contains(&tok) {
            continue;
        }
        *counts.entry(tok).or_default() += 1;
    }
    let mut terms: Vec<TermCount> = counts
        .into_iter()
        .map(|(term, frequency)| TermCount { term, frequency })
        .collect();
    terms.sort_by(|a, b| {
        b.frequency
            .cmp(&a.frequency)
            .then_with(|| a.term.cmp(&b.term))
    });
    terms.truncate(TOP_TERMS);
    terms
}

/// Builds the term lists for `(class name, description text)` pairs, in the
/// given order. Phrases are left empty; see [`assemble_phrases`].
pub fn build_term_repository(
    descriptions: &[(String, String)],
    stopwords: &HashSet<String>,
) -> TermRepository {
    let mut repo = TermRepository::default();
    for (name, text) in descriptions {
        let terms = class_terms(text, stopwords);
        if terms.is_empty() {
            repo.warnings.push(format!(
                "class `{name}`: no terms survive stop-word filtering"
            ));
        }
        repo.classes.push(ClassTerms {
            class_name: name.clone(),
            terms,
            phrases: Vec::new(),
        });
    }
    repo
}

/// Appends `s` unless the name already ends in `s`.
pub fn naive_plural(name: &str) -> String {
    if name.ends_with('s') {
        name.to_owned()
    } else {
        format!("{name}s")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhraseSet {
    pub phrases: Vec<String>,
    pub warning: Option<String>,
}

/// The first `TOP_PAIRS` index pairs `(i, j)`, `i < j`, in lexicographic
/// order.
pub fn top_term_pairs(terms: &[TermCount]) -> Vec<(usize, usize)> {
    let n = terms.len();
    (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .take(TOP_PAIRS)
        .collect()
}

/// Phrases led by the class name, in singular and plural form: one per top
/// term pair, then one per single term until `min_phrases` is reached or the
/// terms run out.
pub fn assemble_phrases(terms: &[TermCount], class_name: &str, min_phrases: usize) -> PhraseSet {
    let forms = [class_name.to_owned(), naive_plural(class_name)];
    let forms: Vec<&String> = if forms[0] == forms[1] {
        vec![&forms[0]]
    } else {
        forms.iter().collect()
    };
    let mut phrases = Vec::new();
    for (i, j) in top_term_pairs(terms) {
        for f in &forms {
            phrases.push(format!("{f} with {} and {}", terms[i].term, terms[j].term));
        }
    }
    for t in terms {
        if phrases.len() >= min_phrases {
            break;
        }
        for f in &forms {
            phrases.push(format!("{f} with {}", t.term));
        }
    }
    let warning = (phrases.len() < min_phrases).then(|| {
        format!(
            "class `{class_name}`: only {} phrases, fewer than {min_phrases}",
            phrases.len()
        )
    });
    PhraseSet { phrases, warning }
}

impl TermRepository {
    /// Fills in the phrases of every class.
    pub fn assemble(&mut self, min_phrases: usize) {
        for c in &mut self.classes {
            let set = assemble_phrases(&c.terms, &c.class_name, min_phrases);
            c.phrases = set.phrases;
            if let Some(w) = set.warning {
                self.warnings.push(w);
            }
        }
    }

    /// `class<TAB>term<TAB>frequency` per line.
    pub fn terms_tsv(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            for t in &c.terms {
                writeln!(out, "{}\t{}\t{}", c.class_name, t.term, t.frequency).unwrap();
            }
        }
        out
    }

    /// `class<TAB>phrase` per line.
    pub fn phrases_tsv(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            for p in &c.phrases {
                writeln!(out, "{}\t{p}", c.class_name).unwrap();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextQualityStats {
    pub lexical_diversity: f64,
    pub avg_tokens: f64,
    pub unique_words: usize,
    pub avg_unique_ratio: f64,
    pub sentence_length_std: f64,
}

/// Splits on line breaks and `.`, `!`, `?`, keeping sentences that contain
/// at least one token.
pub fn sentences(text: &str) -> Vec<Vec<String>> {
    text.split(['\n', '.', '!', '?'])
        .map(tokenize)
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn text_quality_stats(text: &str) -> Result<TextQualityStats> {
    let sents = sentences(text);
    if sents.is_empty() {
        return Err(Error::validation(
            "text statistics need at least one sentence",
        ));
    }
    let total: usize = sents.iter().map(Vec::len).sum();
    let unique: HashSet<&String> = sents.iter().flatten().collect();
    let n = sents.len() as f64;
    let avg_tokens = total as f64 / n;
    let avg_unique_ratio = sents
        .iter()
        .map(|s| s.iter().collect::<HashSet<_>>().len() as f64 / s.len() as f64)
        .sum::<f64>()
        / n;
    let var = sents
        .iter()
        .map(|s| (s.len() as f64 - avg_tokens).powi(2))
        .sum::<f64>()
        / n;
    Ok(TextQualityStats {
        lexical_diversity: unique.len() as f64 / total as f64,
        avg_tokens,
        unique_words: unique.len(),
        avg_unique_ratio,
        sentence_length_std: var.sqrt(),
    })
}

/// `0.6·similarity + 0.4·(1 − A_box/A_img)`, clamped to `[0, 1]`.
pub fn difficulty_score(similarity: f64, area_bbox: f64, area_img: f64) -> Result<f64> {
    if !(area_bbox > 0.0 && area_bbox <= area_img && area_img.is_finite()) {
        return Err(Error::validation(format!(
            "difficulty needs 0 < box area <= image area, got {area_bbox} and {area_img}"
        )));
    }
    if !similarity.is_finite() {
        return Err(Error::validation("difficulty similarity must be finite"));
    }
    let s = DIFFICULTY_SIMILARITY_WEIGHT * similarity
        + DIFFICULTY_SCALE_WEIGHT * (1.0 - area_bbox / area_img);
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyLevel {
    Mild,
    Moderate,
    Severe,
}

impl DifficultyLevel {
    pub const ALL: [DifficultyLevel; 3] = [
        DifficultyLevel::Mild,
        DifficultyLevel::Moderate,
        DifficultyLevel::Severe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DifficultyLevel::Mild => "mild",
            DifficultyLevel::Moderate => "moderate",
            DifficultyLevel::Severe => "severe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub score: f64,
    pub level: DifficultyLevel,
}

/// Lower empirical tercile boundaries `(q1, q2)`: the smallest scores whose
/// empirical CDF reaches 1/3 and 2/3.
pub fn tercile_thresholds(scores: &[f64]) -> Option<(f64, f64)> {
    if scores.is_empty() {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let at = |k: usize| sorted[k.clamp(1, n) - 1];
    Some((at(n.div_ceil(3)), at((2 * n).div_ceil(3))))
}

/// Mild up to and including the first tercile boundary, moderate up to and
/// including the second, severe above.
pub fn split_by_terciles(scores: &[f64]) -> Vec<DifficultyLevel> {
    let Some((q1, q2)) = tercile_thresholds(scores) else {
        return Vec::new();
    };
    scores
        .iter()
        .map(|&s| {
            if s <= q1 {
                DifficultyLevel::Mild
            } else if s <= q2 {
                DifficultyLevel::Moderate
            } else {
                DifficultyLevel::Severe
            }
        })
        .collect()
}

/// Inputs of the `convert` pipeline.
///
/// Input directory layout:
///
/// ```text
/// masks/<stem>.png          binary instance masks, one object per file
/// labels.tsv                <stem><TAB><raw class name>
/// descriptions/<name>.txt   optional; one sub-description per line, the file
///                           stem is a raw or canonical class name
/// novel.txt                 optional; raw or canonical names of novel classes
/// ```
#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub input: PathBuf,
    pub output: PathBuf,
    pub modifiers: Vec<String>,
    pub stopwords: HashSet<String>,
    pub min_phrases: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConvertSummary {
    pub labels_written: usize,
    pub classes: usize,
    pub novel_classes: usize,
    pub described_classes: usize,
    pub warnings: Vec<String>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn find_mask(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "PNG", "bmp", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
}

/// Runs the whole dataset pipeline. Output directory:
///
/// ```text
/// labels/<stem>.txt   YOLO labels
/// classes.txt         canonical names, line index = class id
/// novel.txt           novel class ids
/// terms.tsv           class, term, frequency
/// phrases.tsv         class, phrase
/// text_stats.tsv      per-class text statistics
/// ```
pub fn convert(opts: &ConvertOptions) -> Result<ConvertSummary> {
    let mut summary = ConvertSummary::default();
    let labels_path = opts.input.join("labels.tsv");
    let mut entries = Vec::new();
    for (i, line) in read_text(&labels_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (stem, name) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!(
                "{}: expected `<stem><TAB><class name>`",
                labels_path.display()
            ),
        })?;
        entries.push((stem.trim().to_owned(), name.trim().to_owned()));
    }
    let raw: Vec<String> = entries.iter().map(|(_, n)| n.clone()).collect();
    let (mut vocab, mapping) = unify_labels(&raw, &opts.modifiers)?;

    let novel_path = opts.input.join("novel.txt");
    if novel_path.exists() {
        let names = read_text(&novel_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| canonicalize(l, &opts.modifiers))
            .collect::<Result<Vec<_>>>()?;
        vocab.mark_novel(&names)?;
    }

    let mask_dir = opts.input.join("masks");
    let mut per_stem: BTreeMap<String, Vec<LabelRecord>> = BTreeMap::new();
    for ((stem, _), &class_index) in entries.iter().zip(&mapping) {
        let path = find_mask(&mask_dir, stem).ok_or_else(|| {
            Error::io(
                mask_dir.join(format!("{stem}.png")),
                std::io::Error::new(std::io::ErrorKind::NotFound, "mask not found"),
            )
        })?;
        let bbox = match mask_to_bbox(&MaskImage::load(&path)?) {
            Ok(b) => b,
            Err(Error::EmptyMask) => {
                summary
                    .warnings
                    .push(format!("{}: empty mask skipped", path.display()));
                continue;
            }
            Err(e) => return Err(e),
        };
        per_stem
            .entry(stem.clone())
            .or_default()
            .push(LabelRecord { class_index, bbox });
    }
    for (stem, records) in &per_stem {
        let path = opts.output.join("labels").join(format!("{stem}.txt"));
        write_atomic(&path, write_yolo_txt(records).as_bytes())?;
        summary.labels_written += 1;
    }
    write_atomic(
        &opts.output.join("classes.txt"),
        vocab.to_vocab_text().as_bytes(),
    )?;
    write_atomic(
        &opts.output.join("novel.txt"),
        vocab.to_novel_text().as_bytes(),
    )?;

    let desc_dir = opts.input.join("descriptions");
    let mut texts: BTreeMap<u32, String> = BTreeMap::new();
    if desc_dir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&desc_dir)
            .map_err(|e| Error::io(&desc_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        for path in files {
            let stem = path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .replace('_', " ");
            let canon = canonicalize(&stem, &opts.modifiers)?;
            match vocab.id_of(&canon) {
                Some(id) => {
                    let text = read_text(&path)?;
                    let slot = texts.entry(id).or_default();
                    slot.push_str(&text);
                    if !text.ends_with('\n') {
                        slot.push('\n');
                    }
                }
                None => summary.warnings.push(format!(
                    "{}: `{canon}` is not a known class",
                    path.display()
                )),
            }
        }
    }
    let described: Vec<(String, String)> = texts
        .iter()
        .map(|(&id, t)| (vocab.names[id as usize].clone(), t.clone()))
        .collect();
    let mut repo = build_term_repository(&described, &opts.stopwords);
    repo.assemble(opts.min_phrases);
    write_atomic(&opts.output.join("terms.tsv"), repo.terms_tsv().as_bytes())?;
    write_atomic(
        &opts.output.join("phrases.tsv"),
        repo.phrases_tsv().as_bytes(),
    )?;

    let mut stats = String::from("class\tlexical_diversity\tavg_tokens\tunique_words\tavg_unique_ratio\tsentence_length_std\n");
    for (name, text) in &described {
        match text_quality_stats(text) {
            Ok(s) => writeln!(
                stats,
                "{name}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}",
                s.lexical_diversity,
                s.avg_tokens,
                s.unique_words,
                s.avg_unique_ratio,
                s.sentence_length_std
            )
            .unwrap(),
            Err(_) => summary
                .warnings
                .push(format!("class `{name}`: no sentences for text statistics")),
        }
    }
    write_atomic(&opts.output.join("text_stats.tsv"), stats.as_bytes())?;

    summary.classes = vocab.len();
    summary.novel_classes = vocab.novel_ids().len();
    summary.described_classes = described.len();
    summary.warnings.extend(repo.warnings);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn full_mask_is_unit_box() {
        let mut m = MaskImage::empty(7, 13);
        m.fill_rect(0..7, 0..13);
        let b = mask_to_bbox(&m).unwrap();
        assert_eq!(b.to_center(), (0.5, 0.5, 1.0, 1.0));
    }

    #[test]
    fn single_pixel_box() {
        let mut m = MaskImage::empty(10, 10);
        m.set(0, 0, true);
        let (cx, cy, w, h) = mask_to_bbox(&m).unwrap().to_center();
        assert_abs_diff_eq!(cx, 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(cy, 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(w, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn empty_mask_errors() {
        assert!(matches!(
            mask_to_bbox(&MaskImage::empty(4, 4)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn yolo_line_format() {
        let rec = LabelRecord {
            class_index: 3,
            bbox: BBox::from_center(0.5, 0.5, 0.2, 0.1).unwrap(),
        };
        assert_eq!(
            write_yolo_txt(&[rec]),
            "3 0.500000 0.500000 0.200000 0.100000\n"
        );
    }

    #[test]
    fn yolo_parse_errors() {
        let err = read_yolo_txt("0 0.5 0.5 0.1 0.1\n1 0.5 0.5 0.2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = read_yolo_txt("x 0.5 0.5 0.1 0.1").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = read_yolo_txt("2 0.5 1.5 0.1 -0.1").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("y_center") && msg.contains("height") && !msg.contains("width"),
            "{msg}"
        );
    }

    #[test]
    fn unify_examples() {
        let raw: Vec<String> = [
            "Red Imported Fire Ant",
            "red imported fire ant",
            "  Owl ",
            "juvenile tiger",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let (vocab, map) = unify_labels(&raw, &["juvenile".into()]).unwrap();
        assert_eq!(vocab.names, vec!["red imported fire ant", "owl", "tiger"]);
        assert_eq!(map, vec![0, 0, 1, 2]);
        assert!(unify_labels(&["Juvenile".into()], &["juvenile".into()]).is_err());
        assert!(unify_labels(&[], &[]).is_err());
    }

    #[test]
    fn multiword_modifiers_reach_a_fixpoint() {
        let mods = vec!["a b".to_string()];
        let once = canonicalize("a a b b tiger", &mods).unwrap();
        assert_eq!(once, "tiger");
        assert_eq!(canonicalize(&once, &mods).unwrap(), once);
    }

    #[test]
    fn term_counting() {
        let stop: HashSet<String> = ["the".to_string()].into();
        let repo = build_term_repository(
            &[("moth".into(), "The mottled, mottled wing.".into())],
            &stop,
        );
        assert_eq!(
            repo.classes[0].terms[0],
            TermCount {
                term: "mottled".into(),
                frequency: 2
            }
        );
        assert_eq!(repo.classes[0].terms[1].term, "wing");
        assert!(repo.warnings.is_empty());
    }

    #[test]
    fn stopword_only_text_warns() {
        let repo = build_term_repository(
            &[("owl".into(), "the and of the".into())],
            &default_stopwords(),
        );
        assert!(repo.classes[0].terms.is_empty());
        assert_eq!(repo.warnings.len(), 1);
    }

    #[test]
    fn terms_are_capped_and_ordered() {
        let text: String = (0..40)
            .map(|i| {
                format!(
                    "{} ",
                    std::iter::repeat_n(char::from(b'a' + (i % 26) as u8), 2 + i / 26)
                        .collect::<String>()
                )
            })
            .collect::<String>()
            + "zz zz bb";
        let t = class_terms(&text, &HashSet::new());
        assert_eq!(t.len(), TOP_TERMS);
        assert_eq!(t[0].term, "zz");
        assert_eq!(t[1].term, "bb");
        assert!(t.windows(2).all(|w| w[0].frequency > w[1].frequency
            || (w[0].frequency == w[1].frequency && w[0].term < w[1].term)));
        assert!(t.iter().all(|x| x.term.chars().all(char::is_alphabetic)));
    }

    fn tc(terms: &[&str]) -> Vec<TermCount> {
        terms
            .iter()
            .map(|t| TermCount {
                term: t.to_string(),
                frequency: 1,
            })
            .collect()
    }

    #[test]
    fn pairs_follow_lexicographic_order() {
        assert_eq!(
            top_term_pairs(&tc(&["a", "b", "c", "d"])),
            vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        );
        assert_eq!(
            top_term_pairs(&tc(&["a", "b", "c", "d", "e", "f"])).len(),
            6
        );
    }

    #[test]
    fn phrases_use_singular_and_plural() {
        let set = assemble_phrases(
            &tc(&[
                "mottled", "brown", "wing", "dusty", "soft", "pale", "grey", "fringe",
            ]),
            "moth",
            20,
        );
        assert!(set.phrases.iter().any(|p| p.starts_with("moth ")));
        assert!(set.phrases.iter().any(|p| p.starts_with("moths ")));
        assert!(set.phrases.len() >= 20);
        assert!(set.warning.is_none());

        let short = assemble_phrases(&tc(&["mottled"]), "moth", 20);
        assert!(short.phrases.len() < 20);
        assert!(short.warning.is_some());
        assert_eq!(naive_plural("moss"), "moss");
    }

    #[test]
    fn text_stats_examples() {
        let s = text_quality_stats("a b c").unwrap();
        assert_eq!(s.lexical_diversity, 1.0);
        assert_eq!(s.avg_tokens, 3.0);
        assert_eq!(s.unique_words, 3);
        assert_eq!(s.avg_unique_ratio, 1.0);
        assert_eq!(s.sentence_length_std, 0.0);

        assert_eq!(text_quality_stats("a a").unwrap().lexical_diversity, 0.5);
        assert_eq!(
            text_quality_stats("a b.\nc d e f")
                .unwrap()
                .sentence_length_std,
            1.0
        );
        assert!(text_quality_stats("  ... ").is_err());
    }

    #[test]
    fn difficulty_examples() {
        assert_abs_diff_eq!(
            difficulty_score(1.0, 4.0, 4.0).unwrap(),
            0.6,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            difficulty_score(0.0, 1e-9, 1.0).unwrap(),
            0.4,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            difficulty_score(1.0, 1e-12, 1.0).unwrap(),
            1.0,
            epsilon = 1e-9
        );
        assert_eq!(difficulty_score(-1.0, 1.0, 1.0).unwrap(), 0.0);
        assert!(difficulty_score(0.5, 0.0, 1.0).is_err());
        assert!(difficulty_score(0.5, 2.0, 1.0).is_err());
    }

    #[test]
    fn tercile_examples() {
        use DifficultyLevel::*;
        let scores: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(
            split_by_terciles(&scores),
            vec![Mild, Mild, Mild, Moderate, Moderate, Moderate, Severe, Severe, Severe]
        );
        assert!(split_by_terciles(&[0.4; 7]).iter().all(|&l| l == Mild));
        let shuffled = [5.0, 9.0, 1.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0];
        for (s, l) in shuffled.iter().zip(split_by_terciles(&shuffled)) {
            assert_eq!(l, split_by_terciles(&scores)[*s as usize - 1]);
        }
    }

    #[test]
    fn vocabulary_files_round_trip() {
        let mut v = ClassVocabulary {
            names: vec!["owl".into(), "moth".into(), "crab".into()],
            novel: vec![false; 3],
        };
        v.mark_novel(&["crab".into()]).unwrap();
        let back =
            ClassVocabulary::from_texts(&v.to_vocab_text(), Some(&v.to_novel_text())).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.base_ids(), vec![0, 1]);
        assert!(v.mark_novel(&["eel".into()]).is_err());
    }
}
