//! Tab-separated `<name>.content` / `<name>.cites` pairs.
//!
//! Class ids follow the order of an optional `<name>.labels` file (one label
//! per line); without it they are the sorted distinct label strings.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::Graph;
use crate::numkit::Matrix;
use crate::{Error, Result};

pub fn load_linqs_text(dir: &Path) -> Result<Graph> {
    let content_path = find_content_file(dir)?;
    let cites_path = content_path.with_extension("cites");
    let labels_path = content_path.with_extension("labels");

    let content = read(&content_path)?;
    let parsed = parse_content(&content_path, &content)?;

    let vocabulary = if labels_path.exists() {
        let text = read(&labels_path)?;
        let vocab: Vec<String> = lines(&text).map(|(_, l)| l.trim().to_string()).collect();
        if let Some((pos, _)) = vocab.iter().enumerate().find(|(k, l)| vocab[..*k].contains(l)) {
            return Err(Error::parse(&labels_path, pos + 1, "duplicate label"));
        }
        vocab
    } else {
        let mut vocab: Vec<String> = parsed.label_strings.iter().map(|(_, l)| l.clone()).collect();
        vocab.sort();
        vocab.dedup();
        vocab
    };
    let class_of: HashMap<&str, usize> = vocabulary.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
    let mut labels = Vec::with_capacity(parsed.names.len());
    for (line, label) in &parsed.label_strings {
        match class_of.get(label.as_str()) {
            Some(&k) => labels.push(k),
            None => return Err(Error::parse(&content_path, *line, format!("label {label:?} is not in the label vocabulary"))),
        }
    }

    let index: HashMap<&str, usize> = parsed.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let cites = read(&cites_path)?;
    let mut edges = Vec::new();
    for (line, text) in lines(&cites) {
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::parse(&cites_path, line, format!("expected 2 fields, found {}", fields.len())));
        }
        let mut ends = [0usize; 2];
        for (end, id) in ends.iter_mut().zip(&fields) {
            *end = *index
                .get(id)
                .ok_or_else(|| Error::parse(&cites_path, line, format!("unknown node id {id:?}")))?;
        }
        edges.push((ends[0], ends[1]));
    }

    let (graph, cleanup) = Graph::from_edges(parsed.features, &edges, labels, vocabulary.len())?;
    if cleanup.self_loops > 0 || cleanup.duplicates > 0 {
        log::warn!(
            "{}: dropped {} self-loops and {} duplicate edges",
            cites_path.display(),
            cleanup.self_loops,
            cleanup.duplicates
        );
    }
    graph.with_names(parsed.names)?.with_label_names(vocabulary)
}

struct ParsedContent {
    names: Vec<String>,
    features: Matrix,
    label_strings: Vec<(usize, String)>,
}

fn parse_content(path: &Path, text: &str) -> Result<ParsedContent> {
    let mut names = Vec::new();
    let mut values = Vec::new();
    let mut label_strings = Vec::new();
    let mut width = None;
    let mut seen = HashMap::new();
    for (line, row) in lines(text) {
        let fields: Vec<&str> = row.split('\t').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::parse(path, line, "expected an id, features and a label"));
        }
        let d = fields.len() - 2;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(Error::parse(path, line, format!("expected {w} feature values, found {d}")));
            }
            _ => {}
        }
        let name = fields[0].to_string();
        if let Some(first) = seen.insert(name.clone(), line) {
            return Err(Error::parse(path, line, format!("node id {name:?} already defined on line {first}")));
        }
        for (k, f) in fields[1..=d].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(path, line, format!("feature {k} is not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, format!("feature {k} is not finite")));
            }
            values.push(v);
        }
        names.push(name);
        label_strings.push((line, fields[d + 1].to_string()));
    }
    let d = width.unwrap_or(0);
    let features = Matrix::from_shape_vec((names.len(), d), values).expect("row widths checked above");
    Ok(ParsedContent {
        names,
        features,
        label_strings,
    })
}

/// Non-blank lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| (k + 1, l))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn find_content_file(dir: &Path) -> Result<PathBuf> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "content") {
            found.push(path);
        }
    }
    match found.len() {
        1 => Ok(found.pop().unwrap()),
        0 => Err(Error::Data(format!("{}: no .content file", dir.display()))),
        _ => Err(Error::Data(format!("{}: more than one .content file", dir.display()))),
    }
}
