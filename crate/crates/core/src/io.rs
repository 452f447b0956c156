//! Text formats for datasets and embedding matrices.
//!
//! * edge file: one `src<TAB>dst` pair per line, `#` starts a comment
//! * attribute file: header `N F`, then `N` rows of `F` reals
//! * label file: `node_id<TAB>label`, one line per node
//! * matrix file: header `N d`, then `N` rows of `d` reals
//!
//! Reals are written with Rust's shortest round-trip formatting, so a save
//! followed by a load reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{MultiViewGraph, ViewGraph};
use crate::tensor::Tensor;

pub const ATTRIBUTE_FILE: &str = "attributes.txt";
pub const LABEL_FILE: &str = "labels.txt";
pub const EDGE_EXTENSION: &str = "edges";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Meaningful lines with 1-based line numbers; blank lines and `#`
/// comments are skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_usize(path: &Path, line: usize, tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("expected a non-negative integer, found {tok:?}")))
}

fn parse_real(path: &Path, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("expected a real number, found {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read(path)?;
    let mut edges = Vec::new();
    for (line, content) in content_lines(&text) {
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(path, line, format!("expected \"src<TAB>dst\", found {content:?}")));
        }
        edges.push((parse_usize(path, line, toks[0])?, parse_usize(path, line, toks[1])?));
    }
    Ok(edges)
}

/// Parses an `N d`-headed real matrix (attribute and embedding files).
pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let text = read(path)?;
    let mut lines = content_lines(&text);
    let (hline, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing \"N F\" header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(path, hline, "header must be \"N F\""));
    }
    let rows = parse_usize(path, hline, dims[0])?;
    let cols = parse_usize(path, hline, dims[1])?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (line, content) in lines {
        if seen == rows {
            return Err(Error::Shape(format!(
                "{}:{line}: more than the {rows} rows declared in the header",
                path.display()
            )));
        }
        let before = data.len();
        for tok in content.split_whitespace() {
            data.push(parse_real(path, line, tok)?);
        }
        if data.len() - before != cols {
            return Err(parse_err(
                path,
                line,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Shape(format!(
            "{}: header declares {rows} rows, found {seen}",
            path.display()
        )));
    }
    Tensor::new(vec![rows, cols], data)
}

pub fn format_matrix(m: &Tensor) -> String {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = format!("{rows} {cols}\n");
    for i in 0..rows {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    write(path, &format_matrix(m))
}

/// Reads `node_id<TAB>label` lines; every node in `0..num_nodes` must
/// appear exactly once.
pub fn read_labels(path: &Path, num_nodes: usize) -> Result<Vec<usize>> {
    let text = read(path)?;
    let mut labels: Vec<Option<usize>> = vec![None; num_nodes];
    for (line, content) in content_lines(&text) {
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(path, line, format!("expected \"node_id<TAB>label\", found {content:?}")));
        }
        let node = parse_usize(path, line, toks[0])?;
        let label = parse_usize(path, line, toks[1])?;
        let slot = labels.get_mut(node).ok_or_else(|| {
            Error::Index(format!("{}:{line}: node {node} outside 0..{num_nodes}", path.display()))
        })?;
        if slot.replace(label).is_some() {
            return Err(parse_err(path, line, format!("node {node} labelled twice")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Data(format!("{}: node {i} has no label", path.display()))))
        .collect()
}

pub fn format_labels(labels: &[usize]) -> String {
    let mut out = String::new();
    for (i, l) in labels.iter().enumerate() {
        writeln!(out, "{i}\t{l}").unwrap();
    }
    out
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write(path, &format_labels(labels))
}

fn view_name_from_path(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("view");
    match stem.split_once('-') {
        Some((prefix, name)) if prefix.chars().all(|c| c.is_ascii_digit()) => name.to_string(),
        _ => stem.to_string(),
    }
}

/// Loads one view per edge file. `N` is the attribute row count; edges are
/// symmetrized, self-loops added and duplicates dropped.
pub fn load_multiview_graph(edge_paths: &[PathBuf], attr_path: &Path, label_path: Option<&Path>) -> Result<MultiViewGraph> {
    if edge_paths.is_empty() {
        return Err(Error::Data("at least one edge file is required".into()));
    }
    let attributes = read_matrix(attr_path)?;
    let n = attributes.rows();
    let mut views = Vec::with_capacity(edge_paths.len());
    for path in edge_paths {
        let edges = read_edges(path)?;
        if let Some(&(a, b)) = edges.iter().find(|(a, b)| *a >= n || *b >= n) {
            return Err(Error::Index(format!(
                "{}: edge ({a}, {b}) refers to a node outside 0..{n}",
                path.display()
            )));
        }
        views.push(ViewGraph::from_edges(view_name_from_path(path), n, &edges)?);
    }
    let labels = label_path.map(|p| read_labels(p, n)).transpose()?;
    MultiViewGraph::new(views, attributes, labels)
}

/// Edge files in a dataset directory, ordered by name.
pub fn dataset_edge_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == EDGE_EXTENSION))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a directory written by [`save_dataset`]. The label file is optional.
pub fn load_dataset(dir: &Path) -> Result<MultiViewGraph> {
    let edges = dataset_edge_files(dir)?;
    let labels = dir.join(LABEL_FILE);
    load_multiview_graph(
        &edges,
        &dir.join(ATTRIBUTE_FILE),
        labels.exists().then_some(labels.as_path()),
    )
}

/// Writes one edge file per view (`NN-name.edges`), the attribute file and,
/// when present, the label file. Returns the written paths.
pub fn save_dataset(g: &MultiViewGraph, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (r, view) in g.views().iter().enumerate() {
        let path = dir.join(format!("{r:02}-{}.{EDGE_EXTENSION}", view.name()));
        let mut text = String::new();
        for (i, j) in view.undirected_edges() {
            writeln!(text, "{i}\t{j}").unwrap();
        }
        write(&path, &text)?;
        written.push(path);
    }
    let attr = dir.join(ATTRIBUTE_FILE);
    write_matrix(&attr, g.attributes())?;
    written.push(attr);
    if let Some(labels) = g.labels() {
        let path = dir.join(LABEL_FILE);
        write_labels(&path, labels)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn malformed_edge_line_reports_line_number() {
        let dir = tmp();
        let p = dir.path().join("a.edges");
        fs::write(&p, "# header\n0\t1\n1 x\n").unwrap();
        match read_edges(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn endpoint_beyond_attributes_is_index_error() {
        let dir = tmp();
        let e = dir.path().join("00-a.edges");
        fs::write(&e, "0\t5\n").unwrap();
        let a = dir.path().join(ATTRIBUTE_FILE);
        fs::write(&a, "2 1\n1\n2\n").unwrap();
        assert!(matches!(load_multiview_graph(&[e], &a, None), Err(Error::Index(_))));
    }

    #[test]
    fn attribute_row_count_mismatch_is_shape_error() {
        let dir = tmp();
        let a = dir.path().join(ATTRIBUTE_FILE);
        fs::write(&a, "3 1\n1\n2\n").unwrap();
        assert!(matches!(read_matrix(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn label_gaps_are_rejected() {
        let dir = tmp();
        let l = dir.path().join(LABEL_FILE);
        fs::write(&l, "0\t1\n2\t0\n").unwrap();
        assert!(matches!(read_labels(&l, 3), Err(Error::Data(_))));
    }

    #[test]
    fn view_names_come_from_file_names() {
        assert_eq!(view_name_from_path(Path::new("/x/01-M-A-M.edges")), "M-A-M");
        assert_eq!(view_name_from_path(Path::new("/x/pap.edges")), "pap");
    }
}
