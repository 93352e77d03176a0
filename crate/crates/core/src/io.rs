//! Text formats: coordinate and dense matrix files, and graph files.
//!
//! Matrix files are either `coo <rows> <cols> <nnz>` followed by one
//! `i j value` line per nonzero, or `dense <rows> <cols>` followed by
//! row-major values. Min-plus values accept `inf`. Graph files start
//! with `d k` and continue with `k` lines `u v` of 0-indexed endpoints.

use std::fmt::Write as _;

use thiserror::Error;

use crate::matching::Graph;
use crate::matrix::CooMatrix;
use crate::semiring::Semiring;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("only square matrices are supported, got {rows}x{cols}")]
    NotSquare { rows: u64, cols: u64 },
    #[error(transparent)]
    Matrix(#[from] crate::matrix::MatrixError),
}

fn parse_err(msg: impl Into<String>) -> IoError {
    IoError::Parse(msg.into())
}

/// Parse a matrix in either text form.
pub fn parse_matrix<S: Semiring>(text: &str) -> Result<CooMatrix<S>, IoError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| parse_err("empty matrix file"))?;
    let mut words = header.split_whitespace();
    let kind = words.next().ok_or_else(|| parse_err("missing header"))?;
    match kind {
        "coo" => {
            let rows: u64 = next_num(&mut words, "rows")?;
            let cols: u64 = next_num(&mut words, "cols")?;
            let nnz: u64 = next_num(&mut words, "nnz")?;
            if rows != cols {
                return Err(IoError::NotSquare { rows, cols });
            }
            let mut entries = Vec::with_capacity(nnz as usize);
            for _ in 0..nnz {
                let line = lines
                    .next()
                    .ok_or_else(|| parse_err("fewer entry lines than nnz"))?;
                let mut w = line.split_whitespace();
                let i: u32 = next_num(&mut w, "i")?;
                let j: u32 = next_num(&mut w, "j")?;
                let val = w
                    .next()
                    .ok_or_else(|| parse_err(format!("missing value in `{line}`")))?;
                let x = S::parse(val)
                    .ok_or_else(|| parse_err(format!("bad value `{val}`")))?;
                entries.push((i, j, x));
            }
            Ok(CooMatrix::from_entries(rows as u32, entries)?)
        }
        "dense" => {
            let rows: u64 = next_num(&mut words, "rows")?;
            let cols: u64 = next_num(&mut words, "cols")?;
            if rows != cols {
                return Err(IoError::NotSquare { rows, cols });
            }
            let mut values = Vec::with_capacity((rows * cols) as usize);
            for line in lines {
                for tok in line.split_whitespace() {
                    let x = S::parse(tok)
                        .ok_or_else(|| parse_err(format!("bad value `{tok}`")))?;
                    values.push(x);
                }
            }
            if values.len() != (rows * cols) as usize {
                return Err(parse_err(format!(
                    "dense matrix needs {} values, found {}",
                    rows * cols,
                    values.len()
                )));
            }
            Ok(CooMatrix::from_dense(rows as u32, &values))
        }
        other => Err(parse_err(format!("unknown matrix header `{other}`"))),
    }
}

fn next_num<T: std::str::FromStr>(
    words: &mut std::str::SplitWhitespace<'_>,
    what: &str,
) -> Result<T, IoError> {
    words
        .next()
        .ok_or_else(|| parse_err(format!("missing {what}")))?
        .parse()
        .map_err(|_| parse_err(format!("bad {what}")))
}

/// Render a matrix in coordinate form.
pub fn format_matrix<S: Semiring>(m: &CooMatrix<S>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "coo {} {} {}", m.side(), m.side(), m.nnz());
    for (i, j, x) in m.entries() {
        let _ = writeln!(out, "{i} {j} {x}");
    }
    out
}

/// Parse a graph file: `d k` then `k` edge lines.
pub fn parse_graph(text: &str) -> Result<Graph, IoError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| parse_err("empty graph file"))?;
    let mut w = header.split_whitespace();
    let d: u32 = next_num(&mut w, "vertex count")?;
    let k: u64 = next_num(&mut w, "edge count")?;
    let mut edges = Vec::with_capacity(k as usize);
    for _ in 0..k {
        let line = lines
            .next()
            .ok_or_else(|| parse_err("fewer edge lines than k"))?;
        let mut w = line.split_whitespace();
        let u: u32 = next_num(&mut w, "endpoint")?;
        let v: u32 = next_num(&mut w, "endpoint")?;
        if u >= d || v >= d || u == v {
            return Err(parse_err(format!("bad edge `{line}`")));
        }
        edges.push((u, v));
    }
    Ok(Graph::new(d, edges))
}

pub fn format_graph(g: &Graph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", g.vertex_count(), g.edge_count());
    for (u, v) in g.edges() {
        let _ = writeln!(out, "{u} {v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semiring::{MinPlus, Nat, Trop};

    #[test]
    fn coo_roundtrip() {
        let m = CooMatrix::<Nat>::from_entries(3, vec![(0, 1, 5), (2, 2, 7)]).unwrap();
        let text = format_matrix(&m);
        assert!(text.starts_with("coo 3 3 2\n"));
        let back: CooMatrix<Nat> = parse_matrix(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn dense_header_and_minplus_inf() {
        let text = "dense 2 2\n0 inf\n3 0\n";
        let m: CooMatrix<MinPlus> = parse_matrix(text).unwrap();
        assert_eq!(m.get(0, 0), Trop::fin(0));
        assert_eq!(m.get(0, 1), Trop::INF);
        assert_eq!(m.get(1, 0), Trop::fin(3));
        // Roundtrip through coo form.
        let back: CooMatrix<MinPlus> = parse_matrix(&format_matrix(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_matrix::<Nat>("coo 2 3 0\n").is_err());
        assert!(parse_matrix::<Nat>("coo 2 2 1\n0 0\n").is_err());
        assert!(parse_matrix::<Nat>("bogus 2 2\n").is_err());
        assert!(parse_matrix::<Nat>("dense 2 2\n1 2 3\n").is_err());
    }

    #[test]
    fn graph_roundtrip() {
        let g = Graph::new(4, vec![(0, 1), (2, 3), (1, 2)]);
        let text = format_graph(&g);
        assert_eq!(parse_graph(&text).unwrap(), g);
        assert!(parse_graph("4 1\n0 4\n").is_err());
        assert!(parse_graph("4 1\n1 1\n").is_err());
    }
}
