//! Cosine similarity between trained prompts, average-linkage clustering
//! and a heatmap export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::world::{LabConfig, World};
use crate::error::{Error, Result};
use crate::model::{train_prompt, Prompt, PromptInit};
use crate::tasks::TaskKind;

/// Symmetric cosine matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn new(labels: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = labels.len();
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(Error::Input("similarity matrix must be square and match its labels".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !labels.iter().all(|l| seen.insert(l)) {
            return Err(Error::Input("duplicate labels".into()));
        }
        for i in 0..n {
            if (values[i][i] - 1.0).abs() > 1e-12 {
                return Err(Error::Input(format!("diagonal entry {} is {}", labels[i], values[i][i])));
            }
            for j in 0..n {
                let v = values[i][j];
                if !v.is_finite() || (v - values[j][i]).abs() > 1e-12 || v.abs() > 1.0 + 1e-12 {
                    return Err(Error::Input(format!("entry ({i}, {j}) = {v} breaks symmetry or range")));
                }
            }
        }
        Ok(Self { labels, values })
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }

    /// The matrix with rows and columns permuted into `order`.
    pub fn reordered(&self, order: &[String]) -> Result<Self> {
        if order.len() != self.labels.len() {
            return Err(Error::Input("order must list every label once".into()));
        }
        let idx: Vec<usize> = order
            .iter()
            .map(|l| {
                self.labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| Error::Input(format!("unknown label {l}")))
            })
            .collect::<Result<_>>()?;
        let values = idx.iter().map(|&i| idx.iter().map(|&j| self.values[i][j]).collect()).collect();
        Self::new(order.to_vec(), values)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("zero-norm vector has no cosine".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise cosine of the row-mean of each prompt.
pub fn prompt_similarity_matrix(prompts: &BTreeMap<String, Prompt>) -> Result<SimilarityMatrix> {
    if prompts.len() < 2 {
        return Err(Error::Input("need at least two prompts".into()));
    }
    let shapes: std::collections::BTreeSet<(usize, usize)> = prompts.values().map(|p| (p.len, p.d_model)).collect();
    if shapes.len() != 1 {
        return Err(Error::Input("prompts differ in shape".into()));
    }
    let labels: Vec<String> = prompts.keys().cloned().collect();
    let vecs: Vec<Vec<f64>> = prompts.values().map(Prompt::mean_row).collect();
    let n = labels.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = if i == j {
                cosine(&vecs[i], &vecs[i]).map(|_| 1.0)?
            } else {
                cosine(&vecs[i], &vecs[j])?
            };
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    SimilarityMatrix::new(labels, values)
}

/// A merge tree over sorted labels; leaves are label indices.
#[derive(Debug, Clone)]
enum Node {
    Leaf(usize),
    Merge(Box<Node>, Box<Node>),
}

impl Node {
    fn leaves(&self, out: &mut Vec<usize>) {
        match self {
            Node::Leaf(i) => out.push(*i),
            Node::Merge(a, b) => {
                a.leaves(out);
                b.leaves(out);
            }
        }
    }
}

/// Average-linkage merges on 1 − cosine until `k` clusters remain. Labels
/// are processed in sorted order, so the result does not depend on the
/// input order; ties merge the pair whose smallest labels come first.
fn agglomerate(m: &SimilarityMatrix, k: usize) -> Result<(Vec<String>, Vec<Node>)> {
    let n = m.labels.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} must be within 1..={n}")));
    }
    let mut sorted = m.labels.clone();
    sorted.sort();
    let m = m.reordered(&sorted)?;
    let dist = |a: &[usize], b: &[usize]| {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += 1.0 - m.values[i][j];
            }
        }
        s / (a.len() * b.len()) as f64
    };
    // clusters stay ordered by their smallest member
    let mut clusters: Vec<(Vec<usize>, Node)> = (0..n).map(|i| (vec![i], Node::Leaf(i))).collect();
    while clusters.len() > k {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let d = dist(&clusters[a].0, &clusters[b].0);
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((a, b, d));
                }
            }
        }
        let (a, b, _) = best.expect("at least two clusters");
        let (mb, nb) = clusters.remove(b);
        let (ma, na) = std::mem::replace(&mut clusters[a], (Vec::new(), Node::Leaf(0)));
        let mut members = ma;
        members.extend(mb);
        members.sort_unstable();
        clusters[a] = (members, Node::Merge(Box::new(na), Box::new(nb)));
    }
    Ok((sorted, clusters.into_iter().map(|(_, node)| node).collect()))
}

/// Partition into `k` clusters. Each cluster is sorted; clusters are
/// ordered by their first label.
pub fn agglomerative_cluster(m: &SimilarityMatrix, k: usize) -> Result<Vec<Vec<String>>> {
    let (sorted, nodes) = agglomerate(m, k)?;
    Ok(nodes
        .iter()
        .map(|node| {
            let mut idx = Vec::new();
            node.leaves(&mut idx);
            idx.sort_unstable();
            idx.into_iter().map(|i| sorted[i].clone()).collect()
        })
        .collect())
}

/// Dendrogram leaf order of the full merge tree.
pub fn leaf_order(m: &SimilarityMatrix) -> Result<Vec<String>> {
    let (sorted, nodes) = agglomerate(m, 1)?;
    let mut idx = Vec::new();
    nodes[0].leaves(&mut idx);
    Ok(idx.into_iter().map(|i| sorted[i].clone()).collect())
}

/// Mean cosine over distinct pairs in the same group and across groups;
/// NaN when a kind of pair does not occur.
pub fn within_between(m: &SimilarityMatrix, group_of: &dyn Fn(&str) -> String) -> (f64, f64) {
    let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..m.labels.len() {
        for j in i + 1..m.labels.len() {
            if group_of(&m.labels[i]) == group_of(&m.labels[j]) {
                w += m.values[i][j];
                nw += 1;
            } else {
                b += m.values[i][j];
                nb += 1;
            }
        }
    }
    let mean = |sum: f64, n: usize| if n == 0 { f64::NAN } else { sum / n as f64 };
    (mean(w, nw), mean(b, nb))
}

/// One single-row prompt per language, each trained on that language's LM
/// task (empty input) from the same random start.
pub fn train_language_prompts(world: &World, cfg: &LabConfig, languages: &[String]) -> Result<BTreeMap<String, Prompt>> {
    let init = PromptInit::Random {
        len: 1,
        scale: cfg.factorized_init_scale,
    };
    let mut tc = cfg.tune_config(cfg.cluster_steps, cfg.tune_lr);
    tc.checkpoint_every = 0;
    let mut out = BTreeMap::new();
    for l in languages {
        let mut stream = world.task_stream(cfg, l, TaskKind::Lm, cfg.seed)?;
        let run = train_prompt(&world.backbone, &init, &mut stream, &tc)?;
        out.insert(l.clone(), run.final_payload.as_prompt()?.clone());
    }
    Ok(out)
}

/// Red for +1, white for 0, blue for −1.
fn color(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 {
        (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
    } else {
        (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub const CELL: usize = 24;
const MARGIN: usize = 64;

pub fn heatmap_svg(m: &SimilarityMatrix) -> String {
    let n = m.labels.len();
    let size = MARGIN + n * CELL + 8;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="monospace" font-size="10">"#
    );
    for (i, l) in m.labels.iter().enumerate() {
        let c = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text class="row-label" x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 4, c + 3, escape(l));
        let _ = writeln!(
            s,
            r#"<text class="col-label" x="{c}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN - 6,
            escape(l)
        );
    }
    for i in 0..n {
        for j in 0..n {
            let v = m.values[i][j];
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"><title>{} {} {v:.4}</title></rect>"#,
                MARGIN + j * CELL,
                MARGIN + i * CELL,
                color(v),
                escape(&m.labels[i]),
                escape(&m.labels[j]),
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn matrix_csv(m: &SimilarityMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = std::iter::once("label").chain(m.labels.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (l, row) in m.labels.iter().zip(&m.values) {
        let rec: Vec<String> = std::iter::once(l.clone()).chain(row.iter().map(|v| v.to_string())).collect();
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_matrix_csv(path: &Path) -> Result<SimilarityMatrix> {
    let bad = |e: &dyn std::fmt::Display| Error::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(&e))?;
    let labels: Vec<String> = r.headers().map_err(|e| bad(&e))?.iter().skip(1).map(String::from).collect();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(&e))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|x| x.parse::<f64>().map_err(|e| bad(&e)))
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    SimilarityMatrix::new(labels, values)
}

/// Writes the matrix in `order` as an SVG heatmap and a CSV.
pub fn export_heatmap(m: &SimilarityMatrix, order: &[String], svg_path: &Path, csv_path: &Path) -> Result<()> {
    let r = m.reordered(order)?;
    std::fs::write(svg_path, heatmap_svg(&r)).map_err(|e| Error::io(svg_path.display().to_string(), e))?;
    std::fs::write(csv_path, matrix_csv(&r)?).map_err(|e| Error::io(csv_path.display().to_string(), e))
}
