//! Datasets as CSV, fitted models as JSON documents, and per-cluster edge lists.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BllimError, Result};
use crate::model::{Dataset, InverseComponent, InverseParams};
use crate::selection::SelectionReport;
use crate::structure::BlockStructure;

/// Current model document schema.
pub const FORMAT_VERSION: u32 = 1;

/// A numeric table with its column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub values: DMatrix<f64>,
}

fn parse_error(file: &str, line: u64, column: usize, message: impl Into<String>) -> BllimError {
    BllimError::Parse {
        file: file.to_string(),
        line,
        column,
        message: message.into(),
    }
}

/// Parses comma-separated numbers under a header row. `name` labels errors.
/// Rows must all have the header's width; cells must be finite numbers.
pub fn parse_csv<R: Read>(reader: R, name: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(name, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_error(name, 1, 1, "missing header row"));
    }
    let width = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(name, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_error(name, line, j + 1, format!("'{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(name, line, j + 1, format!("'{cell}' is not finite")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_error(name, 2, 1, "no data rows"));
    }
    Ok(Table {
        header,
        values: DMatrix::from_row_slice(rows, width, &data),
    })
}

fn csv_error(name: &str, err: csv::Error) -> BllimError {
    match err.kind() {
        csv::ErrorKind::UnequalLengths {
            pos,
            expected_len,
            len,
        } => parse_error(
            name,
            pos.as_ref().map_or(0, |p| p.line()),
            (*len as usize).min(*expected_len as usize) + 1,
            format!("row has {len} fields, expected {expected_len}"),
        ),
        csv::ErrorKind::Utf8 { pos, err } => parse_error(
            name,
            pos.as_ref().map_or(0, |p| p.line()),
            err.field() + 1,
            "invalid UTF-8",
        ),
        _ => parse_error(name, err.position().map_or(0, |p| p.line()), 1, err.to_string()),
    }
}

fn file_error(path: &Path) -> impl FnOnce(std::io::Error) -> BllimError + '_ {
    move |source| BllimError::File {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let file = fs::File::open(path).map_err(file_error(path))?;
    parse_csv(std::io::BufReader::new(file), &path.display().to_string())
}

/// CSV text with a header row. Values use the shortest representation that
/// reads back to the same `f64`.
pub fn format_csv(header: &[String], values: &DMatrix<f64>) -> Result<String> {
    if header.len() != values.ncols() {
        return Err(BllimError::Dimension(format!(
            "{} column names for {} columns",
            header.len(),
            values.ncols()
        )));
    }
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header).map_err(|e| BllimError::Validation(e.to_string()))?;
    for row in values.row_iter() {
        wtr.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| BllimError::Validation(e.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| BllimError::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output of numbers is UTF-8"))
}

pub fn write_csv(path: &Path, header: &[String], values: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, format_csv(header, values)?.as_bytes())
}

/// `prefix1, prefix2, …`
pub fn default_header(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Covariates and responses from two CSV files with matching row counts.
pub fn read_dataset(x_path: &Path, y_path: &Path) -> Result<(Dataset, Vec<String>, Vec<String>)> {
    let x = read_csv(x_path)?;
    let y = read_csv(y_path)?;
    if x.values.nrows() != y.values.nrows() {
        return Err(BllimError::Validation(format!(
            "row counts differ: {} has {} rows, {} has {} rows",
            x_path.display(),
            x.values.nrows(),
            y_path.display(),
            y.values.nrows()
        )));
    }
    Ok((Dataset::new(x.values, y.values)?, x.header, y.header))
}

/// Writes through a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| BllimError::Validation(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// One cluster's inverse parameters, matrices flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDocument {
    pub weight: f64,
    pub c: Vec<f64>,
    pub gamma: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Serialized fitted model. Structure indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub structure: Vec<Vec<Vec<usize>>>,
    pub clusters: Vec<ClusterDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<SelectionReport>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, v: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(BllimError::Validation(format!(
            "{what} has {} entries, expected {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

impl ModelDocument {
    pub fn from_params(theta: &InverseParams, report: Option<SelectionReport>) -> Self {
        ModelDocument {
            format_version: FORMAT_VERSION,
            k: theta.k(),
            l: theta.l(),
            d: theta.d(),
            structure: theta.structure.to_one_based(),
            clusters: theta
                .components
                .iter()
                .map(|c| ClusterDocument {
                    weight: c.weight,
                    c: c.c.as_slice().to_vec(),
                    gamma: row_major(&c.gamma),
                    a: row_major(&c.a),
                    b: c.b.as_slice().to_vec(),
                    sigma: row_major(&c.sigma),
                })
                .collect(),
            report,
        }
    }

    /// Rebuilds and validates the parameters.
    pub fn to_params(&self) -> Result<InverseParams> {
        if self.format_version != FORMAT_VERSION {
            return Err(BllimError::Validation(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let (k, l, d) = (self.k, self.l, self.d);
        if self.clusters.len() != k {
            return Err(BllimError::Validation(format!(
                "document declares K = {k} but holds {} clusters",
                self.clusters.len()
            )));
        }
        if self.structure.len() != k {
            return Err(BllimError::Validation(format!(
                "document declares K = {k} but the structure has {} clusters",
                self.structure.len()
            )));
        }
        if d.checked_mul(d).is_none() || l.checked_mul(d).is_none() {
            return Err(BllimError::Validation("dimensions are too large".into()));
        }
        let components = self
            .clusters
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let ctx = |field: &str| format!("cluster {} {field}", i + 1);
                if c.c.len() != l || c.b.len() != d {
                    return Err(BllimError::Validation(format!(
                        "cluster {}: c has {} entries and b {}, expected {l} and {d}",
                        i + 1,
                        c.c.len(),
                        c.b.len()
                    )));
                }
                Ok(InverseComponent {
                    weight: c.weight,
                    c: DVector::from_column_slice(&c.c),
                    gamma: from_row_major(l, l, &c.gamma, &ctx("gamma"))?,
                    a: from_row_major(d, l, &c.a, &ctx("a"))?,
                    b: DVector::from_column_slice(&c.b),
                    sigma: from_row_major(d, d, &c.sigma, &ctx("sigma"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // array lengths are checked first so D is bounded by the document size
        let structure = BlockStructure::from_one_based(d, &self.structure)?;
        InverseParams::new(components, structure)
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates a document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.to_params()?;
        Ok(doc)
    }
}

pub fn write_model(path: &Path, doc: &ModelDocument) -> Result<()> {
    write_atomic(path, doc.to_json()?.as_bytes())
}

/// Reads a model document; JSON syntax errors are located in the file.
pub fn read_model(path: &Path) -> Result<ModelDocument> {
    let text = fs::read_to_string(path).map_err(file_error(path))?;
    ModelDocument::from_json(&text).map_err(|e| match e {
        BllimError::Json(j) => BllimError::Parse {
            file: path.display().to_string(),
            line: j.line() as u64,
            column: j.column(),
            message: j.to_string(),
        },
        other => other,
    })
}

/// Parses a block structure written as per-cluster lists of 1-based index groups.
pub fn parse_block_structure(text: &str, dim: usize) -> Result<BlockStructure> {
    let groups: Vec<Vec<Vec<usize>>> = serde_json::from_str(text)?;
    BlockStructure::from_one_based(dim, &groups)
}

/// Within-block covariances of one cluster as a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    /// `(i, j, Σ[i, j])`, 1-based, `i < j`, sorted.
    pub edges: Vec<(usize, usize, f64)>,
    /// 1-based variables in singleton groups.
    pub isolated: Vec<usize>,
}

/// Edges for every nonzero off-diagonal entry inside a block of cluster `k` (0-based).
pub fn network(theta: &InverseParams, k: usize) -> Result<Network> {
    if k >= theta.k() {
        return Err(BllimError::Validation(format!(
            "cluster {} does not exist; the model has {} clusters",
            k + 1,
            theta.k()
        )));
    }
    let sigma = &theta.components[k].sigma;
    let mut edges = Vec::new();
    let mut isolated = Vec::new();
    for g in theta.structure.cluster(k).groups() {
        if g.len() == 1 {
            isolated.push(g[0] + 1);
            continue;
        }
        for (a, &i) in g.iter().enumerate() {
            for &j in &g[a + 1..] {
                let v = sigma[(i, j)];
                if v != 0.0 {
                    edges.push((i + 1, j + 1, v));
                }
            }
        }
    }
    edges.sort_by_key(|a| (a.0, a.1));
    isolated.sort_unstable();
    Ok(Network { edges, isolated })
}

/// Tab-separated edge list followed by an `# isolated` section.
pub fn format_network(net: &Network) -> String {
    let mut out = String::from("node_i\tnode_j\tcovariance\n");
    for (i, j, v) in &net.edges {
        out.push_str(&format!("{i}\t{j}\t{v}\n"));
    }
    out.push_str("# isolated\n");
    for i in &net.isolated {
        out.push_str(&format!("{i}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::Partition;

    #[test]
    fn csv_round_trip() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, -2.5e-10, 3.0, 1.0 / 3.0]);
        let text = format_csv(&default_header("x", 2), &m).unwrap();
        let t = parse_csv(text.as_bytes(), "mem").unwrap();
        assert_eq!(t.values, m);
        assert_eq!(t.header, vec!["x1", "x2"]);
    }

    #[test]
    fn csv_errors_are_located() {
        let err = parse_csv("a,b\n1,2\n3,oops\n".as_bytes(), "f.csv").unwrap_err();
        assert!(matches!(err, BllimError::Parse { line: 3, column: 2, .. }), "{err:?}");
        let err = parse_csv("a,b\n1,2\n3\n".as_bytes(), "f.csv").unwrap_err();
        assert!(matches!(err, BllimError::Parse { line: 3, .. }), "{err:?}");
        let err = parse_csv("a,b\n1,NaN\n".as_bytes(), "f.csv").unwrap_err();
        assert!(matches!(err, BllimError::Parse { line: 2, column: 2, .. }), "{err:?}");
        assert!(parse_csv("a,b\n".as_bytes(), "f.csv").is_err());
        assert!(parse_csv("".as_bytes(), "f.csv").is_err());
    }

    fn theta() -> InverseParams {
        let structure = BlockStructure::new(vec![Partition::new(3, vec![vec![0, 2], vec![1]]).unwrap()]).unwrap();
        let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.4, 0.0, 2.0, 0.0, 0.4, 0.0, 1.5]);
        InverseParams::new(
            vec![InverseComponent {
                weight: 1.0,
                c: DVector::from_vec(vec![0.25]),
                gamma: DMatrix::from_element(1, 1, 1.0 / 7.0),
                a: DMatrix::from_row_slice(3, 1, &[1.0, -0.1, 2.0]),
                b: DVector::from_vec(vec![0.0, 1e-300, -3.0]),
                sigma,
            }],
            structure,
        )
        .unwrap()
    }

    #[test]
    fn model_document_round_trip_is_byte_identical() {
        let doc = ModelDocument::from_params(&theta(), None);
        let text = doc.to_json().unwrap();
        let back = ModelDocument::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.to_params().unwrap(), theta());
        assert_eq!(doc.structure, vec![vec![vec![1, 3], vec![2]]]);
        assert_eq!(doc.clusters[0].sigma[2], 0.4);
    }

    #[test]
    fn model_document_rejects_bad_shapes() {
        let mut doc = ModelDocument::from_params(&theta(), None);
        doc.clusters[0].sigma.pop();
        assert!(doc.to_params().is_err());
        let mut doc = ModelDocument::from_params(&theta(), None);
        doc.format_version = 99;
        assert!(doc.to_params().is_err());
        assert!(ModelDocument::from_json("{}").is_err());
    }

    #[test]
    fn network_export() {
        let net = network(&theta(), 0).unwrap();
        assert_eq!(net.edges, vec![(1, 3, 0.4)]);
        assert_eq!(net.isolated, vec![2]);
        assert_eq!(format_network(&net), "node_i\tnode_j\tcovariance\n1\t3\t0.4\n# isolated\n2\n");
        assert!(network(&theta(), 1).is_err());
    }

    #[test]
    fn structure_parser() {
        let s = parse_block_structure("[[[1,2],[3]]]", 3).unwrap();
        assert_eq!(s.cluster(0).groups(), &[vec![0, 1], vec![2]]);
        assert!(parse_block_structure("[[[1,2]]]", 3).is_err());
        assert!(parse_block_structure("[[[0,1],[2]]]", 3).is_err());
    }
}
