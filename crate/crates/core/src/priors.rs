//! Co-occurrence priors: marginals, joint probabilities and the two
//! conditional tables consumed by the auxiliary estimate.
//!
//! Orientation: row = conditioning attribute. `cond[(i, j)] = Pr(a_j | a_i)`
//! and `neg_cond[(i, j)] = Pr(a_j | not a_i)`, so that `Q * C` sums over the
//! conditioning attribute.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AapError, Result};
use crate::matrix::Matrix;

/// Absolute tolerance used by [`CoOccurrencePriors::validate`].
pub const PRIORS_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AttributeSchema {
    names: Vec<String>,
}

impl AttributeSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(AapError::Schema(format!(
                "need at least 2 attributes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(AapError::Schema("empty attribute name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(AapError::Schema(format!("duplicate attribute name {n:?}")));
            }
        }
        Ok(AttributeSchema { names })
    }

    /// Schema with generated names `a0, a1, ...`.
    pub fn numbered(k: usize) -> Result<Self> {
        Self::new((0..k).map(|j| format!("a{j}")))
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl TryFrom<Vec<String>> for AttributeSchema {
    type Error = AapError;

    fn try_from(names: Vec<String>) -> Result<Self> {
        AttributeSchema::new(names)
    }
}

impl From<AttributeSchema> for Vec<String> {
    fn from(s: AttributeSchema) -> Self {
        s.names
    }
}

/// `n x k` binary ground-truth annotations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    schema: AttributeSchema,
    n: usize,
    y: Vec<u8>,
}

impl LabelMatrix {
    /// Builds a label matrix from rows of 0/1 values.
    pub fn new<R: AsRef<[u8]>>(schema: AttributeSchema, rows: &[R]) -> Result<Self> {
        let k = schema.k();
        if rows.is_empty() {
            return Err(AapError::Domain("label matrix has no rows".into()));
        }
        let mut y = Vec::with_capacity(rows.len() * k);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != k {
                return Err(AapError::Dimension {
                    what: "label row width",
                    expected: k,
                    got: r.len(),
                });
            }
            if let Some(bad) = r.iter().find(|&&v| v > 1) {
                return Err(AapError::Domain(format!("row {i}: non-binary label {bad}")));
            }
            y.extend_from_slice(r);
        }
        Ok(LabelMatrix {
            schema,
            n: rows.len(),
            y,
        })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.schema.k()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        let k = self.k();
        &self.y[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.y.chunks_exact(self.k())
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let rows: Vec<&[u8]> = idx.iter().map(|&i| self.row(i)).collect();
        LabelMatrix::new(self.schema.clone(), &rows)
    }

    /// Removes rows without any positive attribute. Returns the filtered
    /// matrix, the kept row indices and the number of dropped rows.
    pub fn drop_empty_rows(&self) -> Result<(Self, Vec<usize>, usize)> {
        let kept: Vec<usize> = (0..self.n).filter(|&i| self.row(i).contains(&1)).collect();
        let dropped = self.n - kept.len();
        Ok((self.select(&kept)?, kept, dropped))
    }

    /// Reads a label CSV: header of attribute names, then one 0/1 row per
    /// instance. When `schema` is given the header must match it.
    pub fn read_csv(path: &Path, schema: Option<&AttributeSchema>) -> Result<Self> {
        let file = File::open(path).map_err(|e| AapError::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(BufReader::new(file));
        let shown = path.display();
        let header = rdr
            .headers()
            .map_err(|e| AapError::parse(&shown, 1, "header", e.to_string()))?
            .clone();
        let parsed = AttributeSchema::new(header.iter().map(str::to_owned))?;
        if let Some(expected) = schema {
            if expected != &parsed {
                return Err(AapError::Schema(format!(
                    "{shown}: header {:?} does not match schema {:?}",
                    parsed.names(),
                    expected.names()
                )));
            }
        }
        let k = parsed.k();
        let mut rows = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| AapError::parse(&shown, line, "record", e.to_string()))?;
            if rec.len() != k {
                return Err(AapError::parse(
                    &shown,
                    line,
                    "record",
                    format!("expected {k} fields, found {}", rec.len()),
                ));
            }
            let mut row = Vec::with_capacity(k);
            for (j, field) in rec.iter().enumerate() {
                let v = match field {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(AapError::parse(
                            &shown,
                            line,
                            parsed.names()[j].clone(),
                            format!("row {}: expected 0 or 1, found {other:?}", idx),
                        ))
                    }
                };
                row.push(v);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(AapError::Domain(format!("{shown}: no label rows")));
        }
        LabelMatrix::new(parsed, &rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| AapError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| AapError::io(path, e);
        writeln!(w, "{}", self.schema.names().join(",")).map_err(io)?;
        for row in self.rows() {
            let line: Vec<&str> = row.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Marginals `p` and joint matrix `J` from (optionally smoothed) counts.
///
/// `p_i = (N_i + eps) / (n + 2 eps)`, `J_ij = (N_ij + eps) / (n + 2 eps)`.
pub fn count_statistics(labels: &LabelMatrix, epsilon: f64) -> Result<(Vec<f64>, Matrix)> {
    if labels.n() == 0 {
        return Err(AapError::Domain("empty label matrix".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(AapError::Domain(format!("smoothing must be >= 0, got {epsilon}")));
    }
    let k = labels.k();
    let mut counts = vec![0u64; k * k];
    for row in labels.rows() {
        for i in 0..k {
            if row[i] == 0 {
                continue;
            }
            for j in 0..k {
                if row[j] == 1 {
                    counts[i * k + j] += 1;
                }
            }
        }
    }
    let denom = labels.n() as f64 + 2.0 * epsilon;
    let joint = Matrix::from_fn(k, k, |i, j| (counts[i * k + j] as f64 + epsilon) / denom);
    let p = (0..k).map(|i| joint[(i, i)]).collect();
    Ok((p, joint))
}

/// `C[i][j] = J[i][j] / p_i`; rows with `p_i = 0` fall back to the marginals.
pub fn build_conditional(p: &[f64], joint: &Matrix) -> Matrix {
    let k = p.len();
    Matrix::from_fn(k, k, |i, j| if p[i] > 0.0 { joint[(i, j)] / p[i] } else { p[j] })
}

/// `Ctilde[i][j] = (p_j - J[i][j]) / (1 - p_i)`; rows with `p_i = 1` fall back
/// to the marginals.
pub fn build_negative_conditional(p: &[f64], joint: &Matrix) -> Matrix {
    let k = p.len();
    Matrix::from_fn(k, k, |i, j| {
        if p[i] < 1.0 {
            (p[j] - joint[(i, j)]) / (1.0 - p[i])
        } else {
            p[j]
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoOccurrencePriors {
    pub schema: AttributeSchema,
    pub n: usize,
    pub epsilon: f64,
    pub p: Vec<f64>,
    pub joint: Matrix,
    pub cond: Matrix,
    pub neg_cond: Matrix,
}

impl CoOccurrencePriors {
    pub fn from_labels(labels: &LabelMatrix, epsilon: f64) -> Result<Self> {
        let (p, joint) = count_statistics(labels, epsilon)?;
        let cond = build_conditional(&p, &joint);
        let neg_cond = build_negative_conditional(&p, &joint);
        Ok(CoOccurrencePriors {
            schema: labels.schema().clone(),
            n: labels.n(),
            epsilon,
            p,
            joint,
            cond,
            neg_cond,
        })
    }

    pub fn k(&self) -> usize {
        self.schema.k()
    }

    /// Checks every structural invariant of the tables.
    pub fn validate(&self) -> ValidationReport {
        let k = self.k();
        let tol = PRIORS_TOLERANCE;
        let mut checks = Vec::new();

        let shapes_ok = self.p.len() == k
            && self.joint.shape() == (k, k)
            && self.cond.shape() == (k, k)
            && self.neg_cond.shape() == (k, k);
        checks.push(Check::new("shapes", shapes_ok, if shapes_ok { 0.0 } else { 1.0 }));
        if !shapes_ok {
            return ValidationReport { checks };
        }

        let range_violation = |v: f64| (-v).max(v - 1.0).max(0.0);
        let p_viol = self.p.iter().map(|&v| range_violation(v)).fold(0.0, f64::max);
        checks.push(Check::new("marginals in [0,1]", p_viol <= tol, p_viol));

        let mut sym = 0.0f64;
        let mut diag = 0.0f64;
        let mut bound = 0.0f64;
        for i in 0..k {
            diag = diag.max((self.joint[(i, i)] - self.p[i]).abs());
            for j in 0..k {
                let v = self.joint[(i, j)];
                sym = sym.max((v - self.joint[(j, i)]).abs());
                bound = bound.max(-v).max(v - self.p[i].min(self.p[j]));
            }
        }
        checks.push(Check::new("joint symmetric", sym <= tol, sym));
        checks.push(Check::new("joint diagonal equals marginals", diag <= tol, diag));
        checks.push(Check::new(
            "joint bounded by marginals",
            bound <= tol,
            bound.max(0.0),
        ));

        let mut cdiag = 0.0f64;
        let mut ndiag = 0.0f64;
        for i in 0..k {
            if self.p[i] > 0.0 {
                cdiag = cdiag.max((self.cond[(i, i)] - 1.0).abs());
            }
            if self.p[i] < 1.0 {
                ndiag = ndiag.max(self.neg_cond[(i, i)].abs());
            }
        }
        checks.push(Check::new("conditional diagonal is one", cdiag <= tol, cdiag));
        checks.push(Check::new(
            "negative conditional diagonal is zero",
            ndiag <= tol,
            ndiag,
        ));

        let c_range = self
            .cond
            .as_slice()
            .iter()
            .chain(self.neg_cond.as_slice())
            .map(|&v| range_violation(v))
            .fold(0.0, f64::max);
        checks.push(Check::new("conditionals in [0,1]", c_range <= tol, c_range));

        let resid = self.identity_residual();
        checks.push(Check::new("total probability identity", resid <= tol, resid));

        ValidationReport { checks }
    }

    /// Largest `|p_i C_ij + (1 - p_i) Ctilde_ij - p_j|` over all pairs.
    pub fn identity_residual(&self) -> f64 {
        let k = self.k();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let lhs = self.p[i] * self.cond[(i, j)] + (1.0 - self.p[i]) * self.neg_cond[(i, j)];
                worst = worst.max((lhs - self.p[j]).abs());
            }
        }
        worst
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| AapError::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &PriorsFile::from(self))?;
        writeln!(w).map_err(|e| AapError::io(path, e))?;
        w.flush().map_err(|e| AapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AapError::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Parses the priors JSON document. `origin` names the source in errors.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let raw: PriorsFile = serde_json::from_str(text).map_err(|e| {
            AapError::parse(origin, e.line(), format!("column {}", e.column()), e.to_string())
        })?;
        raw.into_priors()
    }

    /// Writes `C` as a labelled `k x k` CSV grid.
    pub fn export_heatmap_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["attribute".to_string()];
        header.extend(self.schema.names().iter().cloned());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for (i, name) in self.schema.names().iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.cond.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| AapError::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> AapError {
    AapError::io(path, std::io::Error::other(e))
}

#[derive(Serialize, Deserialize)]
struct PriorsFile {
    schema: Vec<String>,
    n: usize,
    epsilon: f64,
    p: Vec<f64>,
    #[serde(rename = "J")]
    joint: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    cond: Vec<Vec<f64>>,
    #[serde(rename = "Ctilde")]
    neg_cond: Vec<Vec<f64>>,
}

impl From<&CoOccurrencePriors> for PriorsFile {
    fn from(p: &CoOccurrencePriors) -> Self {
        let rows = |m: &Matrix| m.iter_rows().map(<[f64]>::to_vec).collect();
        PriorsFile {
            schema: p.schema.names().to_vec(),
            n: p.n,
            epsilon: p.epsilon,
            p: p.p.clone(),
            joint: rows(&p.joint),
            cond: rows(&p.cond),
            neg_cond: rows(&p.neg_cond),
        }
    }
}

impl PriorsFile {
    fn into_priors(self) -> Result<CoOccurrencePriors> {
        let schema = AttributeSchema::new(self.schema)?;
        let k = schema.k();
        if self.p.len() != k {
            return Err(AapError::Schema(format!(
                "p has {} entries but schema has {k} attributes",
                self.p.len()
            )));
        }
        let square = |name: &str, rows: Vec<Vec<f64>>| -> Result<Matrix> {
            if rows.len() != k {
                return Err(AapError::Schema(format!(
                    "{name} has {} rows but schema has {k} attributes",
                    rows.len()
                )));
            }
            if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != k) {
                return Err(AapError::Schema(format!(
                    "{name} row {i} has {} entries, expected {k}",
                    r.len()
                )));
            }
            Ok(Matrix::from_rows(&rows))
        };
        Ok(CoOccurrencePriors {
            joint: square("J", self.joint)?,
            cond: square("C", self.cond)?,
            neg_cond: square("Ctilde", self.neg_cond)?,
            schema,
            n: self.n,
            epsilon: self.epsilon,
            p: self.p,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub max_violation: f64,
}

impl Check {
    fn new(name: &'static str, passed: bool, max_violation: f64) -> Self {
        Check {
            name,
            passed,
            max_violation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn identity_residual(&self) -> Option<f64> {
        self.check("total probability identity").map(|c| c.max_violation)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<40} {:<4} max violation {:.3e}",
                c.name,
                if c.passed { "ok" } else { "FAIL" },
                c.max_violation
            )?;
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::four_row_labels;
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-15
    }

    #[test]
    fn counts_on_four_rows() {
        let (p, j) = count_statistics(&four_row_labels(), 0.0).unwrap();
        assert_eq!(p, vec![0.75, 0.75]);
        assert_eq!(j[(0, 1)], 0.5);
        assert_eq!(j[(1, 0)], 0.5);
        assert_eq!(j[(0, 0)], 0.75);
    }

    #[test]
    fn all_zero_column() {
        let schema = AttributeSchema::new(["a", "b", "c"]).unwrap();
        let labels = LabelMatrix::new(schema, &[[1u8, 0, 0], [1, 1, 0]]).unwrap();
        let pri = CoOccurrencePriors::from_labels(&labels, 0.0).unwrap();
        assert_eq!(pri.p[2], 0.0);
        for i in 0..3 {
            assert_eq!(pri.joint[(i, 2)], 0.0);
        }
        // fallback row
        assert_eq!(pri.cond.row(2), pri.p.as_slice());
        assert!(pri.validate().passed(), "{}", pri.validate());
    }

    #[test]
    fn single_attribute_schema_rejected() {
        assert!(matches!(AttributeSchema::new(["only"]), Err(AapError::Schema(_))));
        assert!(AttributeSchema::new(["x", "x"]).is_err());
    }

    #[test]
    fn conditional_tables_by_hand() {
        let pri = CoOccurrencePriors::from_labels(&four_row_labels(), 0.0).unwrap();
        assert!(close(pri.cond[(0, 1)], 2.0 / 3.0));
        assert_eq!(pri.cond[(0, 0)], 1.0);
        assert_eq!(pri.neg_cond[(0, 1)], 1.0);
        assert_eq!(pri.neg_cond[(1, 1)], 0.0);
    }

    #[test]
    fn independence_gives_marginals() {
        let p = vec![0.3, 0.6];
        let joint = Matrix::from_fn(2, 2, |i, j| if i == j { p[i] } else { p[i] * p[j] });
        let c = build_conditional(&p, &joint);
        let ct = build_negative_conditional(&p, &joint);
        assert!(close(c[(0, 1)], 0.6));
        assert!(close(c[(1, 0)], 0.3));
        assert!(close(ct[(0, 1)], 0.6));
        assert!(close(ct[(1, 0)], 0.3));
    }

    #[test]
    fn degenerate_marginal_one_falls_back() {
        let schema = AttributeSchema::new(["a", "b"]).unwrap();
        let labels = LabelMatrix::new(schema, &[[1u8, 0], [1, 1], [1, 1]]).unwrap();
        let pri = CoOccurrencePriors::from_labels(&labels, 0.0).unwrap();
        assert_eq!(pri.p[0], 1.0);
        assert_eq!(pri.neg_cond.row(0), pri.p.as_slice());
        assert!(pri.identity_residual() < 1e-15);
        assert!(pri.validate().passed());
    }

    #[test]
    fn validation_of_fixture() {
        let pri = CoOccurrencePriors::from_labels(&four_row_labels(), 0.0).unwrap();
        let report = pri.validate();
        assert!(report.passed(), "{report}");
        assert!(report.identity_residual().unwrap() < 1e-15);
    }

    #[test]
    fn corrupted_joint_fails_symmetry() {
        let mut pri = CoOccurrencePriors::from_labels(&four_row_labels(), 0.0).unwrap();
        pri.joint[(0, 1)] = 0.4;
        let report = pri.validate();
        assert!(!report.passed());
        assert!(!report.check("joint symmetric").unwrap().passed);
    }

    #[test]
    fn smoothing_keeps_identity() {
        let pri = CoOccurrencePriors::from_labels(&four_row_labels(), 0.5).unwrap();
        assert!(close(pri.p[0], 3.5 / 5.0));
        assert!(close(pri.joint[(0, 1)], 2.5 / 5.0));
        let report = pri.validate();
        assert!(report.passed(), "{report}");
        assert!(report.identity_residual().unwrap() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("priors.json");
        let pri = CoOccurrencePriors::from_labels(&four_row_labels(), 0.1).unwrap();
        pri.export(&path).unwrap();
        let back = CoOccurrencePriors::load(&path).unwrap();
        assert_eq!(back, pri);
    }

    #[test]
    fn heatmap_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.csv");
        let pri = CoOccurrencePriors::from_labels(&four_row_labels(), 0.0).unwrap();
        pri.export_heatmap_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 3));
        assert_eq!(lines[0], "attribute,a,b");
    }

    #[test]
    fn k_mismatch_in_file_is_schema_error() {
        let pri = CoOccurrencePriors::from_labels(&four_row_labels(), 0.0).unwrap();
        let mut doc: serde_json::Value = serde_json::to_value(PriorsFile::from(&pri)).unwrap();
        doc["schema"] = serde_json::json!(["a", "b", "c"]);
        let err = CoOccurrencePriors::from_json_str(&doc.to_string(), "mem").unwrap_err();
        assert!(matches!(err, AapError::Schema(_)), "{err}");
    }

    #[test]
    fn malformed_file_reports_location() {
        let err = CoOccurrencePriors::from_json_str("{\n  \"schema\": [\"a\",\n", "bad.json").unwrap_err();
        match err {
            AapError::Parse { path, line, .. } => {
                assert_eq!(path, "bad.json");
                assert!(line >= 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_rejects_non_binary_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        std::fs::write(&path, "a,b\n1,0\n0,2\n").unwrap();
        let err = LabelMatrix::read_csv(&path, None).unwrap_err();
        match err {
            AapError::Parse { line, field, msg, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "b");
                assert!(msg.contains("row 1"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let labels = four_row_labels();
        labels.write_csv(&path).unwrap();
        assert_eq!(
            LabelMatrix::read_csv(&path, Some(labels.schema())).unwrap(),
            labels
        );
        let other = AttributeSchema::new(["x", "y"]).unwrap();
        assert!(LabelMatrix::read_csv(&path, Some(&other)).is_err());
    }

    fn label_strategy() -> impl Strategy<Value = (usize, Vec<Vec<u8>>)> {
        (2usize..=10, 1usize..=64).prop_flat_map(|(k, n)| {
            (
                Just(k),
                proptest::collection::vec(proptest::collection::vec(0u8..=1, k), n),
            )
        })
    }

    proptest! {
        #[test]
        fn invariants_hold_on_random_labels((k, rows) in label_strategy(), eps in prop_oneof![Just(0.0), 0.0f64..2.0]) {
            let labels = LabelMatrix::new(AttributeSchema::numbered(k).unwrap(), &rows).unwrap();
            let pri = CoOccurrencePriors::from_labels(&labels, eps).unwrap();
            let report = pri.validate();
            prop_assert!(report.passed(), "{}", report);
        }

        #[test]
        fn duplicate_instance_matches_recount((k, rows) in label_strategy(), pick in 0usize..64) {
            let schema = AttributeSchema::numbered(k).unwrap();
            let labels = LabelMatrix::new(schema.clone(), &rows).unwrap();
            let (p, j) = count_statistics(&labels, 0.0).unwrap();
            let dup = rows[pick % rows.len()].clone();
            let mut grown = rows.clone();
            grown.push(dup.clone());
            let (p2, j2) = count_statistics(&LabelMatrix::new(schema, &grown).unwrap(), 0.0).unwrap();
            let n = rows.len() as f64;
            for a in 0..k {
                let want = (p[a] * n + dup[a] as f64) / (n + 1.0);
                prop_assert!((p2[a] - want).abs() < 1e-12);
                for b in 0..k {
                    let want = (j[(a, b)] * n + (dup[a] & dup[b]) as f64) / (n + 1.0);
                    prop_assert!((j2[(a, b)] - want).abs() < 1e-12);
                }
            }
        }
    }
}
