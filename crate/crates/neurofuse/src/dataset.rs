//! On-disk dataset layout and preparation into model-ready inputs.
//!
//! A dataset directory holds:
//!
//! ```text
//! subjects.csv          subject_id,sex,age,outcome (header required)
//! atlas.csv             region_id,x,y,z,system (header required)
//! timeseries/<id>.csv   T rows x R columns, no header, '.' decimal
//! manifest.json         generator provenance (optional for real data)
//! ```
//!
//! Preparation windows each series, builds the masked correlation graphs,
//! degree-normalizes them once, and standardizes the atlas node features, so
//! training touches no raw series.

use std::path::Path;
use std::sync::Arc;

use crate::connectivity::{build_dynamic_graphs, build_static_graph, DynamicGraphSequence, WindowPlan};
use crate::error::{Error, Result};
use crate::fusion::{SubjectData, TabularCovariates};
use crate::graph_encoder::{node_feature_matrix, normalize_adjacency, AtlasMetadata};
use crate::numerics::tensor::Tensor;

/// One row of subjects.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub sex: u8,
    pub age: f64,
    pub outcome: u8,
}

/// Parse subjects.csv.
pub fn read_subjects_csv<R: std::io::Read>(reader: R) -> Result<Vec<SubjectRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse("subjects csv", e.to_string()))?.clone();
    let cols: Vec<usize> = ["subject_id", "sex", "age", "outcome"]
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::parse("subjects csv", format!("missing column {:?}", name)))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::parse("subjects csv", e.to_string()))?;
        let get = |i: usize| record.get(cols[i]).ok_or_else(|| Error::parse("subjects csv", "short row"));
        let sex: u8 = get(1)?.trim().parse().map_err(|_| Error::parse("subjects csv", "bad sex value"))?;
        let age: f64 = get(2)?.trim().parse().map_err(|_| Error::parse("subjects csv", "bad age value"))?;
        let outcome: u8 = get(3)?.trim().parse().map_err(|_| Error::parse("subjects csv", "bad outcome value"))?;
        if sex > 1 || outcome > 1 {
            return Err(Error::parse("subjects csv", "sex and outcome must be 0 or 1"));
        }
        out.push(SubjectRecord { id: get(0)?.to_string(), sex, age, outcome });
    }
    Ok(out)
}

pub fn write_subjects_csv<W: std::io::Write>(subjects: &[SubjectRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["subject_id", "sex", "age", "outcome"])
        .map_err(|e| Error::parse("subjects csv", e.to_string()))?;
    for s in subjects {
        wtr.write_record(&[s.id.clone(), s.sex.to_string(), format!("{}", s.age), s.outcome.to_string()])
            .map_err(|e| Error::parse("subjects csv", e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::parse("subjects csv", e.to_string()))?;
    Ok(())
}

/// Parse a headerless numeric CSV into a T x R matrix. Every row must have
/// the same column count and every value must be finite.
pub fn parse_timeseries_csv(text: &str) -> Result<Tensor> {
    let mut data: Vec<f64> = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse("timeseries csv", format!("line {}: bad number {:?}", lineno + 1, field)))?;
            if !v.is_finite() {
                return Err(Error::parse("timeseries csv", format!("line {}: non-finite value", lineno + 1)));
            }
            data.push(v);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(Error::parse(
                    "timeseries csv",
                    format!("line {}: {} columns, expected {}", lineno + 1, count, c),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::parse("timeseries csv", "empty file"))?;
    Tensor::from_vec(rows, cols, data)
}

pub fn write_timeseries_csv<W: std::io::Write>(series: &Tensor, mut w: W) -> std::io::Result<()> {
    for i in 0..series.rows() {
        let row: Vec<String> = series.row_slice(i).iter().map(|v| format!("{}", v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Windowing request carried by configs: fixed count or auto-derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub width: usize,
    pub step: usize,
    /// `None` derives the count from the series length.
    pub count: Option<usize>,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { width: 130, step: 20, count: Some(8) }
    }
}

impl WindowSpec {
    pub fn plan(&self, t: usize) -> Result<WindowPlan> {
        match self.count {
            Some(c) => WindowPlan::fixed(t, self.width, self.step, c),
            None => WindowPlan::auto(t, self.width, self.step),
        }
    }
}

/// Model-ready dataset: per-subject graphs plus shared atlas features.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub subjects: Vec<SubjectData>,
    pub atlas: AtlasMetadata,
    pub atlas_features: Tensor,
    pub windows: usize,
}

impl PreparedDataset {
    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.label).collect()
    }
}

/// Build one subject's graphs from a raw series.
pub fn prepare_subject(
    record: &SubjectRecord,
    series: &Tensor,
    plan: &WindowPlan,
    fdr_q: f64,
) -> Result<SubjectData> {
    let seq = build_dynamic_graphs(series, plan, fdr_q)?;
    let stat = build_static_graph(series, fdr_q)?;
    Ok(assemble_subject(record, &seq, &stat)?)
}

fn assemble_subject(
    record: &SubjectRecord,
    seq: &DynamicGraphSequence,
    stat: &DynamicGraphSequence,
) -> Result<SubjectData> {
    let mut dynamic_norm = Vec::with_capacity(seq.adjacencies.len());
    for a in &seq.adjacencies {
        dynamic_norm.push(Arc::new(normalize_adjacency(a)?));
    }
    Ok(SubjectData {
        id: record.id.clone(),
        covariates: TabularCovariates::new(record.sex, record.age)?,
        label: record.outcome,
        dynamic_norm,
        dynamic_raw: seq.adjacencies.iter().cloned().map(Arc::new).collect(),
        static_norm: Arc::new(normalize_adjacency(&stat.adjacencies[0])?),
        static_raw: Arc::new(stat.adjacencies[0].clone()),
    })
}

/// Load and prepare a dataset directory.
pub fn prepare_dataset(dir: &Path, window: &WindowSpec, fdr_q: f64) -> Result<PreparedDataset> {
    let atlas_path = dir.join("atlas.csv");
    let atlas_file = std::fs::File::open(&atlas_path).map_err(|e| Error::io(atlas_path.display().to_string(), e))?;
    let atlas = AtlasMetadata::from_csv_reader(std::io::BufReader::new(atlas_file))?;
    let subjects_path = dir.join("subjects.csv");
    let subj_file =
        std::fs::File::open(&subjects_path).map_err(|e| Error::io(subjects_path.display().to_string(), e))?;
    let records = read_subjects_csv(std::io::BufReader::new(subj_file))?;
    if records.is_empty() {
        return Err(Error::InsufficientData("dataset has no subjects".to_string()));
    }

    // Per-subject graph construction is pure; parallelize when a pool exists.
    use rayon::prelude::*;
    let subjects: Vec<SubjectData> = records
        .par_iter()
        .map(|record| {
            let ts_path = dir.join("timeseries").join(format!("{}.csv", record.id));
            let text = std::fs::read_to_string(&ts_path).map_err(|e| Error::io(ts_path.display().to_string(), e))?;
            let series = parse_timeseries_csv(&text)?;
            if series.cols() != atlas.region_count() {
                return Err(Error::dim(
                    "prepare_dataset",
                    format!("subject {} has {} regions, atlas has {}", record.id, series.cols(), atlas.region_count()),
                ));
            }
            let plan = window.plan(series.rows())?;
            prepare_subject(record, &series, &plan, fdr_q)
        })
        .collect::<Result<_>>()?;

    let windows = subjects[0].dynamic_norm.len();
    if let Some(s) = subjects.iter().find(|s| s.dynamic_norm.len() != windows) {
        return Err(Error::dim(
            "prepare_dataset",
            format!("subject {} has {} windows, expected {}", s.id, s.dynamic_norm.len(), windows),
        ));
    }
    let atlas_features = node_feature_matrix(&atlas)?;
    Ok(PreparedDataset { subjects, atlas, atlas_features, windows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subjects_csv_roundtrip() {
        let subs = vec![
            SubjectRecord { id: "S0001".into(), sex: 0, age: 14.25, outcome: 1 },
            SubjectRecord { id: "S0002".into(), sex: 1, age: 19.0, outcome: 0 },
        ];
        let mut buf = Vec::new();
        write_subjects_csv(&subs, &mut buf).unwrap();
        let back = read_subjects_csv(buf.as_slice()).unwrap();
        assert_eq!(subs, back);
    }

    #[test]
    fn subjects_csv_rejects_bad_values() {
        let bad = "subject_id,sex,age,outcome\nS1,2,15.0,0\n";
        assert!(read_subjects_csv(bad.as_bytes()).is_err());
        let bad = "subject_id,sex,age,outcome\nS1,0,teen,0\n";
        assert!(read_subjects_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn timeseries_parse_checks_shape_and_values() {
        let t = parse_timeseries_csv("1.0,2.0\n3.5,-1.25\n").unwrap();
        assert_eq!(t.shape(), (2, 2));
        assert_eq!(t.data(), &[1.0, 2.0, 3.5, -1.25]);
        assert!(parse_timeseries_csv("1.0,2.0\n3.5\n").is_err());
        assert!(parse_timeseries_csv("1.0,nan\n").is_err());
        assert!(parse_timeseries_csv("").is_err());
        assert!(parse_timeseries_csv("1.0,inf\n").is_err());
    }

    #[test]
    fn timeseries_roundtrip_preserves_values() {
        let t = Tensor::from_vec(2, 3, vec![0.1, -2.5, 1e-9, 4.0, 5.5, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_timeseries_csv(&t, &mut buf).unwrap();
        let back = parse_timeseries_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(t.data(), back.data());
    }

    #[test]
    fn window_spec_default_matches_protocol() {
        let spec = WindowSpec::default();
        let plan = spec.plan(270).unwrap();
        assert_eq!(plan.count(), 8);
        assert!(spec.plan(269).is_err());
        let auto = WindowSpec { count: None, ..spec };
        assert_eq!(auto.plan(330).unwrap().count(), 11);
    }
}
