//! Text file formats: annotations, predictions, dataset manifests, and
//! evaluation reports. All CSVs are plain comma-separated without quoting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::roi::Proposal;
use crate::synth::Annotation;
use crate::volume::{load_vol1, Box3D, Volume};

pub const ANNOTATION_HEADER: &str = "scan_id,z,y,x,d";
pub const PREDICTION_HEADER: &str = "scan_id,z,y,x,d,rpn_score,fpr_score,fused_score";
pub const MANIFEST_HEADER: &str = "scan_id,split,path";

/// Ground truth grouped by scan, ordered by scan id.
pub type ScanBoxes = BTreeMap<String, Vec<Box3D>>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &str, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        reason: reason.into(),
    }
}

fn parse_f64(field: &str, name: &str, path: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("{name}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("{name}: non-finite value")));
    }
    Ok(v)
}

/// Parses annotation text; `source` names the input in error messages.
pub fn parse_annotations_str(text: &str, source: &str) -> Result<ScanBoxes> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ANNOTATION_HEADER => {}
        Some((_, h)) => {
            return Err(parse_err(source, 1, format!("expected header `{ANNOTATION_HEADER}`, got `{h}`")))
        }
        None => return Err(parse_err(source, 1, "missing header")),
    }
    let mut out = ScanBoxes::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(parse_err(source, line_no, format!("expected 5 fields, got {}", f.len())));
        }
        let id = f[0].trim();
        if id.is_empty() {
            return Err(parse_err(source, line_no, "empty scan_id"));
        }
        let b = Box3D::new(
            parse_f64(f[1], "z", source, line_no)?,
            parse_f64(f[2], "y", source, line_no)?,
            parse_f64(f[3], "x", source, line_no)?,
            parse_f64(f[4], "d", source, line_no)?,
        );
        if !(b.d > 0.0) {
            return Err(parse_err(source, line_no, "diameter must be positive"));
        }
        out.entry(id.to_string()).or_default().push(b);
    }
    Ok(out)
}

pub fn parse_annotations(path: &Path) -> Result<ScanBoxes> {
    parse_annotations_str(&read_text(path)?, &path.display().to_string())
}

pub fn format_annotations(rows: &[Annotation]) -> String {
    let mut s = String::from(ANNOTATION_HEADER);
    s.push('\n');
    for a in rows.iter().filter(|a| a.is_lesion) {
        let b = &a.box3d;
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", a.scan_id, b.z, b.y, b.x, b.d);
    }
    s
}

pub fn write_annotations(path: &Path, rows: &[Annotation]) -> Result<()> {
    write_text(path, &format_annotations(rows))
}

/// One detection tied to its scan.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub scan_id: String,
    pub proposal: Proposal,
}

/// Formats rows sorted by fused score (descending, stable).
pub fn format_predictions(rows: &[PredictionRow]) -> String {
    let mut order: Vec<&PredictionRow> = rows.iter().collect();
    order.sort_by(|a, b| b.proposal.score.total_cmp(&a.proposal.score));
    let mut s = String::from(PREDICTION_HEADER);
    s.push('\n');
    for r in order {
        let p = &r.proposal;
        let b = &p.box3d;
        let fpr = p.fpr_score.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            r.scan_id, b.z, b.y, b.x, b.d, p.rpn_score, fpr, p.score
        );
    }
    s
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    write_text(path, &format_predictions(rows))
}

pub fn parse_predictions_str(text: &str, source: &str) -> Result<Vec<PredictionRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTION_HEADER => {}
        _ => return Err(parse_err(source, 1, format!("expected header `{PREDICTION_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(source, n, format!("expected 8 fields, got {}", f.len())));
        }
        let fpr = if f[6].trim().is_empty() {
            None
        } else {
            Some(parse_f64(f[6], "fpr_score", source, n)?)
        };
        out.push(PredictionRow {
            scan_id: f[0].trim().to_string(),
            proposal: Proposal {
                box3d: Box3D::new(
                    parse_f64(f[1], "z", source, n)?,
                    parse_f64(f[2], "y", source, n)?,
                    parse_f64(f[3], "x", source, n)?,
                    parse_f64(f[4], "d", source, n)?,
                ),
                rpn_score: parse_f64(f[5], "rpn_score", source, n)?,
                fpr_score: fpr,
                score: parse_f64(f[7], "fused_score", source, n)?,
                level: 0,
            },
        });
    }
    Ok(out)
}

pub fn parse_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    parse_predictions_str(&read_text(path)?, &path.display().to_string())
}

/// Groups prediction rows by scan, keeping file order within a scan.
pub fn group_predictions(rows: &[PredictionRow]) -> BTreeMap<String, Vec<Proposal>> {
    let mut out: BTreeMap<String, Vec<Proposal>> = BTreeMap::new();
    for r in rows {
        out.entry(r.scan_id.clone()).or_default().push(r.proposal.clone());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub scan_id: String,
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub split: Split,
}

/// A generated dataset: `manifest.csv` and `annotations.csv` in `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.csv";
    pub const ANNOTATIONS: &'static str = "annotations.csv";

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(Self::FILE)
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.root.join(Self::ANNOTATIONS)
    }

    pub fn format(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.scan_id, e.split.as_str(), e.path.display());
        }
        s
    }

    pub fn save(&self) -> Result<()> {
        write_text(&self.manifest_path(), &self.format())
    }

    /// Loads `manifest.csv` from a dataset directory (or the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(Self::FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = read_text(&file)?;
        let src = file.display().to_string();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => return Err(parse_err(&src, 1, format!("expected header `{MANIFEST_HEADER}`"))),
        }
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(parse_err(&src, i + 1, "expected 3 fields"));
            }
            let split = match f[1].trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(parse_err(&src, i + 1, format!("unknown split `{other}`"))),
            };
            let id = f[0].trim().to_string();
            if entries.iter().any(|e| e.scan_id == id) {
                return Err(parse_err(&src, i + 1, format!("duplicate scan_id `{id}`")));
            }
            entries.push(ManifestEntry {
                scan_id: id,
                path: PathBuf::from(f[2].trim()),
                split,
            });
        }
        let m = DatasetManifest { root, entries };
        for e in &m.entries {
            let p = m.root.join(&e.path);
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_volume(&self, entry: &ManifestEntry) -> Result<Volume> {
        load_vol1(&self.root.join(&entry.path))
    }

    /// Ground truth for every scan in the manifest; scans without
    /// annotations map to an empty list.
    pub fn ground_truth(&self) -> Result<ScanBoxes> {
        let mut gt = parse_annotations(&self.annotations_path())?;
        for e in &self.entries {
            gt.entry(e.scan_id.clone()).or_default();
        }
        Ok(gt)
    }
}

pub fn format_eval_report(report: &EvalReport) -> String {
    let mut s = String::from("fp_rate,sensitivity\n");
    for (rate, sens) in &report.result.sensitivity_at {
        let _ = writeln!(s, "{rate},{sens:.6}");
    }
    let _ = writeln!(s, "froc,{:.6}", report.result.froc);
    if let Some(t) = report.result.tnp {
        let _ = writeln!(s, "tnp,{t:.6}");
    }
    for b in &report.buckets {
        match b.sensitivity {
            Some(v) => {
                let _ = writeln!(s, "bucket,{},{v:.6}", b.label);
            }
            None => {
                let _ = writeln!(s, "bucket,{},absent", b.label);
            }
        }
    }
    s
}

pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_text(path, &format_eval_report(report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_only_is_empty() {
        let m = parse_annotations_str("scan_id,z,y,x,d\n", "t").unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn one_row_one_box() {
        let m = parse_annotations_str("scan_id,z,y,x,d\na,1,2,3,4.5\n", "t").unwrap();
        assert_eq!(m["a"], vec![Box3D::new(1.0, 2.0, 3.0, 4.5)]);
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let err = parse_annotations_str("scan_id,z,y,x,d\na,1,2,3,4\nb,1,zz,3,4\n", "f.csv").unwrap_err();
        match err {
            Error::Parse { line, reason, .. } => {
                assert_eq!(line, 3);
                assert!(reason.contains('y'));
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse_annotations_str("z,y,x\n", "f.csv"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_annotations_str("scan_id,z,y,x,d\na,1,2,3\n", "f").is_err());
    }

    #[test]
    fn predictions_sorted_and_parse_back() {
        let mk = |s: f64, fpr: Option<f64>| PredictionRow {
            scan_id: "s".into(),
            proposal: Proposal {
                box3d: Box3D::new(1.0, 2.0, 3.0, 4.0),
                rpn_score: s,
                fpr_score: fpr,
                score: s,
                level: 4,
            },
        };
        let text = format_predictions(&[mk(0.3, None), mk(0.9, Some(0.5))]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PREDICTION_HEADER);
        assert_eq!(lines[1], "s,1.000000,2.000000,3.000000,4.000000,0.900000,0.500000,0.900000");
        assert_eq!(lines[2], "s,1.000000,2.000000,3.000000,4.000000,0.300000,,0.300000");
        let back = parse_predictions_str(&text, "t").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].proposal.fpr_score, None);
    }

    proptest! {
        #[test]
        fn annotation_roundtrip_at_six_decimals(
            rows in proptest::collection::vec((0usize..4, 0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, 0.5f64..40.0), 0..20)
        ) {
            let anns: Vec<Annotation> = rows.iter().map(|&(s, z, y, x, d)| Annotation {
                scan_id: format!("scan_{s}"),
                box3d: Box3D::new(z, y, x, d),
                is_lesion: true,
            }).collect();
            let parsed = parse_annotations_str(&format_annotations(&anns), "t").unwrap();
            let total: usize = parsed.values().map(Vec::len).sum();
            prop_assert_eq!(total, anns.len());
            let mut seen: BTreeMap<String, usize> = BTreeMap::new();
            for a in &anns {
                let k = seen.entry(a.scan_id.clone()).or_default();
                let b = parsed[&a.scan_id][*k];
                *k += 1;
                for (u, v) in [(a.box3d.z, b.z), (a.box3d.y, b.y), (a.box3d.x, b.x), (a.box3d.d, b.d)] {
                    prop_assert!((u - v).abs() <= 5e-7);
                }
            }
        }
    }
}
