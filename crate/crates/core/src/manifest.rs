//! Dataset manifest: one CSV row per image, validated into [`DatasetManifest`],
//! plus the exploratory summary emitted by `ingest`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REQUIRED_COLUMNS: [&str; 7] = [
    "patient_id",
    "image_id",
    "laterality",
    "view",
    "age",
    "cancer",
    "biopsy",
];
pub const SOURCE_COLUMN: &str = "source_path";
pub const MAX_AGE: u32 = 130;
pub const AGE_BIN_YEARS: u32 = 5;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest is missing required column `{0}`")]
    MissingColumn(String),
    #[error("image_id `{image_id}` appears more than once (rows {first} and {second})")]
    DuplicateImageId {
        image_id: String,
        first: usize,
        second: usize,
    },
    #[error("row {row}: invalid value `{value}` for `{field}`")]
    InvalidEnumValue {
        row: usize,
        field: String,
        value: String,
    },
    #[error("row {row}: `{field}` must not be empty")]
    EmptyField { row: usize, field: String },
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Laterality {
    L,
    R,
}

impl Laterality {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::L => "L",
            Self::R => "R",
        }
    }
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Laterality {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "L" => Ok(Self::L),
            "R" => Ok(Self::R),
            _ => Err(()),
        }
    }
}

/// Acquisition view. Supplementary projections (ML, LM, AT, ...) map to `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "MLO")]
    Mlo,
    #[serde(rename = "other")]
    Other,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cc => "CC",
            Self::Mlo => "MLO",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "CC" => Ok(Self::Cc),
            "MLO" => Ok(Self::Mlo),
            "other" | "OTHER" | "ML" | "LM" | "LMO" | "AT" | "XCCL" | "XCCM" => Ok(Self::Other),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub patient_id: String,
    pub image_id: String,
    pub laterality: Laterality,
    pub view: View,
    pub age: Option<u32>,
    pub cancer: bool,
    pub biopsy: bool,
    pub source_path: PathBuf,
}

impl ImageRecord {
    /// Source path, joined onto `root` when it is relative.
    pub fn resolved_path(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(root) if self.source_path.is_relative() => root.join(&self.source_path),
            _ => self.source_path.clone(),
        }
    }

    pub fn label(&self) -> u8 {
        u8::from(self.cancer)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    patient_index: BTreeMap<String, Vec<usize>>,
}

impl DatasetManifest {
    /// Validates and indexes records; row numbers in errors are 1-based data rows.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self, ManifestError> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut patient_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            for (field, value) in [("patient_id", &r.patient_id), ("image_id", &r.image_id)] {
                if value.is_empty() {
                    return Err(ManifestError::EmptyField {
                        row,
                        field: field.into(),
                    });
                }
            }
            if let Some(age) = r.age.filter(|&a| a > MAX_AGE) {
                return Err(ManifestError::InvalidEnumValue {
                    row,
                    field: "age".into(),
                    value: age.to_string(),
                });
            }
            if let Some(first) = seen.insert(&r.image_id, row) {
                return Err(ManifestError::DuplicateImageId {
                    image_id: r.image_id.clone(),
                    first,
                    second: row,
                });
            }
            patient_index
                .entry(r.patient_id.clone())
                .or_default()
                .push(i);
        }
        Ok(Self {
            records,
            patient_index,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn patient_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.patient_index
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Patient ids in order of first appearance.
    pub fn patients(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.patient_id.as_str()))
            .map(|r| r.patient_id.as_str())
            .collect()
    }

    pub fn patient_records(&self, patient_id: &str) -> impl Iterator<Item = &ImageRecord> {
        self.patient_index
            .get(patient_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
    }

    /// Patient-level label: positive iff any of the patient's images is.
    pub fn patient_cancer(&self, patient_id: &str) -> bool {
        self.patient_records(patient_id).any(|r| r.cancer)
    }
}

fn parse_flag(row: usize, field: &str, value: &str) -> Result<bool, ManifestError> {
    match value {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(ManifestError::InvalidEnumValue {
            row,
            field: field.into(),
            value: value.into(),
        }),
    }
}

fn parse_age(row: usize, value: &str) -> Result<Option<u32>, ManifestError> {
    if value.is_empty() || value.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    // ages exported as floats ("61.0") are accepted when integral
    let parsed = value.parse::<u32>().ok().or_else(|| {
        value
            .parse::<f64>()
            .ok()
            .filter(|v| v.fract() == 0.0 && *v >= 0.0)
            .map(|v| v as u32)
    });
    match parsed {
        Some(a) if a <= MAX_AGE => Ok(Some(a)),
        _ => Err(ManifestError::InvalidEnumValue {
            row,
            field: "age".into(),
            value: value.into(),
        }),
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let file = std::fs::File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_manifest(file)
}

pub fn read_manifest<R: std::io::Read>(reader: R) -> Result<DatasetManifest, ManifestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = column(name).ok_or_else(|| ManifestError::MissingColumn(name.into()))?;
    }
    let source_idx = column(SOURCE_COLUMN);
    let extra: Vec<&str> = headers
        .iter()
        .filter(|h| !REQUIRED_COLUMNS.contains(h) && *h != SOURCE_COLUMN)
        .collect();
    if !extra.is_empty() {
        log::warn!("ignoring extra manifest columns: {}", extra.join(", "));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let get = |j: usize| row.get(j).unwrap_or("");
        let [pid, iid, lat, view, age, cancer, biopsy] = idx;
        let enum_err = |field: &str, value: &str| ManifestError::InvalidEnumValue {
            row: row_no,
            field: field.into(),
            value: value.into(),
        };
        records.push(ImageRecord {
            patient_id: get(pid).to_string(),
            image_id: get(iid).to_string(),
            laterality: get(lat)
                .parse()
                .map_err(|_| enum_err("laterality", get(lat)))?,
            view: get(view).parse().map_err(|_| enum_err("view", get(view)))?,
            age: parse_age(row_no, get(age))?,
            cancer: parse_flag(row_no, "cancer", get(cancer))?,
            biopsy: parse_flag(row_no, "biopsy", get(biopsy))?,
            source_path: PathBuf::from(source_idx.map(get).unwrap_or("")),
        });
    }
    DatasetManifest::from_records(records)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), ManifestError> {
    let file = std::fs::File::create(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.push(SOURCE_COLUMN);
    w.write_record(&header)?;
    for r in manifest.records() {
        let age = r.age.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            r.patient_id.as_str(),
            r.image_id.as_str(),
            r.laterality.as_str(),
            r.view.as_str(),
            age.as_str(),
            if r.cancer { "1" } else { "0" },
            if r.biopsy { "1" } else { "0" },
            &r.source_path.to_string_lossy(),
        ])?;
    }
    w.flush().map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Patient ages in 5-year bins; `edges[i]..edges[i+1]` holds `counts[i]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgeHistogram {
    pub bin_edges: Vec<u32>,
    pub counts: Vec<usize>,
    pub missing: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagesPerPatientBin {
    pub images: usize,
    pub patients: usize,
}

/// Counts indexed `[cancer][biopsy]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTable {
    pub cancer0_biopsy0: usize,
    pub cancer0_biopsy1: usize,
    pub cancer1_biopsy0: usize,
    pub cancer1_biopsy1: usize,
}

impl CrossTable {
    fn add(&mut self, cancer: bool, biopsy: bool) {
        match (cancer, biopsy) {
            (false, false) => self.cancer0_biopsy0 += 1,
            (false, true) => self.cancer0_biopsy1 += 1,
            (true, false) => self.cancer1_biopsy0 += 1,
            (true, true) => self.cancer1_biopsy1 += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.cancer0_biopsy0 + self.cancer0_biopsy1 + self.cancer1_biopsy0 + self.cancer1_biopsy1
    }

    /// Biopsy rate among cancer-negative entries, if any exist.
    pub fn negative_biopsy_rate(&self) -> Option<f64> {
        let neg = self.cancer0_biopsy0 + self.cancer0_biopsy1;
        (neg > 0).then(|| self.cancer0_biopsy1 as f64 / neg as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_patients: usize,
    pub n_images: usize,
    pub n_cancer_patients: usize,
    pub n_cancer_images: usize,
    pub image_positive_rate: f64,
    pub age_histogram: AgeHistogram,
    pub images_per_patient_histogram: Vec<ImagesPerPatientBin>,
    /// Per image.
    pub biopsy_by_cancer: CrossTable,
    /// Per patient, each flag OR-reduced over the patient's images.
    pub patient_biopsy_by_cancer: CrossTable,
}

pub fn dataset_summary(manifest: &DatasetManifest) -> DatasetSummary {
    let mut s = DatasetSummary {
        n_images: manifest.len(),
        ..Default::default()
    };
    let mut ages = Vec::new();
    let mut per_patient: BTreeMap<usize, usize> = BTreeMap::new();
    for r in manifest.records() {
        s.biopsy_by_cancer.add(r.cancer, r.biopsy);
        s.n_cancer_images += usize::from(r.cancer);
    }
    for pid in manifest.patients() {
        let recs: Vec<&ImageRecord> = manifest.patient_records(pid).collect();
        s.n_patients += 1;
        let cancer = recs.iter().any(|r| r.cancer);
        s.n_cancer_patients += usize::from(cancer);
        s.patient_biopsy_by_cancer
            .add(cancer, recs.iter().any(|r| r.biopsy));
        *per_patient.entry(recs.len()).or_default() += 1;
        match recs.iter().find_map(|r| r.age) {
            Some(a) => ages.push(a),
            None => s.age_histogram.missing += 1,
        }
    }
    if s.n_images > 0 {
        s.image_positive_rate = s.n_cancer_images as f64 / s.n_images as f64;
    }
    if let (Some(&lo), Some(&hi)) = (ages.iter().min(), ages.iter().max()) {
        let first = lo / AGE_BIN_YEARS * AGE_BIN_YEARS;
        let bins = (hi - first) / AGE_BIN_YEARS + 1;
        s.age_histogram.bin_edges = (0..=bins).map(|i| first + i * AGE_BIN_YEARS).collect();
        s.age_histogram.counts = vec![0; bins as usize];
        for a in ages {
            s.age_histogram.counts[((a - first) / AGE_BIN_YEARS) as usize] += 1;
        }
    }
    s.images_per_patient_histogram = per_patient
        .into_iter()
        .map(|(images, patients)| ImagesPerPatientBin { images, patients })
        .collect();
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "patient_id,image_id,laterality,view,age,cancer,biopsy,source_path\n";

    #[test]
    fn parses_valid_rows() {
        let csv = format!("{HEADER}p1,i1,L,CC,61,0,0,a.png\np1,i2,R,MLO,,1,1,b.dcm\n");
        let m = read_manifest(csv.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.patients(), vec!["p1"]);
        assert_eq!(m.records()[0].age, Some(61));
        assert_eq!(m.records()[1].age, None);
        assert!(m.patient_cancer("p1"));
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "patient_id,image_id,laterality,view,age,biopsy\np,i,L,CC,1,0\n";
        match read_manifest(csv.as_bytes()) {
            Err(ManifestError::MissingColumn(c)) => assert_eq!(c, "cancer"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_image_id_rejected() {
        let csv = format!("{HEADER}p1,img1,L,CC,50,0,0,a\np2,img1,R,CC,50,0,0,b\n");
        assert!(matches!(
            read_manifest(csv.as_bytes()),
            Err(ManifestError::DuplicateImageId {
                first: 1,
                second: 2,
                ..
            })
        ));
    }

    #[test]
    fn invalid_enum_reports_row_and_field() {
        let csv = format!("{HEADER}p1,i1,L,CC,50,0,0,a\np1,i2,X,CC,50,0,0,a\n");
        match read_manifest(csv.as_bytes()) {
            Err(ManifestError::InvalidEnumValue { row, field, .. }) => {
                assert_eq!((row, field.as_str()), (2, "laterality"));
            }
            other => panic!("{other:?}"),
        }
        let csv = format!("{HEADER}p1,i1,L,CC,50,2,0,a\n");
        assert!(matches!(
            read_manifest(csv.as_bytes()),
            Err(ManifestError::InvalidEnumValue { .. })
        ));
        let csv = format!("{HEADER}p1,i1,L,CC,131,0,0,a\n");
        assert!(matches!(
            read_manifest(csv.as_bytes()),
            Err(ManifestError::InvalidEnumValue { .. })
        ));
    }

    #[test]
    fn summary_counts() {
        let csv = format!("{HEADER}a,1,L,CC,45,0,0,x\nb,2,L,CC,52,1,1,x\nc,3,R,MLO,70,0,1,x\n");
        let s = dataset_summary(&read_manifest(csv.as_bytes()).unwrap());
        assert_eq!((s.n_patients, s.n_cancer_patients, s.n_images), (3, 1, 3));
        assert!((s.image_positive_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.age_histogram.bin_edges, vec![45, 50, 55, 60, 65, 70, 75]);
        assert_eq!(s.age_histogram.counts, vec![1, 1, 0, 0, 0, 1]);
        assert_eq!(s.biopsy_by_cancer.total(), 3);
        assert_eq!(
            s.images_per_patient_histogram,
            vec![ImagesPerPatientBin {
                images: 1,
                patients: 3
            }]
        );
    }

    #[test]
    fn empty_manifest_summary_is_zero() {
        let s = dataset_summary(&read_manifest(HEADER.as_bytes()).unwrap());
        assert_eq!(s, DatasetSummary::default());
    }
}
