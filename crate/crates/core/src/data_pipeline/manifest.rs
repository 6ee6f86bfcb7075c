use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::BoxAnnotation;
use crate::core_ops::{Disease, LabelVector, NUM_CLASSES};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub patient_id: String,
    pub labels: LabelVector,
    pub split: Split,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Box annotations, when a box file was supplied.
    pub boxes: Vec<BoxAnnotation>,
    pub image_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn image_path(&self, image_id: &str) -> PathBuf {
        match &self.image_dir {
            Some(d) => d.join(image_id),
            None => PathBuf::from(image_id),
        }
    }
}

/// Image-level counts for one split, in the layout of the benchmark table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub per_disease: [usize; NUM_CLASSES],
    pub multi_label_total: usize,
    pub finding: usize,
    pub no_finding: usize,
    pub total: usize,
}

impl SplitCounts {
    pub fn of<'a>(labels: impl IntoIterator<Item = &'a LabelVector>) -> Self {
        let mut c = SplitCounts { per_disease: [0; NUM_CLASSES], multi_label_total: 0, finding: 0, no_finding: 0, total: 0 };
        for l in labels {
            c.total += 1;
            if l.is_no_finding() {
                c.no_finding += 1;
            } else {
                c.finding += 1;
            }
            for d in l.diseases() {
                c.per_disease[d.index()] += 1;
                c.multi_label_total += 1;
            }
        }
        c
    }

    fn of_boxes(boxes: &[BoxAnnotation]) -> Self {
        let mut per_disease = [0; NUM_CLASSES];
        for b in boxes {
            per_disease[b.disease.index()] += 1;
        }
        let n = boxes.len();
        SplitCounts { per_disease, multi_label_total: n, finding: n, no_finding: 0, total: n }
    }

    fn rows(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<_> = Disease::ALL.iter().map(|d| (d.name().to_string(), self.per_disease[d.index()])).collect();
        rows.push(("Multi-label Totals".into(), self.multi_label_total));
        rows.push(("Finding".into(), self.finding));
        rows.push(("No Finding".into(), self.no_finding));
        rows.push(("Totals".into(), self.total));
        rows
    }
}

/// Expected counts of the official split (train, test, box).
pub fn benchmark_counts() -> [SplitCounts; 3] {
    [
        SplitCounts {
            per_disease: [8280, 1707, 8659, 13782, 4034, 4708, 876, 2637, 2852, 1378, 1423, 1251, 2242, 141],
            multi_label_total: 53_970,
            finding: 36_024,
            no_finding: 50_500,
            total: 86_524,
        },
        SplitCounts {
            per_disease: [3279, 1069, 4658, 6112, 1748, 1623, 555, 2665, 1815, 925, 1093, 435, 1143, 86],
            multi_label_total: 27_206,
            finding: 15_735,
            no_finding: 9_861,
            total: 25_596,
        },
        SplitCounts {
            per_disease: [180, 146, 153, 123, 85, 79, 120, 98, 0, 0, 0, 0, 0, 0],
            multi_label_total: 984,
            finding: 984,
            no_finding: 0,
            total: 984,
        },
    ]
}

/// Row-by-row differences against the benchmark table; empty when equal.
pub fn count_diff(found: &[SplitCounts; 3]) -> Vec<String> {
    let expected = benchmark_counts();
    let mut out = Vec::new();
    for ((name, want), got) in ["train", "test", "box"].iter().zip(&expected).zip(found) {
        for ((row, w), (_, g)) in want.rows().into_iter().zip(got.rows()) {
            if w != g {
                out.push(format!("{name} {row}: expected {w}, found {g}"));
            }
        }
    }
    out
}

/// Paths of the benchmark label files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifestSources {
    /// CSV with image id, pipe-separated findings and (optionally) patient id.
    pub labels: Option<PathBuf>,
    /// Image ids of the official train/val list.
    pub train_list: Option<PathBuf>,
    pub test_list: Option<PathBuf>,
    pub boxes: Option<PathBuf>,
    pub images: Option<PathBuf>,
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("no {what} path configured")))
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn find_column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers.iter().position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
}

/// Patient id from ids shaped like `00000013_005.png`.
fn patient_from_image_id(id: &str) -> String {
    id.split('_').next().unwrap_or(id).to_string()
}

/// Parses a findings cell (`Atelectasis|Effusion` or `No Finding`).
pub fn parse_findings(cell: &str) -> std::result::Result<LabelVector, String> {
    let cell = cell.trim();
    if cell.eq_ignore_ascii_case("No Finding") {
        return Ok(LabelVector::no_finding());
    }
    let mut v = LabelVector::no_finding();
    for token in cell.split('|') {
        match Disease::parse(token) {
            Some(d) => v.set(d, true),
            None => return Err(format!("unknown finding {:?}", token.trim())),
        }
    }
    Ok(v)
}

/// Per-image labels and patient ids from the label CSV.
pub fn read_label_file(path: &Path) -> Result<BTreeMap<String, (String, LabelVector)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::data(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::data(path, e.to_string()))?.clone();
    let id_col = find_column(&headers, &["Image Index", "image", "image_id"])
        .ok_or_else(|| Error::data(path, "no image id column"))?;
    let label_col = find_column(&headers, &["Finding Labels", "labels", "findings"])
        .ok_or_else(|| Error::data(path, "no finding labels column"))?;
    let patient_col = find_column(&headers, &["Patient ID", "patient", "patient_id"]);
    let mut out = BTreeMap::new();
    let mut bad = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(path, e.to_string()))?;
        let line = i + 2;
        let (Some(id), Some(cell)) = (rec.get(id_col), rec.get(label_col)) else {
            bad.push(format!("line {line}: missing columns"));
            continue;
        };
        let id = id.trim().to_string();
        match parse_findings(cell) {
            Ok(labels) => {
                let patient = match patient_col.and_then(|c| rec.get(c)) {
                    Some(p) if !p.trim().is_empty() => p.trim().to_string(),
                    _ => patient_from_image_id(&id),
                };
                out.insert(id, (patient, labels));
            }
            Err(e) => bad.push(format!("line {line} ({id}): {e}")),
        }
    }
    if !bad.is_empty() {
        let shown = bad.iter().take(20).cloned().collect::<Vec<_>>().join("\n");
        return Err(Error::data(path, format!("{} bad label rows:\n{shown}", bad.len())));
    }
    Ok(out)
}

/// Builds the train/test manifest. In strict mode the counts must match the
/// benchmark table, otherwise the error lists every differing row.
pub fn load_manifest(sources: &ManifestSources, strict: bool) -> Result<DatasetManifest> {
    let label_path = required(&sources.labels, "label file")?;
    let labels = read_label_file(label_path)?;
    let mut entries = Vec::new();
    let mut patients: HashMap<Split, HashSet<String>> = HashMap::new();
    for (split, list) in [(Split::Train, &sources.train_list), (Split::Test, &sources.test_list)] {
        let Some(list) = list else { continue };
        for id in read_id_list(list)? {
            let (patient, labels) = labels
                .get(&id)
                .ok_or_else(|| Error::data(list, format!("image {id} missing from the label file")))?;
            patients.entry(split).or_default().insert(patient.clone());
            entries.push(ManifestEntry { image_id: id, patient_id: patient.clone(), labels: *labels, split });
        }
    }
    if entries.is_empty() {
        return Err(Error::Config("no split list configured".into()));
    }
    if let (Some(a), Some(b)) = (patients.get(&Split::Train), patients.get(&Split::Test)) {
        let shared = a.intersection(b).count();
        if shared > 0 {
            let msg = format!("{shared} patients appear in both train and test lists");
            if strict {
                return Err(Error::data(label_path, msg));
            }
            log::warn!("{msg}");
        }
    }
    let boxes = match &sources.boxes {
        Some(p) => super::boxes::load_boxes(p)?,
        None => Vec::new(),
    };
    let manifest = DatasetManifest { entries, boxes, image_dir: sources.images.clone() };
    if strict {
        let found = [
            SplitCounts::of(manifest.split(Split::Train).map(|e| &e.labels)),
            SplitCounts::of(manifest.split(Split::Test).map(|e| &e.labels)),
            SplitCounts::of_boxes(&manifest.boxes),
        ];
        let diff = count_diff(&found);
        if !diff.is_empty() {
            return Err(Error::CountMismatch(diff.join("\n")));
        }
    }
    Ok(manifest)
}

/// Moves whole patients from train to validation until every disease (and
/// the "No Finding" group) has at least `max(1, round(fraction·n))` of its
/// `n` train images in validation. Rarer groups are filled first.
pub fn make_val_split(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let train: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.split != Split::Test).collect();
    if train.is_empty() {
        return Err(Error::contract("manifest has no train entries"));
    }
    // group index NUM_CLASSES stands for "No Finding"
    let groups_of = |l: &LabelVector| -> Vec<usize> {
        if l.is_no_finding() {
            vec![NUM_CLASSES]
        } else {
            l.diseases().map(Disease::index).collect()
        }
    };
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in train.iter().enumerate() {
        by_patient.entry(&e.patient_id).or_default().push(i);
    }
    let mut order: Vec<&str> = by_patient.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut total = [0usize; NUM_CLASSES + 1];
    for e in &train {
        for g in groups_of(&e.labels) {
            total[g] += 1;
        }
    }
    let target: Vec<usize> =
        total.iter().map(|&n| if n == 0 { 0 } else { ((fraction * n as f64).round() as usize).max(1) }).collect();
    let mut have = [0usize; NUM_CLASSES + 1];
    let mut in_val: HashSet<&str> = HashSet::new();
    let mut groups: Vec<usize> = (0..=NUM_CLASSES).filter(|&g| total[g] > 0).collect();
    groups.sort_by_key(|&g| (total[g], g));
    for g in groups {
        for &p in &order {
            if have[g] >= target[g] {
                break;
            }
            if in_val.contains(p) {
                continue;
            }
            let imgs = &by_patient[p];
            if !imgs.iter().any(|&i| groups_of(&train[i].labels).contains(&g)) {
                continue;
            }
            in_val.insert(p);
            for &i in imgs {
                for h in groups_of(&train[i].labels) {
                    have[h] += 1;
                }
            }
        }
    }
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for e in train {
        let mut e = e.clone();
        if in_val.contains(e.patient_id.as_str()) {
            e.split = Split::Val;
            va.push(e);
        } else {
            e.split = Split::Train;
            tr.push(e);
        }
    }
    Ok((tr, va))
}

/// Text rendering of split counts next to the benchmark values.
pub fn format_counts(found: &[SplitCounts; 3]) -> String {
    let expected = benchmark_counts();
    let mut s = String::from("row\ttrain\ttest\tbox\texpected_train\texpected_test\texpected_box\n");
    let rows: Vec<_> = found.iter().map(|c| c.rows()).collect();
    let exp: Vec<_> = expected.iter().map(|c| c.rows()).collect();
    for r in 0..rows[0].len() {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            rows[0][r].0, rows[0][r].1, rows[1][r].1, rows[2][r].1, exp[0][r].1, exp[1][r].1, exp[2][r].1
        );
    }
    s
}
