use std::fmt;

use cxr_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of disease classes.
pub const NUM_CLASSES: usize = 14;

/// The fourteen findings, in label-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Disease {
    Atelectasis,
    Cardiomegaly,
    Effusion,
    Infiltration,
    Mass,
    Nodule,
    Pneumonia,
    Pneumothorax,
    Consolidation,
    Edema,
    Emphysema,
    Fibrosis,
    PleuralThickening,
    Hernia,
}

impl Disease {
    pub const ALL: [Disease; NUM_CLASSES] = [
        Disease::Atelectasis,
        Disease::Cardiomegaly,
        Disease::Effusion,
        Disease::Infiltration,
        Disease::Mass,
        Disease::Nodule,
        Disease::Pneumonia,
        Disease::Pneumothorax,
        Disease::Consolidation,
        Disease::Edema,
        Disease::Emphysema,
        Disease::Fibrosis,
        Disease::PleuralThickening,
        Disease::Hernia,
    ];

    /// The eight findings that carry bounding boxes.
    pub const BOX_SET: [Disease; 8] = [
        Disease::Atelectasis,
        Disease::Cardiomegaly,
        Disease::Effusion,
        Disease::Infiltration,
        Disease::Mass,
        Disease::Nodule,
        Disease::Pneumonia,
        Disease::Pneumothorax,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Disease> {
        Self::ALL.get(i).copied()
    }

    /// Human-readable name, e.g. `Pleural Thickening`.
    pub fn name(self) -> &'static str {
        match self {
            Disease::Atelectasis => "Atelectasis",
            Disease::Cardiomegaly => "Cardiomegaly",
            Disease::Effusion => "Effusion",
            Disease::Infiltration => "Infiltration",
            Disease::Mass => "Mass",
            Disease::Nodule => "Nodule",
            Disease::Pneumonia => "Pneumonia",
            Disease::Pneumothorax => "Pneumothorax",
            Disease::Consolidation => "Consolidation",
            Disease::Edema => "Edema",
            Disease::Emphysema => "Emphysema",
            Disease::Fibrosis => "Fibrosis",
            Disease::PleuralThickening => "Pleural Thickening",
            Disease::Hernia => "Hernia",
        }
    }

    /// Token as written in the label files (`Pleural_Thickening`).
    pub fn token(self) -> &'static str {
        match self {
            Disease::PleuralThickening => "Pleural_Thickening",
            d => d.name(),
        }
    }

    /// Parses a label-file token. Accepts the box file's `Infiltrate` spelling
    /// and either separator in `Pleural Thickening`.
    pub fn parse(token: &str) -> Option<Disease> {
        let t = token.trim();
        match t {
            "Infiltrate" => return Some(Disease::Infiltration),
            "Pleural_Thickening" | "Pleural Thickening" | "PleuralThickening" => {
                return Some(Disease::PleuralThickening)
            }
            _ => {}
        }
        Self::ALL.iter().copied().find(|d| d.name().eq_ignore_ascii_case(t))
    }
}

impl fmt::Display for Disease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary disease-presence vector. All zeros means "No Finding".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector([bool; NUM_CLASSES]);

impl LabelVector {
    pub fn no_finding() -> Self {
        Self::default()
    }

    pub fn from_diseases(diseases: impl IntoIterator<Item = Disease>) -> Self {
        let mut v = Self::default();
        for d in diseases {
            v.0[d.index()] = true;
        }
        v
    }

    /// Builds from numeric entries, which must number 14 and be 0 or 1.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() != NUM_CLASSES {
            return Err(Error::contract(format!("label vector needs {NUM_CLASSES} entries, got {}", values.len())));
        }
        let mut v = Self::default();
        for (i, &x) in values.iter().enumerate() {
            v.0[i] = match x {
                x if x == 0.0 => false,
                x if x == 1.0 => true,
                other => return Err(Error::contract(format!("label entry {i} is {other}, expected 0 or 1"))),
            };
        }
        Ok(v)
    }

    pub fn get(&self, d: Disease) -> bool {
        self.0[d.index()]
    }

    pub fn set(&mut self, d: Disease, present: bool) {
        self.0[d.index()] = present;
    }

    pub fn is_no_finding(&self) -> bool {
        self.0.iter().all(|&b| !b)
    }

    pub fn diseases(&self) -> impl Iterator<Item = Disease> + '_ {
        Disease::ALL.into_iter().filter(|d| self.get(*d))
    }

    pub fn values(&self) -> [f64; NUM_CLASSES] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn as_bools(&self) -> &[bool; NUM_CLASSES] {
        &self.0
    }

    /// Label-file form: pipe-joined tokens, or `No Finding`.
    pub fn to_label_string(&self) -> String {
        if self.is_no_finding() {
            "No Finding".to_string()
        } else {
            self.diseases().map(Disease::token).collect::<Vec<_>>().join("|")
        }
    }
}

/// Predicted per-class probabilities, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector([f64; NUM_CLASSES]);

impl ProbabilityVector {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.len() != NUM_CLASSES {
            return Err(Error::contract(format!(
                "probability vector needs {NUM_CLASSES} entries, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("probability entry {i} is {v}, outside [0, 1]")));
        }
        let mut out = [0.0; NUM_CLASSES];
        out.copy_from_slice(values);
        Ok(Self(out))
    }

    pub fn values(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn get(&self, d: Disease) -> f64 {
        self.0[d.index()]
    }
}

/// A `c×h×w` activation map with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Element = f32> {
    tensor: Tensor<T>,
}

impl<T: Element> FeatureMap<T> {
    /// Accepts a rank-3 `c×h×w` tensor, or a rank-4 tensor with a leading 1.
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let tensor = match tensor.shape() {
            [1, c, h, w] => {
                let s = [*c, *h, *w];
                tensor.reshape(&s)
            }
            [_, _, _] => tensor,
            s => return Err(Error::contract(format!("feature map must be c×h×w, got shape {s:?}"))),
        };
        if tensor.shape().contains(&0) {
            return Err(Error::contract(format!("feature map dims must be positive, got {:?}", tensor.shape())));
        }
        if !tensor.all_finite() {
            return Err(Error::contract("feature map contains non-finite values"));
        }
        Ok(Self { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> T {
        self.tensor.data()[(channel * self.height() + row) * self.width() + col]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }
}

/// An `h×w` mask with entries in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "mask data has {} entries, expected {height}×{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::contract(format!("mask entry {v} is not 0 or 1")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn complement(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    pub fn to_prob_map(&self) -> ProbabilityMap {
        ProbabilityMap { height: self.height, width: self.width, data: self.data.iter().map(|&v| v as f64).collect() }
    }
}

/// An `h×w` map of probabilities (or fractional weights) in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "map has {} entries, expected {height}×{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("map entry {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}
