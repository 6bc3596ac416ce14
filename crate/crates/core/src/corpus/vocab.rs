use serde::{Deserialize, Serialize};

pub const NUM_OBSERVATIONS: usize = 14;
pub const NO_FINDING: usize = 0;

/// Observations held out from prompt learning and used for zero-/few-shot
/// evaluation.
pub const UNSEEN_CLASSES: [usize; 5] = [2, 5, 6, 8, 10];

pub fn base_classes() -> Vec<usize> {
    (0..NUM_OBSERVATIONS).filter(|c| !UNSEEN_CLASSES.contains(c)).collect()
}

pub fn unseen_classes() -> Vec<usize> {
    UNSEEN_CLASSES.to_vec()
}

/// Motif drawn for a positive observation: a shape stamped into one cell of a
/// 4x4 grid over the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub shape: Shape,
    /// Grid cell (row, col) in a 4x4 layout.
    pub cell: (usize, usize),
    pub intensity: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disk,
    Ring,
    Cross,
    HBar,
    VBar,
    Diagonal,
    XMark,
    Checker,
    Triangle,
    Frame,
    Diamond,
    LShape,
}

impl Shape {
    /// Whether pixel (i, j) of an `s`x`s` cell belongs to the shape.
    pub fn covers(self, i: usize, j: usize, s: usize) -> bool {
        let (fi, fj) = (i as f32 + 0.5 - s as f32 / 2.0, j as f32 + 0.5 - s as f32 / 2.0);
        let r = (fi * fi + fj * fj).sqrt();
        let half = s as f32 / 2.0;
        let last = s - 1;
        match self {
            Shape::Square => (1..last).contains(&i) && (1..last).contains(&j),
            Shape::Disk => r <= half - 0.5,
            Shape::Ring => r <= half && r >= half - 2.0,
            Shape::Cross => (fi.abs() < 1.5) || (fj.abs() < 1.5),
            Shape::HBar => (fi.abs() < 2.0) && j > 0 && j < last,
            Shape::VBar => (fj.abs() < 2.0) && i > 0 && i < last,
            Shape::Diagonal => (i as isize - j as isize).abs() <= 1,
            Shape::XMark => (i as isize - j as isize).abs() <= 1 || (i + j + 1).abs_diff(s) <= 1,
            Shape::Checker => ((i / 2) + (j / 2)) % 2 == 0,
            Shape::Triangle => j <= i,
            Shape::Frame => i <= 1 || j <= 1 || i >= last - 1 || j >= last - 1,
            Shape::Diamond => fi.abs() + fj.abs() <= half,
            Shape::LShape => j <= 2 || i >= last - 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub name: &'static str,
    /// Lowercase phrases recognised by the extractor. The first entry is the
    /// phrase preferred by the report generator.
    pub synonyms: Vec<&'static str>,
    pub motif: Option<Motif>,
}

/// The fourteen chest X-ray observations, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVocabulary {
    pub observations: Vec<Observation>,
}

impl Default for ObservationVocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl ObservationVocabulary {
    pub fn standard() -> Self {
        use Shape::*;
        let table: [(&str, &[&str], Option<(Shape, (usize, usize), f32)>); NUM_OBSERVATIONS] = [
            ("No Finding", &[], None),
            ("Enlarged Cardiomediastinum", &["enlarged cardiomediastinum", "widened mediastinum"], Some((VBar, (1, 1), 0.85))),
            ("Cardiomegaly", &["cardiomegaly", "enlarged heart"], Some((Disk, (2, 1), 0.9))),
            ("Lung Opacity", &["lung opacity", "opacity"], Some((Square, (0, 0), 0.7))),
            ("Lung Lesion", &["lung lesion", "nodule"], Some((Diamond, (0, 3), 0.95))),
            ("Edema", &["edema", "vascular congestion"], Some((Checker, (1, 0), 0.8))),
            ("Consolidation", &["consolidation", "airspace disease"], Some((Frame, (1, 3), 0.9))),
            ("Pneumonia", &["pneumonia", "infectious process"], Some((Cross, (0, 1), 0.75))),
            ("Atelectasis", &["atelectasis", "volume loss"], Some((HBar, (2, 3), 0.85))),
            ("Pneumothorax", &["pneumothorax", "collapsed lung"], Some((Ring, (0, 2), 0.95))),
            ("Pleural Effusion", &["pleural effusion", "effusion"], Some((Triangle, (3, 0), 0.9))),
            ("Pleural Other", &["pleural thickening", "pleural plaque"], Some((XMark, (3, 3), 0.8))),
            ("Fracture", &["fracture", "cortical break"], Some((Diagonal, (2, 2), 0.95))),
            ("Support Devices", &["support devices", "catheter"], Some((LShape, (3, 2), 0.85))),
        ];
        let observations = table
            .iter()
            .map(|(name, syn, motif)| Observation {
                name,
                synonyms: syn.to_vec(),
                motif: motif.map(|(shape, cell, intensity)| Motif { shape, cell, intensity }),
            })
            .collect();
        Self { observations }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn name(&self, k: usize) -> &'static str {
        self.observations[k].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.observations.iter().position(|o| o.name.eq_ignore_ascii_case(name))
    }

    /// Lowercase class name split into words, as used for name-initialised
    /// class embeddings.
    pub fn name_words(&self, k: usize) -> Vec<String> {
        self.name(k).split_whitespace().map(str::to_lowercase).collect()
    }
}

/// Multi-hot vector over the observation vocabulary. "No Finding" is set
/// exactly when no other observation is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector([u8; NUM_OBSERVATIONS]);

impl LabelVector {
    /// Builds a vector from positive observation indices; index 0 is ignored
    /// and recomputed from the rest.
    pub fn from_findings(findings: &[usize]) -> Self {
        let mut v = [0u8; NUM_OBSERVATIONS];
        for &k in findings.iter().filter(|&&k| k != NO_FINDING && k < NUM_OBSERVATIONS) {
            v[k] = 1;
        }
        if v[1..].iter().all(|&x| x == 0) {
            v[NO_FINDING] = 1;
        }
        Self(v)
    }

    pub fn values(&self) -> &[u8; NUM_OBSERVATIONS] {
        &self.0
    }

    pub fn get(&self, k: usize) -> bool {
        self.0[k] == 1
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..NUM_OBSERVATIONS).filter(|&k| self.get(k)).collect()
    }

    /// Lowest-index positive observation.
    pub fn primary(&self) -> usize {
        (0..NUM_OBSERVATIONS).find(|&k| self.get(k)).unwrap_or(NO_FINDING)
    }

    pub fn is_consistent(&self) -> bool {
        let any = self.0[1..].iter().any(|&x| x == 1);
        self.0.iter().all(|&x| x <= 1) && (self.0[NO_FINDING] == 1) != any
    }

    pub fn as_f64(&self) -> [f64; NUM_OBSERVATIONS] {
        self.0.map(f64::from)
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = String;

    fn try_from(v: Vec<u8>) -> Result<Self, Self::Error> {
        let arr: [u8; NUM_OBSERVATIONS] =
            v.try_into().map_err(|v: Vec<u8>| format!("expected {NUM_OBSERVATIONS} labels, got {}", v.len()))?;
        let lv = LabelVector(arr);
        if !lv.is_consistent() {
            return Err(format!("inconsistent label vector {arr:?}"));
        }
        Ok(lv)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(v: LabelVector) -> Self {
        v.0.to_vec()
    }
}
