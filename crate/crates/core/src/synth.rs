//! Synthetic 2-D classification data with in-distribution classes, a
//! pseudo-OOD cluster exposed during training, and a disjoint true-OOD
//! cluster reserved for testing.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub type Point = [f64; 2];
pub type Cov = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Id,
    PseudoOod,
    TrueOod,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Id => "id",
            Role::PseudoOod => "pseudo_ood",
            Role::TrueOod => "true_ood",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "id" => Ok(Role::Id),
            "pseudo_ood" => Ok(Role::PseudoOod),
            "true_ood" => Ok(Role::TrueOod),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub x: Point,
    /// Class index, present exactly for in-distribution points.
    pub label: Option<usize>,
    pub role: Role,
}

impl LabeledPoint {
    pub fn id(x: Point, class: usize) -> Self {
        LabeledPoint {
            x,
            label: Some(class),
            role: Role::Id,
        }
    }

    pub fn ood(x: Point, role: Role) -> Self {
        debug_assert!(role != Role::Id);
        LabeledPoint {
            x,
            label: None,
            role,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledPoint>,
    pub val: Vec<LabeledPoint>,
    pub test: Vec<LabeledPoint>,
}

impl DatasetSplit {
    pub fn count(points: &[LabeledPoint], role: Role) -> usize {
        points.iter().filter(|p| p.role == role).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub n_id_per_class: usize,
    pub n_pseudo_ood: usize,
    pub n_true_ood: usize,
    pub class_means: Vec<Point>,
    pub class_covariances: Vec<Cov>,
    pub pseudo_ood_mean: Point,
    pub pseudo_ood_cov: Cov,
    pub true_ood_mean: Point,
    pub true_ood_cov: Cov,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    /// Three unit-covariance classes on a radius-4 triangle, a broad
    /// pseudo-OOD cloud centred on the origin and true-OOD out at (8, 8).
    fn default() -> Self {
        let h = 2.0 * 3f64.sqrt();
        let class_means = vec![[0.0, 4.0], [-h, -2.0], [h, -2.0]];
        let unit = [[1.0, 0.0], [0.0, 1.0]];
        SyntheticDatasetSpec {
            n_id_per_class: 400,
            n_pseudo_ood: 300,
            n_true_ood: 60,
            class_means,
            class_covariances: vec![unit; 3],
            pseudo_ood_mean: [0.0, 0.0],
            pseudo_ood_cov: [[25.0, 0.0], [0.0, 25.0]],
            true_ood_mean: [8.0, 8.0],
            true_ood_cov: unit,
            seed: 7,
        }
    }
}

/// Lower-triangular Cholesky factor of a 2×2 SPD matrix.
fn cholesky(cov: &Cov, what: &str) -> Result<[[f64; 2]; 2]> {
    let [[a, b], [c, d]] = *cov;
    let finite = [a, b, c, d].iter().all(|v| v.is_finite());
    if !finite || (b - c).abs() > 1e-12 * (1.0 + b.abs()) {
        return Err(Error::InvalidConfig(format!(
            "{what}: covariance is not symmetric"
        )));
    }
    if a <= 0.0 || a * d - b * b <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "{what}: covariance is not positive definite"
        )));
    }
    let l11 = a.sqrt();
    let l21 = b / l11;
    let l22 = (d - l21 * l21).sqrt();
    Ok([[l11, 0.0], [l21, l22]])
}

fn draw(mean: &Point, chol: &[[f64; 2]; 2], stream: &mut Stream) -> Point {
    let z0 = stream.normal();
    let z1 = stream.normal();
    [
        mean[0] + chol[0][0] * z0,
        mean[1] + chol[1][0] * z0 + chol[1][1] * z1,
    ]
}

impl SyntheticDatasetSpec {
    pub fn classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::InvalidConfig(
                "data.class_means: need at least 2 classes".into(),
            ));
        }
        if self.class_covariances.len() != self.classes() {
            return Err(Error::InvalidConfig(
                "data.class_covariances: one covariance per class required".into(),
            ));
        }
        if self.n_id_per_class == 0 {
            return Err(Error::InvalidConfig(
                "data.n_id_per_class: must be positive".into(),
            ));
        }
        if self.pseudo_ood_mean == self.true_ood_mean {
            return Err(Error::InvalidConfig(
                "data.true_ood_mean: must differ from pseudo_ood_mean".into(),
            ));
        }
        for (k, cov) in self.class_covariances.iter().enumerate() {
            cholesky(cov, &format!("data.class_covariances[{k}]"))?;
        }
        cholesky(&self.pseudo_ood_cov, "data.pseudo_ood_cov")?;
        cholesky(&self.true_ood_cov, "data.true_ood_cov")?;
        Ok(())
    }

    /// Sizes of the (train, val, test) portions of one in-distribution class.
    pub fn id_split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_id_per_class;
        let train = n * 70 / 100;
        let val = n * 15 / 100;
        (train, val, n - train - val)
    }

    /// Sizes of the (train, val) portions of the pseudo-OOD cluster.
    pub fn pseudo_ood_split_sizes(&self) -> (usize, usize) {
        let train = self.n_pseudo_ood * 70 / 100;
        (train, self.n_pseudo_ood - train)
    }
}

/// Draws every cluster from its own seeded stream and partitions the points.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let (n_train, n_val, _) = spec.id_split_sizes();
    for (k, (mean, cov)) in spec
        .class_means
        .iter()
        .zip(&spec.class_covariances)
        .enumerate()
    {
        let chol = cholesky(cov, "class covariance")?;
        let mut stream = Stream::new(spec.seed, k as u64);
        for i in 0..spec.n_id_per_class {
            let p = LabeledPoint::id(draw(mean, &chol, &mut stream), k);
            if i < n_train {
                split.train.push(p);
            } else if i < n_train + n_val {
                split.val.push(p);
            } else {
                split.test.push(p);
            }
        }
    }
    let classes = spec.classes() as u64;
    let chol = cholesky(&spec.pseudo_ood_cov, "pseudo-OOD covariance")?;
    let mut stream = Stream::new(spec.seed, classes);
    let (n_pseudo_train, _) = spec.pseudo_ood_split_sizes();
    for i in 0..spec.n_pseudo_ood {
        let p = LabeledPoint::ood(
            draw(&spec.pseudo_ood_mean, &chol, &mut stream),
            Role::PseudoOod,
        );
        if i < n_pseudo_train {
            split.train.push(p);
        } else {
            split.val.push(p);
        }
    }
    let chol = cholesky(&spec.true_ood_cov, "true-OOD covariance")?;
    let mut stream = Stream::new(spec.seed, classes + 1);
    for _ in 0..spec.n_true_ood {
        split.test.push(LabeledPoint::ood(
            draw(&spec.true_ood_mean, &chol, &mut stream),
            Role::TrueOod,
        ));
    }
    Ok(split)
}

const HEADER: [&str; 5] = ["x1", "x2", "label", "role", "split"];

/// Writes all three partitions to one CSV; the `split` column records which
/// partition each row belongs to.
pub fn write_csv(split: &DatasetSplit, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(split, file)
}

pub fn write_csv_to<W: Write>(split: &DatasetSplit, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER).map_err(csv_io)?;
    for (name, points) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        for p in points.iter() {
            let label = p.label.map_or("-1".to_string(), |l| l.to_string());
            w.write_record([
                p.x[0].to_string(),
                p.x[1].to_string(),
                label,
                p.role.to_string(),
                name.to_string(),
            ])
            .map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn read_csv(path: &Path) -> Result<DatasetSplit> {
    read_csv_from(std::fs::File::open(path)?)
}

pub fn read_csv_from<R: Read>(reader: R) -> Result<DatasetSplit> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(reader);
    let mut records = r.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_err(
            1,
            format!("expected header {}", HEADER.join(",")),
        ));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut rows = 0;
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != HEADER.len() {
            return Err(parse_err(
                line,
                format!("expected 5 fields, got {}", rec.len()),
            ));
        }
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("bad number `{}`", &rec[j])))
        };
        let x = [num(0)?, num(1)?];
        let label: i64 = rec[2]
            .parse()
            .map_err(|_| parse_err(line, format!("bad label `{}`", &rec[2])))?;
        let role: Role = rec[3].parse().map_err(|e: String| parse_err(line, e))?;
        let point = match (role, label) {
            (Role::Id, l) if l >= 0 => LabeledPoint::id(x, l as usize),
            (Role::Id, _) => return Err(parse_err(line, "ID row needs a class label".into())),
            (r, -1) => LabeledPoint::ood(x, r),
            (_, _) => return Err(parse_err(line, "OOD rows must have label -1".into())),
        };
        match &rec[4] {
            "train" => split.train.push(point),
            "val" => split.val.push(point),
            "test" => split.test.push(point),
            other => return Err(parse_err(line, format!("unknown split `{other}`"))),
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(1, "no data rows".into()));
    }
    Ok(split)
}

fn parse_err(line: usize, reason: String) -> Error {
    Error::Parse { line, reason }
}
