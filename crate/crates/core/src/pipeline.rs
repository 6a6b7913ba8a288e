//! Run configuration, training artifacts and gradient-gap sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gradients::{beta_ratio_g, gradient_gap_f, gradient_gap_f_derivative};
use crate::losses::LossConfig;
use crate::metrics::{evaluate, MetricsReport, Scorer};
use crate::net::{train, MlpModel, TrainConfig, TrainHistory};
use crate::synth::{self, DatasetSplit, SyntheticDatasetSpec};

pub const CONFIG_VERSION: &str = "evidloss-config-v1";

pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const DATA_FILE: &str = "data.csv";

/// Keys that may be left out of a config file.
const OPTIONAL_KEYS: [&str; 2] = ["data.seed", "train.loss_kind"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: String,
    pub data: SyntheticDatasetSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Overrides `data.seed` and seeds initialization and shuffling.
    pub seed: u64,
}

impl Default for RunConfig {
    /// Default data, optimizer and loss settings with unit evidence
    /// regularization weight.
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION.to_string(),
            data: SyntheticDatasetSpec::default(),
            loss: LossConfig {
                lambda: 1.0,
                ..LossConfig::default()
            },
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 7,
        }
    }
}

fn missing_keys(template: &Value, given: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(t), Value::Object(g)) = (template, given) else {
        return;
    };
    for (key, sub) in t {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match g.get(key) {
            Some(v) => missing_keys(sub, v, &path, out),
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(path),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config. Errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        if !value.is_object() {
            return Err(Error::InvalidConfig("expected a JSON object".into()));
        }
        match value.get("version").and_then(Value::as_str) {
            Some(CONFIG_VERSION) => {}
            Some(other) => {
                return Err(Error::InvalidConfig(format!(
                    "version: expected `{CONFIG_VERSION}`, got `{other}`"
                )))
            }
            None => return Err(Error::InvalidConfig("version: missing".into())),
        }
        let template = serde_json::to_value(RunConfig::default())?;
        let mut missing = Vec::new();
        missing_keys(&template, &value, "", &mut missing);
        if let Some(key) = missing.first() {
            return Err(Error::InvalidConfig(format!("{key}: missing")));
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::InvalidConfig(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.train.validate()?;
        self.dataset().validate()
    }

    /// Dataset spec with the run seed applied.
    pub fn dataset(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    /// Training settings with the loss and run seed applied.
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: MlpModel,
    pub history: TrainHistory,
    pub report: MetricsReport,
}

/// Generates the dataset, trains and evaluates on the test split with the
/// head's default scorer.
pub fn run(cfg: &RunConfig) -> Result<(DatasetSplit, RunOutput)> {
    let split = synth::generate(&cfg.dataset())?;
    let (model, history) = train(&cfg.training(), &split)?;
    let report = evaluate(&model, &split.test, model.head.default_scorer())?;
    Ok((
        split,
        RunOutput {
            model,
            history,
            report,
        },
    ))
}

/// Runs `cfg` and writes model, history, metrics and the generated data
/// into `out_dir`.
pub fn run_to_dir(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutput> {
    let (split, out) = run(cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(MODEL_FILE), out.model.to_json()?)?;
    let mut history = Vec::new();
    out.history.write_csv(&mut history)?;
    fs::write(out_dir.join(HISTORY_FILE), history)?;
    fs::write(out_dir.join(METRICS_FILE), report_json(&out.report)?)?;
    synth::write_csv(&split, &out_dir.join(DATA_FILE))?;
    Ok(out)
}

pub fn report_json<T: Serialize>(report: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

/// Evaluates a saved model on the test split of a saved dataset.
pub fn evaluate_files(model: &Path, data: &Path, scorer: Option<Scorer>) -> Result<MetricsReport> {
    let model = MlpModel::from_json(&fs::read_to_string(model)?)?;
    let split = synth::read_csv(data)?;
    let scorer = scorer.unwrap_or(model.head.default_scorer());
    evaluate(&model, &split.test, scorer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepFunction {
    /// Gradient gap f over p̄.
    F,
    /// Beta ratio g over α_c.
    G,
    /// ∂f/∂p̄ over p̄.
    GradGapDerivative,
}

impl SweepFunction {
    pub fn name(self) -> &'static str {
        match self {
            SweepFunction::F => "f",
            SweepFunction::G => "g",
            SweepFunction::GradGapDerivative => "grad-gap-derivative",
        }
    }

    fn abscissa(self) -> &'static str {
        match self {
            SweepFunction::G => "alpha_c",
            _ => "p_bar",
        }
    }
}

impl std::str::FromStr for SweepFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f" => Ok(SweepFunction::F),
            "g" => Ok(SweepFunction::G),
            "grad-gap-derivative" => Ok(SweepFunction::GradGapDerivative),
            _ => Err(Error::InvalidInput(format!("unknown sweep function `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    /// p̄ for f and its derivative, α_c for g.
    pub x: f64,
    pub alpha0: f64,
    pub gamma: f64,
    pub value: f64,
}

/// Evaluates `function` on every (α0, γ) pair at `steps` interior points
/// p̄ = i/(steps+1); for g the abscissa is α_c = p̄·α0.
pub fn sweep(
    function: SweepFunction,
    alpha0: &[f64],
    gamma: &[f64],
    steps: usize,
) -> Result<Vec<SweepRow>> {
    if alpha0.is_empty() || gamma.is_empty() || steps == 0 {
        return Err(Error::InvalidInput("sweep grids must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(alpha0.len() * gamma.len() * steps);
    for &a0 in alpha0 {
        for &g in gamma {
            for i in 1..=steps {
                let p = i as f64 / (steps + 1) as f64;
                let (x, value) = match function {
                    SweepFunction::F => (p, gradient_gap_f(p, a0, g)?),
                    SweepFunction::GradGapDerivative => (p, gradient_gap_f_derivative(p, a0, g)?),
                    SweepFunction::G => (p * a0, beta_ratio_g(a0, p * a0, g)?),
                };
                rows.push(SweepRow {
                    x,
                    alpha0: a0,
                    gamma: g,
                    value,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(
    function: SweepFunction,
    rows: &[SweepRow],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["function", function.abscissa(), "alpha0", "gamma", "value"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            function.name().to_string(),
            r.x.to_string(),
            r.alpha0.to_string(),
            r.gamma.to_string(),
            r.value.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_value() -> Value {
        serde_json::to_value(RunConfig::default()).unwrap()
    }

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), cfg.to_json().unwrap());
        assert_eq!(back.training().seed, cfg.seed);
    }

    #[test]
    fn missing_key_is_named() {
        let mut v = default_value();
        v["loss"].as_object_mut().unwrap().remove("gamma");
        let err = RunConfig::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("loss.gamma"), "{err}");
    }

    #[test]
    fn optional_keys_may_be_omitted() {
        let mut v = default_value();
        v["data"].as_object_mut().unwrap().remove("seed");
        v["train"].as_object_mut().unwrap().remove("loss_kind");
        assert!(RunConfig::from_json(&v.to_string()).is_ok());
    }

    #[test]
    fn bad_values_are_named() {
        let mut v = default_value();
        v["train"]["batch_size"] = Value::from("many");
        let err = RunConfig::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.batch_size"), "{err}");

        let mut v = default_value();
        v["loss"]["gamma"] = Value::from(9.0);
        let err = RunConfig::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("loss.gamma"), "{err}");

        let mut v = default_value();
        v["loss"]["extra"] = Value::from(1.0);
        let err = RunConfig::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("extra"), "{err}");

        let mut v = default_value();
        v["version"] = Value::from("evidloss-config-v0");
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        };
        assert_eq!(cfg.dataset().seed, 42);
        assert_eq!(cfg.training().seed, 42);
        assert_eq!(cfg.training().loss, cfg.loss);
    }

    #[test]
    fn sweep_shapes_and_values() {
        let rows = sweep(SweepFunction::F, &[5.0, 10.0], &[0.0, 1.0], 9).unwrap();
        assert_eq!(rows.len(), 36);
        assert!(rows
            .iter()
            .filter(|r| r.gamma == 0.0)
            .all(|r| r.value == 0.0));
        let g = sweep(SweepFunction::G, &[3.0, 50.0], &[0.5, 2.0], 20).unwrap();
        assert!(g.iter().all(|r| r.value > 0.0 && r.value <= 1.0));
        assert!(sweep(SweepFunction::F, &[], &[1.0], 5).is_err());
        assert!(sweep(SweepFunction::F, &[5.0], &[1.0], 0).is_err());
    }

    #[test]
    fn sweep_csv_header() {
        let rows = sweep(SweepFunction::G, &[4.0], &[1.0], 1).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(SweepFunction::G, &rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "function,alpha_c,alpha0,gamma,value"
        );
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(&row[..4], ["g", "2", "4", "1"]);
        let g: f64 = row[4].parse().unwrap();
        assert!((g - 0.5).abs() <= 1e-12);
    }
}
