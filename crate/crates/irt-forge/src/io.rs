//! File formats: the jsonlines response input, the best_parameters.json
//! output with index-to-id links, and the training_log.csv trace.
//!
//! Input lines look like
//! `{"subject_id": "pedro", "responses": {"q1": 1, "q2": 0}}`.
//! Responses must be the integers 0 or 1; blank lines are skipped; errors
//! carry 1-based line numbers. Output numbers go through the shortest
//! round-trip float encoding, so re-reading a written document reproduces
//! every value bit for bit.

use crate::dataset::{build, ResponsePatternDataset};
use crate::error::Error;
use crate::models::{AbilityParams, ItemParams, ModelKind};
use crate::vi::FitReport;
use crate::Result;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub fn read_jsonlines(path: &Path) -> Result<ResponsePatternDataset> {
    read_jsonlines_from(fs::File::open(path)?)
}

pub fn read_jsonlines_from(reader: impl Read) -> Result<ResponsePatternDataset> {
    let reader = BufReader::new(reader);
    let mut rows: Vec<(String, Vec<(String, u8)>)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { line: line_no, message };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let object = value
            .as_object()
            .ok_or_else(|| parse("expected a JSON object".into()))?;
        let subject = object
            .get("subject_id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| parse("missing string field 'subject_id'".into()))?;
        let responses = object
            .get("responses")
            .and_then(|v| v.as_object())
            .ok_or_else(|| parse("missing object field 'responses'".into()))?;
        let mut pairs = Vec::with_capacity(responses.len());
        for (item, response) in responses {
            let graded = response.as_u64().filter(|v| *v <= 1).ok_or_else(|| {
                parse(format!("response for item '{item}' must be the integer 0 or 1"))
            })?;
            pairs.push((item.clone(), graded as u8));
        }
        rows.push((subject.to_string(), pairs));
    }
    if rows.is_empty() {
        return Err(Error::Format("no subjects in input".into()));
    }
    build(rows)
}

/// Write a dataset back out, one subject per line in index order.
pub fn write_jsonlines(dataset: &ResponsePatternDataset, path: &Path) -> Result<()> {
    let mut rows: Vec<serde_json::Map<String, serde_json::Value>> = dataset
        .subject_ids()
        .iter()
        .map(|id| {
            let mut object = serde_json::Map::new();
            object.insert("subject_id".into(), serde_json::Value::String(id.clone()));
            object.insert("responses".into(), serde_json::Value::Object(serde_json::Map::new()));
            object
        })
        .collect();
    for obs in dataset.observations() {
        let responses = rows[obs.subject as usize]
            .get_mut("responses")
            .and_then(|v| v.as_object_mut())
            .expect("responses object was just inserted");
        responses.insert(
            dataset.item_ids()[obs.item as usize].clone(),
            serde_json::Value::from(u64::from(obs.response)),
        );
    }
    let mut out = fs::File::create(path)?;
    for row in rows {
        serde_json::to_writer(&mut out, &serde_json::Value::Object(row))
            .map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// The best_parameters.json schema: point estimates in index order, optional
/// posterior scales, and the index-to-id maps for both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametersDocument {
    pub model: String,
    pub ability: Vec<f64>,
    pub diff: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guess: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ability_scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diff_scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guess_scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_scale: Option<Vec<f64>>,
    /// "0" → first item id, and so on.
    pub item_ids: IndexMap<String, String>,
    pub subject_ids: IndexMap<String, String>,
}

fn index_map(ids: &[String]) -> IndexMap<String, String> {
    ids.iter().enumerate().map(|(k, id)| (k.to_string(), id.clone())).collect()
}

impl ParametersDocument {
    /// Assemble the document for a finished fit. `model_name` is whatever
    /// name the caller trained under (an alias keeps its own name).
    pub fn from_fit(
        model_name: &str,
        report: &FitReport,
        dataset: &ResponsePatternDataset,
    ) -> Result<Self> {
        let items = &report.items;
        if items.len() != dataset.n_items() || report.abilities.len() != dataset.n_subjects() {
            return Err(Error::Contract(format!(
                "fit shaped {}x{}, dataset {}x{}",
                report.abilities.len(),
                items.len(),
                dataset.n_subjects(),
                dataset.n_items()
            )));
        }
        let scales = report.scales.as_ref();
        Ok(ParametersDocument {
            model: model_name.to_string(),
            ability: report.abilities.thetas().to_vec(),
            diff: items.difficulty().to_vec(),
            disc: items.discrimination().map(<[f64]>::to_vec),
            guess: items.guessing().map(<[f64]>::to_vec),
            lambda: items.feasibility().map(<[f64]>::to_vec),
            ability_scale: scales.map(|s| s.ability.clone()),
            diff_scale: scales.map(|s| s.difficulty.clone()),
            disc_scale: scales.and_then(|s| s.discrimination.clone()),
            guess_scale: scales.and_then(|s| s.guessing.clone()),
            lambda_scale: scales.and_then(|s| s.feasibility.clone()),
            item_ids: index_map(dataset.item_ids()),
            subject_ids: index_map(dataset.subject_ids()),
        })
    }

    /// Truth document for a simulated dataset: generating parameters, no scales.
    pub fn from_truth(
        model_name: &str,
        items: &ItemParams,
        abilities: &AbilityParams,
        dataset: &ResponsePatternDataset,
    ) -> Result<Self> {
        if items.len() != dataset.n_items() || abilities.len() != dataset.n_subjects() {
            return Err(Error::Contract("truth arrays do not match the dataset shape".into()));
        }
        Ok(ParametersDocument {
            model: model_name.to_string(),
            ability: abilities.thetas().to_vec(),
            diff: items.difficulty().to_vec(),
            disc: items.discrimination().map(<[f64]>::to_vec),
            guess: items.guessing().map(<[f64]>::to_vec),
            lambda: items.feasibility().map(<[f64]>::to_vec),
            ability_scale: None,
            diff_scale: None,
            disc_scale: None,
            guess_scale: None,
            lambda_scale: None,
            item_ids: index_map(dataset.item_ids()),
            subject_ids: index_map(dataset.subject_ids()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let i = self.diff.len();
        let j = self.ability.len();
        if self.item_ids.len() != i || self.subject_ids.len() != j {
            return Err(Error::Format("id maps do not match the parameter arrays".into()));
        }
        for (n, keys) in [(i, &self.item_ids), (j, &self.subject_ids)] {
            for k in 0..n {
                if !keys.contains_key(&k.to_string()) {
                    return Err(Error::Format(format!("id map is missing index {k}")));
                }
            }
        }
        for (name, arr) in [
            ("disc", &self.disc),
            ("guess", &self.guess),
            ("lambda", &self.lambda),
            ("diff_scale", &self.diff_scale),
            ("disc_scale", &self.disc_scale),
            ("guess_scale", &self.guess_scale),
            ("lambda_scale", &self.lambda_scale),
        ] {
            if let Some(arr) = arr {
                if arr.len() != i {
                    return Err(Error::Format(format!("{name} length {} != {i}", arr.len())));
                }
            }
        }
        if let Some(s) = &self.ability_scale {
            if s.len() != j {
                return Err(Error::Format(format!("ability_scale length {} != {j}", s.len())));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> Result<ModelKind> {
        // alias names still describe one of the four kinds via their arrays
        match (self.disc.is_some(), self.guess.is_some(), self.lambda.is_some()) {
            (false, false, false) => Ok(ModelKind::OneParam),
            (true, false, false) => Ok(ModelKind::TwoParam),
            (true, true, false) => Ok(ModelKind::ThreeParam),
            (true, false, true) => Ok(ModelKind::FourParam),
            _ => Err(Error::Format("parameter arrays match no model kind".into())),
        }
    }

    pub fn item_params(&self) -> Result<ItemParams> {
        match self.kind()? {
            ModelKind::OneParam => ItemParams::one_param(self.diff.clone()),
            ModelKind::TwoParam => {
                ItemParams::two_param(self.diff.clone(), self.disc.clone().unwrap())
            }
            ModelKind::ThreeParam => ItemParams::three_param(
                self.diff.clone(),
                self.disc.clone().unwrap(),
                self.guess.clone().unwrap(),
            ),
            ModelKind::FourParam => ItemParams::four_param(
                self.diff.clone(),
                self.disc.clone().unwrap(),
                self.lambda.clone().unwrap(),
            ),
        }
    }

    pub fn ability_params(&self) -> Result<AbilityParams> {
        AbilityParams::new(self.ability.clone())
    }

    /// Item index for an id, if the document knows it.
    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_ids
            .iter()
            .find(|(_, v)| v.as_str() == id)
            .and_then(|(k, _)| k.parse().ok())
    }
}

/// Serialize to `<out_dir>/best_parameters.json`, creating the directory.
pub fn write_parameters(doc: &ParametersDocument, out_dir: &Path) -> Result<()> {
    doc.validate()?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("best_parameters.json");
    let text = serde_json::to_string_pretty(doc).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_parameters(path: &Path) -> Result<ParametersDocument> {
    let text = fs::read_to_string(path)?;
    let doc: ParametersDocument = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
    doc.validate()?;
    Ok(doc)
}

/// `<out_dir>/training_log.csv` with one row per traced epoch:
/// epoch (1-based), loss, cumulative seconds.
pub fn write_training_log(report: &FitReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut text = String::from("epoch,loss,seconds\n");
    for (k, loss) in report.trace.iter().enumerate() {
        let seconds = report.epoch_seconds.get(k).copied().unwrap_or(report.seconds);
        text.push_str(&format!("{},{},{}\n", k + 1, loss, seconds));
    }
    fs::write(out_dir.join("training_log.csv"), text)?;
    Ok(())
}
