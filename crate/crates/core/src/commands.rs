//! The command-line operations, callable from code.
//!
//! Every command writes its effective configuration to `config.json` in its
//! output directory before doing any work.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{default_rois, write_reports, MetricsReport};
use crate::experiment::{oracle_labels, ORACLE_NAME};
use crate::fusion_maps::{channel_maps, histogram_csv, histograms, labels_at_scale, normalize_channel, NormalizedChannel};
use crate::io::{read_bytes, write_atomic, write_json, write_pgm16, write_pgm8};
use crate::model::{weights, ColearnConfig, FusionRatio, Network, Prediction, Variant};
use crate::params::Mode;
use crate::phantom::bundle::{read_dataset, read_slice, write_dataset, DatasetManifest};
use crate::phantom::{generate_dataset, PhantomSpec, Study, StudySlice, CLASS_NAMES, NUM_CLASSES};
use crate::tensor::Tensor;
use crate::training::{checkpoint_path, predict_labels, train, Sample, TrainConfig, TrainOutcome, TrainOutputs};

pub const CONFIG_ECHO: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Reads a strict JSON config; `None` gives the defaults. Unknown keys and
/// type errors are configuration errors.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = read_bytes(p)?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenPhantomConfig {
    pub studies: usize,
    pub phantom: PhantomSpec,
}

impl Default for GenPhantomConfig {
    fn default() -> Self {
        GenPhantomConfig {
            studies: 20,
            phantom: PhantomSpec::default(),
        }
    }
}

pub fn gen_phantom(cfg: &GenPhantomConfig, out: &Path) -> Result<DatasetManifest> {
    if cfg.studies == 0 {
        return Err(Error::Config("at least one study is required".into()));
    }
    cfg.phantom.validate()?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    let studies = generate_dataset(&cfg.phantom, cfg.studies)?;
    let manifest = write_dataset(out, &cfg.phantom, &studies)?;
    info!(
        "wrote {} studies ({} slices) to {}",
        manifest.studies.len(),
        manifest.total_slices,
        out.display()
    );
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub variant: Variant,
    /// PET weight of the intermixed input; required for `fs` only.
    pub fs_ratio: Option<FusionRatio>,
    pub model: ColearnConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    /// Restrict training to these studies; all studies when absent.
    pub studies: Option<Vec<String>>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            variant: Variant::Colearn,
            fs_ratio: None,
            model: ColearnConfig::default(),
            train: TrainConfig::default(),
            dataset: None,
            studies: None,
        }
    }
}

impl TrainRunConfig {
    pub fn network(&self) -> Result<Network> {
        Network::new(self.variant, self.model.clone(), self.fs_ratio)
    }
}

fn select_studies(mut studies: Vec<Study>, names: Option<&[String]>) -> Result<Vec<Study>> {
    if let Some(names) = names {
        for n in names {
            if !studies.iter().any(|s| &s.name == n) {
                return Err(Error::Data(format!("study `{n}` is not in the dataset")));
            }
        }
        studies.retain(|s| names.contains(&s.name));
    }
    Ok(studies)
}

fn check_size(network: &Network, h: usize, w: usize) -> Result<()> {
    if network.config.input_size != [h, w] {
        return Err(Error::Config(format!(
            "network expects {:?} inputs but the data is {h}x{w}",
            network.config.input_size
        )));
    }
    Ok(())
}

/// Trains the configured variant on a slice bundle and writes the final
/// weights, the periodic checkpoint and the per-epoch log.
pub fn train_run(cfg: &TrainRunConfig, out: &Path) -> Result<TrainOutcome> {
    let network = cfg.network()?;
    cfg.train.validate()?;
    let dataset = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given".into()))?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    let studies = select_studies(read_dataset(dataset)?, cfg.studies.as_deref())?;
    let data: Vec<Sample> = studies
        .iter()
        .flat_map(|s| s.slices.iter().map(Sample::from_slice))
        .collect();
    let first = data.first().ok_or_else(|| Error::Data("dataset has no slices".into()))?;
    check_size(&network, first.height, first.width)?;
    info!("training {} on {} slices", network.variant, data.len());
    let params = network.init_params(cfg.train.seed)?;
    let outputs = TrainOutputs {
        checkpoint: Some(checkpoint_path(out)),
        log: Some(out.join(TRAIN_LOG)),
    };
    let outcome = train(&network, params, &data, &cfg.train, &outputs)?;
    weights::save(&out.join(WEIGHTS_FILE), &network, &outcome.params)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRunConfig {
    pub weights: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub studies: Option<Vec<String>>,
    pub batch_size: usize,
    /// Also report the PET-only connected-threshold baseline.
    pub include_oracle: bool,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        EvalRunConfig {
            weights: Vec::new(),
            dataset: None,
            studies: None,
            batch_size: 5,
            include_oracle: false,
        }
    }
}

/// Method name of a trained network, e.g. `colearn` or `fs_0.5`.
pub fn method_name(network: &Network) -> String {
    match network.fusion_ratio {
        Some(r) => format!("{}_{}", network.variant, r.pet_weight()),
        None => network.variant.to_string(),
    }
}

/// Evaluates every weight file on the selected studies and writes
/// `metrics.csv` and `comparisons.csv`.
pub fn eval_run(cfg: &EvalRunConfig, out: &Path) -> Result<Vec<MetricsReport>> {
    if cfg.weights.is_empty() && !cfg.include_oracle {
        return Err(Error::Config("nothing to evaluate: no weights given".into()));
    }
    let dataset = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given".into()))?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    let studies = select_studies(read_dataset(dataset)?, cfg.studies.as_deref())?;
    let slices: Vec<&StudySlice> = studies.iter().flat_map(|s| s.slices.iter()).collect();
    let samples: Vec<Sample> = slices.iter().map(|s| Sample::from_slice(s)).collect();
    let rois = default_rois(&CLASS_NAMES);

    let mut reports = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for path in &cfg.weights {
        let (network, params) = weights::load(path)?;
        if let Some(s) = samples.first() {
            check_size(&network, s.height, s.width)?;
        }
        let mut name = method_name(&network);
        let k = seen.entry(name.clone()).or_default();
        *k += 1;
        if *k > 1 {
            name = format!("{name}#{k}");
        }
        let preds = predict_labels(&network, &params, &samples, cfg.batch_size)?;
        let mut report = MetricsReport::new(name, rois.clone());
        for (p, s) in preds.iter().zip(&samples) {
            report.add_slice(p, &s.labels)?;
        }
        reports.push(report);
    }
    if cfg.include_oracle {
        let mut report = MetricsReport::new(ORACLE_NAME, rois.clone());
        for s in &slices {
            report.add_slice(&oracle_labels(s)?, s.labels.as_slice())?;
        }
        reports.push(report);
    }
    write_reports(out, &reports)?;
    Ok(reports)
}

/// `<study>/<slice index>` within a dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceRef {
    pub study: String,
    pub index: usize,
}

impl FromStr for SliceRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("slice `{s}` is not of the form <study>/<index>"));
        let (study, index) = s.rsplit_once('/').ok_or_else(bad)?;
        if study.is_empty() {
            return Err(bad());
        }
        Ok(SliceRef {
            study: study.to_string(),
            index: index.parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for SliceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.study, self.index)
    }
}

#[derive(Serialize)]
struct SliceEcho<'a> {
    weights: &'a Path,
    dataset: &'a Path,
    slice: String,
}

fn load_for_slice(
    weights_path: &Path,
    dataset: &Path,
    slice: &SliceRef,
    out: &Path,
) -> Result<(Network, crate::params::ModelParams, StudySlice, Prediction)> {
    write_json(
        &out.join(CONFIG_ECHO),
        &SliceEcho {
            weights: weights_path,
            dataset,
            slice: slice.to_string(),
        },
    )?;
    let (network, params) = weights::load(weights_path)?;
    let s = read_slice(&dataset.join(&slice.study), slice.index)?;
    let (h, w) = (s.labels.height(), s.labels.width());
    check_size(&network, h, w)?;
    let sample = Sample::from_slice(&s);
    let ct = Tensor::new([1, h, w, 1], sample.ct)?;
    let pet = Tensor::new([1, h, w, 1], sample.pet)?;
    let pred = network.predict(&params, &ct, &pet, Mode::Inference)?;
    Ok((network, params, s, pred))
}

/// Writes `prob_<class>.pgm` (probabilities scaled to 0..65535) for every
/// class and the 8-bit argmax map `labels.pgm`.
pub fn predict_run(weights_path: &Path, dataset: &Path, slice: &SliceRef, out: &Path) -> Result<Prediction> {
    let (_, _, s, pred) = load_for_slice(weights_path, dataset, slice, out)?;
    let (h, w) = (s.labels.height(), s.labels.width());
    let classes = pred.prob.shape()[3];
    for (c, name) in CLASS_NAMES.iter().enumerate().take(classes) {
        let q: Vec<u16> = pred
            .prob
            .data()
            .iter()
            .skip(c)
            .step_by(classes)
            .map(|&p| (p * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        write_pgm16(&out.join(format!("prob_{name}.pgm")), w, h, &q)?;
    }
    write_pgm8(&out.join("labels.pgm"), w, h, &pred.labels())?;
    Ok(pred)
}

pub const HISTOGRAM_BINS: usize = 32;

/// Per-unit fusion-map channels of the co-learning network for one slice:
/// `fusion_u<s>_c<ch>.pgm`, `histograms_u<s>.csv` and `fusion_maps.json`
/// listing each channel's raw range.
pub fn export_fusion_maps_run(
    weights_path: &Path,
    dataset: &Path,
    slice: &SliceRef,
    out: &Path,
) -> Result<Vec<NormalizedChannel>> {
    let (network, _, s, pred) = load_for_slice(weights_path, dataset, slice, out)?;
    if network.variant != Variant::Colearn {
        return Err(Error::UnsupportedVariant(format!(
            "fusion maps exist only for the co-learning network, got `{}`",
            network.variant
        )));
    }
    let (h, w) = (s.labels.height(), s.labels.width());
    let mut listing = Vec::new();
    for (unit, fusion) in pred.fusion_maps.iter().enumerate() {
        let maps = channel_maps(fusion, unit)?;
        let labels = labels_at_scale(s.labels.as_slice(), h, w, 1 << unit)?;
        let mut rows = Vec::new();
        for m in &maps {
            let n = normalize_channel(m);
            write_pgm16(
                &out.join(format!("fusion_u{unit}_c{:03}.pgm", m.channel)),
                m.width,
                m.height,
                &n.pixels,
            )?;
            rows.extend(histograms(m, &labels, NUM_CLASSES, HISTOGRAM_BINS)?);
            listing.push(n);
        }
        write_atomic(&out.join(format!("histograms_u{unit}.csv")), histogram_csv(&rows).as_bytes())?;
    }
    write_json(&out.join("fusion_maps.json"), &listing)?;
    Ok(listing)
}
