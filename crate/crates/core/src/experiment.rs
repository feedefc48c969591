//! Cross-validated comparison of the co-learning network against the fusion
//! baselines and a PET-only threshold on phantom studies.

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{default_rois, MetricsReport};
use crate::model::{ColearnConfig, FusionRatio, Network, Variant};
use crate::phantom::threshold::blind_pet_oracle;
use crate::phantom::{generate_dataset, kfold_split, PhantomSpec, CLASS_NAMES, OTHER, TUMOR};
use crate::training::{predict_labels, train, Sample, TrainConfig, TrainOutputs};

pub const ORACLE_NAME: &str = "pet_threshold";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub studies: usize,
    pub folds: usize,
    pub split_seed: u64,
    pub init_seed: u64,
    pub phantom: PhantomSpec,
    pub model: ColearnConfig,
    pub train: TrainConfig,
    /// PET weights of the FS baselines.
    pub fs_ratios: Vec<f32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            studies: 20,
            folds: 5,
            split_seed: 0,
            init_seed: 0,
            phantom: PhantomSpec {
                slices_per_study: 2,
                ..PhantomSpec::default()
            },
            model: ColearnConfig {
                input_size: [64, 64],
                channels: 8,
                ..ColearnConfig::default()
            },
            train: TrainConfig {
                epochs: 200,
                learning_rate: 0.01,
                lambda: 1e-4,
                ..TrainConfig::default()
            },
            fs_ratios: vec![0.3, 0.5, 0.7],
        }
    }
}

impl ExperimentConfig {
    pub fn networks(&self) -> Result<Vec<(String, Network)>> {
        let mut out = Vec::new();
        for v in [Variant::Colearn, Variant::Mb, Variant::Mc] {
            out.push((v.name().to_string(), Network::new(v, self.model.clone(), None)?));
        }
        for &r in &self.fs_ratios {
            out.push((
                format!("fs_{r}"),
                Network::new(Variant::Fs, self.model.clone(), Some(FusionRatio::new(r)?))?,
            ));
        }
        Ok(out)
    }
}

/// One method's per-fold test reports.
#[derive(Clone, Debug)]
pub struct MethodResult {
    pub name: String,
    pub folds: Vec<MetricsReport>,
}

impl MethodResult {
    /// Per-fold mean over slices; folds with no defined value are skipped.
    pub fn fold_means(&self, roi: &str, metric: &str) -> Vec<f64> {
        self.folds.iter().filter_map(|r| r.mean(roi, metric)).collect()
    }

    pub fn mean_over_folds(&self, roi: &str, metric: &str) -> Option<f64> {
        let m = self.fold_means(roi, metric);
        (!m.is_empty()).then(|| m.iter().sum::<f64>() / m.len() as f64)
    }

    /// All folds pooled into one report.
    pub fn pooled(&self) -> MetricsReport {
        let mut out = MetricsReport::new(self.name.clone(), default_rois(&CLASS_NAMES));
        for r in &self.folds {
            out.extend(r);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub methods: Vec<MethodResult>,
    pub oracle: MethodResult,
}

impl ExperimentReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// FS ratio with the highest mean foreground Dice.
    pub fn best_fs(&self) -> Option<&MethodResult> {
        self.methods
            .iter()
            .filter(|m| m.name.starts_with("fs_"))
            .max_by(|a, b| {
                let key = |m: &MethodResult| m.mean_over_folds("foreground", "dice").unwrap_or(f64::NEG_INFINITY);
                key(a).total_cmp(&key(b))
            })
    }

    pub fn pooled_reports(&self) -> Vec<MetricsReport> {
        self.methods
            .iter()
            .chain(std::iter::once(&self.oracle))
            .map(MethodResult::pooled)
            .collect()
    }
}

/// Labels every pixel of the blind PET threshold mask as tumor.
pub fn oracle_labels(slice: &crate::phantom::StudySlice) -> Result<Vec<u8>> {
    let m = blind_pet_oracle(&slice.pet_suv)?;
    Ok(m.mask.iter().map(|&t| if t { TUMOR } else { OTHER }).collect())
}

/// Generates the studies, splits them by study and trains and tests every
/// method on every fold from the same initialization seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.phantom.image_size != cfg.model.input_size {
        return Err(Error::Config(format!(
            "phantom size {:?} differs from the network input {:?}",
            cfg.phantom.image_size, cfg.model.input_size
        )));
    }
    let studies = generate_dataset(&cfg.phantom, cfg.studies)?;
    let samples: Vec<Vec<Sample>> = studies
        .iter()
        .map(|s| s.slices.iter().map(Sample::from_slice).collect())
        .collect();
    let folds = kfold_split(studies.len(), cfg.folds, cfg.split_seed)?;
    let networks = cfg.networks()?;
    let rois = default_rois(&CLASS_NAMES);

    let mut methods: Vec<MethodResult> = networks
        .iter()
        .map(|(name, _)| MethodResult {
            name: name.clone(),
            folds: Vec::new(),
        })
        .collect();
    let mut oracle = MethodResult {
        name: ORACLE_NAME.into(),
        folds: Vec::new(),
    };

    for (k, fold) in folds.iter().enumerate() {
        let train_set: Vec<Sample> = fold.train.iter().flat_map(|&i| samples[i].iter().cloned()).collect();
        let test_slices: Vec<_> = fold.test.iter().flat_map(|&i| studies[i].slices.iter()).collect();
        let test_set: Vec<Sample> = fold.test.iter().flat_map(|&i| samples[i].iter().cloned()).collect();

        let mut report = MetricsReport::new(ORACLE_NAME, rois.clone());
        for s in &test_slices {
            report.add_slice(&oracle_labels(s)?, s.labels.as_slice())?;
        }
        oracle.folds.push(report);

        for ((name, net), result) in networks.iter().zip(methods.iter_mut()) {
            let params = net.init_params(cfg.init_seed)?;
            let outcome = train(net, params, &train_set, &cfg.train, &TrainOutputs::default())?;
            let preds = predict_labels(net, &outcome.params, &test_set, cfg.train.batch_size)?;
            let mut report = MetricsReport::new(name.clone(), rois.clone());
            for (p, s) in preds.iter().zip(&test_set) {
                report.add_slice(p, &s.labels)?;
            }
            info!(
                "fold {k} {name}: foreground dice {:.4}, tumor dice {:.4}",
                report.mean("foreground", "dice").unwrap_or(f64::NAN),
                report.mean("tumors", "dice").unwrap_or(f64::NAN)
            );
            result.folds.push(report);
        }
    }
    Ok(ExperimentReport { methods, oracle })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_experiment_runs_every_method() {
        let cfg = ExperimentConfig {
            studies: 4,
            folds: 2,
            phantom: PhantomSpec {
                image_size: [16, 16],
                slices_per_study: 1,
                tumor_radius: [0.15, 0.2],
                tumor_count: [1, 2],
                ..PhantomSpec::default()
            },
            model: ColearnConfig {
                input_size: [16, 16],
                channels: 2,
                ..ColearnConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 2,
                ..ExperimentConfig::default().train
            },
            ..ExperimentConfig::default()
        };
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.methods.len(), 6);
        for m in r.methods.iter().chain([&r.oracle]) {
            assert_eq!(m.folds.len(), 2);
            assert_eq!(m.pooled().values("foreground", "dice").len(), 4);
        }
        assert!(r.best_fs().unwrap().name.starts_with("fs_"));
        assert!(r.oracle.mean_over_folds("tumors", "dice").is_some());
    }

    #[test]
    fn mismatched_sizes_are_config_errors() {
        let cfg = ExperimentConfig {
            phantom: PhantomSpec {
                image_size: [32, 32],
                ..PhantomSpec::default()
            },
            ..ExperimentConfig::default()
        };
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }
}
