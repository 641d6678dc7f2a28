//! Commands over an on-disk workspace: generate a cohort, train a policy,
//! evaluate it, draw its figures, adapt it to a shifted cohort and verify
//! every artifact.
//!
//! ```text
//! <root>/data/<data_id>/                 trajectories, ground truth, config
//! <root>/runs/<run_id>/                  checkpoints, training log, policy
//! <root>/runs/<run_id>/evaluation/       evaluation.json
//! <root>/runs/<run_id>/figures/          *.svg
//! <root>/runs/<run_id>/adapt/<adapt_id>/ adaptation.json, decision tables
//! ```
//!
//! Each directory is sealed by a `manifest.json` holding the sha-256 of every
//! file in it. The manifest is written last, so a directory without one is
//! incomplete. Every file also carries the directory's id and config hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::action::ActionTriple;
use crate::bins::ValueBins;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{DacError, Result};
use crate::experiment::{adaptation_study, AdaptationPoint, Decisions, SourceRun};
use crate::io::{atomic_write, sha256_hex};
use crate::pipeline::{deconfound, pretrain, training_data, PreparedCohort, Pretrained};
use crate::report::{adaptation_svg, calibration_svg, dose_svg, evaluate_run, histogram_svg, EvalReport};
use crate::rewards::{BehaviorClone, NumeratorModel};
use crate::risk::RiskModel;
use crate::split::CohortSplit;
use crate::synthetic::{simulate_cohort, SyntheticGroundTruth};
use crate::trainer::{train_dac, DacModel, TrainState};
use crate::trajectory::{read_trajectories, write_trajectories, FileHeader, PatientTrajectory};

/// Environment variable naming the workspace root.
pub const WORKSPACE_ENV: &str = "DAC_WORKSPACE";
pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "dac-manifest";

const TRAJECTORIES: &str = "trajectories.jsonl";
const GROUND_TRUTH: &str = "ground_truth.jsonl";
const CONFIG: &str = "config.txt";
const BINS: &str = "bins.json";
const SPLIT: &str = "split.json";
const RISK: &str = "risk.json";
const CLONE: &str = "clone.json";
const NUMERATOR: &str = "numerator.json";
const STATE: &str = "state.json";
const METRICS: &str = "metrics.jsonl";
const POLICY: &str = "policy.json";
const DIVERGENCE: &str = "divergence.json";
const EVALUATION: &str = "evaluation.json";
const ADAPTATION: &str = "adaptation.json";
const SOURCE_DECISIONS: &str = "source-decisions.csv";

/// Hashes of the files of one sealed directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// `data`, `run`, `evaluation`, `figures` or `adaptation`.
    pub kind: String,
    pub id: String,
    pub config_hash: String,
    pub files: BTreeMap<String, String>,
}

/// Provenance shared by every file of a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub id: String,
    pub config_hash: String,
}

impl Stamp {
    fn line(&self) -> String {
        format!("run_id {} config_hash {}", self.id, self.config_hash)
    }
}

/// JSON body wrapped with its provenance.
#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    format: String,
    run_id: String,
    config_hash: String,
    body: T,
}

fn write_stamped<T: Serialize>(path: &Path, format: &str, stamp: &Stamp, body: &T) -> Result<()> {
    let doc = Stamped {
        format: format.into(),
        run_id: stamp.id.clone(),
        config_hash: stamp.config_hash.clone(),
        body,
    };
    atomic_write(path, &serde_json::to_vec_pretty(&doc)?)
}

fn read_stamped<T: for<'de> Deserialize<'de>>(path: &Path, stamp: &Stamp) -> Result<T> {
    let doc: Stamped<T> = serde_json::from_slice(&read(path)?)?;
    if doc.config_hash != stamp.config_hash {
        return Err(DacError::HashMismatch {
            what: path.display().to_string(),
            expected: stamp.config_hash.clone(),
            found: doc.config_hash,
        });
    }
    Ok(doc.body)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DacError::MissingArtifact(path.display().to_string()),
        _ => e.into(),
    })
}

fn write_config(dir: &Path, config: &RunConfig, stamp: &Stamp) -> Result<()> {
    let text = format!("# {}\n{}", stamp.line(), config.to_flat_text());
    atomic_write(&dir.join(CONFIG), text.as_bytes())
}

fn seal(dir: &Path, kind: &str, stamp: &Stamp, names: &[String]) -> Result<Manifest> {
    let mut files = BTreeMap::new();
    for name in names {
        files.insert(name.clone(), sha256_hex(&read(&dir.join(name))?));
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        kind: kind.into(),
        id: stamp.id.clone(),
        config_hash: stamp.config_hash.clone(),
        files,
    };
    atomic_write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Re-hash every file listed in `dir`'s manifest and check that each one
/// names the manifest's id and config hash.
pub fn verify_dir(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_slice(&read(&path)?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(DacError::Format {
            path: path.display().to_string(),
            reason: format!("unexpected format {:?}", manifest.format),
        });
    }
    for (name, expected) in &manifest.files {
        let bytes = read(&dir.join(name))?;
        let found = sha256_hex(&bytes);
        if &found != expected {
            return Err(DacError::HashMismatch {
                what: dir.join(name).display().to_string(),
                expected: expected.clone(),
                found,
            });
        }
        let text = String::from_utf8_lossy(&bytes);
        for needle in [&manifest.id, &manifest.config_hash] {
            if !text.contains(needle.as_str()) {
                return Err(DacError::Format {
                    path: dir.join(name).display().to_string(),
                    reason: format!("does not carry {needle}"),
                });
            }
        }
    }
    Ok(manifest)
}

fn require_sealed(dir: &Path, what: &str, hint: &str) -> Result<Manifest> {
    if !dir.join(MANIFEST).exists() {
        return Err(DacError::MissingArtifact(format!("{what} {} ({hint})", dir.display())));
    }
    verify_dir(dir)
}

/// Outcome of `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_id: String,
    pub dir: PathBuf,
    /// Epochs already complete when this invocation started.
    pub resumed_at: Option<usize>,
    pub pretrained_reused: bool,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_wis: Option<f64>,
    pub complete: bool,
}

/// Options of `train` beyond the configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub force: bool,
    /// Stop after this many epochs in total, leaving the run resumable.
    pub stop_after: Option<usize>,
}

/// Outcome of `adapt`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSummary {
    pub dir: PathBuf,
    pub points: Vec<AdaptationPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdaptationDoc {
    run_id: String,
    adaptation_id: String,
    points: Vec<AdaptationPoint>,
}

/// A loaded, verified run.
struct LoadedRun {
    trajectories: Vec<PatientTrajectory>,
    truth: SyntheticGroundTruth,
    cohort: PreparedCohort,
    pretrained: Pretrained,
    policy: DacModel,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Root from `DAC_WORKSPACE`, else the current directory.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(WORKSPACE_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from))
    }

    pub fn data_dir(&self, config: &RunConfig) -> PathBuf {
        self.root.join(&config.paths.data).join(config.data_id())
    }

    pub fn run_dir(&self, config: &RunConfig) -> PathBuf {
        self.root.join(&config.paths.runs).join(config.run_id())
    }

    pub fn evaluation_dir(&self, config: &RunConfig) -> PathBuf {
        self.run_dir(config).join("evaluation")
    }

    pub fn figures_dir(&self, config: &RunConfig) -> PathBuf {
        self.run_dir(config).join("figures")
    }

    pub fn adaptation_dir(&self, config: &RunConfig) -> PathBuf {
        self.run_dir(config).join("adapt").join(config.adaptation_id())
    }

    fn data_stamp(config: &RunConfig) -> Stamp {
        Stamp {
            id: config.data_id(),
            config_hash: config.data_hash(),
        }
    }

    fn run_stamp(config: &RunConfig) -> Stamp {
        Stamp {
            id: config.run_id(),
            config_hash: config.run_hash(),
        }
    }

    /// Simulate the configured cohort into its data directory.
    pub fn generate(&self, config: &RunConfig, force: bool) -> Result<PathBuf> {
        config.validate()?;
        let dir = self.data_dir(config);
        let stamp = Self::data_stamp(config);
        if dir.join(MANIFEST).exists() && !force {
            return Err(DacError::validation(format!(
                "data {} already exists at {}; pass --force to regenerate",
                stamp.id,
                dir.display()
            )));
        }
        let resolved = config.resolved();
        let (trajs, truth) = simulate_cohort(&resolved.synthetic)?;
        remove_manifest(&dir)?;
        let header = FileHeader::trajectories(Some(stamp.id.clone()), Some(stamp.config_hash.clone()));
        write_trajectories(&dir.join(TRAJECTORIES), &header, &trajs)?;
        truth.save(&dir.join(GROUND_TRUTH), Some(&stamp.id), Some(&stamp.config_hash))?;
        write_config(&dir, config, &stamp)?;
        seal(&dir, "data", &stamp, &names(&[TRAJECTORIES, GROUND_TRUTH, CONFIG]))?;
        Ok(dir)
    }

    fn load_data(&self, config: &RunConfig) -> Result<(Vec<PatientTrajectory>, SyntheticGroundTruth)> {
        let dir = self.data_dir(config);
        let stamp = Self::data_stamp(config);
        let manifest = require_sealed(&dir, "generated data", "run `dac generate` with the same config first")?;
        if manifest.config_hash != stamp.config_hash {
            return Err(DacError::HashMismatch {
                what: format!("data {}", dir.display()),
                expected: stamp.config_hash,
                found: manifest.config_hash,
            });
        }
        let (_, trajs) = read_trajectories(&dir.join(TRAJECTORIES))?;
        let truth = SyntheticGroundTruth::load(&dir.join(GROUND_TRUTH))?;
        Ok((trajs, truth))
    }

    /// Pre-train the estimators and train the policy, resuming an
    /// interrupted run where it stopped.
    pub fn train(&self, config: &RunConfig, options: TrainOptions) -> Result<TrainSummary> {
        config.validate()?;
        let resolved = config.resolved();
        let pipeline = &resolved.pipeline;
        let dir = self.run_dir(config);
        let stamp = Self::run_stamp(config);
        if dir.exists() && options.force {
            std::fs::remove_dir_all(&dir)?;
        }
        if dir.join(MANIFEST).exists() {
            return Err(DacError::validation(format!(
                "run {} is already complete at {}; pass --force to retrain",
                stamp.id,
                dir.display()
            )));
        }
        let (trajs, _) = self.load_data(config)?;

        let reusable = [BINS, SPLIT, RISK, CLONE, NUMERATOR].iter().all(|f| dir.join(f).exists());
        let (cohort, pretrained) = if reusable {
            let bins: ValueBins = read_stamped(&dir.join(BINS), &stamp)?;
            let split: CohortSplit = read_stamped(&dir.join(SPLIT), &stamp)?;
            let cohort = PreparedCohort::with_bins(&trajs, pipeline, split, bins)?;
            (cohort, load_pretrained(&dir, &stamp)?)
        } else {
            let cohort = PreparedCohort::new(&trajs, pipeline)?;
            let pretrained = pretrain(&cohort, pipeline)?;
            write_stamped(&dir.join(BINS), "dac-bins", &stamp, &cohort.bins)?;
            write_stamped(&dir.join(SPLIT), "dac-split", &stamp, &cohort.split)?;
            let prov = |ck: Checkpoint| ck.with_provenance(Some(stamp.id.clone()), Some(stamp.config_hash.clone()));
            prov(pretrained.risk.checkpoint()).save(&dir.join(RISK))?;
            prov(pretrained.clone.checkpoint()).save(&dir.join(CLONE))?;
            prov(pretrained.numerator.checkpoint()).save(&dir.join(NUMERATOR))?;
            (cohort, pretrained)
        };
        write_config(&dir, config, &stamp)?;

        let train_config = pipeline.train;
        let state_path = dir.join(STATE);
        let state = if reusable && state_path.exists() {
            let (state, saved) = TrainState::load(&state_path)?;
            if saved != train_config {
                return Err(DacError::validation(format!(
                    "{} was written under different training settings",
                    state_path.display()
                )));
            }
            state
        } else {
            TrainState::new(DacModel::neutral(cohort.embedding, train_config.seed)?, &train_config)
        };
        let resumed_at = (state.epoch > 0).then_some(state.epoch);

        let dec = deconfound(&cohort, &pretrained, &train_config)?;
        let data = training_data(&cohort, &pretrained, &dec)?;
        let mut bounded = train_config;
        if let Some(stop) = options.stop_after {
            bounded.epochs = bounded.epochs.min(stop.max(state.epoch));
        }
        let mut metrics = metrics_header(&stamp)?;
        for m in &state.history {
            metrics.push_str(&serde_json::to_string(m)?);
            metrics.push('\n');
        }
        let result = train_dac(&data, &bounded, state, |s| {
            let last = s.history.last().expect("called after an epoch");
            metrics.push_str(&serde_json::to_string(last)?);
            metrics.push('\n');
            atomic_write(&dir.join(METRICS), metrics.as_bytes())?;
            s.save(&state_path, &train_config, Some(&stamp.id), Some(&stamp.config_hash))
        });
        let state = match result {
            Ok(state) => state,
            Err(DacError::Numerical(msg)) => {
                let dump = serde_json::json!({
                    "run_id": stamp.id,
                    "config_hash": stamp.config_hash,
                    "error": msg,
                    "state": STATE,
                    "metrics": METRICS,
                });
                atomic_write(&dir.join(DIVERGENCE), &serde_json::to_vec_pretty(&dump)?)?;
                return Err(DacError::Numerical(format!("{msg}; diagnostics in {}", dir.join(DIVERGENCE).display())));
            }
            Err(e) => return Err(e),
        };
        let complete = state.epoch >= train_config.epochs;
        if complete {
            if !dir.join(METRICS).exists() {
                atomic_write(&dir.join(METRICS), metrics.as_bytes())?;
            }
            if !state_path.exists() {
                state.save(&state_path, &train_config, Some(&stamp.id), Some(&stamp.config_hash))?;
            }
            state
                .best_model()
                .checkpoint()
                .with_provenance(Some(stamp.id.clone()), Some(stamp.config_hash.clone()))
                .save(&dir.join(POLICY))?;
            seal(
                &dir,
                "run",
                &stamp,
                &names(&[BINS, SPLIT, RISK, CLONE, NUMERATOR, STATE, METRICS, POLICY, CONFIG]),
            )?;
        }
        Ok(TrainSummary {
            run_id: stamp.id,
            dir,
            resumed_at,
            pretrained_reused: reusable,
            epochs: state.epoch,
            best_epoch: state.best.as_ref().map(|b| b.0),
            best_wis: state.best.as_ref().map(|b| b.1),
            complete,
        })
    }

    fn load_run(&self, config: &RunConfig) -> Result<LoadedRun> {
        let dir = self.run_dir(config);
        let stamp = Self::run_stamp(config);
        require_sealed(&dir, "trained run", "run `dac train` with the same config first")?;
        let (trajectories, truth) = self.load_data(config)?;
        let bins: ValueBins = read_stamped(&dir.join(BINS), &stamp)?;
        let split: CohortSplit = read_stamped(&dir.join(SPLIT), &stamp)?;
        let cohort = PreparedCohort::with_bins(&trajectories, &config.resolved().pipeline, split, bins)?;
        let pretrained = load_pretrained(&dir, &stamp)?;
        let policy = load_checkpoint(&dir.join(POLICY), "dac", &stamp)?;
        Ok(LoadedRun {
            trajectories,
            truth,
            cohort,
            pretrained,
            policy: DacModel::from_checkpoint(&policy)?,
        })
    }

    /// Score the trained policy, the behavior clone and the clinicians.
    pub fn evaluate(&self, config: &RunConfig) -> Result<EvalReport> {
        config.validate()?;
        let run = self.load_run(config)?;
        let stamp = Self::run_stamp(config);
        let mut report = evaluate_run(
            &run.cohort,
            &run.pretrained,
            &run.policy,
            Some(&run.truth),
            config.pipeline.train.gamma,
            &config.evaluation,
        )?;
        report.run_id = stamp.id.clone();
        report.config_hash = stamp.config_hash.clone();
        let dir = self.evaluation_dir(config);
        remove_manifest(&dir)?;
        atomic_write(&dir.join(EVALUATION), &serde_json::to_vec_pretty(&report)?)?;
        seal(&dir, "evaluation", &stamp, &names(&[EVALUATION]))?;
        Ok(report)
    }

    /// Render the figures of the stored evaluation (and adaptation, if any).
    pub fn report(&self, config: &RunConfig) -> Result<Vec<PathBuf>> {
        let stamp = Self::run_stamp(config);
        let eval_dir = self.evaluation_dir(config);
        require_sealed(&eval_dir, "evaluation", "run `dac evaluate` first")?;
        let report: EvalReport = serde_json::from_slice(&read(&eval_dir.join(EVALUATION))?)?;
        if report.config_hash != stamp.config_hash {
            return Err(DacError::HashMismatch {
                what: eval_dir.join(EVALUATION).display().to_string(),
                expected: stamp.config_hash,
                found: report.config_hash,
            });
        }
        let prov = stamp.line();
        let mut figures = vec![
            ("histograms.svg", histogram_svg(&report, &prov)),
            ("dose-difference.svg", dose_svg(&report, &prov)),
            ("calibration.svg", calibration_svg(&report, &prov)),
        ];
        let adapt_dir = self.adaptation_dir(config);
        if adapt_dir.join(MANIFEST).exists() {
            verify_dir(&adapt_dir)?;
            let doc: AdaptationDoc = serde_json::from_slice(&read(&adapt_dir.join(ADAPTATION))?)?;
            figures.push(("adaptation.svg", adaptation_svg(&doc.points, &prov)));
        }
        let dir = self.figures_dir(config);
        remove_manifest(&dir)?;
        let mut written = Vec::new();
        for (name, svg) in &figures {
            atomic_write(&dir.join(name), svg.as_bytes())?;
            written.push(dir.join(name));
        }
        let listed: Vec<String> = figures.iter().map(|(n, _)| n.to_string()).collect();
        seal(&dir, "figures", &stamp, &listed)?;
        Ok(written)
    }

    /// Adapt the trained policy to the configured target cohort.
    pub fn adapt(&self, config: &RunConfig, force: bool) -> Result<AdaptSummary> {
        config.validate()?;
        let dir = self.adaptation_dir(config);
        let stamp = Stamp {
            id: config.adaptation_id(),
            config_hash: config.adaptation_hash(),
        };
        if dir.join(MANIFEST).exists() && !force {
            return Err(DacError::validation(format!(
                "adaptation {} already exists at {}; pass --force to redo it",
                stamp.id,
                dir.display()
            )));
        }
        let resolved = config.resolved();
        let run = self.load_run(config)?;
        let deconfounding = deconfound(&run.cohort, &run.pretrained, &resolved.pipeline.train)?;
        let source = SourceRun {
            trajectories: run.trajectories,
            truth: run.truth,
            config: resolved.pipeline.clone(),
            cohort: run.cohort,
            pretrained: run.pretrained,
            deconfounding,
        };
        let study = adaptation_study(&source, &run.policy, &resolved.synthetic, &resolved.adaptation)?;

        remove_manifest(&dir)?;
        let mut files = vec![ADAPTATION.to_string(), SOURCE_DECISIONS.to_string(), CONFIG.to_string()];
        let doc = AdaptationDoc {
            run_id: config.run_id(),
            adaptation_id: stamp.id.clone(),
            points: study.points.clone(),
        };
        let mut json = serde_json::to_value(&doc)?;
        json["config_hash"] = stamp.config_hash.clone().into();
        atomic_write(&dir.join(ADAPTATION), &serde_json::to_vec_pretty(&json)?)?;
        atomic_write(&dir.join(SOURCE_DECISIONS), decisions_csv(&study.source_decisions, &stamp)?.as_bytes())?;
        for (point, decisions) in study.points.iter().zip(&study.adapted_decisions) {
            let name = decisions_file(point.fraction);
            atomic_write(&dir.join(&name), decisions_csv(decisions, &stamp)?.as_bytes())?;
            files.push(name);
        }
        write_config(&dir, config, &stamp)?;
        seal(&dir, "adaptation", &stamp, &files)?;
        Ok(AdaptSummary {
            dir,
            points: study.points,
        })
    }

    /// Verify every sealed directory belonging to `config`; returns the
    /// manifests checked.
    pub fn verify(&self, config: &RunConfig) -> Result<Vec<(PathBuf, Manifest)>> {
        let mut dirs = vec![self.data_dir(config)];
        let run = self.run_dir(config);
        if run.exists() {
            dirs.push(run.clone());
            dirs.push(self.evaluation_dir(config));
            dirs.push(self.figures_dir(config));
            if let Ok(entries) = std::fs::read_dir(run.join("adapt")) {
                let mut adapt: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
                adapt.sort();
                dirs.extend(adapt);
            }
        }
        let mut checked = Vec::new();
        for (i, dir) in dirs.into_iter().enumerate() {
            // the data and run directories must be sealed once they exist
            if i > 1 && !dir.join(MANIFEST).exists() {
                continue;
            }
            let manifest = if i == 0 {
                require_sealed(&dir, "generated data", "nothing to verify")?
            } else {
                require_sealed(&dir, "run", "training has not finished")?
            };
            checked.push((dir, manifest));
        }
        Ok(checked)
    }
}

/// Name of the adapted-decisions table at one training fraction.
pub fn decisions_file(fraction: f64) -> String {
    format!("decisions-{fraction:.2}.csv")
}

fn decisions_csv(decisions: &Decisions, stamp: &Stamp) -> Result<String> {
    let mut out = format!("# {}\npatient_id,step,action,vt,peep,fio2\n", stamp.line());
    for (id, actions) in decisions {
        for (t, &a) in actions.iter().enumerate() {
            let [vt, peep, fio2] = ActionTriple::from_flat_index(a)?.levels();
            out.push_str(&format!("{id},{t},{a},{vt},{peep},{fio2}\n"));
        }
    }
    Ok(out)
}

fn metrics_header(stamp: &Stamp) -> Result<String> {
    let header = serde_json::json!({
        "format": "dac-metrics",
        "run_id": stamp.id,
        "config_hash": stamp.config_hash,
    });
    Ok(serde_json::to_string(&header)? + "\n")
}

fn load_checkpoint(path: &Path, kind: &str, stamp: &Stamp) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    ck.require_kind(kind)?;
    ck.require_config(&stamp.config_hash)?;
    Ok(ck)
}

fn load_pretrained(dir: &Path, stamp: &Stamp) -> Result<Pretrained> {
    Ok(Pretrained {
        risk: RiskModel::from_checkpoint(&load_checkpoint(&dir.join(RISK), "risk", stamp)?)?,
        clone: BehaviorClone::from_checkpoint(&load_checkpoint(&dir.join(CLONE), "clone", stamp)?)?,
        numerator: NumeratorModel::from_checkpoint(&load_checkpoint(&dir.join(NUMERATOR), "numerator", stamp)?)?,
    })
}

fn remove_manifest(dir: &Path) -> Result<()> {
    match std::fs::remove_file(dir.join(MANIFEST)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

fn names(files: &[&str]) -> Vec<String> {
    files.iter().map(|f| f.to_string()).collect()
}
