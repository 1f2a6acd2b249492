//! The subcommands. Each one loads or generates its inputs, computes, and
//! writes every output atomically; inputs are never modified.

use std::io::Write;
use std::path::{Path, PathBuf};

use attrib_ens::artifact::{digest_bytes, digest_json, load_artifact, save_artifact};
use attrib_ens::cost::{predict_costs, verify_ledger, CostLedger, LedgerReport, LedgerScope, PredictedCosts, UnitCosts};
use attrib_ens::data::Dataset;
use attrib_ens::ensembles::{aggregate_units, ensemble_units, run_ensemble, total_ledger, train_members, EnsembleConfig, Strategy, UnitResult};
use attrib_ens::evaluation::{
    build_lds_ground_truth, dataset_pair_digest, ground_truth_digest, lds as lds_report, loo_oracle, LdsGroundTruth,
    LdsReport,
};
use attrib_ens::lora::targets_by_suffix;
use attrib_ens::model::{param_count, EnsembleShape, ParamCountReport};
use attrib_ens::tda::AttributionMatrix;
use attrib_ens::training::TrainedMember;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{pass_unit_costs, set_axis, Run, SweepAxis};
use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberEntry {
    pub index: usize,
    pub seed: u64,
    /// Relative to the manifest.
    pub file: PathBuf,
    pub sha256: String,
    pub subset_indices: Vec<usize>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    /// Digest of model, training recipe and data.
    pub config_digest: String,
    pub dataset_digest: String,
    pub members: Vec<MemberEntry>,
    pub ledger: CostLedger,
}

#[derive(Serialize)]
struct LedgerFile<'a> {
    config_digest: &'a str,
    ledger: &'a CostLedger,
    verification: Option<&'a LedgerReport>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Failure::from(e.error))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn save(path: &Path, artifact: &attrib_ens::artifact::Artifact) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_artifact(path, artifact)?;
    Ok(())
}

fn train_digest(run: &Run, data_digest: &str) -> Result<String, Failure> {
    Ok(digest_json(&(&run.spec, &run.train, data_digest))?)
}

fn attribution_digest(train_digest: &str, ensemble: &EnsembleConfig) -> Result<String, Failure> {
    Ok(digest_json(&(train_digest, ensemble))?)
}

fn scope(run: &Run, train: &Dataset, test: &Dataset) -> LedgerScope {
    let ft = &run.ensemble.lora.fine_tune;
    LedgerScope {
        n_train: train.len() as u64,
        n_test: test.len() as u64,
        finetune_subset: (ft.subset_fraction * train.len() as f64).floor() as u64,
    }
}

pub fn train(run: &Run) -> Result<(), Failure> {
    let (train, test) = run.datasets()?;
    let data_digest = dataset_pair_digest(&train, &test);
    let digest = train_digest(run, &data_digest)?;
    let mut ledger = CostLedger::new();
    info!("training {} members on {} samples", run.ensemble.members, train.len());
    let members = train_members(&run.spec, &train, &run.train, run.ensemble.members, &mut ledger)?;
    let out = run.out_dir();
    let mut entries = Vec::with_capacity(members.len());
    for m in &members {
        let artifact = m.to_artifact(&digest)?;
        let file = PathBuf::from("members").join(format!("member_{}.tda", m.member_index));
        save(&out.join(&file), &artifact)?;
        entries.push(MemberEntry {
            index: m.member_index,
            seed: m.seed,
            file,
            sha256: digest_bytes(&artifact.to_bytes()?),
            subset_indices: m.subset_indices.clone(),
            final_loss: m.loss_history.last().copied(),
        });
    }
    let manifest = Manifest {
        name: run.config.name.clone(),
        seed: run.config.seed,
        config_digest: digest,
        dataset_digest: data_digest,
        members: entries,
        ledger,
    };
    let path = out.join("manifest.json");
    write_json(&path, &manifest)?;
    println!("trained {} members; manifest at {}", members.len(), path.display());
    Ok(())
}

fn load_members(run: &Run, manifest_path: &Path, data_digest: &str) -> Result<Vec<TrainedMember>, Failure> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Failure::Config(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.dataset_digest != data_digest {
        return Err(Failure::Config("manifest was trained on different data".into()));
    }
    let digest = train_digest(run, data_digest)?;
    if manifest.config_digest != digest {
        return Err(Failure::Config(
            "manifest was produced by a different model or training config; rerun `train`".into(),
        ));
    }
    let wanted = run.ensemble.members;
    if manifest.members.len() < wanted {
        return Err(Failure::Config(format!(
            "config asks for I = {wanted} members, manifest has {}",
            manifest.members.len()
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.members[..wanted]
        .iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let a = load_artifact(&path)?;
            if digest_bytes(&a.to_bytes()?) != e.sha256 {
                return Err(Failure::Config(format!("{} does not match its manifest checksum", path.display())));
            }
            a.expect_digest(&digest)?;
            Ok(TrainedMember::from_artifact(&a, &run.spec)?)
        })
        .collect()
}

fn summary(matrix: &AttributionMatrix, k: usize) -> String {
    let mut s = format!(
        "# top {k} training indices per test point ({:?}, {} train × {} test)\n",
        matrix.method,
        matrix.n_train(),
        matrix.n_test()
    );
    for t in 0..matrix.n_test() {
        let entries: Vec<String> = matrix
            .top_k(t, k)
            .into_iter()
            .map(|j| format!("{j}:{:.6e}", matrix.scores.get(j, t)))
            .collect();
        s += &format!("test {t}: {}\n", entries.join(" "));
    }
    s
}

pub fn attribute(run: &Run, manifest: Option<&Path>) -> Result<(), Failure> {
    let out = run.out_dir();
    let manifest = manifest.map(Path::to_path_buf).unwrap_or_else(|| out.join("manifest.json"));
    let (train, test) = run.datasets()?;
    let data_digest = dataset_pair_digest(&train, &test);
    let members = load_members(run, &manifest, &data_digest)?;
    let mut ledger = CostLedger::new();
    let mut matrix = run_ensemble(&run.spec, &members, &train, &test, &run.ensemble, &mut ledger)?;
    let digest = attribution_digest(&train_digest(run, &data_digest)?, &run.ensemble)?;
    matrix.meta.config_digest = digest.clone();
    let report = verify_ledger(&run.ensemble, scope(run, &train, &test), &ledger)?;
    if !report.passed() {
        warn!("pass counts differ from the closed form:\n{report}");
    }
    save(&out.join("attribution.tda"), &matrix.to_artifact()?)?;
    write_json(
        &out.join("attribution_ledger.json"),
        &LedgerFile {
            config_digest: &digest,
            ledger: &ledger,
            verification: Some(&report),
        },
    )?;
    write_atomic(&out.join("summary.txt"), summary(&matrix, run.config.evaluation.top_k).as_bytes())?;
    println!(
        "{:?} × {:?}: {} units, serve passes {} forward / {} backward",
        run.ensemble.strategy,
        run.ensemble.method,
        matrix.meta.units.len(),
        ledger.serve_forward,
        ledger.serve_backward
    );
    Ok(())
}

/// Load the ground truth at `explicit` or the output directory, building
/// and saving it when absent. A cached file in the output directory built
/// with other settings is rebuilt; an explicit one is used as given.
fn ground_truth(
    run: &Run,
    train: &Dataset,
    test: &Dataset,
    explicit: Option<&Path>,
    ledger: &mut CostLedger,
) -> Result<(LdsGroundTruth, PathBuf), Failure> {
    let retrain = run.retrain_config();
    let ev = &run.config.evaluation;
    let seed = run.evaluation_seed();
    let expected = ground_truth_digest(&run.spec, &retrain, ev.m, ev.alpha, seed, run.output_fn())?;
    let data_digest = dataset_pair_digest(train, test);
    let path = explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.out_dir().join("ground_truth.tda"));
    if path.exists() {
        let gt = LdsGroundTruth::from_artifact(&load_artifact(&path)?)?;
        if gt.dataset_digest != data_digest {
            return Err(Failure::Config(format!(
                "ground truth {} was built on different data than the attribution",
                path.display()
            )));
        }
        if gt.config_digest == expected {
            info!("reusing ground truth {}", path.display());
            return Ok((gt, path));
        }
        if explicit.is_some() {
            warn!("ground truth {} was built with other settings; using it as given", path.display());
            return Ok((gt, path));
        }
    }
    info!("building ground truth: {} retrainings", ev.m);
    let gt = build_lds_ground_truth(
        &run.spec,
        train,
        test,
        ev.m,
        ev.alpha,
        &retrain,
        run.output_fn(),
        seed,
        ledger,
    )?;
    save(&path, &gt.to_artifact()?)?;
    Ok((gt, path))
}

/// Holds nothing that depends on whether the ground truth was cached, so
/// reruns write identical bytes.
#[derive(Serialize)]
struct LdsFile<'a> {
    attribution_digest: &'a str,
    ground_truth_digest: &'a str,
    #[serde(flatten)]
    report: &'a LdsReport,
}

fn lds_csv(report: &LdsReport) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["test_index", "lds", "constant"])?;
    for (t, v) in report.per_test_lds.iter().enumerate() {
        let constant = report.constant_tests.contains(&t);
        w.write_record([t.to_string(), v.to_string(), constant.to_string()])?;
    }
    w.into_inner().map_err(|e| Failure::Config(format!("CSV: {e}")))
}

pub fn lds(run: &Run, attribution: Option<&Path>, explicit_gt: Option<&Path>) -> Result<(), Failure> {
    let out = run.out_dir();
    let path = attribution
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("attribution.tda"));
    let (train, test) = run.datasets()?;
    let data_digest = dataset_pair_digest(&train, &test);
    let matrix = AttributionMatrix::from_artifact(&load_artifact(&path)?)?;
    let expected = attribution_digest(&train_digest(run, &data_digest)?, &run.ensemble)?;
    if matrix.meta.config_digest != expected {
        return Err(Failure::Config(format!(
            "attribution {} was not produced by this config and data",
            path.display()
        )));
    }
    let mut ledger = CostLedger::new();
    let (gt, _) = ground_truth(run, &train, &test, explicit_gt, &mut ledger)?;
    println!("ground truth: {} retrainings", ledger.model_trainings);
    let report = lds_report(&matrix, &gt)?;
    write_json(
        &out.join("lds.json"),
        &LdsFile {
            attribution_digest: &expected,
            ground_truth_digest: &gt.config_digest,
            report: &report,
        },
    )?;
    write_atomic(&out.join("lds.csv"), &lds_csv(&report)?)?;
    println!("mean LDS {:.4} over {} test points", report.mean_lds, report.per_test_lds.len());
    Ok(())
}

fn unit_costs(run: &Run, train: &Dataset, test: &Dataset) -> UnitCosts {
    run.config.costs.unwrap_or_else(|| pass_unit_costs(run, train.len(), test.len()))
}

fn space(run: &Run, config: &EnsembleConfig) -> Result<ParamCountReport, Failure> {
    let lora = config.strategy == Strategy::Lora;
    let suffixes: Vec<&str> = config.lora.targets.iter().map(String::as_str).collect();
    let shape = EnsembleShape {
        members: config.members,
        masks: config.masks,
        adapters_per_member: if lora { config.adapters } else { 0 },
        rank: config.lora.rank,
        targets: if lora { targets_by_suffix(&run.spec, &suffixes) } else { Vec::new() },
    };
    Ok(param_count(&run.spec, &shape)?)
}

#[derive(Serialize)]
struct CostsFile<'a> {
    strategy: Strategy,
    members: usize,
    masks: usize,
    adapters: usize,
    unit_costs: &'a UnitCosts,
    predicted: &'a PredictedCosts,
    predicted_total: f64,
    parameters: &'a ParamCountReport,
}

pub fn costs(run: &Run) -> Result<(), Failure> {
    let (train, test) = run.datasets()?;
    let unit = unit_costs(run, &train, &test);
    let predicted = predict_costs(&run.ensemble, &unit)?;
    let parameters = space(run, &run.ensemble)?;
    let file = CostsFile {
        strategy: run.ensemble.strategy,
        members: run.ensemble.members,
        masks: run.ensemble.masks,
        adapters: run.ensemble.adapters,
        unit_costs: &unit,
        predicted: &predicted,
        predicted_total: predicted.total(),
        parameters: &parameters,
    };
    write_json(&run.out_dir().join("costs.json"), &file)?;
    println!(
        "training {} serving {} parameters {}",
        predicted.training, predicted.serving, parameters.total
    );
    Ok(())
}

pub fn oracle(run: &Run) -> Result<(), Failure> {
    let (train, test) = run.datasets()?;
    let mut ledger = CostLedger::new();
    let matrix = loo_oracle(
        &run.spec,
        &train,
        &test,
        &run.retrain_config(),
        run.output_fn(),
        run.config.seed,
        &mut ledger,
    )?;
    let out = run.out_dir();
    save(&out.join("oracle.tda"), &matrix.to_artifact()?)?;
    write_json(
        &out.join("oracle_ledger.json"),
        &LedgerFile {
            config_digest: &matrix.meta.config_digest,
            ledger: &ledger,
            verification: None,
        },
    )?;
    println!("leave-one-out: {} retrainings", ledger.model_trainings);
    Ok(())
}

/// Member a unit belongs to; checkpoint units number `(i·C + c, d)`.
fn unit_member(config: &EnsembleConfig, unit: (usize, usize)) -> usize {
    match config.strategy {
        Strategy::Checkpoints => unit.0 / config.checkpoint_epochs.len(),
        _ => unit.0,
    }
}

fn unit_limit(config: &EnsembleConfig) -> usize {
    match config.strategy {
        Strategy::Naive => usize::MAX,
        Strategy::Dropout | Strategy::DropoutForwardOnly | Strategy::Checkpoints => config.masks,
        Strategy::Lora => config.adapters,
    }
}

/// Counters of `l` times `num / den`; exact when `l` is `den` equal parts.
fn scaled(l: &CostLedger, num: u64, den: u64) -> CostLedger {
    let s = |v: u64| v * num / den;
    CostLedger {
        train_forward: s(l.train_forward),
        train_backward: s(l.train_backward),
        serve_forward: s(l.serve_forward),
        serve_backward: s(l.serve_backward),
        model_trainings: s(l.model_trainings),
        lora_finetunes: s(l.lora_finetunes),
        cg_matvecs: s(l.cg_matvecs),
        wall_clock: Default::default(),
    }
}

struct SweepRow {
    config: EnsembleConfig,
    outcome: Result<(f64, CostLedger, PredictedCosts, ParamCountReport), String>,
}

fn sweep_point(
    run: &Run,
    config: &EnsembleConfig,
    units: &[UnitResult],
    finetune: &CostLedger,
    max_finetunes: u64,
    gt: &LdsGroundTruth,
    unit: &UnitCosts,
) -> Result<(f64, CostLedger, PredictedCosts, ParamCountReport), Failure> {
    let limit = unit_limit(config);
    let chosen: Vec<UnitResult> = units
        .iter()
        .filter(|r| unit_member(config, r.unit) < config.members && r.unit.1 <= limit)
        .cloned()
        .collect();
    let matrix = aggregate_units(config.method, &chosen)?;
    let report = lds_report(&matrix, gt)?;
    let mut ledger = total_ledger(&chosen);
    if config.strategy == Strategy::Lora && max_finetunes > 0 {
        let fine_tunes = (config.members * config.adapters) as u64;
        ledger.merge(&scaled(finetune, fine_tunes, max_finetunes));
    }
    Ok((report.mean_lds, ledger, predict_costs(config, unit)?, space(run, config)?))
}

fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "strategy",
        "method",
        "I",
        "D",
        "L",
        "mean_lds",
        "predicted_training",
        "predicted_serving",
        "param_count",
        "train_forward",
        "train_backward",
        "serve_forward",
        "serve_backward",
        "status",
    ])?;
    for row in rows {
        let c = &row.config;
        let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_owned();
        let mut rec = vec![
            name(serde_json::to_value(c.strategy)?),
            name(serde_json::to_value(c.method)?),
            c.members.to_string(),
            c.masks.to_string(),
            c.adapters.to_string(),
        ];
        match &row.outcome {
            Ok((lds, l, p, space)) => {
                rec.extend([
                    lds.to_string(),
                    p.training.to_string(),
                    p.serving.to_string(),
                    space.total.to_string(),
                    l.train_forward.to_string(),
                    l.train_backward.to_string(),
                    l.serve_forward.to_string(),
                    l.serve_backward.to_string(),
                    "ok".into(),
                ]);
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 8));
                rec.push(format!("error: {e}"));
            }
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Failure::Config(format!("CSV: {e}")))
}

/// Every point reuses one ground truth and one set of unit results computed
/// at the largest axis value; smaller points aggregate a subset of units.
pub fn sweep(run: &Run, explicit_gt: Option<&Path>) -> Result<(), Failure> {
    let axis = run
        .config
        .sweep
        .as_ref()
        .ok_or_else(|| Failure::Config("sweep: the config has no `sweep` section".into()))?;
    let (train, test) = run.datasets()?;
    let mut largest = run.ensemble.clone();
    let max = axis.values.iter().copied().max().unwrap_or(1);
    set_axis(&mut largest, axis.axis, max);
    let mut gt_ledger = CostLedger::new();
    let (gt, _) = ground_truth(run, &train, &test, explicit_gt, &mut gt_ledger)?;
    println!("ground truth: {} retrainings", gt_ledger.model_trainings);
    let mut setup = CostLedger::new();
    let members = train_members(&run.spec, &train, &run.train, largest.members, &mut setup)?;
    let mut finetune = CostLedger::new();
    let units = ensemble_units(&run.spec, &members, &train, &test, &largest, &mut finetune)?;
    let max_finetunes = if largest.strategy == Strategy::Lora {
        (largest.members * largest.adapters) as u64
    } else {
        0
    };
    let unit = unit_costs(run, &train, &test);
    let rows: Vec<SweepRow> = axis
        .values
        .iter()
        .map(|&v| {
            let mut config = run.ensemble.clone();
            set_axis(&mut config, axis.axis, v);
            let outcome = sweep_point(run, &config, &units, &finetune, max_finetunes, &gt, &unit)
                .map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                warn!("sweep point {:?} = {v} failed: {e}", axis.axis);
            }
            SweepRow { config, outcome }
        })
        .collect();
    let out = run.out_dir();
    write_atomic(&out.join("sweep.csv"), &sweep_csv(&rows)?)?;
    write_json(
        &out.join("sweep_ledger.json"),
        &LedgerFile {
            config_digest: &gt.config_digest,
            ledger: &setup,
            verification: None,
        },
    )?;
    let axis_name = match axis.axis {
        SweepAxis::Members => "I",
        SweepAxis::Masks => "D",
        SweepAxis::Adapters => "L",
    };
    println!("{} sweep points over {axis_name}; CSV at {}", rows.len(), out.join("sweep.csv").display());
    Ok(())
}
