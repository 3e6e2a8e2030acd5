//! Experiment commands and their on-disk artifacts.
//!
//! Layout under the output root:
//!
//! | path | content |
//! |---|---|
//! | `trunk.ckpt` | frozen trunk checkpoint |
//! | `trunk.json` | checksum, anchor accuracy, sizes |
//! | `results/<domain>.json` | searched runs of one domain |
//! | `results/summary.json` | averages, parameter report, score |
//! | `results/meta.json` | timestamps and host facts, kept apart so the rest stays reproducible |
//! | `finetune/<domain>.json` | re-finetuned accuracy of stored structures |
//! | `compare/<domain>.json` | plugging strategy runs |
//! | `report/` | tables, CSV files and SVG charts |

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapter::{make_baseline_adapter, FixedAdapter};
use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::data::generate_domain;
use crate::error::{Error, Result};
use crate::metrics::{decathlon_score, mean_std, ParamReport, DomainParams, ScoreInput};
use crate::plugging::{parse_mask_bits, StrategyKind};
use crate::rng::{derive_seed, seeded};
use crate::trainer::{
    compare_strategies, domain_seed, finetune_adapters, full_finetune_baseline, head_only_baseline, run_mdl, search_mask,
    AdaptationModel, DomainData, DomainResult, StrategyRun,
};
use crate::trunk::{pretrain_trunk, DomainHead, TrunkModel};

pub const TRUNK_FILE: &str = "trunk.ckpt";
pub const TRUNK_INFO_FILE: &str = "trunk.json";
pub const RESULTS_DIR: &str = "results";
pub const FINETUNE_DIR: &str = "finetune";
pub const COMPARE_DIR: &str = "compare";
pub const REPORT_DIR: &str = "report";
pub const SUMMARY_FILE: &str = "summary.json";
pub const META_FILE: &str = "meta.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn write_meta(dir: &Path, command: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Meta<'a> {
        command: &'a str,
        version: &'a str,
        created_unix_seconds: u64,
        threads: usize,
        host_parallelism: usize,
    }
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = Meta {
        command,
        version: env!("CARGO_PKG_VERSION"),
        created_unix_seconds: created,
        threads: rayon::current_num_threads(),
        host_parallelism: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    write_json(&dir.join(META_FILE), &meta)
}

/// Runs `f` on a pool of `jobs` threads, or the global pool when `None`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Invalid(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkInfo {
    pub checksum: String,
    pub anchor_accuracy: f32,
    pub param_count: usize,
    pub n_layers: usize,
    pub base_channels: usize,
    pub widths: Vec<usize>,
}

/// Builds, pretrains on the anchor domain, freezes and saves the trunk.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<TrunkInfo> {
    let t = &cfg.trunk;
    let mut trunk = TrunkModel::build(t.n_layers, t.base_channels, t.input_shape, &mut seeded(derive_seed(cfg.seed, "trunk")))?;
    let (train, test) = generate_domain(&cfg.pretrain.anchor, derive_seed(cfg.seed, "anchor"))?;
    let anchor = DomainData::new("anchor", train, test, None)?;
    let mut rng = seeded(derive_seed(cfg.seed, "pretrain"));
    let (anchor_accuracy, _) = pretrain_trunk(&mut trunk, &anchor.train, &anchor.test, &cfg.pretrain.hyper, &mut rng)?;
    let checksum = trunk.freeze();
    trunk.save(&out.join(TRUNK_FILE))?;
    let info = TrunkInfo {
        checksum: hex::encode(checksum),
        anchor_accuracy,
        param_count: trunk.param_count(),
        n_layers: trunk.n_layers(),
        base_channels: trunk.base_channels(),
        widths: trunk.widths(),
    };
    write_json(&out.join(TRUNK_INFO_FILE), &info)?;
    Ok(info)
}

/// Loads a frozen checkpoint, checking it against `trunk.json` when present.
pub fn load_trunk(path: &Path) -> Result<TrunkModel> {
    let trunk = TrunkModel::load(path)?;
    if !trunk.is_frozen() {
        return Err(Error::Invalid(format!("{} is not a frozen trunk", path.display())));
    }
    let info_path = path.with_file_name(TRUNK_INFO_FILE);
    if info_path.exists() {
        let info: TrunkInfo = read_json(&info_path)?;
        let found = hex::encode(trunk.checksum());
        if info.checksum != found {
            return Err(Error::Checksum { expected: info.checksum, found });
        }
    }
    Ok(trunk)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub full_finetune_error: f32,
    pub head_only_accuracy: f32,
}

/// All searched runs of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub schema_version: u32,
    pub domain: String,
    pub complexity_rank: Option<u32>,
    pub trunk_checksum: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<DomainResult>,
    pub baselines: Option<BaselineRecord>,
}

impl DomainRecord {
    pub fn mean_accuracy(&self) -> f64 {
        mean_std(&self.runs.iter().map(|r| r.test_accuracy as f64).collect::<Vec<_>>()).0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub masks: Vec<String>,
    pub mean_adapter_params_percent: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub schema_version: u32,
    pub trunk_checksum: String,
    pub repeats: usize,
    pub domains: Vec<DomainSummary>,
    pub average_accuracy: f64,
    /// From the first repetition.
    pub params: ParamReport,
    pub score: Option<f64>,
    pub score_note: String,
}

pub const SCORE_NOTE: &str = "lambda_d = 1000 / E_max_d^2 with E_max_d = 2 x full-finetune error; a zero-error domain scores 1000";

fn trunk_path(out: &Path, trunk: Option<&Path>) -> PathBuf {
    trunk.map_or_else(|| out.join(TRUNK_FILE), Path::to_path_buf)
}

fn check_trunk_matches(cfg: &ExperimentConfig, trunk: &TrunkModel) -> Result<()> {
    let t = &cfg.trunk;
    if trunk.n_layers() != t.n_layers || trunk.base_channels() != t.base_channels || trunk.input_shape() != t.input_shape {
        return Err(Error::Config("checkpoint architecture differs from the [trunk] section".into()));
    }
    Ok(())
}

/// Searches and finetunes every domain `repeats` times and writes one
/// record per domain plus the summary.
pub fn cmd_search_and_finetune(cfg: &ExperimentConfig, out: &Path, trunk: Option<&Path>) -> Result<SearchSummary> {
    let trunk = load_trunk(&trunk_path(out, trunk))?;
    check_trunk_matches(cfg, &trunk)?;
    let checksum = hex::encode(trunk.checksum());
    let domains = cfg.load_domains()?;
    let seeds: Vec<u64> = (0..cfg.repeats).map(|r| cfg.repeat_seed(r)).collect();
    let mut per_domain: Vec<Vec<DomainResult>> = vec![Vec::new(); domains.len()];
    let mut first = None;
    for &seed in &seeds {
        let mdl = run_mdl(&domains, &trunk, &cfg.search, seed)?;
        if first.is_none() {
            first = Some((
                mdl.classifier_params(),
                mdl.domains
                    .iter()
                    .map(|d| DomainParams {
                        domain: d.result.domain.clone(),
                        adapter_params: d.model.adapter_param_count(),
                        percent_of_all_plugged: d.result.adapter_params_percent,
                    })
                    .collect::<Vec<_>>(),
            ));
        }
        for (slot, run) in per_domain.iter_mut().zip(mdl.domains) {
            slot.push(run.result);
        }
    }
    let baselines: Vec<Option<BaselineRecord>> = if cfg.baselines {
        domains
            .par_iter()
            .map(|d| {
                let seed = domain_seed(cfg.seed, &d.id);
                Ok(Some(BaselineRecord {
                    full_finetune_error: full_finetune_baseline(d, &trunk, &cfg.search, seed)?,
                    head_only_accuracy: head_only_baseline(d, &trunk, &cfg.search, seed)?,
                }))
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; domains.len()]
    };
    if hex::encode(trunk.checksum()) != checksum {
        return Err(Error::Checksum { expected: checksum, found: hex::encode(trunk.checksum()) });
    }

    let results = out.join(RESULTS_DIR);
    let mut records = Vec::with_capacity(domains.len());
    for ((d, runs), baselines) in domains.iter().zip(per_domain).zip(baselines) {
        let rec = DomainRecord {
            schema_version: SCHEMA_VERSION,
            domain: d.id.clone(),
            complexity_rank: d.complexity_rank,
            trunk_checksum: checksum.clone(),
            seeds: seeds.clone(),
            runs,
            baselines,
        };
        write_json(&results.join(format!("{}.json", d.id)), &rec)?;
        records.push(rec);
    }
    let (classifier_params, params) = first.expect("at least one repeat");
    let summary = summarize(&records, &checksum, ParamReport::new(trunk.param_count(), params, classifier_params)?)?;
    write_json(&results.join(SUMMARY_FILE), &summary)?;
    write_meta(&results, "search")?;
    Ok(summary)
}

/// Domain records sorted by id.
pub fn load_records(out: &Path) -> Result<Vec<DomainRecord>> {
    let dir = out.join(RESULTS_DIR);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name().is_some_and(|n| n != SUMMARY_FILE && n != META_FILE)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no domain results in {}", dir.display())));
    }
    paths.iter().map(|p| read_json(p)).collect()
}

fn summarize(records: &[DomainRecord], checksum: &str, params: ParamReport) -> Result<SearchSummary> {
    let domains: Vec<DomainSummary> = records
        .iter()
        .map(|r| {
            let accs: Vec<f64> = r.runs.iter().map(|x| x.test_accuracy as f64).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&accs);
            let pct: Vec<f64> = r.runs.iter().map(|x| x.adapter_params_percent).collect();
            DomainSummary {
                domain: r.domain.clone(),
                mean_accuracy,
                std_accuracy,
                masks: r.runs.iter().map(|x| x.mask.clone()).collect(),
                mean_adapter_params_percent: mean_std(&pct).0,
                flops: r.runs.first().map_or(0, |x| x.flops),
            }
        })
        .collect();
    let average_accuracy = mean_std(&domains.iter().map(|d| d.mean_accuracy).collect::<Vec<_>>()).0;
    Ok(SearchSummary {
        schema_version: SCHEMA_VERSION,
        trunk_checksum: checksum.to_string(),
        repeats: records.first().map_or(0, |r| r.runs.len()),
        domains,
        average_accuracy,
        params,
        score: score_of(records)?,
        score_note: SCORE_NOTE.to_string(),
    })
}

/// The error score, when every domain has a baseline.
pub fn score_of(records: &[DomainRecord]) -> Result<Option<f64>> {
    let baselines: Option<Vec<f64>> =
        records.iter().map(|r| r.baselines.map(|b| b.full_finetune_error as f64)).collect();
    match baselines {
        Some(baseline_errors) => {
            let errors = records.iter().map(|r| 1.0 - r.mean_accuracy()).collect();
            decathlon_score(&ScoreInput { errors, baseline_errors }).map(Some)
        }
        None => Ok(None),
    }
}

/// Rebuilds the stored structures of a run with fresh parameters.
pub fn structures_of(run: &DomainResult, trunk: &TrunkModel, seed: u64) -> Result<Vec<FixedAdapter>> {
    let widths = trunk.widths();
    if run.signatures.len() != widths.len() {
        return Err(Error::Data(format!("{} signatures for {} locations", run.signatures.len(), widths.len())));
    }
    let mut rng = seeded(seed);
    run.signatures.iter().zip(widths).map(|(s, c)| FixedAdapter::from_signature(s, c, &mut rng)).collect()
}

fn find_domain<'a>(domains: &'a [DomainData], id: &str) -> Result<&'a DomainData> {
    domains
        .iter()
        .find(|d| d.id == id)
        .ok_or_else(|| Error::Config(format!("results mention domain {id:?}, which the config does not define")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRun {
    pub mask: String,
    pub signatures: Vec<String>,
    pub test_accuracy: f32,
    pub adapter_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub domain: String,
    pub runs: Vec<FinetuneRun>,
}

/// Finetunes the stored structures and masks again from fresh parameters.
pub fn cmd_finetune(cfg: &ExperimentConfig, out: &Path, trunk: Option<&Path>) -> Result<Vec<FinetuneRecord>> {
    let trunk = load_trunk(&trunk_path(out, trunk))?;
    check_trunk_matches(cfg, &trunk)?;
    let records = load_records(out)?;
    let domains = cfg.load_domains()?;
    let outcome: Vec<FinetuneRecord> = records
        .par_iter()
        .map(|rec| {
            let data = find_domain(&domains, &rec.domain)?;
            let runs = rec
                .runs
                .iter()
                .zip(&rec.seeds)
                .map(|(run, &seed)| {
                    let seed = derive_seed(domain_seed(seed, &rec.domain), "refinetune");
                    let adapters = structures_of(run, &trunk, seed)?;
                    let mask = parse_mask_bits(&run.mask)?;
                    let mut rng = seeded(seed);
                    let head = DomainHead::new(&data.id, trunk.feature_dim(), data.num_classes(), &mut rng)?;
                    let mut model = AdaptationModel::new(adapters, &mask, head)?;
                    let ft = finetune_adapters(&mut model, &trunk, &data.train, &data.test, &cfg.search, &mut rng)?;
                    Ok(FinetuneRun {
                        mask: run.mask.clone(),
                        signatures: run.signatures.clone(),
                        test_accuracy: ft.test_accuracy,
                        adapter_params: model.adapter_param_count(),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(FinetuneRecord { domain: rec.domain.clone(), runs })
        })
        .collect::<Result<Vec<_>>>()?;
    for rec in &outcome {
        write_json(&out.join(FINETUNE_DIR).join(format!("{}.json", rec.domain)), rec)?;
    }
    write_meta(&out.join(FINETUNE_DIR), "finetune")?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRecord {
    pub domain: String,
    /// One block per searched run.
    pub runs: Vec<Vec<StrategyRun>>,
}

/// Mean over runs (and random masks) of one strategy on one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub domain: String,
    pub strategy: StrategyKind,
    pub count: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_adapter_params_percent: f64,
    pub mean_flops: f64,
}

pub const STRATEGY_ORDER: [StrategyKind; 5] =
    [StrategyKind::Searched, StrategyKind::All, StrategyKind::TopDown, StrategyKind::BottomUp, StrategyKind::Random];

pub fn summarize_strategies(records: &[CompareRecord]) -> Vec<StrategySummary> {
    let mut rows = Vec::new();
    for rec in records {
        for kind in STRATEGY_ORDER {
            let hits: Vec<&StrategyRun> = rec.runs.iter().flatten().filter(|r| r.strategy == kind).collect();
            if hits.is_empty() {
                continue;
            }
            let acc: Vec<f64> = hits.iter().map(|r| r.test_accuracy as f64).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&acc);
            rows.push(StrategySummary {
                domain: rec.domain.clone(),
                strategy: kind,
                count: hits.len(),
                mean_accuracy,
                std_accuracy,
                mean_adapter_params_percent: mean_std(&hits.iter().map(|r| r.adapter_params_percent).collect::<Vec<_>>()).0,
                mean_flops: mean_std(&hits.iter().map(|r| r.flops as f64).collect::<Vec<_>>()).0,
            });
        }
    }
    rows
}

/// Finetune-only runs of every plugging strategy at the searched budget.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path, trunk: Option<&Path>) -> Result<Vec<StrategySummary>> {
    let trunk = load_trunk(&trunk_path(out, trunk))?;
    check_trunk_matches(cfg, &trunk)?;
    let records = load_records(out).map_err(|e| match e {
        Error::Io { .. } | Error::Data(_) => Error::Data("compare needs searched results; run `search` first".into()),
        other => other,
    })?;
    let domains = cfg.load_domains()?;
    let compared = records
        .par_iter()
        .map(|rec| {
            let data = find_domain(&domains, &rec.domain)?;
            let runs = rec
                .runs
                .iter()
                .zip(&rec.seeds)
                .map(|(run, &seed)| {
                    let seed = derive_seed(domain_seed(seed, &rec.domain), "compare");
                    let (structures, mask) = match cfg.compare.structures.baseline() {
                        None => (structures_of(run, &trunk, seed)?, parse_mask_bits(&run.mask)?),
                        Some(kind) => {
                            let mut rng = seeded(derive_seed(seed, "baseline-structures"));
                            let structures = trunk
                                .widths()
                                .into_iter()
                                .map(|c| make_baseline_adapter(kind, c, &mut rng))
                                .collect::<Result<Vec<_>>>()?;
                            let mask = search_mask(data, &trunk, &structures, &cfg.search, seed)?;
                            (structures, mask)
                        }
                    };
                    compare_strategies(data, &trunk, &structures, &mask, &cfg.search, cfg.compare.random_masks, seed)
                })
                .collect::<Result<_>>()
                .map_err(|e| e.in_domain(&rec.domain))?;
            Ok(CompareRecord { domain: rec.domain.clone(), runs })
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = out.join(COMPARE_DIR);
    for rec in &compared {
        write_json(&dir.join(format!("{}.json", rec.domain)), rec)?;
    }
    let summary = summarize_strategies(&compared);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    write_meta(&dir, "compare")?;
    Ok(summary)
}

pub fn load_compare(out: &Path) -> Result<Option<Vec<CompareRecord>>> {
    let dir = out.join(COMPARE_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name().is_some_and(|n| n != SUMMARY_FILE && n != META_FILE)
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect::<Result<Vec<_>>>().map(Some)
}
