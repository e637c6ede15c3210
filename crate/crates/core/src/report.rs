//! Result files: per-source detail CSV, per-episode summary CSV, sweep and
//! multi-seed aggregates, the run manifest and wall-clock timings.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Protocol, RunConfig};
use crate::error::{E3Error, Result};
use crate::protocol::{EpisodeReport, ProtocolResult};

pub const DETAIL_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SEEDS_FILE: &str = "seeds.csv";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Source id of the single-generator mixed test in the detail CSV.
pub const MIXED_SOURCE: &str = "mixed";

pub const DETAIL_HEADER: [&str; 7] = ["method", "protocol", "episode", "source_id", "metric", "value", "seed"];
pub const SUMMARY_HEADER: [&str; 12] = [
    "method",
    "protocol",
    "episode",
    "generator",
    "n_sources",
    "average_auc",
    "std_auc",
    "average_accuracy",
    "std_accuracy",
    "mixed_auc",
    "mixed_accuracy",
    "seed",
];
pub const SWEEP_HEADER: [&str; 7] = [
    "method",
    "budget",
    "capacity",
    "episodes",
    "final_average_auc",
    "final_average_accuracy",
    "seed",
];
pub const SEEDS_HEADER: [&str; 7] = ["method", "protocol", "episode", "n_seeds", "mean_auc", "std_auc", "mean_accuracy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub method: String,
    pub protocol: String,
    pub episode: usize,
    pub source_id: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub protocol: String,
    pub episode: usize,
    pub generator: String,
    pub n_sources: usize,
    pub average_auc: f64,
    /// Population standard deviation across sources.
    pub std_auc: f64,
    pub average_accuracy: f64,
    pub std_accuracy: f64,
    pub mixed_auc: Option<f64>,
    pub mixed_accuracy: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub budget: usize,
    pub capacity: usize,
    pub episodes: usize,
    pub final_average_auc: f64,
    pub final_average_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub method: String,
    pub protocol: String,
    pub episode: usize,
    pub n_seeds: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_accuracy: f64,
}

fn csv_err(e: csv::Error) -> E3Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => E3Error::Io(io),
            other => E3Error::Format(format!("{other:?}")),
        }
    } else {
        E3Error::Format(format!("csv: {e}"))
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn reports(result: &ProtocolResult) -> impl Iterator<Item = &EpisodeReport> {
    result.initial.iter().chain(&result.episodes)
}

/// One row per (episode, source, metric); episode 0 holds the initial state.
pub fn detail_rows(result: &ProtocolResult) -> Vec<DetailRow> {
    let mut rows = Vec::new();
    for rep in reports(result) {
        let mut push = |source: &str, metric: &str, value: f64| {
            rows.push(DetailRow {
                method: rep.method.name().to_string(),
                protocol: result.label.clone(),
                episode: rep.episode,
                source_id: source.to_string(),
                metric: metric.to_string(),
                value,
                seed: result.master_seed,
            })
        };
        for (s, m) in &rep.sources {
            push(s, "auc", m.auc);
            push(s, "accuracy", m.accuracy);
        }
        if let Some(m) = rep.mixed {
            push(MIXED_SOURCE, "auc", m.auc);
            push(MIXED_SOURCE, "accuracy", m.accuracy);
        }
    }
    rows
}

/// Per-episode averages taken from the episode reports themselves.
pub fn summary_rows(result: &ProtocolResult) -> Vec<SummaryRow> {
    reports(result)
        .map(|rep| {
            let (_, std_auc) = mean_std(rep.sources.iter().map(|(_, m)| m.auc));
            let (_, std_accuracy) = mean_std(rep.sources.iter().map(|(_, m)| m.accuracy));
            SummaryRow {
                method: rep.method.name().to_string(),
                protocol: result.label.clone(),
                episode: rep.episode,
                generator: rep.generator.clone().unwrap_or_default(),
                n_sources: rep.sources.len(),
                average_auc: rep.average_auc,
                std_auc,
                average_accuracy: rep.average_accuracy,
                std_accuracy,
                mixed_auc: rep.mixed.map(|m| m.auc),
                mixed_accuracy: rep.mixed.map(|m| m.accuracy),
                seed: result.master_seed,
            }
        })
        .collect()
}

/// Rebuilds the summary from detail rows alone. The newest generator of an
/// episode is the last non-mixed source listed for it (empty for episode 0).
pub fn summarize(rows: &[DetailRow]) -> Vec<SummaryRow> {
    type Key = (String, String, usize, u64);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, Vec<&DetailRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.protocol.clone(), r.method.clone(), r.episode, r.seed);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let metric = |name: &str| -> Vec<f64> {
                g.iter()
                    .filter(|r| r.metric == name && r.source_id != MIXED_SOURCE)
                    .map(|r| r.value)
                    .collect()
            };
            let mixed = |name: &str| g.iter().find(|r| r.metric == name && r.source_id == MIXED_SOURCE).map(|r| r.value);
            let (auc, acc) = (metric("auc"), metric("accuracy"));
            let (average_auc, std_auc) = mean_std(auc.iter().copied());
            let (average_accuracy, std_accuracy) = mean_std(acc.iter().copied());
            let sources: Vec<&str> = g
                .iter()
                .filter(|r| r.metric == "auc" && r.source_id != MIXED_SOURCE)
                .map(|r| r.source_id.as_str())
                .collect();
            let (protocol, method, episode, seed) = key;
            SummaryRow {
                generator: if episode == 0 {
                    String::new()
                } else {
                    sources.last().map(|s| s.to_string()).unwrap_or_default()
                },
                n_sources: sources.len(),
                method,
                protocol,
                episode,
                average_auc,
                std_auc,
                average_accuracy,
                std_accuracy,
                mixed_auc: mixed("auc"),
                mixed_accuracy: mixed("accuracy"),
                seed,
            }
        })
        .collect()
}

/// Final-episode E3 (or any method) averages of each sweep run.
pub fn sweep_rows(results: &[ProtocolResult]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for r in results {
        let mut methods: Vec<_> = r.episodes.iter().map(|e| e.method).collect();
        methods.dedup();
        for m in methods {
            if let Some(last) = r.final_report(m) {
                rows.push(SweepRow {
                    method: m.name().to_string(),
                    budget: r.budget,
                    capacity: r.capacity,
                    episodes: last.episode,
                    final_average_auc: last.average_auc,
                    final_average_accuracy: last.average_accuracy,
                    seed: r.master_seed,
                });
            }
        }
    }
    rows
}

/// Mean and population standard deviation of the per-episode average AUC across seeds.
pub fn seed_rows(summaries: &[SummaryRow]) -> Vec<SeedRow> {
    type Key = (String, String, usize);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, Vec<&SummaryRow>> = BTreeMap::new();
    for s in summaries {
        let key = (s.protocol.clone(), s.method.clone(), s.episode);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(s);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let (mean_auc, std_auc) = mean_std(g.iter().map(|s| s.average_auc));
            let (mean_accuracy, _) = mean_std(g.iter().map(|s| s.average_accuracy));
            let (protocol, method, episode) = key;
            SeedRow {
                method,
                protocol,
                episode,
                n_seeds: g.len(),
                mean_auc,
                std_auc,
                mean_accuracy,
            }
        })
        .collect()
}

/// Writes `header` and then `rows`; an empty `rows` yields a header-only file.
pub fn write_csv<T: Serialize, W: Write>(out: W, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let found: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if found != header {
        return Err(E3Error::Format(format!("{}: unexpected header {found:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn write_csv_file<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    write_csv(fs::File::create(path)?, header, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub label: String,
    pub protocol: Protocol,
    pub budget: usize,
    pub capacity: usize,
    pub methods: Vec<String>,
    pub seed: u64,
}

/// Everything needed to replay a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub master_seeds: Vec<u64>,
    pub config_fingerprint: String,
    /// Pixel checksum of the corpus for each master seed.
    pub corpus_checksums: BTreeMap<u64, String>,
    pub runs: Vec<RunEntry>,
    pub files: Vec<String>,
    /// The fully materialized configuration.
    pub config_toml: String,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            master_seeds: Vec::new(),
            config_fingerprint: cfg.fingerprint()?,
            corpus_checksums: BTreeMap::new(),
            runs: Vec::new(),
            files: Vec::new(),
            config_toml: cfg.to_toml()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub protocol: String,
    pub method: String,
    pub episode: usize,
    pub seed: u64,
    pub wall_time_s: f64,
}

pub fn timing_rows(results: &[ProtocolResult]) -> Vec<TimingRow> {
    results
        .iter()
        .flat_map(|r| {
            reports(r).map(move |e| TimingRow {
                protocol: r.label.clone(),
                method: e.method.name().to_string(),
                episode: e.episode,
                seed: r.master_seed,
                wall_time_s: e.wall_time_s,
            })
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| E3Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes the deterministic CSVs for `results` into `out_dir` and returns
/// the file names written. Sweep results also get a sweep table; more than
/// one master seed adds a cross-seed table.
pub fn write_report(results: &[ProtocolResult], out_dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)?;
    let detail: Vec<DetailRow> = results.iter().flat_map(detail_rows).collect();
    let summary: Vec<SummaryRow> = results.iter().flat_map(summary_rows).collect();
    write_csv_file(&out_dir.join(DETAIL_FILE), &DETAIL_HEADER, &detail)?;
    write_csv_file(&out_dir.join(SUMMARY_FILE), &SUMMARY_HEADER, &summary)?;
    let mut files = vec![DETAIL_FILE.to_string(), SUMMARY_FILE.to_string()];
    if results.iter().any(|r| r.protocol == Protocol::Sweep) {
        write_csv_file(&out_dir.join(SWEEP_FILE), &SWEEP_HEADER, &sweep_rows(results))?;
        files.push(SWEEP_FILE.to_string());
    }
    let mut seeds: Vec<u64> = results.iter().map(|r| r.master_seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() > 1 {
        write_csv_file(&out_dir.join(SEEDS_FILE), &SEEDS_HEADER, &seed_rows(&summary))?;
        files.push(SEEDS_FILE.to_string());
    }
    Ok(files)
}

/// Writes the report CSVs plus the run manifest and a separate timings file.
pub fn write_run(results: &[ProtocolResult], mut manifest: RunManifest, out_dir: &Path) -> Result<()> {
    let mut files = write_report(results, out_dir)?;
    for r in results {
        let mut methods: Vec<String> = reports(r).map(|e| e.method.name().to_string()).collect();
        methods.dedup();
        manifest.runs.push(RunEntry {
            label: r.label.clone(),
            protocol: r.protocol,
            budget: r.budget,
            capacity: r.capacity,
            methods,
            seed: r.master_seed,
        });
        if !manifest.master_seeds.contains(&r.master_seed) {
            manifest.master_seeds.push(r.master_seed);
        }
    }
    files.append(&mut manifest.files);
    files.push(TIMINGS_FILE.to_string());
    manifest.files = files;
    write_json(&out_dir.join(TIMINGS_FILE), &timing_rows(results))?;
    write_json(&out_dir.join(RUN_MANIFEST_FILE), &manifest)
}

/// Recomputes the summary table of a run directory from its detail CSV.
pub fn recompute_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let rows: Vec<DetailRow> = read_csv(&dir.join(DETAIL_FILE), &DETAIL_HEADER)?;
    Ok(summarize(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::protocol::SourceMetrics;

    fn rep(method: Method, episode: usize, sources: &[(&str, f64, f64)], mixed: Option<(f64, f64)>) -> EpisodeReport {
        let n = sources.len() as f64;
        EpisodeReport {
            method,
            episode,
            generator: (episode > 0).then(|| sources.last().unwrap().0.to_string()),
            sources: sources
                .iter()
                .map(|&(s, auc, accuracy)| (s.to_string(), SourceMetrics { auc, accuracy }))
                .collect(),
            average_auc: sources.iter().map(|s| s.1).sum::<f64>() / n,
            average_accuracy: sources.iter().map(|s| s.2).sum::<f64>() / n,
            mixed: mixed.map(|(auc, accuracy)| SourceMetrics { auc, accuracy }),
            wall_time_s: 0.25,
        }
    }

    fn result() -> ProtocolResult {
        ProtocolResult {
            label: "sequential".into(),
            protocol: Protocol::Sequential,
            master_seed: 4,
            config_fingerprint: "f".into(),
            budget: 100,
            capacity: 200,
            initial: vec![rep(Method::E3, 0, &[("baseline", 0.97, 0.9)], None)],
            episodes: vec![
                rep(Method::E3, 1, &[("baseline", 0.96, 0.88), ("g1", 0.99, 0.95)], None),
                rep(
                    Method::E3,
                    2,
                    &[("baseline", 0.95, 0.87), ("g1", 0.98, 0.93), ("g2", 1.0 / 3.0, 0.5)],
                    Some((0.7, 0.6)),
                ),
            ],
        }
    }

    #[test]
    fn empty_result_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        write_report(&[], dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(DETAIL_FILE)).unwrap();
        assert_eq!(text, "method,protocol,episode,source_id,metric,value,seed\n");
        let rows: Vec<DetailRow> = read_csv(&dir.path().join(DETAIL_FILE), &DETAIL_HEADER).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn summary_matches_recomputation_from_detail() {
        let dir = tempfile::tempdir().unwrap();
        let r = result();
        write_report(std::slice::from_ref(&r), dir.path()).unwrap();
        let written: Vec<SummaryRow> = read_csv(&dir.path().join(SUMMARY_FILE), &SUMMARY_HEADER).unwrap();
        assert_eq!(recompute_summary(dir.path()).unwrap(), written);
        assert_eq!(written.len(), 3);
        assert_eq!(written[2].generator, "g2");
        assert_eq!(written[2].mixed_auc, Some(0.7));
        assert_eq!(written[0].generator, "");
        let std = ((0.95f64 - written[2].average_auc).powi(2)
            + (0.98 - written[2].average_auc).powi(2)
            + (1.0 / 3.0 - written[2].average_auc).powi(2))
            / 3.0;
        assert!((written[2].std_auc - std.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn detail_rows_cover_every_source_and_metric() {
        let rows = detail_rows(&result());
        assert_eq!(rows.len(), 2 * (1 + 2 + 3) + 2);
        assert!(rows.iter().all(|r| r.seed == 4 && r.protocol == "sequential"));
        assert_eq!(rows.iter().filter(|r| r.source_id == MIXED_SOURCE).count(), 2);
        assert_eq!(rows[0].episode, 0);
    }

    #[test]
    fn rewriting_is_byte_identical_and_manifest_lists_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = RunConfig::default();
        for d in [&a, &b] {
            write_run(&[result()], RunManifest::new("run", &cfg).unwrap(), d.path()).unwrap();
        }
        for f in [DETAIL_FILE, SUMMARY_FILE, RUN_MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(a.path().join(RUN_MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(m.master_seeds, vec![4]);
        assert!(m.files.contains(&TIMINGS_FILE.to_string()));
        assert_eq!(RunConfig::from_toml(&m.config_toml).unwrap(), cfg);
    }

    #[test]
    fn seed_table_aggregates_across_seeds() {
        let mut r2 = result();
        r2.master_seed = 5;
        r2.episodes[1].average_auc = 0.5;
        let summary: Vec<SummaryRow> = [result(), r2].iter().flat_map(summary_rows).collect();
        let rows = seed_rows(&summary);
        assert_eq!(rows.len(), 3);
        let last = &rows[2];
        assert_eq!(last.n_seeds, 2);
        let a = result().episodes[1].average_auc;
        assert!((last.mean_auc - (a + 0.5) / 2.0).abs() < 1e-15);
        assert!((last.std_auc - (a - 0.5).abs() / 2.0).abs() < 1e-15);
    }
}
