//! Text tables, CSV files and SVG charts from stored results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{
    load_compare, load_records, read_json, summarize_strategies, DomainRecord, StrategySummary, TrunkInfo, REPORT_DIR,
    SCORE_NOTE, TRUNK_INFO_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::{location_frequency, mean_std, structure_distribution, DomainStructureRuns, StructureDistribution};
use crate::plugging::parse_mask_bits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutput {
    pub table: String,
    pub files: Vec<PathBuf>,
    pub score: Option<f64>,
}

fn write_file(path: &Path, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    files.push(path.to_path_buf());
    Ok(())
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("plot {}: {e}", path.display()))
}

/// Grouped vertical bars: one group per label, one bar per series.
pub fn grouped_bars(
    path: &Path,
    title: &str,
    y_desc: &str,
    groups: &[String],
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| plot_err(path, e);
    let y_max = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let y_top = if y_max > 0.0 { y_max * 1.15 } else { 1.0 };
    let root = SVGBackend::new(path, (760, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5f64..groups.len() as f64 - 0.5, 0.0..y_top)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups.len().max(1))
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                groups.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc(y_desc)
        .draw()
        .map_err(|e| err(&e))?;
    let width = 0.8 / series.len().max(1) as f64;
    for (j, (name, values)) in series.iter().enumerate() {
        let color = Palette99::pick(j).to_rgba();
        let bars = values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| {
            let x0 = i as f64 - 0.4 + j as f64 * width;
            Rectangle::new([(x0, 0.0), (x0 + width * 0.9, v)], color.filled())
        });
        chart
            .draw_series(bars)
            .map_err(|e| err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn structure_stats(records: &[DomainRecord], widths: &[usize]) -> Option<Result<StructureDistribution>> {
    let runs: Vec<DomainStructureRuns> = records
        .iter()
        .map(|r| DomainStructureRuns {
            domain: r.domain.clone(),
            complexity_rank: r.complexity_rank,
            runs: r.runs.iter().map(|x| x.signatures.clone()).collect(),
        })
        .collect();
    let ranked = runs.iter().filter(|r| r.complexity_rank.is_some()).count();
    (ranked >= 2 && ranked == runs.len()).then(|| structure_distribution(&runs, widths))
}

/// Writes the report for the results under `out` into `out/report`.
pub fn cmd_report(out: &Path) -> Result<ReportOutput> {
    let records = load_records(out)?;
    let dir = out.join(REPORT_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let trunk_info: Option<TrunkInfo> = {
        let p = out.join(TRUNK_INFO_FILE);
        if p.exists() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    let mut files = Vec::new();
    let mut table = String::new();

    let _ = writeln!(table, "{:<20} {:>8} {:>8} {:>11} {:>12} {:>9} {:>9}", "domain", "acc", "std", "ada.param%", "flop", "fnft.acc", "head.acc");
    let mut csv = String::from("domain,complexity_rank,mean_accuracy,std_accuracy,adapter_params_percent,flops,full_finetune_error,head_only_accuracy\n");
    let mut accs = Vec::new();
    for r in &records {
        let acc: Vec<f64> = r.runs.iter().map(|x| x.test_accuracy as f64).collect();
        let (m, s) = mean_std(&acc);
        accs.push(m);
        let pct = mean_std(&r.runs.iter().map(|x| x.adapter_params_percent).collect::<Vec<_>>()).0;
        let flops = r.runs.first().map_or(0, |x| x.flops);
        let fnft = r.baselines.map(|b| 1.0 - b.full_finetune_error as f64);
        let head = r.baselines.map(|b| b.head_only_accuracy as f64);
        let _ = writeln!(
            table,
            "{:<20} {:>8.4} {:>8.4} {:>11.2} {:>12} {:>9} {:>9}",
            r.domain, m, s, pct, flops, fmt_opt(fnft, 4), fmt_opt(head, 4)
        );
        let _ = writeln!(
            csv,
            "{},{},{m},{s},{pct},{flops},{},{}",
            r.domain,
            r.complexity_rank.map_or(String::new(), |c| c.to_string()),
            r.baselines.map_or(String::new(), |b| b.full_finetune_error.to_string()),
            r.baselines.map_or(String::new(), |b| b.head_only_accuracy.to_string()),
        );
    }
    write_file(&dir.join("domains.csv"), &csv, &mut files)?;
    let _ = writeln!(table, "\nAve. Acc.     {:.4}", mean_std(&accs).0);
    let score = crate::commands::score_of(&records)?;
    match score {
        Some(s) => {
            let _ = writeln!(table, "S             {s:.1}  ({SCORE_NOTE})");
        }
        None => {
            let _ = writeln!(table, "S             n/a (no full-finetune baselines; set `baselines = true`)");
        }
    }
    if let Ok(summary) = read_json::<crate::commands::SearchSummary>(&out.join("results").join("summary.json")) {
        let p = &summary.params;
        let _ = writeln!(
            table,
            "Total Param.  {:.3}x  (trunk {}, adapters {}, classifiers {} not counted)",
            p.total_ratio,
            p.trunk_params,
            p.total_params - p.trunk_params,
            p.classifier_params
        );
    }

    // where adapters were plugged
    let mut freq_csv = String::from("domain,location,frequency\n");
    let mut freq_series = Vec::new();
    let mut n_locations = 0;
    for r in &records {
        let masks = r.runs.iter().map(|x| parse_mask_bits(&x.mask)).collect::<Result<Vec<_>>>()?;
        let f = location_frequency(&masks)?;
        n_locations = n_locations.max(f.len());
        for (i, v) in f.iter().enumerate() {
            let _ = writeln!(freq_csv, "{},{},{v}", r.domain, i + 1);
        }
        freq_series.push((r.domain.clone(), f));
    }
    write_file(&dir.join("location_frequency.csv"), &freq_csv, &mut files)?;
    let freq_svg = dir.join("location_frequency.svg");
    let locs: Vec<String> = (1..=n_locations).map(|i| i.to_string()).collect();
    grouped_bars(&freq_svg, "plugging frequency per location", "frequency", &locs, &freq_series)?;
    files.push(freq_svg);

    // which structures were chosen
    let mut sig_csv = String::from("domain,location,signature,count\n");
    let widths = trunk_info.as_ref().map(|t| t.widths.clone());
    let dist = widths.as_ref().and_then(|w| structure_stats(&records, w)).transpose()?;
    if let Some(d) = &dist {
        for dom in &d.domains {
            for (i, hist) in dom.per_location.iter().enumerate() {
                for (sig, count) in hist {
                    let _ = writeln!(sig_csv, "{},{},\"{sig}\",{count}", dom.domain, i + 1);
                }
            }
        }
        let _ = writeln!(table, "\nstructure cost by complexity rank:");
        for dom in &d.domains {
            let _ = writeln!(
                table,
                "  {:<20} rank {}  mean structure params {:.1}",
                dom.domain, dom.complexity_rank, dom.mean_param_count
            );
        }
        let _ = writeln!(table, "  spearman       {}", fmt_opt(d.spearman, 3));
        let mut by_rank: Vec<_> = d.domains.iter().collect();
        by_rank.sort_by_key(|x| x.complexity_rank);
        let svg = dir.join("structure_cost.svg");
        grouped_bars(
            &svg,
            "mean structure parameters by domain (ascending complexity)",
            "parameters",
            &by_rank.iter().map(|x| x.domain.clone()).collect::<Vec<_>>(),
            &[("mean params".to_string(), by_rank.iter().map(|x| x.mean_param_count).collect())],
        )?;
        files.push(svg);
    } else {
        for r in &records {
            for run in &r.runs {
                for (i, sig) in run.signatures.iter().enumerate() {
                    let _ = writeln!(sig_csv, "{},{},\"{sig}\",1", r.domain, i + 1);
                }
            }
        }
    }
    write_file(&dir.join("structures.csv"), &sig_csv, &mut files)?;

    if let Some(compare) = load_compare(out)? {
        let rows = summarize_strategies(&compare);
        write_strategy_outputs(&dir, &rows, &mut table, &mut files)?;
    }
    write_file(&dir.join("table.txt"), &table, &mut files)?;
    Ok(ReportOutput { table, files, score })
}

fn write_strategy_outputs(dir: &Path, rows: &[StrategySummary], table: &mut String, files: &mut Vec<PathBuf>) -> Result<()> {
    let _ = writeln!(table, "\n{:<20} {:<10} {:>5} {:>8} {:>8} {:>11}", "domain", "strategy", "n", "acc", "std", "ada.param%");
    let mut csv = String::from("domain,strategy,count,mean_accuracy,std_accuracy,adapter_params_percent,mean_flops\n");
    for r in rows {
        let _ = writeln!(
            table,
            "{:<20} {:<10} {:>5} {:>8.4} {:>8.4} {:>11.2}",
            r.domain,
            r.strategy.name(),
            r.count,
            r.mean_accuracy,
            r.std_accuracy,
            r.mean_adapter_params_percent
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.domain,
            r.strategy.name(),
            r.count,
            r.mean_accuracy,
            r.std_accuracy,
            r.mean_adapter_params_percent,
            r.mean_flops
        );
    }
    write_file(&dir.join("strategies.csv"), &csv, files)?;
    let mut domains: Vec<String> = rows.iter().map(|r| r.domain.clone()).collect();
    domains.dedup();
    let series: Vec<(String, Vec<f64>)> = crate::commands::STRATEGY_ORDER
        .iter()
        .map(|&k| {
            let values = domains
                .iter()
                .map(|d| rows.iter().find(|r| &r.domain == d && r.strategy == k).map_or(f64::NAN, |r| r.mean_accuracy))
                .collect();
            (k.name().to_string(), values)
        })
        .collect();
    let svg = dir.join("strategies.svg");
    grouped_bars(&svg, "test accuracy by plugging strategy", "accuracy", &domains, &series)?;
    files.push(svg);
    Ok(())
}
