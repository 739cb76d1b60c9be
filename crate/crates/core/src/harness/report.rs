//! CSV, structured-text and plot-data emitters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ablation::{RhoTrace, SoftHardRow, StabilityRow};
use super::pipeline::RunReport;
use crate::error::{Error, Result};
use crate::optimizer::TRACE_CSV_HEADER;
use crate::sparsity::SparsityBudget;

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

pub fn budget_csv(budget: &SparsityBudget) -> String {
    let mut out = String::from("block,kappa_attn_h,kappa_attn_c,kappa_mlp_c\n");
    for (l, b) in budget.blocks.iter().enumerate() {
        let _ = writeln!(out, "{l},{},{},{}", b.kappa_attn_h, b.kappa_attn_c, b.kappa_mlp_c);
    }
    out
}

/// `key = value` lines, one block section per transformer block.
pub fn summary_text(r: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "seed = {}", r.seed);
    let _ = writeln!(out, "target_sparsity = {}", r.target_sparsity);
    let _ = writeln!(out, "realized_sparsity = {:.6}", r.realized_sparsity);
    let _ = writeln!(out, "baseline_accuracy = {:.6}", r.baseline_accuracy);
    let _ = writeln!(out, "hard_prune_accuracy = {:.6}", r.hard_prune_accuracy);
    let _ = writeln!(out, "pruned_accuracy = {:.6}", r.pruned_accuracy);
    let _ = writeln!(out, "params_before = {}", r.params_before);
    let _ = writeln!(out, "params_after = {}", r.params_after);
    let _ = writeln!(out, "flops_before = {}", r.flops_before);
    let _ = writeln!(out, "flops_after = {}", r.flops_after);
    let _ = writeln!(
        out,
        "flops_reduction = {:.6}",
        1.0 - r.flops_after as f64 / r.flops_before as f64
    );
    let _ = writeln!(out, "constraints_verified = {}", r.constraints_verified);
    let n = &r.normalization;
    let _ = writeln!(out, "normalization_mean = [{}]", join(&n.mean, ", "));
    let _ = writeln!(out, "normalization_std = [{}]", join(&n.std, ", "));
    let _ = writeln!(out, "wall_clock_seconds = {:.3}", r.wall_clock_seconds);
    for b in &r.blocks {
        let _ = writeln!(out, "\n[block.{}]", b.block);
        let _ = writeln!(out, "kappa_attn_h = {}", b.kappa_attn_h);
        let _ = writeln!(out, "kappa_attn_c = {}", b.kappa_attn_c);
        let _ = writeln!(out, "kappa_mlp_c = {}", b.kappa_mlp_c);
        let _ = writeln!(out, "kept_heads = [{}]", join(&b.kept_heads, ", "));
        let _ = writeln!(out, "head_dims = [{}]", join(&b.head_dims, ", "));
        let _ = writeln!(out, "scores = [{}]", join(&b.scores, ", "));
        let _ = writeln!(out, "params = {} -> {}", b.params_before, b.params_after);
        let _ = writeln!(out, "sparsity = {:.6}", b.sparsity);
    }
    out
}

pub const RUN_CSV_HEADER: &str = "seed,target_sparsity,realized_sparsity,baseline_accuracy,hard_prune_accuracy,pruned_accuracy,params_before,params_after,flops_before,flops_after";

pub fn run_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(RUN_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.target_sparsity,
            r.realized_sparsity,
            r.baseline_accuracy,
            r.hard_prune_accuracy,
            r.pruned_accuracy,
            r.params_before,
            r.params_after,
            r.flops_before,
            r.flops_after
        );
    }
    out
}

pub fn block_csv(r: &RunReport) -> String {
    let mut out =
        String::from("block,kappa_attn_h,kappa_attn_c,kappa_mlp_c,kept_heads,params_before,params_after,sparsity\n");
    for b in &r.blocks {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            b.block,
            b.kappa_attn_h,
            b.kappa_attn_c,
            b.kappa_mlp_c,
            join(&b.kept_heads, ";"),
            b.params_before,
            b.params_after,
            b.sparsity
        );
    }
    out
}

pub fn soft_hard_csv(rows: &[SoftHardRow]) -> String {
    let mut out = String::from("method,sparsity,seed,accuracy,params\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.method.name(),
            r.sparsity,
            r.seed,
            r.accuracy,
            r.params
        );
    }
    out
}

pub fn stability_csv(rows: &[StabilityRow]) -> String {
    let mut out = String::from("block,batch_a,batch_b,kendall_tau\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.block, r.batch_a, r.batch_b, r.kendall_tau);
    }
    out
}

/// All ρ traces in one table, the ρ value leading each row.
pub fn rho_csv(traces: &[RhoTrace]) -> String {
    let mut out = format!("rho,{TRACE_CSV_HEADER}\n");
    for t in traces {
        for line in t.trace.to_csv().lines().skip(1) {
            let _ = writeln!(out, "{},{line}", t.rho);
        }
    }
    out
}

/// Whitespace-separated columns with a `#` header: epoch, then loss and
/// masked norm per ρ.
pub fn rho_plot_data(traces: &[RhoTrace]) -> String {
    let mut out = String::from("# epoch");
    for t in traces {
        let _ = write!(out, " loss_rho={} masked_norm_rho={}", t.rho, t.rho);
    }
    out.push('\n');
    let epochs = traces.iter().map(|t| t.trace.records.len()).max().unwrap_or(0);
    for e in 0..epochs {
        let _ = write!(out, "{}", e + 1);
        for t in traces {
            match t.trace.records.get(e) {
                Some(r) => {
                    let _ = write!(out, " {} {}", r.loss, r.masked_norm);
                }
                None => out.push_str(" nan nan"),
            }
        }
        out.push('\n');
    }
    out
}

/// Mean accuracy per (method, sparsity) over seeds, for plotting.
pub fn soft_hard_plot_data(rows: &[SoftHardRow]) -> String {
    let mut levels: Vec<f64> = rows.iter().map(|r| r.sparsity).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut out = String::from("# sparsity soft_mean_accuracy hard_mean_accuracy\n");
    for s in levels {
        let mean = |m: super::ablation::Method| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.sparsity == s && r.method == m)
                .map(|r| r.accuracy)
                .collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        let _ = writeln!(
            out,
            "{s} {} {}",
            mean(super::ablation::Method::Soft),
            mean(super::ablation::Method::Hard)
        );
    }
    out
}

fn put(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text).map_err(Error::from)
}

/// Writes `report.json`, `report.txt`, `run.csv`, `blocks.csv`, `trace.csv`
/// and `trace.dat` into `dir`.
pub fn write_run_artifacts(dir: &Path, r: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(r).map_err(|e| Error::Format(e.to_string()))?;
    put(dir, "report.json", &json)?;
    put(dir, "report.txt", &summary_text(r))?;
    put(dir, "run.csv", &run_csv(std::slice::from_ref(r)))?;
    put(dir, "blocks.csv", &block_csv(r))?;
    put(dir, "trace.csv", &r.trace.to_csv())?;
    put(
        dir,
        "trace.dat",
        &rho_plot_data(&[RhoTrace {
            rho: f64::NAN,
            trace: r.trace.clone(),
        }])
        .replace("rho=NaN", "run"),
    )?;
    Ok(())
}

pub fn read_run_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_soft_hard(dir: &Path, rows: &[SoftHardRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    put(dir, "soft_hard.csv", &soft_hard_csv(rows))?;
    put(dir, "soft_hard.dat", &soft_hard_plot_data(rows))
}

pub fn write_stability(dir: &Path, rows: &[StabilityRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    put(dir, "batch_stability.csv", &stability_csv(rows))
}

pub fn write_rho(dir: &Path, traces: &[RhoTrace]) -> Result<()> {
    fs::create_dir_all(dir)?;
    put(dir, "rho_traces.csv", &rho_csv(traces))?;
    put(dir, "rho_traces.dat", &rho_plot_data(traces))
}

/// Aggregates every `report.json` found in `dir` and its immediate
/// subdirectories: writes `summary.csv` and returns the text summaries.
pub fn report(dir: &Path) -> Result<String> {
    let mut paths = Vec::new();
    let direct = dir.join("report.json");
    if direct.is_file() {
        paths.push(direct);
    }
    let mut subdirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").is_file())
        .collect();
    subdirs.sort();
    paths.extend(subdirs.into_iter().map(|p| p.join("report.json")));
    if paths.is_empty() {
        return Err(Error::Data(format!("no report.json under {}", dir.display())));
    }
    let reports = paths.iter().map(|p| read_run_report(p)).collect::<Result<Vec<_>>>()?;
    put(dir, "summary.csv", &run_csv(&reports))?;
    let mut out = String::new();
    for (p, r) in paths.iter().zip(&reports) {
        let _ = writeln!(out, "# {}", p.display());
        out.push_str(&summary_text(r));
        out.push('\n');
    }
    Ok(out)
}
