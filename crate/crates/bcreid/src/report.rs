//! Markdown reports merging evaluated runs.
//!
//! Runs with the same label (mode plus flags) are averaged over their seeds
//! and form one row; rows keep the order in which labels first appear.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::pipeline::{dataset_name, load_evaluation, load_meta, Evaluation, RunMeta};

struct Group {
    label: String,
    meta: RunMeta,
    seeds: Vec<u64>,
    evals: Vec<Evaluation>,
}

impl Group {
    fn mean(&self, f: impl Fn(&Evaluation) -> f64) -> f64 {
        self.evals.iter().map(f).sum::<f64>() / self.evals.len() as f64
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn check(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        ""
    }
}

/// Builds the report for `runs`, which must share one benchmark.
pub fn report(runs: &[PathBuf]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let mut groups: Vec<Group> = Vec::new();
    let mut digest: Option<(String, PathBuf)> = None;
    for run in runs {
        let meta = load_meta(run)?;
        let ev = load_evaluation(run)?;
        match &digest {
            None => digest = Some((meta.benchmark_digest.clone(), run.clone())),
            Some((d, first)) if *d != meta.benchmark_digest => {
                return Err(Error::Config(format!(
                    "runs use different benchmarks: {} ({}) and {} ({})",
                    first.display(),
                    d,
                    run.display(),
                    meta.benchmark_digest
                )));
            }
            Some(_) => {}
        }
        let label = meta.label();
        match groups.iter_mut().find(|g| g.label == label) {
            Some(g) => {
                g.seeds.push(meta.seed);
                g.evals.push(ev);
            }
            None => groups.push(Group { label, seeds: vec![meta.seed], meta, evals: vec![ev] }),
        }
    }
    let tasks = groups[0].evals[0].per_dataset.len();
    let (digest, _) = digest.expect("at least one run");

    let mut s = String::new();
    writeln!(s, "# Backward-compatible retrieval report\n").unwrap();
    writeln!(s, "Benchmark digest `{digest}`, {tasks} tasks. Values are percentages averaged over seeds.").unwrap();
    writeln!(s, "Queries are embedded by the final model; each gallery keeps the features of the model trained on its task.\n").unwrap();

    writeln!(s, "## Ablation\n").unwrap();
    let mut header = String::from("| Method | Seeds | CMCL | PCL | CAC |");
    let mut rule = String::from("|---|---|:-:|:-:|:-:|");
    for t in 1..=tasks {
        write!(header, " {n} mAP | {n} R-1 |", n = dataset_name(t)).unwrap();
        rule.push_str("---:|---:|");
    }
    header.push_str(" Average mAP | Average R-1 |");
    rule.push_str("---:|---:|");
    writeln!(s, "{header}\n{rule}").unwrap();
    for g in &groups {
        let f = &g.meta.flags;
        let cac = match f.cac {
            crate::config::Cac::Off => "",
            crate::config::Cac::Multiply => "✓ (M)",
            crate::config::Cac::Average => "✓ (A)",
        };
        let joint = g.meta.joint;
        write!(s, "| {} | {} | {} | {} | {} |", g.label, g.seeds.len(), check(f.cmcl && !joint), check(f.pcl && !joint), cac)
            .unwrap();
        push_dataset_cells(&mut s, g, tasks);
        writeln!(s).unwrap();
    }

    writeln!(s, "\n## Per-dataset comparison\n").unwrap();
    let mut header = String::from("| Method |");
    let mut rule = String::from("|---|");
    for t in 1..=tasks {
        write!(header, " {n} mAP | {n} R-1 |", n = dataset_name(t)).unwrap();
        rule.push_str("---:|---:|");
    }
    header.push_str(" Average mAP | Average R-1 | Backfilled avg mAP |");
    rule.push_str("---:|---:|---:|");
    writeln!(s, "{header}\n{rule}").unwrap();
    for g in &groups {
        write!(s, "| {} |", g.label).unwrap();
        push_dataset_cells(&mut s, g, tasks);
        writeln!(s, " {} |", pct(g.mean(|e| e.backfilled_average_map))).unwrap();
    }

    writeln!(s, "\n## Unified gallery\n").unwrap();
    writeln!(s, "| Method | mAP | R-1 |\n|---|---:|---:|").unwrap();
    for g in &groups {
        writeln!(s, "| {} | {} | {} |", g.label, pct(g.mean(|e| e.unified.map)), pct(g.mean(|e| e.unified.rank1)))
            .unwrap();
    }
    Ok(s)
}

fn push_dataset_cells(s: &mut String, g: &Group, tasks: usize) {
    for j in 0..tasks {
        write!(s, " {} | {} |", pct(g.mean(|e| e.per_dataset[j].map)), pct(g.mean(|e| e.per_dataset[j].rank1))).unwrap();
    }
    write!(s, " {} | {} |", pct(g.mean(|e| e.average_map)), pct(g.mean(|e| e.average_rank1))).unwrap();
}
