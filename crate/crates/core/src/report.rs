//! Markdown report collated from a run directory. Pure over the directory
//! contents: no timestamps or wall times, so reruns produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::landmarks::ROLES;
use crate::pipeline::{
    read_json, AnalysisSummary, ClusterSummary, EvalSummary, RunConfig, SweepRow, TrainSummary, TweakSummary, ATTRIBUTES,
    CONFIG_FILE,
};
use crate::error::Result;

pub const REPORT_FILE: &str = "report.md";

fn absent(out: &mut String, what: &str, command: &str) {
    let _ = writeln!(out, "_Absent: {what} not found; run `tcnn {command}`._\n");
}

fn load<S: for<'de> serde::Deserialize<'de>>(run: &Path, rel: &str) -> Option<S> {
    read_json(run, rel).ok()
}

fn image(out: &mut String, run: &Path, rel: &str, alt: &str) {
    if run.join(rel).exists() {
        let _ = writeln!(out, "![{alt}]({rel})\n");
    }
}

fn section_config(out: &mut String, run: &Path) {
    out.push_str("## Configuration\n\n");
    match fs::read_to_string(run.join(CONFIG_FILE)).ok().and_then(|t| RunConfig::from_toml(&t).ok()) {
        Some(cfg) => {
            let data = match &cfg.data.annotations {
                Some(a) => format!("annotation file `{}`", a.display()),
                None => format!("synthetic, {} faces in {} pose modes (jitter {})", cfg.synth.count, cfg.synth.modes, cfg.synth.jitter),
            };
            let _ = writeln!(out, "- seed: {}\n- data: {data}\n- validation fraction: {:.4}", cfg.seed, cfg.data.validation_fraction);
            let _ = writeln!(
                out,
                "- vanilla training: at most {} epochs, batch {}, patience {}, learning rate {}",
                cfg.train.epochs, cfg.train.batch_size, cfg.train.patience, cfg.train.learning_rate
            );
            let _ = writeln!(out, "- routing: K = {} on `{}`; analysis K = {}", cfg.cluster.k, cfg.cluster.tap, cfg.analysis.k);
            let aug = if cfg.tweak.augment { format!("augmentation to {} per cluster", cfg.tweak.augment_target) } else { "no augmentation".into() };
            let _ = writeln!(
                out,
                "- tweaking: at most {} epochs, patience {}, learning rate x{}, {aug}\n",
                cfg.tweak.epochs, cfg.tweak.patience, cfg.tweak.learning_rate_factor
            );
        }
        None => absent(out, "run configuration", "train"),
    }
}

fn section_train(out: &mut String, run: &Path) {
    out.push_str("## Vanilla network\n\n");
    match load::<TrainSummary>(run, "model/summary.json") {
        Some(s) => {
            let _ = writeln!(out, "| quantity | value |\n|---|---|");
            let _ = writeln!(out, "| training samples | {} |", s.train_samples);
            let _ = writeln!(out, "| validation samples | {} |", s.validation_samples);
            let _ = writeln!(out, "| parameters | {} |", s.parameters);
            let _ = writeln!(out, "| epochs run | {} |", s.epochs);
            let _ = writeln!(out, "| best epoch | {} |", s.best_epoch);
            let _ = writeln!(out, "| best validation loss | {:.6} |", s.best_val_loss);
            let _ = writeln!(out, "| validation error (% inter-ocular) | {:.3} |\n", s.val_error);
        }
        None => absent(out, "vanilla model", "train"),
    }
}

fn section_cluster(out: &mut String, run: &Path) {
    out.push_str("## Routing clusters\n\n");
    match load::<ClusterSummary>(run, "cluster/summary.json") {
        Some(s) => {
            let sizes: Vec<String> = s.sizes.iter().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "K = {} on `{}`, {} EM iterations, final log-likelihood {:.4}.\n\nCluster sizes: {}.\n",
                s.k,
                s.tap,
                s.em_iterations,
                s.log_likelihood,
                sizes.join(", ")
            );
        }
        None => absent(out, "router", "cluster"),
    }
}

fn section_analysis(out: &mut String, run: &Path) {
    out.push_str("## Cluster statistics per layer\n\n");
    let Some(a) = load::<AnalysisSummary>(run, "analysis/summary.json") else {
        absent(out, "cluster analysis", "analyze");
        return;
    };
    let _ = writeln!(out, "K = {} clusters of the training split at each tap.\n", a.k);
    out.push_str("### Cluster sizes\n\n| tap | median ± SD |\n|---|---|\n");
    for l in &a.layers {
        let _ = writeln!(out, "| {} | {:.1} ± {:.1} |", l.tap, l.sizes.median, l.sizes.sd);
    }
    out.push_str("\n### Landmark variance along the principal axis\n\n");
    out.push_str("Mean over clusters, box-normalized units (× 10⁻³), ± standard error.\n\n| tap |");
    let m = a.layers.first().map_or(0, |l| l.mu_p.len());
    for r in ROLES.iter().take(m) {
        let _ = write!(out, " {r} |");
    }
    out.push_str(" mean |\n|---|");
    out.push_str(&"---|".repeat(m + 1));
    out.push('\n');
    for l in &a.layers {
        let _ = write!(out, "| {} |", l.tap);
        for (mu, se) in l.mu_p.iter().zip(&l.se_p) {
            let _ = write!(out, " {:.3} ± {:.3} |", mu * 1e3, se * 1e3);
        }
        let _ = writeln!(out, " {:.3} |", l.mean_landmark_variance() * 1e3);
    }
    out.push('\n');
    image(out, run, "analysis/landmark_variance.png", "landmark variance per tap");
    if a.layers.iter().all(|l| l.mu_a.is_some()) && !a.layers.is_empty() {
        out.push_str("### Attribute variance\n\n| tap |");
        for name in ATTRIBUTES {
            let _ = write!(out, " {name} |");
        }
        out.push_str("\n|---|---|---|---|\n");
        for l in &a.layers {
            let _ = write!(out, "| {} |", l.tap);
            for (mu, se) in l.mu_a.iter().flatten().zip(l.se_a.iter().flatten()) {
                let _ = write!(out, " {mu:.4} ± {se:.4} |");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out.push_str("### Cluster mean images\n\nClusters ordered by size, largest first.\n\n");
    for l in &a.layers {
        image(out, run, &format!("analysis/cluster_means_{}.png", l.tap), &format!("cluster means at {}", l.tap));
    }
}

fn section_tweak(out: &mut String, run: &Path) {
    out.push_str("## Tweaked heads\n\n");
    let Some(t) = load::<TweakSummary>(run, "tweak/summary.json") else {
        absent(out, "tweaked model", "tweak");
        return;
    };
    let _ = writeln!(out, "Trunk byte-identical to the vanilla model: {}.\n", if t.trunk_identical { "yes" } else { "no" });
    out.push_str("| cluster | members | training samples | validation | epochs | best epoch | val loss start | val loss best | attempted | accepted | rejection |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for h in &t.heads {
        let (epochs, best, start, fin) = match &h.log {
            Some(l) => (l.last_epoch().to_string(), l.best_epoch.to_string(), format!("{:.5}", l.records[0].val_loss), format!("{:.5}", l.best_val_loss)),
            None => ("vanilla".into(), "-".into(), "-".into(), "-".into()),
        };
        let aug = h.augment.unwrap_or_default();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {epochs} | {best} | {start} | {fin} | {} | {} | {:.3} |",
            h.cluster,
            h.members,
            h.train_samples,
            h.validation_samples,
            aug.attempted,
            aug.accepted,
            aug.rejection_rate()
        );
    }
    out.push('\n');
    if t.probes.is_empty() {
        out.push_str("Rejection probe disabled.\n\n");
    } else {
        out.push_str("### Augmentation rejection\n\nWarped candidates whose source image is from the same cluster versus from another cluster.\n\n");
        out.push_str("| cluster | same attempted | same rejected | same rate | cross attempted | cross rejected | cross rate |\n|---|---|---|---|---|---|---|\n");
        for p in &t.probes {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.3} | {} | {} | {:.3} |",
                p.cluster,
                p.same.attempted,
                p.same.rejected,
                p.same.rejection_rate(),
                p.cross.attempted,
                p.cross.rejected,
                p.cross.rejection_rate()
            );
        }
        let _ = writeln!(out, "\nPooled: same-cluster {:.3}, cross-cluster {:.3}.\n", t.same_rejection, t.cross_rejection);
    }
}

fn section_eval(out: &mut String, run: &Path) {
    out.push_str("## Evaluation on the validation split\n\n");
    let Some(e) = load::<EvalSummary>(run, "eval/summary.json") else {
        absent(out, "evaluation", "eval");
        return;
    };
    out.push_str("Error: mean landmark distance in % of the inter-ocular distance.\n\n| model | samples | failures | mean | median |\n|---|---|---|---|---|\n");
    let mut row = |name: &str, s: &crate::analysis::ErrorSummary| {
        let _ = writeln!(out, "| {name} | {} | {} | {:.3} | {:.3} |", s.count, s.failures, s.mean, s.median);
    };
    row("vanilla", &e.vanilla);
    row("tweaked", &e.tweaked);
    if let Some(m) = &e.tweaked_mirror {
        row("tweaked, mirror-averaged", m);
    }
    let _ = writeln!(
        out,
        "\nTweaked error at most vanilla in {} of {} clusters. Mirror-averaged samples worse than both orientations: {}.\n",
        e.clusters_not_worse,
        e.clusters.len(),
        e.mirror_violations
    );
    out.push_str("| cluster | samples | vanilla | tweaked |\n|---|---|---|---|\n");
    for c in &e.clusters {
        let _ = writeln!(out, "| {} | {} | {:.3} | {:.3} |", c.cluster, c.samples, c.vanilla, c.tweaked);
    }
    out.push('\n');
    image(out, run, "eval/per_cluster.png", "per-cluster error, vanilla (blue) and tweaked (red)");
    out.push_str("Cumulative error curves (blue vanilla, red tweaked, green mirror-averaged); values in `eval/curves.tsv`.\n\n");
    image(out, run, "eval/curves.png", "cumulative error curves");
}

fn section_sweep(out: &mut String, run: &Path) {
    out.push_str("## Number of clusters\n\n");
    let Some(rows) = load::<Vec<SweepRow>>(run, "sweepk/summary.json") else {
        absent(out, "K sweep", "sweepk");
        return;
    };
    out.push_str("| K | mean error | total head epochs | epochs per head | vanilla fallbacks |\n|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(out, "| {} | {:.3} | {} | {:.1} | {} |", r.k, r.mean_error, r.total_epochs, r.mean_epochs_per_head, r.fallback_heads);
    }
    out.push('\n');
    image(out, run, "sweepk/sweepk.png", "mean error against K");
}

/// Renders the report for `run` without writing it.
pub fn render_report(run: &Path) -> String {
    let mut out = String::from("# TCNN run report\n\n");
    section_config(&mut out, run);
    section_train(&mut out, run);
    section_cluster(&mut out, run);
    section_analysis(&mut out, run);
    section_tweak(&mut out, run);
    section_eval(&mut out, run);
    section_sweep(&mut out, run);
    out
}

/// Writes `report.md` into `run` and returns its contents.
pub fn emit_report(run: &Path) -> Result<String> {
    fs::create_dir_all(run)?;
    let text = render_report(run);
    fs::write(run.join(REPORT_FILE), &text)?;
    Ok(text)
}
