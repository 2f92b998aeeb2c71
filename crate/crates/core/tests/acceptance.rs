//! Acceptance harness: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Set `TCNN_ACCEPTANCE_DIR` to keep the pipeline run directories.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::Outcome;
use tcnn::pipeline::{self, RunConfig};
use tcnn::report;

const SEED: u64 = 7;
const SUITE_BUDGET: Duration = Duration::from_secs(60);
const TRAIN_BUDGET: Duration = Duration::from_secs(10 * 60);
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
const VANILLA_ERROR_LIMIT: f64 = 10.0;
const VARIANCE_DROP: f64 = 0.20;
const CLUSTERS_NOT_WORSE: f64 = 0.60;
const HEAD_PATIENCE: usize = 50;

struct Verdict {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn suite(id: &'static str, name: &'static str, min_instances: usize, run: impl FnOnce() -> Outcome) -> Verdict {
    let t = Instant::now();
    let o = run();
    let elapsed = t.elapsed();
    let mut detail = format!(
        "{} instances, {} probes ({} excluded), worst {:.3e}, {:.1} s",
        o.instances,
        o.probes,
        o.excluded,
        o.worst,
        elapsed.as_secs_f64()
    );
    for f in o.failures.iter().take(5) {
        detail.push_str(&format!("\n      {f}"));
    }
    if o.failures.len() > 5 {
        detail.push_str(&format!("\n      ... {} more", o.failures.len() - 5));
    }
    let pass = o.passed() && o.instances >= min_instances && elapsed < SUITE_BUDGET;
    Verdict { id, name, pass, detail }
}

fn run_root() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("TCNN_ACCEPTANCE_DIR") {
        Some(d) => {
            let p = PathBuf::from(d);
            let _ = std::fs::remove_dir_all(&p);
            (p, None)
        }
        None => {
            let t = tempfile::tempdir().expect("temporary directory");
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn full_config() -> RunConfig {
    let mut cfg = RunConfig { seed: SEED, ..RunConfig::default() };
    cfg.synth.count = 4400;
    cfg.synth.modes = 3;
    cfg.tweak.patience = HEAD_PATIENCE;
    cfg.cluster.k = 8;
    cfg.tweak.augment = true;
    cfg.sweep.ks = vec![1, 4, 8];
    cfg
}

/// Small configuration for the repeated-run comparison.
fn reduced_config() -> RunConfig {
    let mut cfg = RunConfig { seed: SEED + 1, ..RunConfig::default() };
    cfg.synth.count = 660;
    cfg.train.epochs = 3;
    cfg.tweak.epochs = 20;
    cfg.tweak.augment_target = 120;
    cfg.tweak.rejection_probe = 40;
    cfg.sweep.ks = vec![1, 2];
    cfg
}

fn run_all(cfg: &RunConfig, run: &Path) -> tcnn::error::Result<String> {
    pipeline::stage_train(cfg, run)?;
    pipeline::stage_cluster(cfg, run)?;
    pipeline::stage_analyze(cfg, run)?;
    pipeline::stage_tweak(cfg, run)?;
    pipeline::stage_eval(cfg, run)?;
    pipeline::stage_sweepk(cfg, run)?;
    report::emit_report(run)
}

struct FullRun {
    verdicts: Vec<Verdict>,
    trunk_identical: Option<bool>,
}

fn fail(id: &'static str, name: &'static str, e: impl std::fmt::Display) -> Verdict {
    Verdict { id, name, pass: false, detail: format!("pipeline error: {e}") }
}

fn full_pipeline(run: &Path) -> FullRun {
    let cfg = full_config();
    let mut verdicts = Vec::new();
    let total = Instant::now();
    let t = Instant::now();
    let train = match pipeline::stage_train(&cfg, run) {
        Ok(s) => s,
        Err(e) => {
            for (id, name) in [("5a", "vanilla training"), ("5b", "feature clusters"), ("5c", "tweaked heads"), ("5d", "number of clusters"), ("5", "pipeline runtime"), ("6", "augmentation rejection"), ("8", "early stopping")] {
                verdicts.push(fail(id, name, &e));
            }
            return FullRun { verdicts, trunk_identical: None };
        }
    };
    let train_time = t.elapsed();
    verdicts.push(Verdict {
        id: "5a",
        name: "vanilla training",
        pass: train.val_error < VANILLA_ERROR_LIMIT && train_time < TRAIN_BUDGET,
        detail: format!(
            "{} train / {} validation, validation error {:.3}% (limit {VANILLA_ERROR_LIMIT}%), {} epochs (best {}), {:.0} s (limit {} s)",
            train.train_samples,
            train.validation_samples,
            train.val_error,
            train.epochs,
            train.best_epoch,
            train_time.as_secs_f64(),
            TRAIN_BUDGET.as_secs()
        ),
    });

    let analysis = pipeline::stage_cluster(&cfg, run).and_then(|_| pipeline::stage_analyze(&cfg, run));
    verdicts.push(match &analysis {
        Ok(a) => match (a.layer("input"), a.layer("FC5")) {
            (Some(i), Some(f)) => {
                let (vi, vf) = (i.mean_landmark_variance(), f.mean_landmark_variance());
                Verdict {
                    id: "5b",
                    name: "feature clusters",
                    pass: vf <= (1.0 - VARIANCE_DROP) * vi,
                    detail: format!("mean principal-axis variance input {vi:.6e}, FC5 {vf:.6e}, ratio {:.3} (limit {:.2})", vf / vi, 1.0 - VARIANCE_DROP),
                }
            }
            _ => fail("5b", "feature clusters", "input or FC5 tap missing from analysis"),
        },
        Err(e) => fail("5b", "feature clusters", e),
    });

    let tweak = pipeline::stage_tweak(&cfg, run);
    let eval = tweak.as_ref().map_err(|e| e.to_string()).and_then(|_| pipeline::stage_eval(&cfg, run).map_err(|e| e.to_string()));
    verdicts.push(match &eval {
        Ok(e) => {
            let n = e.clusters.len();
            let share = e.clusters_not_worse as f64 / n.max(1) as f64;
            Verdict {
                id: "5c",
                name: "tweaked heads",
                pass: n > 0 && share >= CLUSTERS_NOT_WORSE && e.tweaked.mean < e.vanilla.mean,
                detail: format!(
                    "not worse on {}/{} clusters ({:.0}%, limit {:.0}%), mean error vanilla {:.3}% tweaked {:.3}%{}",
                    e.clusters_not_worse,
                    n,
                    share * 100.0,
                    CLUSTERS_NOT_WORSE * 100.0,
                    e.vanilla.mean,
                    e.tweaked.mean,
                    e.tweaked_mirror.as_ref().map(|m| format!(", mirror-averaged {:.3}%", m.mean)).unwrap_or_default()
                ),
            }
        }
        Err(e) => fail("5c", "tweaked heads", e),
    });

    let sweep = pipeline::stage_sweepk(&cfg, run);
    verdicts.push(match &sweep {
        Ok(rows) => {
            let base = rows.iter().find(|r| r.k == 1).map(|r| r.mean_error);
            let best = rows.iter().filter(|r| r.k > 1).min_by(|a, b| a.mean_error.total_cmp(&b.mean_error));
            let listing: Vec<String> = rows.iter().map(|r| format!("K={} {:.3}%", r.k, r.mean_error)).collect();
            Verdict {
                id: "5d",
                name: "number of clusters",
                pass: matches!((base, best), (Some(b), Some(r)) if r.mean_error < b),
                detail: listing.join(", "),
            }
        }
        Err(e) => fail("5d", "number of clusters", e),
    });
    let _ = report::emit_report(run);
    let elapsed = total.elapsed();
    verdicts.push(Verdict {
        id: "5",
        name: "pipeline runtime",
        pass: elapsed < PIPELINE_BUDGET,
        detail: format!("{:.0} s (limit {} s)", elapsed.as_secs_f64(), PIPELINE_BUDGET.as_secs()),
    });

    let mut trunk_identical = None;
    match &tweak {
        Ok(t) => {
            trunk_identical = Some(t.trunk_identical);
            verdicts.push(Verdict {
                id: "6",
                name: "augmentation rejection",
                pass: !t.probes.is_empty() && t.same_rejection < t.cross_rejection,
                detail: format!("same-cluster {:.3}, cross-cluster {:.3} over {} clusters", t.same_rejection, t.cross_rejection, t.probes.len()),
            });
            let mut worst = 0usize;
            let mut trained = 0usize;
            for h in &t.heads {
                if let Some(l) = &h.log {
                    trained += 1;
                    worst = worst.max(l.last_epoch().saturating_sub(l.best_epoch));
                }
            }
            verdicts.push(Verdict {
                id: "8",
                name: "early stopping",
                pass: trained > 0 && worst <= HEAD_PATIENCE,
                detail: format!("{trained} trained heads, largest gap between last and best epoch {worst} (limit {HEAD_PATIENCE})"),
            });
        }
        Err(e) => {
            verdicts.push(fail("6", "augmentation rejection", e));
            verdicts.push(fail("8", "early stopping", e));
        }
    }
    FullRun { verdicts, trunk_identical }
}

fn reproducibility(root: &Path, trunk_identical: Option<bool>) -> Verdict {
    let cfg = reduced_config();
    let a = run_all(&cfg, &root.join("repeat-a"));
    let b = run_all(&cfg, &root.join("repeat-b"));
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let same = a == b;
            let trunk = trunk_identical.unwrap_or(false);
            Verdict {
                id: "7",
                name: "frozen trunk and reproducibility",
                pass: same && trunk,
                detail: format!(
                    "trunk byte-identical after tweaking: {trunk}; two seeded runs ({} faces) give identical reports: {same} ({} bytes)",
                    cfg.synth.count,
                    a.len()
                ),
            }
        }
        (Err(e), _) | (_, Err(e)) => fail("7", "frozen trunk and reproducibility", e),
    }
}

fn main() -> ExitCode {
    let mut verdicts = vec![
        suite("1", "gradient suite", 100, || common::gradient_suite(30, 3, 6, SEED)),
        suite("2", "EM suite", 50, || {
            common::combine(vec![common::em_monotone(60, SEED), common::em_closed_form(20, SEED), common::em_oracle(40, SEED)])
        }),
        suite("3", "geometry suite", 1000, || {
            common::combine(vec![
                common::similarity_exact(1000, SEED),
                common::similarity_grid_oracle(40, SEED),
                common::similarity_equivariance(100, SEED),
                common::warp_properties(20, SEED),
            ])
        }),
        suite("4", "metric suite", 1000, || common::metric_suite(1000, SEED)),
    ];
    for v in &verdicts {
        print_verdict(v);
    }
    let (root, _guard) = run_root();
    let full = full_pipeline(&root.join("full"));
    for v in &full.verdicts {
        print_verdict(v);
    }
    let repro = reproducibility(&root, full.trunk_identical);
    print_verdict(&repro);
    verdicts.extend(full.verdicts);
    verdicts.push(repro);
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn print_verdict(v: &Verdict) {
    println!("{} criterion {:<3} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
}
