//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! The end-to-end criteria read real datasets from `$GREMDCL_DATA_DIR/<name>`
//! (a `linqs_text` directory or a `generic_json` directory holding
//! `graph.json`). Without data those lines print FAIL and do not change the
//! exit status unless `GREMDCL_ACCEPTANCE_STRICT=1`; any criterion that was
//! evaluated and failed always exits non-zero.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use gremdcl::graph::{DatasetFormat, Graph};
use gremdcl::pipeline::gradcheck::{fixture_config, objective_gradcheck};
use gremdcl::pipeline::{run_protocol, RunConfig, RunReport, SourceFormat};
use gremdcl::encoder::GlobalProp;

const LOSS_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const SV_TOL: f64 = 1e-6;
const RECON_TOL: f64 = 1e-8;
const SVD_ITERS: usize = 20;
const KL_TOL: f64 = 1e-12;
const CVAE_REDUCTION: f64 = 0.5;
const OWN_COS: f64 = 0.9;
const OTHER_COS: f64 = 0.5;
const CORA_ACC: f64 = 0.75;
const CITESEER_ACC: f64 = 0.63;
const ABLATION_GAP: f64 = 0.03;
const ABLATION_SPLITS: usize = 5;
const INVARIANCE_TOL: f64 = 1e-10;
const EMA_TOL: f64 = 1e-12;

enum Outcome {
    Pass(String),
    Fail(String),
    /// Could not be evaluated (input data absent).
    Missing(String),
}

struct Harness {
    failed: bool,
    missing: bool,
}

impl Harness {
    fn report(&mut self, id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let over = took > budget;
        let (status, detail) = match outcome {
            Outcome::Pass(d) if !over => ("PASS", d),
            Outcome::Pass(d) => ("FAIL", format!("{d}; over the {}s budget", budget.as_secs())),
            Outcome::Fail(d) => ("FAIL", d),
            Outcome::Missing(d) => {
                self.missing = true;
                println!("[{id}] FAIL {name}: not evaluated, {d}");
                return;
            }
        };
        if status == "FAIL" {
            self.failed = true;
        }
        println!("[{id}] {status} {name}: {detail} ({:.1}s)", took.as_secs_f64());
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Preset config for `name` pointed at the dataset under `$GREMDCL_DATA_DIR`.
fn dataset(name: &str) -> Result<(RunConfig, Graph), Outcome> {
    let Some(root) = std::env::var_os("GREMDCL_DATA_DIR") else {
        return Err(Outcome::Missing("GREMDCL_DATA_DIR is not set".into()));
    };
    let dir = Path::new(&root).join(name);
    let format = if dir.join("graph.json").exists() {
        DatasetFormat::GenericJson
    } else if dir.is_dir() {
        DatasetFormat::LinqsText
    } else {
        return Err(Outcome::Missing(format!("{} does not exist", dir.display())));
    };
    let mut cfg = RunConfig::from_file(&workspace_root().join("configs").join(format!("{name}.cfg")))
        .map_err(|e| Outcome::Fail(format!("preset: {e}")))?;
    cfg.dataset = dir.display().to_string();
    cfg.format = SourceFormat::File(format);
    let g = cfg.load_graph().map_err(|e| Outcome::Fail(format!("loading {}: {e}", dir.display())))?;
    Ok((cfg, g))
}

fn end_to_end(name: &str, threshold: f64) -> (Outcome, Option<(RunConfig, Graph, RunReport)>) {
    let (cfg, g) = match dataset(name) {
        Ok(v) => v,
        Err(o) => return (o, None),
    };
    match run_protocol(&g, &cfg) {
        Ok((report, _)) => {
            let s = report.summary;
            let detail = format!(
                "mean {:.4} ± {:.4} over {} splits (threshold {threshold}), {} epochs",
                s.mean,
                s.std,
                report.accuracies.len(),
                cfg.epochs
            );
            (verdict(s.mean >= threshold, detail), Some((cfg, g, report)))
        }
        Err(e) => (Outcome::Fail(format!("run failed: {e}")), None),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> ExitCode {
    // Invoked by `cargo test` with libtest flags; listing must stay silent.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut h = Harness {
        failed: false,
        missing: false,
    };
    let minutes = |m: u64| Duration::from_secs(60 * m);

    h.report(1, "loss-oracle equivalence", Duration::from_secs(10), || {
        let worst = loss_oracle_max_error(100);
        verdict(worst < LOSS_TOL, format!("max |library − brute force| {worst:.2e} over 100 fixtures (tol {LOSS_TOL:e})"))
    });

    h.report(2, "gradient correctness", Duration::from_secs(60), || {
        let cfg = fixture_config(GlobalProp::Attention);
        match objective_gradcheck(&cfg) {
            Ok(reports) => {
                let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
                verdict(worst < GRAD_TOL, format!("max relative error {worst:.2e} over {} parameters (tol {GRAD_TOL:e})", reports.len()))
            }
            Err(e) => Outcome::Fail(e.to_string()),
        }
    });

    h.report(3, "SVD correctness", Duration::from_secs(30), || {
        let (sv, recon) = svd_oracle_max_errors(20, SVD_ITERS);
        let (sv_default, _) = svd_oracle_max_errors(20, gremdcl::numkit::svd::DEFAULT_POWER_ITERS);
        verdict(
            sv < SV_TOL && recon < RECON_TOL,
            format!(
                "singular values {sv:.2e} (tol {SV_TOL:e}) with {SVD_ITERS} power iterations, {sv_default:.2e} with the default; full-rank reconstruction {recon:.2e} (tol {RECON_TOL:e})"
            ),
        )
    });

    h.report(4, "CVAE sanity", Duration::from_secs(60), || {
        let kl = kl_oracle_max_error(1000);
        let c = cvae_two_cluster_check();
        verdict(
            kl < KL_TOL && c.reduction >= CVAE_REDUCTION && c.own_min >= OWN_COS && c.other_max <= OTHER_COS,
            format!(
                "KL error {kl:.2e}; negative ELBO reduced {:.1}% over 200 steps; cosine to own prototype ≥ {:.4}, to the other ≤ {:.4}",
                100.0 * c.reduction,
                c.own_min,
                c.other_max
            ),
        )
    });

    let mut cora = None;
    h.report(5, "end-to-end Cora", minutes(30), || {
        let (o, run) = end_to_end("cora", CORA_ACC);
        cora = run;
        o
    });
    h.report(6, "end-to-end CiteSeer", minutes(30), || end_to_end("citeseer", CITESEER_ACC).0);

    h.report(7, "ablation direction", Duration::MAX, || {
        // The full model is the Cora run above; its first splits are exactly
        // what a separate five-split protocol with the same seeds would give.
        let Some((cfg, g, report)) = cora.as_ref() else {
            return match dataset("cora") {
                Err(o) => o,
                Ok(_) => Outcome::Fail("the full-model Cora run did not complete".into()),
            };
        };
        let full = mean(&report.accuracies[..ABLATION_SPLITS]);
        let mut parts = vec![format!("full {full:.4}")];
        let mut no_mdcl = f64::NAN;
        for (label, key) in [("w/o LA", "no_la"), ("w/o SVD", "no_svd"), ("w/o MDCL", "no_mdcl")] {
            let mut c = cfg.clone();
            c.num_splits = ABLATION_SPLITS;
            c.set(key, "true").expect("ablation flag");
            match run_protocol(g, &c) {
                Ok((r, _)) => {
                    parts.push(format!("{label} {:.4}", r.summary.mean));
                    if key == "no_mdcl" {
                        no_mdcl = r.summary.mean;
                    }
                }
                Err(e) => return Outcome::Fail(format!("{label} failed: {e}")),
            }
        }
        let gap = full - no_mdcl;
        verdict(gap >= ABLATION_GAP, format!("{}; gap {:.2} points (need ≥ {:.0})", parts.join(", "), 100.0 * gap, 100.0 * ABLATION_GAP))
    });

    h.report(8, "invariance suite", Duration::from_secs(60), || {
        let scale = loss_scale_max_error(50);
        let perm = loss_permutation_max_error(50);
        let enc = encoder_permutation_max_error(10);
        let ema = ema_contraction_max_error();
        let splits = splits_deterministic(5);
        let config = config_round_trips(20);
        verdict(
            scale < INVARIANCE_TOL && perm < INVARIANCE_TOL && enc < INVARIANCE_TOL && ema < EMA_TOL && splits && config,
            format!(
                "loss scale {scale:.1e}, loss permutation {perm:.1e}, encoder permutation {enc:.1e} (tol {INVARIANCE_TOL:e}); EMA contraction {ema:.1e} (tol {EMA_TOL:e}); split determinism {splits}; config round-trip {config}"
            ),
        )
    });

    let strict = std::env::var("GREMDCL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if h.failed || (strict && h.missing) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
