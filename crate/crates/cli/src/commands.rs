//! Subcommand implementations. Every stage reads and writes files in the
//! output directory, so stages can run separately or as one pipeline; all
//! randomness derives from the config seed through fixed per-stage keys.

use anyhow::{bail, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hongbao_core::estimator::{
    self, build_clusters, estimate, interaction_regression, pooled_ols,
    subsample_difference_test, EstimateReport, Moderator, Outcome, Regression,
};
use hongbao_core::matcher::{exact_match, kth_subsequent_values, matched_contrast, MatchedOutcome};
use hongbao_core::money::MoneyCents;
use hongbao_core::panel::{build_panel, ObservationRow};
use hongbao_core::population::{generate_population, Population};
use hongbao_core::rng::RngStream;
use hongbao_core::simulator::{simulate, EventLog, EDGE_WINDOW_S};
use hongbao_core::splitter::{
    analytic_variance, expected_share, mean_with_se, ratio_rule_variance,
    sample_share_distribution, variance_with_se, PacketSpec, SplitMode,
};
use hongbao_core::stats::{ks_two_sample, randomization_check, Attribute, RandomizationCheck};

use crate::config::RunConfig;
use crate::csvio;

const STREAM_POP: u64 = 1;
const STREAM_SIM: u64 = 2;
const STREAM_ESTIMATE: u64 = 3;
const STREAM_MATCH: u64 = 4;
const STREAM_PLOT: u64 = 5;
const STREAM_TAU: u64 = 6;

/// A pipeline stage aborted; its partial outputs were removed. Exits 1
/// rather than 2 (it is a runtime failure, not a usage error).
#[derive(Debug)]
pub struct StageFailure {
    pub stage: &'static str,
    pub source: anyhow::Error,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "stage `{}` failed (partial outputs removed): {:#}",
            self.stage, self.source
        )
    }
}

impl std::error::Error for StageFailure {}

/// Tracks files created by one stage so a failure can clean them up.
struct Stage<'a> {
    name: &'static str,
    dir: &'a Path,
    created: Vec<PathBuf>,
}

impl<'a> Stage<'a> {
    fn new(name: &'static str, dir: &'a Path) -> Self {
        Self { name, dir, created: Vec::new() }
    }

    fn path(&mut self, file: &str) -> PathBuf {
        let p = self.dir.join(file);
        self.created.push(p.clone());
        p
    }

    fn run<T>(mut self, body: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        match body(&mut self) {
            Ok(v) => Ok(v),
            Err(source) => {
                for p in &self.created {
                    let _ = std::fs::remove_file(p);
                }
                Err(anyhow::Error::new(StageFailure { stage: self.name, source }))
            }
        }
    }
}

pub fn out_dir(config: &RunConfig, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(&config.output.dir))
}

// ---------------------------------------------------------------------------
// gen

pub fn cmd_gen(config: &RunConfig, out: &Option<PathBuf>) -> Result<u8> {
    let dir = out_dir(config, out);
    let pop = run_gen(config, &dir)?;
    println!(
        "population: {} groups, {} users, measured wealth homophily {:.4}",
        pop.groups.len(),
        pop.n_users(),
        pop.wealth_homophily()
    );
    Ok(0)
}

fn run_gen(config: &RunConfig, dir: &Path) -> Result<Population> {
    Stage::new("gen", dir).run(|stage| {
        let pop_config = config.population.to_core()?;
        let rng = RngStream::new(config.seed).derive(STREAM_POP);
        let pop = generate_population(&pop_config, &rng)?;
        stage.path("members.csv");
        stage.path("edges.csv");
        stage.path("groups.csv");
        csvio::write_population(stage.dir, &pop)?;
        Ok(pop)
    })
}

// ---------------------------------------------------------------------------
// simulate

pub fn cmd_simulate(config: &RunConfig, out: &Option<PathBuf>) -> Result<u8> {
    let dir = out_dir(config, out);
    let pop = csvio::read_population(&dir)?;
    let log = run_simulate(config, &dir, &pop)?;
    println!(
        "simulated {} packets, {} receives, {} edges over {} days \
         (clamp hits {}, residue {} cents)",
        log.stats.n_packets,
        log.stats.n_receives,
        log.edges.len(),
        config.sim.horizon_days,
        log.stats.clamp_hits,
        log.stats.unopened_residue
    );
    Ok(0)
}

fn run_simulate(config: &RunConfig, dir: &Path, pop: &Population) -> Result<EventLog> {
    Stage::new("simulate", dir).run(|stage| {
        let rng = RngStream::new(config.seed).derive(STREAM_SIM);
        let log = simulate(
            pop,
            &config.behavior,
            config.festival.to_core(),
            config.sim.horizon_days,
            &rng,
        )?;
        if log.stats.clamp_hits > 0 {
            eprintln!(
                "warning: response-probability clamp bound {} times; the \
                 linear-probability estimand is biased where it binds",
                log.stats.clamp_hits
            );
        }
        let path = stage.path("events.csv");
        csvio::write_events(&path, &log)?;
        Ok(log)
    })
}

// ---------------------------------------------------------------------------
// panel

pub fn cmd_panel(config: &RunConfig, out: &Option<PathBuf>) -> Result<u8> {
    let dir = out_dir(config, out);
    let pop = csvio::read_population(&dir)?;
    let log = csvio::read_events(
        &dir.join("events.csv"),
        config.festival.to_core(),
        config.sim.horizon_days,
    )?;
    let rows = run_panel(config, &dir, &pop, &log)?;
    let n_strata: std::collections::BTreeSet<_> = rows.iter().map(|r| r.stratum).collect();
    println!(
        "panel: {} rows, {} strata, {} spontaneous packets",
        rows.len(),
        n_strata.len(),
        rows.iter().map(|r| r.packet_id).collect::<std::collections::BTreeSet<_>>().len()
    );
    Ok(0)
}

fn run_panel(
    config: &RunConfig,
    dir: &Path,
    pop: &Population,
    log: &EventLog,
) -> Result<Vec<ObservationRow>> {
    Stage::new("panel", dir).run(|stage| {
        let clusters = build_clusters(pop);
        let rows = build_panel(log, pop, &config.panel.to_core(), &clusters.group_to_cluster)?;
        let path = stage.path("panel.csv");
        csvio::write_panel(&path, &rows, &config.panel.windows_s)?;
        Ok(rows)
    })
}

// ---------------------------------------------------------------------------
// estimate

/// Truth values injected by the simулation, keyed by report label, for the
/// estimate-vs-truth summary.
fn injected_truth(config: &RunConfig, label: &str, term: &str) -> Option<f64> {
    let b = &config.behavior;
    if term == "amount_received" {
        if label.starts_with("extensive_") {
            return Some(b.theta_ext);
        }
        if label.starts_with("edges_") {
            return Some(b.tie_formation_rate);
        }
    }
    if term == "amount_received_x_clustering" && label.starts_with("extensive_") {
        return Some(b.theta_ext_clust_slope);
    }
    None
}

fn n_clusters_of(rows: &[ObservationRow]) -> usize {
    rows.iter().map(|r| r.cluster_id as usize).max().map_or(0, |m| m + 1)
}

pub fn cmd_estimate(config: &RunConfig, out: &Option<PathBuf>) -> Result<u8> {
    let dir = out_dir(config, out);
    let rows = csvio::read_panel(&dir.join("panel.csv"), &config.panel.windows_s)?;
    run_estimate(config, &dir, &rows)?;
    Ok(0)
}

fn run_estimate(config: &RunConfig, dir: &Path, rows: &[ObservationRow]) -> Result<()> {
    Stage::new("estimate", dir).run(|stage| {
        let report_path = stage.path("report.csv");
        let summary_path = stage.path("summary.txt");
        let mut writer = csvio::ReportWriter::create(&report_path)?;
        let n_clusters = n_clusters_of(rows);
        let reps = config.estimate.bootstrap_reps;
        let rng = RngStream::new(config.seed).derive(STREAM_ESTIMATE);
        let windows = &config.panel.windows_s;
        let mut summary = String::new();
        let mut stdout_lines: Vec<(String, f64, f64, f64, Option<f64>)> = Vec::new();
        let mut reg_index = 0u64;

        let run_one = |label: String,
                           report: &EstimateReport,
                           writer: &mut csvio::ReportWriter,
                           lines: &mut Vec<(String, f64, f64, f64, Option<f64>)>|
         -> Result<()> {
            writer.add(&label, report)?;
            for term in &report.terms {
                let truth = injected_truth(config, &label, &term.name);
                lines.push((
                    format!("{label}:{}", term.name),
                    term.estimate,
                    term.ci_lo,
                    term.ci_hi,
                    truth,
                ));
            }
            Ok(())
        };

        // Main margins per window: overall, extensive, intensive.
        let mut table_rows: Vec<Vec<String>> = Vec::new();
        for (wi, &w) in windows.iter().enumerate() {
            for outcome in
                [Outcome::Overall(wi), Outcome::Extensive(wi), Outcome::Intensive(wi)]
            {
                let label = outcome.label(windows);
                let report = estimate(
                    rows,
                    &Regression::stratified(outcome),
                    n_clusters,
                    reps,
                    &rng.derive(reg_index),
                )?;
                reg_index += 1;
                let b = report.beta();
                table_rows.push(vec![
                    label.clone(),
                    format!("{:.6}", b.estimate),
                    format!("{:.6}", b.se),
                    format!("{:.6}", b.ci_lo),
                    format!("{:.6}", b.ci_hi),
                    stars(b.p_value).to_string(),
                    report.n_obs.to_string(),
                    report.n_strata.to_string(),
                    format!("{:.4}", report.adj_r2),
                ]);
                run_one(label, &report, &mut writer, &mut stdout_lines)?;
            }
            let _ = w;
        }
        summary.push_str(&csvio::render_text_table(
            "Gift contagion: stratified fixed-effects estimates",
            &[
                "outcome".into(),
                "estimate".into(),
                "se".into(),
                "ci_lo".into(),
                "ci_hi".into(),
                "sig".into(),
                "n_obs".into(),
                "n_strata".into(),
                "adj_r2".into(),
            ],
            &table_rows,
        ));
        summary.push('\n');

        let last = windows.len() - 1;

        // Decomposition and spillover outcomes at the widest window.
        for outcome in [
            Outcome::Direct(last),
            Outcome::Indirect(last),
            Outcome::OtherGroups(last),
            Outcome::Edges7d,
        ] {
            let label = outcome.label(windows);
            match estimate(
                rows,
                &Regression::stratified(outcome),
                n_clusters,
                reps,
                &rng.derive(reg_index),
            ) {
                Ok(report) => run_one(label, &report, &mut writer, &mut stdout_lines)?,
                Err(e) => eprintln!("note: {label}: {e}"),
            }
            reg_index += 1;
        }

        if config.estimate.full_tables {
            // Naive comparators at the first and last windows.
            for wi in [0, last] {
                let outcome = Outcome::Overall(wi);
                let label = format!("naive_pooled_{}", outcome.label(windows));
                let report =
                    pooled_ols(rows, outcome, n_clusters, reps, &rng.derive(reg_index))?;
                reg_index += 1;
                run_one(label, &report, &mut writer, &mut stdout_lines)?;
                let label = format!("linear_spec_{}", outcome.label(windows));
                let report = estimate(
                    rows,
                    &Regression::linear_spec(outcome),
                    n_clusters,
                    reps,
                    &rng.derive(reg_index),
                )?;
                reg_index += 1;
                run_one(label, &report, &mut writer, &mut stdout_lines)?;
            }

            // Network moderation (grouped as in the moderation tables).
            let moderator_sets: [&[Moderator]; 4] = [
                &[Moderator::ClusteringCoefficient, Moderator::NormalizedDegree],
                &[Moderator::AvgNormalizedDegree],
                &[Moderator::Eigen],
                &[Moderator::OverallClustering],
            ];
            for wi in [0, last] {
                for mods in moderator_sets {
                    for outcome in [Outcome::Overall(wi), Outcome::Extensive(wi)] {
                        let label = format!(
                            "interaction_{}_{}",
                            mods.iter().map(|m| m.name()).collect::<Vec<_>>().join("+"),
                            outcome.label(windows)
                        );
                        match interaction_regression(
                            rows,
                            outcome,
                            mods,
                            true,
                            n_clusters,
                            reps,
                            &rng.derive(reg_index),
                        ) {
                            Ok(report) => {
                                run_one(label, &report, &mut writer, &mut stdout_lines)?
                            }
                            Err(e) => eprintln!("note: {label}: {e}"),
                        }
                        reg_index += 1;
                    }
                }
            }

            // Inequity regression on luckiest rows with a defined ratio.
            let luckiest: Vec<ObservationRow> = rows
                .iter()
                .filter(|r| r.luckiest && r.z_ratio.is_some())
                .cloned()
                .collect();
            for wi in [0, last] {
                for outcome in [Outcome::Overall(wi), Outcome::Extensive(wi)] {
                    let label = format!("inequity_{}", outcome.label(windows));
                    match estimator::inequity_regression(
                        &luckiest,
                        outcome,
                        n_clusters,
                        reps,
                        &rng.derive(reg_index),
                    ) {
                        Ok(report) => run_one(label, &report, &mut writer, &mut stdout_lines)?,
                        Err(e) => eprintln!("note: {label}: {e}"),
                    }
                    reg_index += 1;
                }
            }

            // Label splits (subsample difference tests): festival period,
            // recipient gender, and the most common group type vs the rest.
            let top_type = {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for r in rows {
                    *counts.entry(r.cov.group_type.as_str()).or_insert(0) += 1;
                }
                counts
                    .into_iter()
                    .max_by_key(|(_, c)| *c)
                    .map(|(t, _)| t.to_string())
                    .unwrap_or_default()
            };
            type Split = Box<dyn Fn(&ObservationRow) -> bool>;
            let splits: Vec<(String, Split)> = vec![
                ("festival".into(), Box::new(|r: &ObservationRow| r.festival)),
                ("female".into(), Box::new(|r: &ObservationRow| r.cov.female)),
                (
                    format!("grouptype_{top_type}"),
                    Box::new(move |r: &ObservationRow| r.cov.group_type == top_type),
                ),
            ];
            for (split_name, split) in &splits {
                for wi in [0, last] {
                    let outcome = Outcome::Overall(wi);
                    let label = format!("{split_name}_split_{}", outcome.label(windows));
                    match subsample_difference_test(
                        rows,
                        split,
                        &Regression::stratified(outcome),
                        n_clusters,
                        reps,
                        &rng.derive(reg_index),
                    ) {
                        Ok(test) => {
                            run_one(
                                format!("{label}_in"),
                                &test.side_a,
                                &mut writer,
                                &mut stdout_lines,
                            )?;
                            run_one(
                                format!("{label}_out"),
                                &test.side_b,
                                &mut writer,
                                &mut stdout_lines,
                            )?;
                            writer.add_raw(
                                &format!("{label}_difference"),
                                test.difference,
                                test.se,
                                (test.ci_lo, test.ci_hi),
                                test.side_a.n_obs + test.side_b.n_obs,
                                0,
                            )?;
                            summary.push_str(&format!(
                                "{split_name} difference ({}): {:.6} (p = {:.4})\n",
                                outcome.label(windows),
                                test.difference,
                                test.p_value
                            ));
                        }
                        Err(e) => eprintln!("note: {label}: {e}"),
                    }
                    reg_index += 1;
                }
            }
        }

        writer.finish()?;
        csvio::write_text(&summary_path, &summary)?;

        println!("estimates vs injected truth:");
        for (name, est, lo, hi, truth) in &stdout_lines {
            match truth {
                Some(t) => {
                    let covered = *lo <= *t && *t <= *hi;
                    println!(
                        "  {name}: {est:.6} [{lo:.6}, {hi:.6}] truth {t:.6} {}",
                        if covered { "(covered)" } else { "(MISSED)" }
                    );
                }
                None => println!("  {name}: {est:.6} [{lo:.6}, {hi:.6}]"),
            }
        }
        Ok(())
    })
}

fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

// ---------------------------------------------------------------------------
// randomization-check

pub fn cmd_randomization_check(config: &RunConfig, out: &Option<PathBuf>) -> Result<u8> {
    let dir = out_dir(config, out);
    let rows = csvio::read_panel(&dir.join("panel.csv"), &config.panel.windows_s)?;
    let ok = run_randomization(config, &dir, &rows)?;
    Ok(if ok { 0 } else { 1 })
}

fn run_randomization(config: &RunConfig, dir: &Path, rows: &[ObservationRow]) -> Result<bool> {
    Stage::new("randomization-check", dir).run(|stage| {
        let alpha = config.randomization.alpha;
        let mut checks: Vec<RandomizationCheck> = Vec::new();
        for attr in Attribute::STANDARD {
            checks.push(randomization_check(rows, attr, alpha)?);
        }
        checks.push(randomization_check(rows, Attribute::Wealth, alpha)?);
        let path = stage.path("randomization_report.csv");
        csvio::write_randomization_report(&path, &checks)?;
        let mut ok = true;
        for c in &checks {
            let share = c.share_significant();
            println!(
                "randomization {}: {} of {} strata BH-significant at alpha={alpha} \
                 (share {:.4}, {} skipped)",
                c.attribute,
                c.n_significant,
                c.slopes.len(),
                share,
                c.n_skipped
            );
            if share > config.randomization.fail_share {
                ok = false;
            }
        }
        println!("randomization check: {}", if ok { "PASS" } else { "FAIL" });
        Ok(ok)
    })
}

// ---------------------------------------------------------------------------
// match

pub fn cmd_match(config: &RunConfig, out: &Option<PathBuf>) -> Result<u8> {
    let dir = out_dir(config, out);
    let rows = csvio::read_panel(&dir.join("panel.csv"), &config.panel.windows_s)?;
    let log = csvio::read_events(
        &dir.join("events.csv"),
        config.festival.to_core(),
        config.sim.horizon_days,
    )?;
    run_match(config, &dir, &rows, &log)?;
    Ok(0)
}

fn run_match(
    config: &RunConfig,
    dir: &Path,
    rows: &[ObservationRow],
    log: &EventLog,
) -> Result<()> {
    Stage::new("match", dir).run(|stage| {
        let matched = exact_match(rows);
        println!(
            "exact matching: {:.1}% of luckiest recipients matched \
             ({} of {}; {} controls; {} cells)",
            100.0 * matched.match_rate(),
            matched.n_treated_matched,
            matched.n_treated_total,
            matched.n_control_matched,
            matched.cells.len()
        );
        let n_clusters = n_clusters_of(rows);
        let rng = RngStream::new(config.seed).derive(STREAM_MATCH);

        let mut values: BTreeMap<(usize, &'static str), Vec<Option<f64>>> = BTreeMap::new();
        let mut fig4: Vec<Vec<String>> = Vec::new();
        for (ki, &k) in config.matching.ks.iter().enumerate() {
            for (oi, outcome) in
                [MatchedOutcome::Overall, MatchedOutcome::Extensive, MatchedOutcome::Intensive]
                    .iter()
                    .enumerate()
            {
                let vals = kth_subsequent_values(log, rows, k, *outcome)?;
                match matched_contrast(
                    rows,
                    &matched,
                    &vals,
                    n_clusters,
                    config.matching.bootstrap_reps,
                    &rng.derive((ki * 3 + oi) as u64),
                ) {
                    Ok(c) => {
                        println!(
                            "  k={k} {}: diff {:.6} [{:.6}, {:.6}] p {:.4} ({} cells)",
                            outcome.name(),
                            c.difference,
                            c.ci_lo,
                            c.ci_hi,
                            c.p_value,
                            c.n_cells
                        );
                        fig4.push(vec![
                            k.to_string(),
                            outcome.name().to_string(),
                            format!("{}", c.difference),
                            format!("{}", c.se),
                            format!("{}", c.ci_lo),
                            format!("{}", c.ci_hi),
                            format!("{}", c.p_value),
                            c.n_cells.to_string(),
                        ]);
                    }
                    Err(e) => eprintln!("note: matched contrast k={k} {}: {e}", outcome.name()),
                }
                values.insert((k, outcome.name()), vals);
            }
        }
        let matched_path = stage.path("matched.csv");
        csvio::write_matched(&matched_path, rows, &matched, &values, &config.matching.ks)?;
        let fig4_path = stage.path("plotdata/fig4_matched_contrasts.csv");
        csvio::write_table(
            &fig4_path,
            &["k", "outcome", "difference", "se", "ci_lo", "ci_hi", "p_value", "n_cells"],
            &fig4,
        )?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// verify-splitter

pub struct VerifyArgs {
    pub amount_cents: i64,
    pub recipients: u32,
    pub reps: usize,
    pub seed: u64,
}

pub fn cmd_verify_splitter(args: &VerifyArgs) -> Result<u8> {
    let spec = PacketSpec::new(MoneyCents(args.amount_cents), args.recipients)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let rng = RngStream::new(args.seed);
    let expect_mean = expected_share(&spec).as_f64();
    let mut all_pass = true;
    let mut direct_supported = true;
    let mut ratio_supported = true;

    println!(
        "verify-splitter: a = {} cents, n = {}, reps = {}, seed = {}",
        args.amount_cents, args.recipients, args.reps, args.seed
    );
    println!(
        "{:>5} {:>12} {:>12} {:>7} {:>14} {:>14} {:>14} {:>7} {:>8}",
        "order", "mc_mean", "a/n", "dev", "mc_var", "var_direct", "var_ratio", "dev", "ks_p"
    );

    for order in 1..=args.recipients {
        let xs = sample_share_distribution(&spec, order, args.reps, &rng, SplitMode::Continuous)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let mean = mean_with_se(&xs);
        let var = variance_with_se(&xs);
        let direct = analytic_variance(&spec, order).map_err(|e| anyhow::anyhow!("{e}"))?;
        let ratio = ratio_rule_variance(&spec, order).map_err(|e| anyhow::anyhow!("{e}"))?;

        let mean_dev = if mean.mc_se > 0.0 { mean.deviation_in_ses(expect_mean) } else { 0.0 };
        let mean_ok = mean_dev < 4.0 || mean.mc_se == 0.0;
        let var_dev = if var.mc_se > 0.0 { var.deviation_in_ses(direct) } else { 0.0 };
        let var_ok = var_dev < 3.0 || var.mc_se == 0.0;
        if var.mc_se > 0.0 {
            if var.deviation_in_ses(direct) >= 3.0 {
                direct_supported = false;
            }
            if var.deviation_in_ses(ratio) >= 3.0 {
                ratio_supported = false;
            }
        }

        // Rounded-vs-continuous distribution comparison.
        let ks_n = args.reps.min(10_000);
        let rounded = sample_share_distribution(&spec, order, ks_n, &rng, SplitMode::Rounded)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let cont = &xs[..ks_n];
        let ks = if args.recipients == 1 {
            None // point mass; KS is degenerate
        } else {
            Some(ks_two_sample(&rounded, cont).map_err(|e| anyhow::anyhow!("{e}"))?)
        };
        let ks_ok = ks.as_ref().is_none_or(|t| t.p_value > 0.01);

        println!(
            "{:>5} {:>12.4} {:>12.4} {:>6.2}{} {:>14.2} {:>14.2} {:>14.2} {:>6.2}{} {:>8}",
            order,
            mean.mean,
            expect_mean,
            mean_dev,
            if mean_ok { " " } else { "!" },
            var.variance,
            direct,
            ratio,
            var_dev,
            if var_ok { " " } else { "!" },
            ks.map_or("-".to_string(), |t| format!("{:.4}{}", t.p_value, if ks_ok { "" } else { "!" })),
        );
        all_pass &= mean_ok && var_ok && ks_ok;
    }

    if args.recipients > 2 {
        println!(
            "variance formula adjudication: direct law-of-total-variance \
             {}; pure-ratio recursion Var(V_o+1) = (1 + 1/(3(n-o)^2)) Var(V_o) {}",
            verdict(direct_supported),
            verdict(ratio_supported)
        );
        if !direct_supported {
            all_pass = false;
        }
    } else {
        println!("variance formula adjudication: candidates coincide for n <= 2");
    }
    println!("verify-splitter: {}", if all_pass { "PASS" } else { "FAIL" });
    Ok(if all_pass { 0 } else { 1 })
}

fn verdict(supported: bool) -> &'static str {
    if supported {
        "SUPPORTED (within 3 MC SEs at every order)"
    } else {
        "REJECTED (outside 3 MC SEs)"
    }
}

// ---------------------------------------------------------------------------
// pipeline

pub fn cmd_pipeline(config: &RunConfig, out: &Option<PathBuf>) -> Result<u8> {
    let dir = out_dir(config, out);
    std::fs::create_dir_all(&dir)?;

    let pop = run_gen(config, &dir)?;
    println!(
        "[gen] {} groups, {} users, wealth homophily {:.4}",
        pop.groups.len(),
        pop.n_users(),
        pop.wealth_homophily()
    );
    let log = run_simulate(config, &dir, &pop)?;
    println!(
        "[simulate] {} packets, {} receives, {} edges",
        log.stats.n_packets,
        log.stats.n_receives,
        log.edges.len()
    );
    let rows = run_panel(config, &dir, &pop, &log)?;
    println!("[panel] {} rows", rows.len());
    if rows.is_empty() {
        bail!("stage `panel` produced no rows; increase activity or horizon");
    }
    run_estimate(config, &dir, &rows)?;
    println!("[estimate] report.csv + summary.txt written");
    let rand_ok = run_randomization(config, &dir, &rows)?;
    run_match(config, &dir, &rows, &log)?;
    println!("[match] matched.csv written");
    run_plotdata(config, &dir, &pop, &log, &rows)?;
    println!("[plotdata] plotdata/*.csv written");

    Ok(if rand_ok { 0 } else { 1 })
}

fn run_plotdata(
    config: &RunConfig,
    dir: &Path,
    pop: &Population,
    log: &EventLog,
    rows: &[ObservationRow],
) -> Result<()> {
    Stage::new("plotdata", dir).run(|stage| {
        let rng = RngStream::new(config.seed).derive(STREAM_PLOT);
        let n_clusters = n_clusters_of(rows);
        let reps = config.estimate.bootstrap_reps;

        // Splitter distributions: rounded vs continuous histograms per order.
        let mut fig2: Vec<Vec<String>> = Vec::new();
        for (a, n) in config.plot.specs()? {
            let spec = PacketSpec::new(MoneyCents(a), n).map_err(|e| anyhow::anyhow!("{e}"))?;
            for order in 1..=n {
                let rounded = sample_share_distribution(
                    &spec,
                    order,
                    config.plot.splitter_reps,
                    &rng,
                    SplitMode::Rounded,
                )
                .map_err(|e| anyhow::anyhow!("{e}"))?;
                let cont = sample_share_distribution(
                    &spec,
                    order,
                    config.plot.splitter_reps,
                    &rng,
                    SplitMode::Continuous,
                )
                .map_err(|e| anyhow::anyhow!("{e}"))?;
                let mut counts: BTreeMap<i64, (u64, u64)> = BTreeMap::new();
                for v in rounded {
                    counts.entry(v as i64).or_default().0 += 1;
                }
                for v in cont {
                    counts.entry(v.ceil() as i64).or_default().1 += 1;
                }
                for (cents, (cr, cc)) in counts {
                    fig2.push(vec![
                        a.to_string(),
                        n.to_string(),
                        order.to_string(),
                        cents.to_string(),
                        cr.to_string(),
                        cc.to_string(),
                    ]);
                }
            }
        }
        let p = stage.path("plotdata/fig2_splitter_distributions.csv");
        csvio::write_table(
            &p,
            &["amount_cents", "n_recipients", "order", "cents", "count_rounded", "count_continuous"],
            &fig2,
        )?;

        // First-subsequent-sender probability by amount rank.
        let fig1 = first_sender_by_rank(log, pop);
        let p = stage.path("plotdata/fig1_first_sender_probability.csv");
        csvio::write_table(
            &p,
            &["n_recipients", "rank", "prob_first_sender", "n_packets"],
            &fig1,
        )?;

        // Tie-formation marginal effects per window (plus the 7-day window).
        let mut fig5: Vec<Vec<String>> = Vec::new();
        for (wi, &w) in config.panel.windows_s.iter().enumerate() {
            if let Ok(report) = estimate(
                rows,
                &Regression::stratified(Outcome::EdgesAdded(wi)),
                n_clusters,
                reps,
                &rng.derive(1000 + wi as u64),
            ) {
                let b = report.beta();
                fig5.push(vec![
                    format!("{w}"),
                    format!("{}", b.estimate),
                    format!("{}", b.se),
                    format!("{}", b.ci_lo),
                    format!("{}", b.ci_hi),
                ]);
            }
        }
        if let Ok(report) = estimate(
            rows,
            &Regression::stratified(Outcome::Edges7d),
            n_clusters,
            reps,
            &rng.derive(1999),
        ) {
            let b = report.beta();
            fig5.push(vec![
                format!("{EDGE_WINDOW_S}"),
                format!("{}", b.estimate),
                format!("{}", b.se),
                format!("{}", b.ci_lo),
                format!("{}", b.ci_hi),
            ]);
        }
        let p = stage.path("plotdata/fig5_edge_formation.csv");
        csvio::write_table(&p, &["window_s", "estimate", "se", "ci_lo", "ci_hi"], &fig5)?;

        // Session-threshold sensitivity: re-label, re-build, re-estimate.
        let clusters = build_clusters(pop);
        let mut figa2: Vec<Vec<String>> = Vec::new();
        let tau_rng = RngStream::new(config.seed).derive(STREAM_TAU);
        for (ti, &tau_h) in config.panel.tau_sensitivity_hours.iter().enumerate() {
            let opts = config.panel.to_core_with_tau(tau_h);
            let tau_rows = build_panel(log, pop, &opts, &clusters.group_to_cluster)?;
            if tau_rows.is_empty() {
                continue;
            }
            let last = config.panel.windows_s.len() - 1;
            for outcome in [Outcome::Overall(last), Outcome::Extensive(last)] {
                match estimate(
                    &tau_rows,
                    &Regression::stratified(outcome),
                    clusters.n_clusters,
                    reps,
                    &tau_rng.derive(ti as u64 * 4 + matches!(outcome, Outcome::Extensive(_)) as u64),
                ) {
                    Ok(report) => {
                        let b = report.beta();
                        figa2.push(vec![
                            format!("{tau_h}"),
                            outcome.label(&config.panel.windows_s),
                            format!("{}", b.estimate),
                            format!("{}", b.se),
                            format!("{}", b.ci_lo),
                            format!("{}", b.ci_hi),
                            report.n_obs.to_string(),
                        ]);
                    }
                    Err(e) => eprintln!("note: tau={tau_h}h: {e}"),
                }
            }
        }
        let p = stage.path("plotdata/figa2_tau_sensitivity.csv");
        csvio::write_table(
            &p,
            &["tau_hours", "outcome", "estimate", "se", "ci_lo", "ci_hi", "n_obs"],
            &figa2,
        )?;
        Ok(())
    })
}

/// Probability that the recipient at each amount rank sends the first
/// subsequent packet, and the per-member probability for non-recipients
/// (rank 0), grouped by the number of recipients.
fn first_sender_by_rank(log: &EventLog, pop: &Population) -> Vec<Vec<String>> {
    // (n_recipients, rank) -> (first-sender hits, packets counted)
    let mut hits: BTreeMap<(u32, u32), (u64, u64)> = BTreeMap::new();
    let mut non_recipient: BTreeMap<u32, (u64, u64)> = BTreeMap::new(); // hits, member-slots
    let mut per_group: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (idx, p) in log.packets.iter().enumerate() {
        per_group.entry(p.group_id).or_default().push(idx);
    }
    for list in per_group.values() {
        for (pos, &idx) in list.iter().enumerate() {
            let packet = &log.packets[idx];
            let n = packet.n_received();
            if n == 0 {
                continue;
            }
            let next_sender = list.get(pos + 1).map(|&ni| log.packets[ni].sender_id);
            // Rank recipients by amount (desc), ties to earlier order.
            let mut ranked: Vec<&hongbao_core::simulator::Receive> =
                packet.receives.iter().collect();
            ranked.sort_by(|a, b| b.amount.cmp(&a.amount).then(a.order.cmp(&b.order)));
            for (rank0, r) in ranked.iter().enumerate() {
                let cell = hits.entry((n, rank0 as u32 + 1)).or_default();
                cell.1 += 1;
                if next_sender == Some(r.user_id) {
                    cell.0 += 1;
                }
            }
            if let Some(group) = pop.group(packet.group_id) {
                let recipients: std::collections::BTreeSet<u64> =
                    packet.receives.iter().map(|r| r.user_id).collect();
                let outsiders = group
                    .members()
                    .iter()
                    .filter(|&&u| u != packet.sender_id && !recipients.contains(&u))
                    .count() as u64;
                let cell = non_recipient.entry(n).or_default();
                cell.1 += outsiders;
                if let Some(s) = next_sender {
                    if s != packet.sender_id && !recipients.contains(&s) && group.index_of(s).is_some()
                    {
                        cell.0 += 1;
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for ((n, rank), (h, total)) in hits {
        if total == 0 {
            continue;
        }
        out.push(vec![
            n.to_string(),
            rank.to_string(),
            format!("{}", h as f64 / total as f64),
            total.to_string(),
        ]);
    }
    for (n, (h, slots)) in non_recipient {
        if slots == 0 {
            continue;
        }
        out.push(vec![
            n.to_string(),
            "0".to_string(),
            format!("{}", h as f64 / slots as f64),
            slots.to_string(),
        ]);
    }
    out
}
