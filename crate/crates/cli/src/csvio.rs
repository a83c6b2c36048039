//! Column-exact CSV formats for every pipeline artifact. All money columns
//! are integer cents; floats are written in shortest round-trip form, so
//! re-ingesting a file reproduces the exact in-memory values.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use hongbao_core::estimator::EstimateReport;
use hongbao_core::graph::GroupGraph;
use hongbao_core::money::MoneyCents;
use hongbao_core::panel::{Covariates, ObservationRow, StratumKey, WindowOutcome};
use hongbao_core::population::{Member, Population};
use hongbao_core::simulator::{
    EdgeEvent, EventLog, FestivalCalendar, Packet, Receive, SimStats,
};
use hongbao_core::stats::RandomizationCheck;

fn open_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))
}

// Rust's Display for f64 is shortest-round-trip: parsing the string back
// recovers the exact bits, which keeps every file re-ingestable.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------------------
// population: members.csv + edges.csv + groups.csv

pub fn write_population(dir: &Path, pop: &Population) -> Result<()> {
    let mut members = open_writer(&dir.join("members.csv"))?;
    members.write_record(["user_id", "age", "female", "wealth", "wealth_z", "group_ids"])?;
    for m in pop.members.values() {
        let groups =
            m.group_ids.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(";");
        members.write_record([
            m.user_id.to_string(),
            m.age.to_string(),
            (m.female as u8).to_string(),
            fmt_f64(m.wealth),
            fmt_f64(m.wealth_z),
            groups,
        ])?;
    }
    members.flush()?;

    let mut edges = open_writer(&dir.join("edges.csv"))?;
    edges.write_record(["group_id", "user_a", "user_b"])?;
    for g in &pop.groups {
        for (a, b) in g.edges_idx() {
            edges.write_record([
                g.group_id.to_string(),
                g.user_at(a).to_string(),
                g.user_at(b).to_string(),
            ])?;
        }
    }
    edges.flush()?;

    let mut groups = open_writer(&dir.join("groups.csv"))?;
    groups.write_record(["group_id", "group_type", "festival_propensity"])?;
    for g in &pop.groups {
        groups.write_record([
            g.group_id.to_string(),
            g.group_type.clone(),
            fmt_f64(g.festival_propensity),
        ])?;
    }
    groups.flush()?;
    Ok(())
}

pub fn read_population(dir: &Path) -> Result<Population> {
    let mut members: BTreeMap<u64, Member> = BTreeMap::new();
    let mut reader = open_reader(&dir.join("members.csv"))?;
    expect_headers(&mut reader, &["user_id", "age", "female", "wealth", "wealth_z", "group_ids"])?;
    for record in reader.records() {
        let r = record?;
        let user_id: u64 = r[0].parse()?;
        let group_ids: Vec<u64> = r[5]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u64>())
            .collect::<std::result::Result<_, _>>()?;
        members.insert(
            user_id,
            Member {
                user_id,
                age: r[1].parse()?,
                female: &r[2] == "1",
                wealth: r[3].parse()?,
                wealth_z: r[4].parse()?,
                group_ids,
            },
        );
    }

    // Group membership from members.csv, labels from groups.csv.
    let mut group_members: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for m in members.values() {
        for g in &m.group_ids {
            group_members.entry(*g).or_default().push(m.user_id);
        }
    }
    let mut groups: Vec<GroupGraph> = group_members
        .into_iter()
        .map(|(gid, ms)| GroupGraph::new(gid, ms))
        .collect();

    let mut reader = open_reader(&dir.join("groups.csv"))?;
    expect_headers(&mut reader, &["group_id", "group_type", "festival_propensity"])?;
    let mut labels: BTreeMap<u64, (String, f64)> = BTreeMap::new();
    for record in reader.records() {
        let r = record?;
        labels.insert(r[0].parse()?, (r[1].to_string(), r[2].parse()?));
    }
    for g in groups.iter_mut() {
        let (ty, fp) = labels
            .get(&g.group_id)
            .with_context(|| format!("groups.csv missing group {}", g.group_id))?;
        g.group_type = ty.clone();
        g.festival_propensity = *fp;
    }

    let mut reader = open_reader(&dir.join("edges.csv"))?;
    expect_headers(&mut reader, &["group_id", "user_a", "user_b"])?;
    for record in reader.records() {
        let r = record?;
        let gid: u64 = r[0].parse()?;
        let idx = groups
            .binary_search_by_key(&gid, |g| g.group_id)
            .map_err(|_| anyhow::anyhow!("edges.csv references unknown group {gid}"))?;
        groups[idx].add_edge(r[1].parse()?, r[2].parse()?)?;
    }
    Ok(Population { members, groups })
}

fn expect_headers(reader: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let got: Vec<String> =
        reader.headers()?.iter().map(|h| h.to_string()).collect();
    if got != expected {
        bail!("unexpected header {:?}, expected {:?}", got, expected);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// events.csv

pub const EVENT_HEADERS: [&str; 10] = [
    "event_type",
    "timestamp_s",
    "group_id",
    "packet_id",
    "user_id",
    "total_amount_cents",
    "n_recipients",
    "order",
    "amount_cents",
    "counterparty_id",
];

pub fn write_events(path: &Path, log: &EventLog) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(EVENT_HEADERS)?;
    // One stream, time-ordered: sends with their receives, then edges
    // merged by timestamp.
    let mut rows: Vec<(f64, u8, Vec<String>)> = Vec::new();
    for p in &log.packets {
        rows.push((
            p.t_send,
            0,
            vec![
                "send".into(),
                fmt_f64(p.t_send),
                p.group_id.to_string(),
                p.packet_id.to_string(),
                p.sender_id.to_string(),
                p.total.cents().to_string(),
                p.n_declared.to_string(),
                String::new(),
                String::new(),
                String::new(),
            ],
        ));
        for r in &p.receives {
            rows.push((
                r.t,
                1,
                vec![
                    "receive".into(),
                    fmt_f64(r.t),
                    p.group_id.to_string(),
                    p.packet_id.to_string(),
                    r.user_id.to_string(),
                    String::new(),
                    String::new(),
                    r.order.to_string(),
                    r.amount.cents().to_string(),
                    String::new(),
                ],
            ));
        }
    }
    for e in &log.edges {
        rows.push((
            e.t,
            2,
            vec![
                "edge".into(),
                fmt_f64(e.t),
                e.group_id.to_string(),
                String::new(),
                e.user_a.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.user_b.to_string(),
            ],
        ));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    for (_, _, record) in rows {
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds the event log from events.csv. The festival calendar and the
/// horizon come from the run config (they are not stored in the file).
pub fn read_events(
    path: &Path,
    calendar: FestivalCalendar,
    horizon_days: u32,
) -> Result<EventLog> {
    let mut reader = open_reader(path)?;
    expect_headers(&mut reader, &EVENT_HEADERS)?;
    let mut packets: BTreeMap<u64, Packet> = BTreeMap::new();
    let mut edges: Vec<EdgeEvent> = Vec::new();
    for record in reader.records() {
        let r = record?;
        match &r[0] {
            "send" => {
                let packet_id: u64 = r[3].parse()?;
                let t_send: f64 = r[1].parse()?;
                packets.insert(
                    packet_id,
                    Packet {
                        packet_id,
                        group_id: r[2].parse()?,
                        sender_id: r[4].parse()?,
                        total: MoneyCents(r[5].parse()?),
                        n_declared: r[6].parse()?,
                        t_send,
                        festival: calendar.is_festival_time(t_send),
                        receives: Vec::new(),
                    },
                );
            }
            "receive" => {
                let packet_id: u64 = r[3].parse()?;
                let p = packets
                    .get_mut(&packet_id)
                    .with_context(|| format!("receive before send for packet {packet_id}"))?;
                p.receives.push(Receive {
                    user_id: r[4].parse()?,
                    order: r[7].parse()?,
                    amount: MoneyCents(r[8].parse()?),
                    t: r[1].parse()?,
                    luckiest: false,
                });
            }
            "edge" => edges.push(EdgeEvent {
                group_id: r[2].parse()?,
                user_a: r[4].parse()?,
                user_b: r[9].parse()?,
                t: r[1].parse()?,
            }),
            other => bail!("unknown event_type `{other}`"),
        }
    }
    let mut packets: Vec<Packet> = packets.into_values().collect();
    let mut n_receives = 0usize;
    for p in packets.iter_mut() {
        p.receives.sort_by_key(|r| r.order);
        for (i, r) in p.receives.iter().enumerate() {
            if r.order as usize != i + 1 {
                bail!("packet {} has non-consecutive orders", p.packet_id);
            }
        }
        n_receives += p.receives.len();
        // Restore the luckiest flag: max amount, earliest order on ties.
        if let Some(max_idx) = p
            .receives
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.amount.cmp(&b.amount).then(ib.cmp(ia)))
            .map(|(i, _)| i)
        {
            p.receives[max_idx].luckiest = true;
        }
    }
    packets.sort_by(|a, b| {
        a.t_send.partial_cmp(&b.t_send).unwrap().then(a.packet_id.cmp(&b.packet_id))
    });
    let stats = SimStats {
        clamp_hits: 0,
        unopened_residue: packets
            .iter()
            .map(|p| p.total.cents() - p.receives.iter().map(|r| r.amount.cents()).sum::<i64>())
            .sum(),
        n_packets: packets.len(),
        n_receives,
    };
    Ok(EventLog { packets, edges, calendar, horizon_days, stats })
}

// ---------------------------------------------------------------------------
// panel.csv

fn window_tag(seconds: f64) -> String {
    format!("w{}", seconds.round() as i64)
}

pub fn panel_headers(windows_s: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = [
        "packet_id",
        "group_id",
        "user_id",
        "cluster_id",
        "stratum_amount_cents",
        "stratum_n",
        "stratum_order",
        "t_recv",
        "amount_received_cents",
        "luckiest",
        "z_ratio",
        "festival",
        "n_other_groups",
        "female",
        "age",
        "degree",
        "fricnt",
        "joincnt",
        "history_sendamt_cents",
        "history_sendcnt",
        "history_recvamt_cents",
        "history_recvcnt",
        "groupamt_cents",
        "groupnum",
        "wealth",
        "clustering",
        "norm_degree",
        "eigen",
        "group_size",
        "avg_norm_degree",
        "overall_clustering",
        "group_type",
    ]
    .map(String::from)
    .to_vec();
    for &w in windows_s {
        let tag = window_tag(w);
        h.push(format!("overall_cents_{tag}"));
        h.push(format!("sent_{tag}"));
        h.push(format!("direct_cents_{tag}"));
        h.push(format!("indirect_cents_{tag}"));
        h.push(format!("other_avg_cents_{tag}"));
        h.push(format!("edges_{tag}"));
    }
    h.push("edges_7d".into());
    h
}

pub fn write_panel(path: &Path, rows: &[ObservationRow], windows_s: &[f64]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(panel_headers(windows_s))?;
    for row in rows {
        let mut rec: Vec<String> = vec![
            row.packet_id.to_string(),
            row.group_id.to_string(),
            row.user_id.to_string(),
            row.cluster_id.to_string(),
            row.stratum.amount_cents.to_string(),
            row.stratum.n_received.to_string(),
            row.stratum.order.to_string(),
            fmt_f64(row.t_recv),
            row.treatment.cents().to_string(),
            (row.luckiest as u8).to_string(),
            row.z_ratio.map(fmt_f64).unwrap_or_default(),
            (row.festival as u8).to_string(),
            row.n_other_groups.to_string(),
            (row.cov.female as u8).to_string(),
            row.cov.age.to_string(),
            row.cov.degree.to_string(),
            row.cov.fricnt.to_string(),
            row.cov.joincnt.to_string(),
            row.cov.history_sendamt.to_string(),
            row.cov.history_sendcnt.to_string(),
            row.cov.history_recvamt.to_string(),
            row.cov.history_recvcnt.to_string(),
            row.cov.groupamt.to_string(),
            row.cov.groupnum.to_string(),
            fmt_f64(row.cov.wealth),
            fmt_f64(row.cov.clustering),
            fmt_f64(row.cov.norm_degree),
            fmt_f64(row.cov.eigen),
            row.cov.group_size.to_string(),
            fmt_f64(row.cov.avg_norm_degree),
            fmt_f64(row.cov.overall_clustering),
            row.cov.group_type.clone(),
        ];
        for o in &row.outcomes {
            rec.push(o.overall_cents.to_string());
            rec.push((o.sent as u8).to_string());
            rec.push(o.direct_cents.to_string());
            rec.push(o.indirect_cents.to_string());
            rec.push(fmt_f64(o.other_groups_avg_cents));
            rec.push(o.edges_added.to_string());
        }
        rec.push(row.edges_added_7d.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_panel(path: &Path, windows_s: &[f64]) -> Result<Vec<ObservationRow>> {
    let mut reader = open_reader(path)?;
    let expected = panel_headers(windows_s);
    let got: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if got != expected {
        bail!(
            "panel.csv headers do not match the configured windows \
             (got {} columns, expected {})",
            got.len(),
            expected.len()
        );
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record?;
        let mut outcomes = Vec::with_capacity(windows_s.len());
        let base = 32;
        for wi in 0..windows_s.len() {
            let o = base + wi * 6;
            outcomes.push(WindowOutcome {
                overall_cents: r[o].parse()?,
                sent: &r[o + 1] == "1",
                direct_cents: r[o + 2].parse()?,
                indirect_cents: r[o + 3].parse()?,
                other_groups_avg_cents: r[o + 4].parse()?,
                edges_added: r[o + 5].parse()?,
            });
        }
        rows.push(ObservationRow {
            packet_id: r[0].parse()?,
            group_id: r[1].parse()?,
            user_id: r[2].parse()?,
            cluster_id: r[3].parse()?,
            stratum: StratumKey {
                amount_cents: r[4].parse()?,
                n_received: r[5].parse()?,
                order: r[6].parse()?,
            },
            t_recv: r[7].parse()?,
            treatment: MoneyCents(r[8].parse()?),
            luckiest: &r[9] == "1",
            z_ratio: if r[10].is_empty() { None } else { Some(r[10].parse()?) },
            festival: &r[11] == "1",
            n_other_groups: r[12].parse()?,
            cov: Covariates {
                female: &r[13] == "1",
                age: r[14].parse()?,
                degree: r[15].parse()?,
                fricnt: r[16].parse()?,
                joincnt: r[17].parse()?,
                history_sendamt: r[18].parse()?,
                history_sendcnt: r[19].parse()?,
                history_recvamt: r[20].parse()?,
                history_recvcnt: r[21].parse()?,
                groupamt: r[22].parse()?,
                groupnum: r[23].parse()?,
                wealth: r[24].parse()?,
                clustering: r[25].parse()?,
                norm_degree: r[26].parse()?,
                eigen: r[27].parse()?,
                group_size: r[28].parse()?,
                avg_norm_degree: r[29].parse()?,
                overall_clustering: r[30].parse()?,
                group_type: r[31].to_string(),
            },
            outcomes,
            edges_added_7d: r[expected.len() - 1].parse()?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// report.csv

pub const REPORT_HEADERS: [&str; 8] =
    ["name", "estimate", "se", "ci_lo", "ci_hi", "n_obs", "n_strata", "adj_r2"];

pub struct ReportWriter {
    writer: csv::Writer<std::fs::File>,
}

impl ReportWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = open_writer(path)?;
        writer.write_record(REPORT_HEADERS)?;
        Ok(Self { writer })
    }

    /// One row per coefficient; `label` prefixes the term name, e.g.
    /// `overall_10m:amount_received`.
    pub fn add(&mut self, label: &str, report: &EstimateReport) -> Result<()> {
        for term in &report.terms {
            self.writer.write_record([
                format!("{label}:{}", term.name),
                fmt_f64(term.estimate),
                fmt_f64(term.se),
                fmt_f64(term.ci_lo),
                fmt_f64(term.ci_hi),
                report.n_obs.to_string(),
                report.n_strata.to_string(),
                fmt_f64(report.adj_r2),
            ])?;
        }
        Ok(())
    }

    pub fn add_raw(
        &mut self,
        name: &str,
        estimate: f64,
        se: f64,
        ci: (f64, f64),
        n_obs: usize,
        n_strata: usize,
    ) -> Result<()> {
        self.writer.write_record([
            name.to_string(),
            fmt_f64(estimate),
            fmt_f64(se),
            fmt_f64(ci.0),
            fmt_f64(ci.1),
            n_obs.to_string(),
            n_strata.to_string(),
            String::new(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// randomization_report.csv

pub fn write_randomization_report(path: &Path, checks: &[RandomizationCheck]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record([
        "attribute",
        "stratum_amount_cents",
        "stratum_n",
        "stratum_order",
        "n",
        "slope",
        "p_raw",
        "p_adjusted",
    ])?;
    for check in checks {
        for s in &check.slopes {
            w.write_record([
                check.attribute.to_string(),
                s.stratum.amount_cents.to_string(),
                s.stratum.n_received.to_string(),
                s.stratum.order.to_string(),
                s.n.to_string(),
                fmt_f64(s.slope),
                fmt_f64(s.p_raw),
                fmt_f64(s.p_adjusted),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// matched.csv

pub fn write_matched(
    path: &Path,
    rows: &[ObservationRow],
    matched: &hongbao_core::matcher::MatchResult,
    outcome_values: &BTreeMap<(usize, &'static str), Vec<Option<f64>>>,
    ks: &[usize],
) -> Result<()> {
    let mut w = open_writer(path)?;
    let mut headers = vec![
        "amount_cents".to_string(),
        "n_received".to_string(),
        "order".to_string(),
        "t_cents".to_string(),
        "side".to_string(),
        "user_id".to_string(),
        "packet_id".to_string(),
    ];
    for &k in ks {
        for o in ["overall", "extensive", "intensive"] {
            headers.push(format!("k{k}_{o}"));
        }
    }
    w.write_record(&headers)?;
    for (key, (treated, control)) in &matched.cells {
        for (side, idxs) in [("luckiest", treated), ("control", control)] {
            for &i in idxs {
                let row = &rows[i];
                let mut rec = vec![
                    key.amount_cents.to_string(),
                    key.n_received.to_string(),
                    key.order.to_string(),
                    key.t_cents.to_string(),
                    side.to_string(),
                    row.user_id.to_string(),
                    row.packet_id.to_string(),
                ];
                for &k in ks {
                    for o in ["overall", "extensive", "intensive"] {
                        let vals = &outcome_values[&(k, o)];
                        rec.push(vals[i].map(fmt_f64).unwrap_or_default());
                    }
                }
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generic small tables (plotdata)

pub fn write_table(path: &Path, headers: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(headers)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text fixed-width table mirroring the regression-table layout.
pub fn render_text_table(title: &str, headers: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    let line =
        |cells: &[String], widths: &[usize]| -> String {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:>w$}", w = w))
                .collect::<Vec<_>>()
                .join("  ")
        };
    out.push_str(&line(headers, &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row, &widths));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
