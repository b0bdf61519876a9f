//! Subcommand implementations. Each returns a [`Report`]; `main` renders it
//! and maps `Report::ok` to the exit status.

use std::collections::HashSet;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use commsynth::model::{cost_global_printed, PartitionPlan};
use commsynth::optimizer::{
    brute_force_oracle, effective_capacity, printed_case1_partition, solve_closed_form, CapacityMode,
    OracleLimits,
};
use commsynth::pipeline::{plan, PlanOptions, PlanOutcome};
use commsynth::sim::{verify_identities, SimMode};
use rayon::prelude::*;

use crate::config::{scope_name, RunConfig};

pub const REPORT_HEADER: &str = "conv-commsynth-report v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Csv,
}

#[derive(Clone, Debug, PartialEq)]
struct Row {
    section: &'static str,
    fields: Vec<(&'static str, String)>,
}

/// Ordered report rows. Rows of one section always carry the same keys in
/// the same order, so both renderings are column-stable.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Report {
    rows: Vec<Row>,
    pub ok: bool,
}

impl Report {
    fn new() -> Self {
        Report { rows: Vec::new(), ok: true }
    }

    fn push(&mut self, section: &'static str, fields: Vec<(&'static str, String)>) {
        self.rows.push(Row { section, fields });
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.ok &= passed;
        self.push(
            "check",
            vec![("name", name.to_string()), ("result", pass_fail(passed).into()), ("detail", detail)],
        );
    }

    fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
        self.ok &= other.ok;
    }

    /// Value of `key` in the first row of `section`.
    pub fn value(&self, section: &str, key: &str) -> Option<&str> {
        self.rows
            .iter()
            .filter(|r| r.section == section)
            .find_map(|r| r.fields.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str()))
    }

    pub fn render(&self, format: Format) -> String {
        let mut s = String::new();
        match format {
            Format::Text => {
                writeln!(s, "{REPORT_HEADER}").unwrap();
                for row in &self.rows {
                    s.push_str(row.section);
                    for (k, v) in &row.fields {
                        write!(s, " {k}={}", v.replace(' ', "_")).unwrap();
                    }
                    s.push('\n');
                }
                writeln!(s, "status {}", if self.ok { "ok" } else { "failed" }).unwrap();
            }
            Format::Csv => {
                writeln!(s, "# {REPORT_HEADER}").unwrap();
                let mut seen = HashSet::new();
                for row in &self.rows {
                    if seen.insert(row.section) {
                        let keys: Vec<_> = row.fields.iter().map(|(k, _)| *k).collect();
                        writeln!(s, "section,{}", keys.join(",")).unwrap();
                    }
                    let values: Vec<_> = row.fields.iter().map(|(_, v)| csv_field(v)).collect();
                    writeln!(s, "{},{}", row.section, values.join(",")).unwrap();
                }
                writeln!(s, "status,{}", if self.ok { "ok" } else { "failed" }).unwrap();
            }
        }
        s
    }
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

fn pass_fail(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn f(x: f64) -> String {
    format!("{x:.4}")
}

fn partition_fields(pp: &PartitionPlan) -> Vec<(&'static str, String)> {
    let t = &pp.tile;
    vec![
        ("w_b", pp.w_b.to_string()),
        ("w_k", pp.w_k.to_string()),
        ("w_c", pp.w_c.to_string()),
        ("w_h", pp.w_h.to_string()),
        ("w_w", pp.w_w.to_string()),
        ("t_b", t.t_b.to_string()),
        ("t_k", t.t_k.to_string()),
        ("t_c", t.t_c.to_string()),
        ("t_h", t.t_h.to_string()),
        ("t_w", t.t_w.to_string()),
    ]
}

fn options(cfg: &RunConfig) -> PlanOptions {
    PlanOptions { scope: cfg.scope, capacity: cfg.capacity_mode() }
}

fn outcome_rows(cfg: &RunConfig, out: &PlanOutcome) -> Result<Report> {
    let mut r = Report::new();
    let p = &cfg.problem;
    r.push(
        "problem",
        vec![
            ("Nb", p.n_b.to_string()),
            ("Nk", p.n_k.to_string()),
            ("Nc", p.n_c.to_string()),
            ("Nh", p.n_h.to_string()),
            ("Nw", p.n_w.to_string()),
            ("Nr", p.n_r.to_string()),
            ("Ns", p.n_s.to_string()),
            ("sigma_w", p.sigma_w.to_string()),
            ("sigma_h", p.sigma_h.to_string()),
        ],
    );
    r.push(
        "machine",
        vec![
            ("P", cfg.p.to_string()),
            ("M", cfg.m.to_string()),
            ("MD", cfg.m_d.map_or("unbounded".into(), |v| v.to_string())),
            ("m_l", f(out.m_l)),
            ("capacity", if cfg.lower_bound { "lower-bound" } else { "effective" }.into()),
        ],
    );
    let s = &out.solution;
    r.push(
        "closed_form",
        vec![
            ("scope", scope_name(s.scope).into()),
            ("row", s.table_row.to_string()),
            ("case", s.case_label.to_string()),
            ("t_k", f(s.t_k)),
            ("t_bhw", f(s.t_bhw)),
            ("w_k", f(s.w_k)),
            ("w_bhw", f(s.w_bhw)),
            ("w_c", f(s.w_c)),
            ("predicted", f(s.predicted_cost)),
            ("realized", f(s.realized_cost)),
            ("cheaper_permutation", s.cheaper_permutation_exists().to_string()),
        ],
    );
    let mut fields = partition_fields(&out.integer.plan);
    let c = out.integer.achieved_cost;
    fields.extend([
        ("out", c.out_term.to_string()),
        ("ker", c.ker_term.to_string()),
        ("in", c.in_term.to_string()),
        ("cost", c.total.to_string()),
        ("gap", f(out.integer.gap_vs_closed_form)),
    ]);
    r.push("integer", fields);
    let l = &out.layout;
    let g = l.grid;
    let mut fields = vec![
        ("p_b", g.p_b.to_string()),
        ("p_k", g.p_k.to_string()),
        ("p_c", g.p_c.to_string()),
        ("p_h", g.p_h.to_string()),
        ("p_w", g.p_w.to_string()),
        ("adjusted", l.adjusted.to_string()),
        ("cost_delta", l.cost_delta.to_string()),
    ];
    fields.extend(partition_fields(&l.plan));
    r.push("layout", fields);
    let sch = &out.schedule;
    r.push(
        "schedule",
        vec![
            ("steps", sch.steps.to_string()),
            ("tiles_per_step", sch.tiles_per_step.to_string()),
            ("transfers", sch.transfers.len().to_string()),
            ("remote_transfers", sch.remote_transfers().to_string()),
        ],
    );
    let d = &out.distributed;
    r.push(
        "distributed",
        vec![
            ("cost_i", d.cost_i.to_string()),
            ("cost_c", d.cost_c.to_string()),
            ("cost_d", d.cost_d.to_string()),
            ("bytes_d", (d.cost_d * cfg.element_width).to_string()),
            ("memory_bound", out.memory_bound.to_string()),
        ],
    );
    if let Some(md) = cfg.m_d {
        r.check("memory-bound-fits", out.memory_bound <= md, format!("{} <= {md}", out.memory_bound));
    }
    if cfg.strict {
        let printed = cost_global_printed(&l.plan, p, &out.machine)?;
        let (t_k, t_bhw) = printed_case1_partition(p);
        r.push(
            "strict",
            vec![
                ("cost_global_printed", printed.total.to_string()),
                ("printed_case1_t_k", f(t_k)),
                ("printed_case1_t_bhw", f(t_bhw)),
            ],
        );
    }
    Ok(r)
}

pub fn cmd_plan(cfg: &RunConfig) -> Result<Report> {
    let out = plan(&cfg.problem, &cfg.machine(), options(cfg)).context("planning failed")?;
    outcome_rows(cfg, &out)
}

/// Closed form and integer plan against the exhaustive oracle.
pub fn cmd_verify(cfg: &RunConfig) -> Result<Report> {
    let machine = cfg.machine();
    let out = plan(&cfg.problem, &machine, options(cfg)).context("planning failed")?;
    let mut r = outcome_rows(cfg, &out)?;
    let limits = OracleLimits { max_points: cfg.oracle_max_points };
    let oracle = brute_force_oracle(&cfg.problem, &machine, limits).context("oracle failed")?;
    let mut fields = partition_fields(&oracle.plan);
    fields.push(("cost", oracle.achieved_cost.total.to_string()));
    r.push("oracle", fields);

    let m_bound = effective_capacity(cfg.m, &cfg.problem, CapacityMode::LowerBound)?;
    let bound = solve_closed_form(&cfg.problem, cfg.p, m_bound, cfg.scope)?.predicted_cost;
    let best = oracle.achieved_cost.total as f64;
    r.check("lower-bound", bound <= best + 1.0, format!("{} <= {} + 1", f(bound), best));
    let integer = out.integer.achieved_cost.total as f64;
    r.check("oracle-optimal", best <= integer, format!("{best} <= {integer}"));
    r.push("excess", vec![("integer_over_oracle", f(integer / best - 1.0))]);
    Ok(r)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Report> {
    if cfg.m_d.is_none() {
        bail!("simulation needs MD in the config");
    }
    let out = plan(&cfg.problem, &cfg.machine(), options(cfg)).context("planning failed")?;
    let mut r = outcome_rows(cfg, &out)?;
    let report = out.simulate(cfg.seed, SimMode::FullCompute).context("simulation failed")?;
    for (rank, s) in report.processors.iter().enumerate() {
        r.push(
            "processor",
            vec![
                ("rank", rank.to_string()),
                ("coord", s.coord.to_string()),
                ("initial", s.initial_footprint.to_string()),
                ("received_in", s.received_in.to_string()),
                ("received_ker", s.received_ker.to_string()),
                ("peak", s.peak_memory.to_string()),
                ("reduction", s.reduction_volume.to_string()),
            ],
        );
    }
    r.push(
        "measured",
        vec![
            ("seed", cfg.seed.to_string()),
            ("steps", report.steps.to_string()),
            ("cost_i", report.cost_i.to_string()),
            ("cost_c", report.cost_c.to_string()),
            ("cost_d", report.cost_d.to_string()),
            ("peak_memory", report.peak_memory.to_string()),
        ],
    );
    for c in verify_identities(&report, &cfg.problem, &out.machine, &out.layout.plan)? {
        r.check(c.name, c.passed, format!("{} vs {}", c.lhs, c.rhs));
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    #[value(name = "M")]
    M,
    #[value(name = "P")]
    P,
}

/// One plan per value of `axis`; rows keep the order of `values`.
pub fn cmd_sweep(cfg: &RunConfig, axis: Axis, values: &[u64]) -> Result<Report> {
    let rows: Vec<Report> = values
        .par_iter()
        .map(|&v| {
            let mut c = cfg.clone();
            match axis {
                Axis::M => c.m = v,
                Axis::P => c.p = v,
            }
            sweep_row(&c, v)
        })
        .collect();
    let mut r = Report::new();
    for row in rows {
        r.extend(row);
    }
    Ok(r)
}

fn sweep_row(cfg: &RunConfig, value: u64) -> Report {
    let mut r = Report::new();
    let result = cfg
        .validate()
        .map_err(anyhow::Error::from)
        .and_then(|_| Ok(plan(&cfg.problem, &cfg.machine(), options(cfg))?));
    let (status, fields) = match result {
        Ok(out) => {
            let pp = &out.layout.plan;
            let g = out.layout.grid;
            (
                "ok".to_string(),
                [
                    out.solution.table_row.to_string(),
                    out.solution.case_label.to_string(),
                    format!("{}x{}x{}x{}x{}", pp.w_b, pp.w_k, pp.w_c, pp.w_h, pp.w_w),
                    format!("{}x{}x{}x{}x{}", g.p_b, g.p_k, g.p_c, g.p_h, g.p_w),
                    f(out.solution.predicted_cost),
                    out.integer.achieved_cost.total.to_string(),
                    out.distributed.cost_d.to_string(),
                ],
            )
        }
        // Infeasible points are part of the sweep, not a failure.
        Err(e) => {
            let dash = || "-".to_string();
            (format!("error: {e:#}"), [dash(), dash(), dash(), dash(), dash(), dash(), dash()])
        }
    };
    let [row, case, partition, grid, predicted, cost, cost_d] = fields;
    r.push(
        "sweep",
        vec![
            ("P", cfg.p.to_string()),
            ("M", cfg.m.to_string()),
            ("value", value.to_string()),
            ("row", row),
            ("case", case),
            ("partition", partition),
            ("grid", grid),
            ("predicted", predicted),
            ("cost", cost),
            ("cost_d", cost_d),
            ("status", status),
        ],
    );
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_headers_once_per_section() {
        let mut r = Report::new();
        r.push("a", vec![("x", "1".into())]);
        r.push("a", vec![("x", "2,3".into())]);
        let csv = r.render(Format::Csv);
        assert_eq!(csv, "# conv-commsynth-report v1\nsection,x\na,1\na,\"2,3\"\nstatus,ok\n");
    }

    #[test]
    fn text_escapes_spaces() {
        let mut r = Report::new();
        r.check("c", false, "1 vs 2".into());
        assert!(!r.ok);
        assert_eq!(r.render(Format::Text).lines().nth(1), Some("check name=c result=FAIL detail=1_vs_2"));
    }
}
