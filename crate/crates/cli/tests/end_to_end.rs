use std::io::Write;
use std::process::{Command, Output};

use commsynth::model::ConvProblem;
use commsynth::optimizer::PermutationScope;
use conv_commsynth::RunConfig;
use proptest::prelude::*;

const PROBLEM_A: &str = "Nb = 2\nNk = 8\nNc = 8\nNh = 8\nNw = 8\nNr = 3\nNs = 3\nP = 4\nM = 256\nMD = 4096\n";

fn run(config: &str, args: &[&str]) -> Output {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    file.write_all(config.as_bytes()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_conv-commsynth"))
        .args(args)
        .arg("--config")
        .arg(file.path())
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn line<'a>(text: &'a str, prefix: &str) -> &'a str {
    text.lines().find(|l| l.starts_with(prefix)).unwrap_or_else(|| panic!("no {prefix:?} line in\n{text}"))
}

#[test]
fn plan_names_the_fired_row() {
    let out = run(PROBLEM_A, &["plan"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("conv-commsynth-report v1"));
    let cf = line(&text, "closed_form ");
    assert!(cf.contains("row=c-innermost.row1") && cf.contains("case=Case1a"), "{cf}");
    assert!(line(&text, "integer ").contains("cost=1792"));
    assert!(line(&text, "layout ").contains("p_b=2 p_k=2 p_c=1 p_h=1 p_w=1"));
}

#[test]
fn verify_matches_oracle() {
    let out = run(PROBLEM_A, &["verify"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(line(&text, "oracle ").ends_with("cost=1792"));
    assert_eq!(line(&text, "excess "), "excess integer_over_oracle=0.0000");
}

#[test]
fn simulate_passes_every_identity() {
    let out = run(PROBLEM_A, &["simulate", "--seed", "7"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("processor ")).count(), 4);
    assert!(line(&text, "measured ").contains("seed=7"));
    assert!(text.contains("check name=functional result=PASS"));
    assert!(!text.contains("FAIL"));
    assert_eq!(text.lines().last(), Some("status ok"));
}

#[test]
fn simulate_below_bound_fails() {
    let config = PROBLEM_A.replace("MD = 4096", "MD = 895");
    let out = run(&config, &["simulate"]);
    assert!(!out.status.success());
}

#[test]
fn simulate_without_md_is_an_error() {
    let config = PROBLEM_A.replace("MD = 4096\n", "");
    let out = run(&config, &["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MD"));
}

#[test]
fn bad_config_reports_line() {
    let out = run(&format!("{PROBLEM_A}Nx = 1\n"), &["plan"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 11"));
}

#[test]
fn strict_adds_printed_variants() {
    let out = run(PROBLEM_A, &["plan", "--strict"]);
    assert!(line(&stdout(&out), "strict ").contains("cost_global_printed="));
}

#[test]
fn sweep_keeps_value_order() {
    let config = "Nb=1\nNk=16\nNc=64\nNh=16\nNw=16\nNr=3\nNs=3\nP=4\nM=64\n";
    let values = [8192u64, 64, 1024, 256];
    let list = values.map(|v| v.to_string()).join(",");
    let out = run(config, &["sweep", "--axis", "M", "--values", &list, "--format", "csv"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    let rows: Vec<_> = text.lines().filter(|l| l.starts_with("sweep,")).collect();
    assert_eq!(rows.len(), values.len());
    for (row, v) in rows.iter().zip(values) {
        assert_eq!(row.split(',').nth(3), Some(v.to_string().as_str()));
        assert!(row.ends_with(",ok"), "{row}");
    }
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        prop::array::uniform9(1u64..20),
        1u64..64,
        1u64..100_000,
        prop::option::of(0u64..100_000),
        any::<(bool, bool, bool)>(),
        (1u64..16, any::<u64>(), 1u64..1 << 40),
    )
        .prop_map(|(e, p, m, extra, (all, strict, lower_bound), (element_width, seed, oracle_max_points))| {
            RunConfig {
                problem: ConvProblem::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]).unwrap(),
                p,
                m,
                m_d: extra.map(|x| m + x),
                scope: if all { PermutationScope::All } else { PermutationScope::CInnermost },
                strict,
                lower_bound,
                element_width,
                seed,
                oracle_max_points,
            }
        })
}

proptest! {
    #[test]
    fn render_round_trips(cfg in arb_config()) {
        // Capacity checks may reject the random config; parsing must then
        // fail the same way on the rendered text.
        match cfg.validate() {
            Ok(()) => prop_assert_eq!(RunConfig::parse(&cfg.render()), Ok(cfg)),
            Err(e) => prop_assert_eq!(RunConfig::parse(&cfg.render()), Err(e)),
        }
    }
}
