//! Runs the scenario files under `acceptance/` and prints one line per
//! acceptance criterion. Files are grouped by their `cN-` prefix.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;
use theta_lab::cli::{batch, Entry, Overrides, Status};

const CRITERIA: [(u32, &str, Option<f64>); 9] = [
    (1, "theta identity battery", Some(30.0)),
    (2, "Weierstrass battery", Some(10.0)),
    (3, "CM Lax pair and isospectral flow", Some(60.0)),
    (4, "heat-to-Lax equivalence", Some(60.0)),
    (5, "pole dynamics against the pole-pair condition", Some(120.0)),
    (6, "secant conditions and controls", Some(300.0)),
    (7, "wave recursion", None),
    (8, "KP, 2D Toda, BDHE and Bethe residuals", None),
    (9, "bit-identical reruns", None),
];

const SUITE_SECONDS: f64 = 900.0;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("acceptance")
}

fn criterion_of(e: &Entry) -> Option<u32> {
    let name = e.file.file_name()?.to_str()?;
    name.strip_prefix('c')?.split('-').next()?.parse().ok()
}

fn describe(entries: &[&Entry]) -> String {
    let mut parts = Vec::new();
    for e in entries {
        match &e.result {
            Ok(o) => {
                let failed: Vec<String> = o
                    .report
                    .residuals
                    .iter()
                    .filter(|r| !r.pass)
                    .map(|r| format!("{}={:?}", r.name, r.value))
                    .collect();
                let max = o.report.max_residual().map(|v| format!("{v:.2e}")).unwrap_or_else(|| "-".into());
                if failed.is_empty() {
                    parts.push(format!("{} max {max}", e.label));
                } else {
                    parts.push(format!("{} failed [{}]", e.label, failed.join(", ")));
                }
            }
            Err(m) => parts.push(format!("{} error: {m}", e.label)),
        }
    }
    parts.join("; ")
}

fn reports(entries: &[Entry]) -> Vec<(String, String)> {
    entries
        .iter()
        .map(|e| {
            let body = match &e.result {
                Ok(o) => o.report.to_json(),
                Err(m) => format!("error: {m}"),
            };
            (e.label.clone(), body)
        })
        .collect()
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let first = batch(&dir(), &Overrides::default()).expect("acceptance directory");
    let first_seconds = start.elapsed().as_secs_f64();
    assert!(!first.is_empty());

    let mut groups: BTreeMap<u32, Vec<&Entry>> = BTreeMap::new();
    for e in &first {
        let k = criterion_of(e).unwrap_or_else(|| panic!("{} has no criterion prefix", e.file.display()));
        groups.entry(k).or_default().push(e);
    }

    let mut all_pass = true;
    for (k, title, limit) in CRITERIA.iter().take(8) {
        let members = groups.get(k).cloned().unwrap_or_default();
        let seconds: f64 = members.iter().map(|e| e.seconds()).sum();
        let within = limit.is_none_or(|l| seconds <= l);
        let pass = !members.is_empty() && members.iter().all(|e| e.status() == Status::Pass) && within;
        all_pass &= pass;
        let limit_note = limit.map(|l| format!(" (limit {l:.0} s)")).unwrap_or_default();
        println!(
            "criterion {k}: {}  {title}  {seconds:.2} s{limit_note}  {}",
            if pass { "PASS" } else { "FAIL" },
            describe(&members)
        );
    }

    // Rerun on a two-thread pool: scenario results must not depend on
    // scheduling.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let second = pool.install(|| batch(&dir(), &Overrides::default())).expect("acceptance directory");
    let (a, b) = (reports(&first), reports(&second));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let same = a.len() == b.len() && differing.is_empty();
    all_pass &= same;
    println!(
        "criterion 9: {}  {}  {} reports compared{}",
        if same { "PASS" } else { "FAIL" },
        CRITERIA[8].1,
        a.len(),
        if differing.is_empty() { String::new() } else { format!(", differing: {}", differing.join(", ")) }
    );

    let suite_ok = first_seconds <= SUITE_SECONDS;
    println!("suite: {first_seconds:.1} s for one pass (limit {SUITE_SECONDS:.0} s)");
    assert!(all_pass && suite_ok, "acceptance criteria failed");
}
