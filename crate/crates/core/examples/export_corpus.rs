//! Writes the built-in scenarios as JSON documents into a directory
//! (default `scenarios`).

use std::fs;
use std::path::PathBuf;

use rtcluster::sim::corpus;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "scenarios".into()),
    );
    fs::create_dir_all(&dir)?;
    let (guaranteed, overbooked) = corpus::overbooking_pair();
    let scenarios = [
        ("escalation", corpus::escalation()),
        ("failure", corpus::failure_recovery()),
        ("request-change", corpus::request_change(true)),
        ("request-denied", corpus::request_change(false)),
        ("overbooking-off", guaranteed),
        ("overbooking-on", overbooked),
        ("random-7", corpus::random_overload(7)),
    ];
    for (name, scenario) in scenarios {
        let text =
            serde_json::to_string_pretty(&scenario.to_document()).expect("documents serialize");
        fs::write(dir.join(format!("{name}.json")), text + "\n")?;
    }
    Ok(())
}
