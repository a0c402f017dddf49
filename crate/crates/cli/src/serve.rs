use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use optplan_core::protocol::{self, conformance};
use optplan_core::{Scenario, SimTrainer};

/// A built-in scenario name or a path to a scenario file.
pub fn load_scenario(name_or_path: &str) -> Result<Scenario> {
    if let Some(s) = Scenario::builtin(name_or_path) {
        return Ok(s);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        bail!(
            "`{name_or_path}` is neither a built-in scenario ({}) nor a file",
            Scenario::BUILTIN.join(", ")
        );
    }
    Scenario::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Serves one simulator over stdin/stdout, or one per TCP connection.
pub fn simtrainer(scenario: &str, listen: Option<&str>) -> Result<()> {
    let scenario = load_scenario(scenario)?;
    let Some(addr) = listen else {
        let mut sim = SimTrainer::new(scenario);
        let stdin = std::io::stdin();
        protocol::serve(&mut sim, stdin.lock(), std::io::stdout().lock())?;
        return Ok(());
    };
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let scenario = scenario.clone();
        std::thread::spawn(move || {
            let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
            info!("serving {peer}");
            let mut sim = SimTrainer::new(scenario);
            let result = stream
                .try_clone()
                .and_then(|read| protocol::serve(&mut sim, BufReader::new(read), stream));
            if let Err(e) = result {
                warn!("connection {peer}: {e}");
            }
        });
    }
    Ok(())
}

/// Runs the golden transcripts against `command`; true iff every case passed.
pub fn conformance(command: &[String], timeout: Duration) -> Result<bool> {
    let report = conformance::run_command(command, timeout).with_context(|| format!("launching {command:?}"))?;
    print!("{report}");
    let failed = report.cases.iter().filter(|c| !c.passed).count();
    println!("{} of {} cases passed", report.cases.len() - failed, report.cases.len());
    Ok(report.all_passed())
}
