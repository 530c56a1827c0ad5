use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use gradsync::collectives::FUSION_THRESHOLD_ENV;
use gradsync::harness::{build_config, run_experiment, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env = std::env::var(FUSION_THRESHOLD_ENV).ok();
    let cfg = match build_config(&cli.command, env.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("gradsync: config error: {e}");
            return ExitCode::from(2);
        }
    };
    let started = Instant::now();
    let result = run_experiment(&cfg).and_then(|out| out.write(&cfg));
    let wall = started.elapsed();
    match result {
        Ok(stdout) => {
            if let Some(text) = stdout {
                let mut out = std::io::stdout().lock();
                if out.write_all(text.as_bytes()).is_err() {
                    return ExitCode::from(1);
                }
            }
            eprintln!("gradsync: wall clock {:.3} s", wall.as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gradsync: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
