mod args;
mod config;
mod error;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use spectral_adapter::io::Manifest;

use args::{Cli, Command};
use error::{CliError, CliResult};
use run::{execute, resolve, Resolved, Run};

const MANIFEST: &str = "manifest.json";

fn run_resolved(resolved: &Resolved, out_dir: PathBuf, seed: u64, tol: Option<f64>) -> CliResult<(Run, Manifest)> {
    let mut run = Run::new(out_dir, tol);
    execute(resolved, &mut run)?;
    let manifest = run.manifest(resolved, seed)?;
    manifest.write(&run.out_dir.join(MANIFEST))?;
    Ok((run, manifest))
}

fn replay(path: &Path, out_dir: Option<PathBuf>) -> CliResult<()> {
    let original = Manifest::read(path)?;
    let resolved: Resolved = serde_json::from_value(original.config.clone())
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let out_dir = out_dir.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("replay"));
    let (run, manifest) = run_resolved(&resolved, out_dir, original.seed, original.tol)?;
    let bad = original.output_mismatches(&manifest);
    if !bad.is_empty() {
        return Err(CliError::Numerical(format!("replay differs in {}", bad.join(", "))));
    }
    println!(
        "replayed {}: {} outputs identical in {}",
        resolved.name(),
        manifest.outputs.len(),
        run.out_dir.display()
    );
    Ok(())
}

fn main_inner(cli: Cli) -> CliResult<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, cli.out_dir);
    }
    let resolved = resolve(&cli.command, cli.seed)?;
    let out_dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("out"));
    let (run, _) = run_resolved(&resolved, out_dir, cli.seed.unwrap_or(0), cli.tol)?;
    print!("{}", run.summary);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
