mod commands;
mod config;
mod error;
mod io;

use clap::{Arg, ArgAction, ArgMatches, Command};

use commands::*;
use config::Settings;
use error::CliError;

const BOOLEAN_KEYS: &[&str] = &["isotropic", "separable", "centering"];

fn key_arg(key: &'static str) -> Arg {
    let arg = Arg::new(key).long(key).action(ArgAction::Set);
    if BOOLEAN_KEYS.contains(&key) {
        arg.num_args(0..=1).default_missing_value("true").value_name("BOOL")
    } else {
        arg.value_name("VALUE")
    }
}

fn keys_for(cmd: &str) -> Vec<&'static str> {
    let (own, with_fit): (&[&str], bool) = match cmd {
        "simulate" => (SIMULATE_KEYS, false),
        "fit" => (FIT_ONLY_KEYS, true),
        "reconstruct" => (RECONSTRUCT_KEYS, false),
        "test" => (TEST_KEYS, true),
        "cv" => (CV_KEYS, true),
        "table" => (TABLE_KEYS, true),
        _ => (&[], false),
    };
    let mut keys: Vec<&str> = own.to_vec();
    if with_fit {
        keys.extend(FIT_KEYS.iter().filter(|k| !own.contains(k)));
    }
    keys
}

fn cli() -> Command {
    let about = [
        ("simulate", "Simulate a scenario: observations CSV and optional truth CSV"),
        ("fit", "Fit the spatial functional model to an observations CSV"),
        ("reconstruct", "Reconstruct curves from a model and observations, with optional intervals"),
        ("test", "Bootstrap separability or isotropy test"),
        ("cv", "Cross-validated reconstruction error profile over K"),
        ("table", "Replicated simulation study tables"),
    ];
    let mut root = Command::new("space-fda")
        .about("Spatially correlated functional data analysis")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("config").long("config").global(true).value_name("FILE").help("INI file with a section per command"))
        .arg(
            Arg::new("threads")
                .long("threads")
                .global(true)
                .value_name("N")
                .help("Worker threads (default: SPACE_FDA_THREADS, else all cores)"),
        );
    for (name, text) in about {
        let sub = Command::new(name).about(text).args(keys_for(name).into_iter().map(key_arg));
        root = root.subcommand(sub);
    }
    root
}

fn threads(m: &ArgMatches) -> Result<Option<usize>, CliError> {
    let raw = m.get_one::<String>("threads").cloned().or_else(|| std::env::var("SPACE_FDA_THREADS").ok());
    match raw {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("invalid thread count '{v}'"))),
        },
    }
}

fn run(m: &ArgMatches) -> Result<(), CliError> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    if let Some(n) = threads(sub)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    }
    let settings = Settings::resolve(name, &keys_for(name), sub)?;
    match name {
        "simulate" => simulate_cmd(&settings),
        "fit" => fit_cmd(&settings),
        "reconstruct" => reconstruct_cmd(&settings),
        "test" => test_cmd(&settings),
        "cv" => cv_cmd(&settings),
        "table" => table_cmd(&settings),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = run(&matches) {
        eprintln!("space-fda: {e}");
        std::process::exit(e.exit_code());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn every_command_accepts_shared_fit_keys() {
        for cmd in ["fit", "test", "cv", "table"] {
            let keys = keys_for(cmd);
            assert!(FIT_KEYS.iter().all(|k| keys.contains(k)), "{cmd}");
        }
    }
}
