use clap::Parser;
use mdg::cli::{run, Cli};
use mdg::MdgError;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                MdgError::Usage(_) => 2,
                MdgError::Data(_) | MdgError::Io(_) => 3,
                MdgError::Numeric(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
