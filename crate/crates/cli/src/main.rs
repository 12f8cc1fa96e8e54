use clap::error::ErrorKind;
use clap::Parser;
use p2i_cli::cli::{run, Cli};
use p2i_cli::{CliError, EXIT_USAGE};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return;
        }
        Err(e) => {
            let _ = e.print();
            let line = CliError::Usage(e.kind().to_string()).report_line();
            eprintln!("{line}");
            std::process::exit(EXIT_USAGE);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.report_line());
        std::process::exit(e.exit_code());
    }
}
