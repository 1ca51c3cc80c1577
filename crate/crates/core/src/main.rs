use clap::Parser;

fn main() {
    let cli = vcr_joint::cli::Cli::parse();
    if let Err(e) = vcr_joint::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
