use clap::Parser;

fn main() {
    std::process::exit(recal_cli::run(recal_cli::Cli::parse()));
}
