use clap::Parser;

fn main() {
    let cli = pflab::cli::Cli::parse();
    std::process::exit(pflab::cli::run(cli));
}
