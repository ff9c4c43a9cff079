use clap::Parser;

fn main() {
    std::process::exit(kinflow::cli::run(kinflow::cli::Cli::parse()));
}
