use clap::Parser;

fn main() {
    let cli = tvflow::cli::Cli::parse();
    std::process::exit(tvflow::cli::run(cli));
}
