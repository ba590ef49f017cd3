use clap::Parser;

fn main() {
    let cli = fhsim::cli::Cli::parse();
    if let Err(e) = fhsim::cli::main_with(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
