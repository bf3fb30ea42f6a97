use clap::Parser;

fn main() {
    let cli = vab_cli::Cli::parse();
    if let Err(err) = vab_cli::run(cli) {
        eprintln!("vab: {err}");
        std::process::exit(err.exit_code());
    }
}
