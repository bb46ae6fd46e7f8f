use clap::Parser;

fn main() {
    let cli = aseg_cli::Cli::parse();
    if let Err(e) = aseg_cli::run(cli) {
        eprintln!("aseg: {e}");
        std::process::exit(e.code);
    }
}
