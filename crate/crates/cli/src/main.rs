use clap::Parser;

fn main() {
    let cli = mixbnd_cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = mixbnd_cli::run(cli, &mut stdout) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
