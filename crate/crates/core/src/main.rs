use clap::Parser;

fn main() {
    let cli = kdlaplace::cli::Cli::parse();
    match kdlaplace::cli::run(cli) {
        Ok(manifest) => println!("{}", manifest.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
