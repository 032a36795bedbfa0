use clap::Parser;

fn main() {
    let cli = ganbank_cli::Cli::parse();
    match ganbank_cli::run(cli) {
        Ok(path) => println!("{}", path.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
