use clap::Parser;
use ddp_cli::{exit, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            std::process::exit(exit::OK);
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            println!("{}", serde_json::json!({ "error": e.to_string(), "exit_code": code }));
            std::process::exit(code);
        }
    }
}
