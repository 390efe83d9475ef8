use clap::Parser;

use wsdet_core::cli::{init_thread_pool, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_thread_pool().and_then(|()| run(&cli)) {
        eprintln!("wsdet: {e}");
        std::process::exit(1);
    }
}
