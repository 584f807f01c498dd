//! Binary entry point: parse arguments, run the command, and exit
//! nonzero iff it failed.

fn main() {
    if let Err(err) = exitlab::cli::run_from_args() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
