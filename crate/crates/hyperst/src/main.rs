use std::process::ExitCode;

fn main() -> ExitCode {
    hyperst::cli::main_entry()
}
