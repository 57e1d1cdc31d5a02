use std::process::ExitCode;

fn main() -> ExitCode {
    loss_tomo::cli::run()
}
