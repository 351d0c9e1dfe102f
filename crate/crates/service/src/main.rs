use clap::Parser;

fn main() -> std::process::ExitCode {
    csmt_service::cli::main_with(csmt_service::cli::Cli::parse())
}
