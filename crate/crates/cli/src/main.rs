use clap::Parser;

fn main() -> std::process::ExitCode {
    scorelab_cli::main_with(scorelab_cli::Cli::parse())
}
