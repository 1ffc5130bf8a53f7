use std::process::ExitCode;

use reverbswap::cli::{main_with_args, RunLog};

fn main() -> ExitCode {
    ExitCode::from(main_with_args(std::env::args_os(), &mut RunLog::stderr()))
}
