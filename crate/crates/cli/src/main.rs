use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let out = rmi_cli::run(std::env::args_os());
    let stdout_ok = std::io::stdout().lock().write_all(out.stdout.as_bytes()).is_ok();
    // stderr is best effort
    let _ = std::io::stderr().lock().write_all(out.stderr.as_bytes());
    if !stdout_ok {
        return ExitCode::from(rmi_cli::EXIT_USAGE);
    }
    ExitCode::from(out.code)
}
