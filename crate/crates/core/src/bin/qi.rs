use std::process::ExitCode;

fn main() -> ExitCode {
    if let Some(n) = std::env::var("QI_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: QI_THREADS ignored: {e}");
        }
    }
    let code = quickest_intervention::cli::main_with_args(std::env::args_os());
    ExitCode::from(code as u8)
}
