fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(lscalib::cli::run(std::env::args_os()))
}
