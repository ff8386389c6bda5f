fn main() -> std::process::ExitCode {
    xmodal::cli::run()
}
