fn main() -> std::process::ExitCode {
    entroscope::cli::main()
}
