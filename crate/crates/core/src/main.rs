fn main() -> std::process::ExitCode {
    pandense::cli::main()
}
