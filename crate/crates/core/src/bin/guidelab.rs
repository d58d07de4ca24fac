fn main() -> std::process::ExitCode {
    guidelab::cli::main()
}
