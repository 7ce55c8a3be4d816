fn main() -> std::process::ExitCode {
    uie::cli::main()
}
