fn main() -> std::process::ExitCode {
    invic::cli::main()
}
