fn main() -> std::process::ExitCode {
    convqa::cli::main()
}
