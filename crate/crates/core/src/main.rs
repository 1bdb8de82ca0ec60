fn main() -> std::process::ExitCode {
    classsr::cli::main()
}
