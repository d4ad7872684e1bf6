fn main() -> std::process::ExitCode {
    locattn::cli::main()
}
