fn main() -> std::process::ExitCode {
    annoweave::cli::main()
}
