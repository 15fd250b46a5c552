fn main() -> std::process::ExitCode {
    chunkdiff::cli::main()
}
