fn main() -> std::process::ExitCode {
    egonn::cli::main()
}
