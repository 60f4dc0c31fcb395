fn main() -> std::process::ExitCode {
    tensor_msm::cli::main_with_args(std::env::args_os())
}
