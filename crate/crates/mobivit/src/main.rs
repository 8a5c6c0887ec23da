fn main() {
    let status = mobivit::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(status.code());
}
