fn main() { std::process::exit(flowsplat::cli::main()); }
