fn main() {
    eprintln!("prosim command-line interface is assembled in pipeline.rs");
    std::process::exit(2);
}
