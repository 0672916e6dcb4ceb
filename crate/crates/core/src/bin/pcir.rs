fn main() {
    std::process::exit(predictive_cir::console::main());
}
