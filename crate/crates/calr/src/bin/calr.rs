fn main() {
    std::process::exit(calr::app::cli_main());
}
