fn main() { seqnr::cli::run(); }
