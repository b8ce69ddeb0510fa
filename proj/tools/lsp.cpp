#include "lsp/cli.hpp"

int main(int argc, char** argv) { return lsp::cli::run_main(argc, argv); }
