#include "instxai/cli.hpp"

int main(int argc, char** argv) { return instxai::cli::run(argc, argv); }
