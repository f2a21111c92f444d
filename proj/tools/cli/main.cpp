#include "ignitrace/cli.hpp"

int main(int argc, char** argv) { return ignitrace::cli::run(argc, argv); }
