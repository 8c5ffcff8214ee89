#include "spwt/cli.hpp"

int main(int argc, char** argv) { return spwt::cli::run(argc, argv); }
