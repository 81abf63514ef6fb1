#include "arthro/cli.hpp"

int main(int argc, char** argv) { return arthro::cli::run(argc, argv); }
