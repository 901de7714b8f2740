#include "featmine/cli.hpp"

int main(int argc, char** argv) { return featmine::run_cli(argc, argv); }
