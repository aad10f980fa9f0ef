#include "ndftm/cli.hpp"

int main(int argc, char** argv) { return ndftm::run_cli(argc, argv); }
