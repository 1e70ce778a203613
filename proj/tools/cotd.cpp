#include "cotd/cli.hpp"

int main(int argc, char** argv) { return cotd::run_cli(argc, argv); }
