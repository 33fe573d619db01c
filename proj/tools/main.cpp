#include "rhtd/cli.hpp"

int main(int argc, char** argv) { return rhtd::run_cli(argc, argv); }
