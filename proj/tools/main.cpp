#include "trace_diag/cli.hpp"

int main(int argc, char** argv) { return trace_diag::run_cli(argc, argv); }
