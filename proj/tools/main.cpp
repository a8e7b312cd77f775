#include "xr2vol/cli.hpp"

int main(int argc, char** argv) { return xr2vol::run_cli(argc, argv); }
