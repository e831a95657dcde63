#include "lwnet/cli.hpp"

int main(int argc, char** argv) { return lwnet::cli::dispatch(argc, argv); }
