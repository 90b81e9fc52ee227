#include "repprobe/cli.hpp"

int main(int argc, char** argv) { return repprobe::cli::dispatch(argc, argv); }
