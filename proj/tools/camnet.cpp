#include "camnet/cli.hpp"

int main(int argc, char** argv) { return camnet::cli::run(argc, argv); }
