#include "shygamp/cli.hpp"

int main(int argc, char** argv) { return shygamp::cli_main(argc, argv); }
