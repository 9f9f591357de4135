#include "heapr/cli.hpp"

int main(int argc, char** argv) { return heapr::cli_main(argc, argv); }
