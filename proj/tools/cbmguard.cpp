#include "cbm/harness.hpp"

int main(int argc, char** argv) { return cbm::cli_main(argc, argv); }
