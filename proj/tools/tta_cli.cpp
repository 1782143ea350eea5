#include "tta/harness.hpp"

int main(int argc, char** argv) { return tta::cli_main(argc, argv); }
