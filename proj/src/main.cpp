#include "openevt/cli.hpp"

int main(int argc, char** argv) { return openevt::cli_main(argc, argv); }
