#include "klm/cli.hpp"

int main(int argc, char** argv) { return klm::run_command(argc, argv); }
