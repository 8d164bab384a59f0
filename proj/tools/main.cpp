#include "controlvae/cli.hpp"

int main(int argc, char** argv) { return controlvae::cli_main(argc, argv); }
