#include "hydra/cli.hpp"

int main(int argc, char** argv) { return hydra::run_cli(argc, argv); }
