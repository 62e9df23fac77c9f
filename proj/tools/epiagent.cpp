#include "epiagent/cli.hpp"

int main(int argc, char** argv) { return epiagent::cli::run(argc, argv); }
