#include "lqseg/cli.hpp"

int main(int argc, char** argv) { return lqseg::cli::run(argc, argv); }
