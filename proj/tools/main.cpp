#include "physdyn/cli.hpp"

int main(int argc, char** argv) { return physdyn::cli::dispatch(argc, argv); }
