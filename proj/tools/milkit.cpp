#include <string>
#include <vector>

#include "milkit/cli.hpp"

int main(int argc, char** argv) { return milkit::cli::run(std::vector<std::string>(argv + 1, argv + argc)); }
