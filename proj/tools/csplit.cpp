#include <vector>

#include "conceptsplit/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return csplit::run_cli(args);
}
