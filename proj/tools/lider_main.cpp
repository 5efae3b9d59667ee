#include <string>
#include <vector>

#include "lider/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return lider::cli_main(std::move(args));
}
