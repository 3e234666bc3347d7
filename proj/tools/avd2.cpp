#include <string>
#include <vector>

#include "avd2/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return avd2::cli::run(std::move(args));
}
