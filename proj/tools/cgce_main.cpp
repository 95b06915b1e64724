#include <iostream>
#include <string>
#include <vector>

#include "cgce/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return cgce::cli::run(args, std::cout, std::cerr);
}
