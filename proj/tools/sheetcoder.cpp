#include <iostream>

#include "sheetcoder/cli.hpp"

int main(int argc, char** argv) {
    return sheetcoder::cli_main(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
