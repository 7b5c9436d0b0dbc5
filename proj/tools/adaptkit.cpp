// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "adaptkit/cli.hpp"

int main(int argc, char** argv) { return adaptkit::cli::run_cli(argc, argv, std::cout, std::cerr); }
